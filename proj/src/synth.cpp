#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "cvos/dataio.hpp"

namespace cvos {

namespace {

// Extent of an object measured from its center, used for wall bounces.
double half_extent(const SynthObject& o) {
    if (o.shape == ShapeKind::Bar) return std::hypot(o.size / 2.0, o.thickness / 2.0);
    return o.size / 2.0;
}

double circumradius(const SynthObject& o) {
    return o.shape == ShapeKind::Square ? o.size / std::numbers::sqrt2 : half_extent(o);
}

struct Bounds {
    double x_lo, x_hi, y_lo, y_hi;
};

void reflect(double& pos, double& vel, double lo, double hi) {
    if (hi <= lo) {
        pos = (lo + hi) / 2.0;
        vel = 0.0;
        return;
    }
    for (int guard = 0; guard < 8 && (pos < lo || pos > hi); ++guard) {
        if (pos < lo) {
            pos = 2.0 * lo - pos;
            vel = -vel;
        } else if (pos > hi) {
            pos = 2.0 * hi - pos;
            vel = -vel;
        }
    }
    pos = std::clamp(pos, lo, hi);
}

std::array<double, 3> random_color(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(40.0, 235.0);
    return {d(rng), d(rng), d(rng)};
}

double color_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double m = 0.0;
    for (int c = 0; c < 3; ++c) m = std::max(m, std::abs(a[c] - b[c]));
    return m;
}

}  // namespace

const char* shape_name(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::Square: return "square";
        case ShapeKind::Disc: return "disc";
        case ShapeKind::Bar: return "bar";
    }
    return "?";
}

ShapeKind parse_shape(const std::string& name) {
    if (name == "square") return ShapeKind::Square;
    if (name == "disc") return ShapeKind::Disc;
    if (name == "bar") return ShapeKind::Bar;
    throw std::invalid_argument("unknown shape '" + name + "' (expected square, disc or bar)");
}

void SynthSpec::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("SynthSpec: " + what); };
    if (length < 2) fail("length must be >= 2");
    if (targets < 1) fail("at least one target object is required");
    if (targets + distractors > 255) fail("at most 255 objects");
    if (shapes.empty()) fail("no shape types enabled");
    if (!(min_size >= 3.0) || !(max_size >= min_size)) fail("sizes must satisfy 3 <= min_size <= max_size");
    const double canvas = static_cast<double>(std::min(height, width));
    if (1.05 * max_size + 2.0 > canvas) fail("objects do not fit the canvas (max_size + 2 > min(height, width))");
    const double object_area = max_size * max_size * static_cast<double>(targets + distractors);
    if (object_area > 0.5 * static_cast<double>(height * width)) {
        fail("objects plus distractors cover more than half the canvas");
    }
    if (!allow_occlusion && 1.05 * max_size + 2.0 > static_cast<double>(height) / static_cast<double>(targets)) {
        fail("non-occluding lanes too narrow: height / targets must be >= 1.05 * max_size + 2");
    }
    if (!(min_speed >= 0.0) || !(max_speed >= min_speed)) fail("speeds must satisfy 0 <= min_speed <= max_speed");
    if (max_speed > canvas - max_size) fail("max_speed exceeds the free travel range of the canvas");
    if (!(color_noise >= 0.0) || color_noise > 60.0) fail("color_noise must lie in [0, 60]");
}

bool covers(const SynthObject& o, std::size_t t, double px, double py) {
    const double dx = px - o.cx[t];
    const double dy = py - o.cy[t];
    const double h = o.size / 2.0;
    switch (o.shape) {
        case ShapeKind::Square:
            return dx >= -h && dx < h && dy >= -h && dy < h;
        case ShapeKind::Disc:
            return dx * dx + dy * dy <= h * h;
        case ShapeKind::Bar: {
            const double a = o.angle + o.spin * static_cast<double>(t);
            const double u = dx * std::cos(a) + dy * std::sin(a);
            const double v = -dx * std::sin(a) + dy * std::cos(a);
            return std::abs(u) <= h && std::abs(v) <= o.thickness / 2.0;
        }
    }
    return false;
}

SynthResult generate_synthetic_detailed(const SynthSpec& spec, const std::string& name) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double W = static_cast<double>(spec.width), H = static_cast<double>(spec.height);

    std::array<double, 3> background{};
    for (auto& c : background) c = 10.0 + 50.0 * unit(rng);

    const std::size_t total = spec.targets + spec.distractors;
    std::vector<SynthObject> objects(total);
    for (std::size_t i = 0; i < total; ++i) {
        auto& o = objects[i];
        o.distractor = i >= spec.targets;
        o.template_target = o.distractor ? (i - spec.targets) % spec.targets : i;
        if (o.distractor && spec.similar_distractors) {
            const auto& tpl = objects[o.template_target];
            o.shape = tpl.shape;
            o.size = tpl.size;
            o.angle = tpl.angle + std::numbers::pi / 2.0 * unit(rng);
            std::uniform_real_distribution<double> jitter(-spec.color_noise / 2.0, spec.color_noise / 2.0);
            for (int c = 0; c < 3; ++c) o.color[c] = std::clamp(tpl.color[c] + jitter(rng), 0.0, 255.0);
        } else {
            o.shape = spec.shapes[static_cast<std::size_t>(unit(rng) * spec.shapes.size()) % spec.shapes.size()];
            o.size = spec.min_size + (spec.max_size - spec.min_size) * unit(rng);
            o.angle = std::numbers::pi * unit(rng);
            // keep colors apart from the background and from earlier targets
            for (int attempt = 0; attempt < 64; ++attempt) {
                o.color = random_color(rng);
                bool ok = color_distance(o.color, background) > 4.0 * spec.color_noise + 20.0;
                for (std::size_t j = 0; j < i && ok && !o.distractor; ++j) {
                    ok = color_distance(o.color, objects[j].color) > 2.0 * spec.color_noise + 20.0;
                }
                if (ok) break;
            }
        }
        o.thickness = std::max(3.0, 0.3 * o.size);
        if (o.shape == ShapeKind::Bar) o.spin = 0.08 * (unit(rng) - 0.5);
    }

    auto bounds_of = [&](const SynthObject& o, std::size_t index) {
        const double r = half_extent(o);
        Bounds b{r, W - r, r, H - r};
        if (!spec.allow_occlusion && !o.distractor) {
            const double lane = H / static_cast<double>(spec.targets);
            b.y_lo = lane * static_cast<double>(index) + r;
            b.y_hi = lane * static_cast<double>(index + 1) - r;
        }
        return b;
    };

    // initial placement; targets never overlap anything at frame 1
    std::vector<double> vx(total), vy(total);
    for (std::size_t i = 0; i < total; ++i) {
        auto& o = objects[i];
        const Bounds b = bounds_of(o, i);
        double x = 0, y = 0;
        for (int attempt = 0; attempt < 256; ++attempt) {
            x = b.x_lo + (b.x_hi - b.x_lo) * unit(rng);
            y = b.y_lo + (b.y_hi - b.y_lo) * unit(rng);
            bool clear = true;
            for (std::size_t j = 0; j < i && clear; ++j) {
                const double need = circumradius(o) + circumradius(objects[j]) + 1.0;
                clear = std::hypot(x - objects[j].cx[0], y - objects[j].cy[0]) > need;
            }
            if (clear) break;
        }
        o.cx.assign(1, x);
        o.cy.assign(1, y);
        const double speed = spec.min_speed + (spec.max_speed - spec.min_speed) * unit(rng);
        const double heading = 2.0 * std::numbers::pi * unit(rng);
        vx[i] = speed * std::cos(heading);
        vy[i] = speed * std::sin(heading);
    }
    for (std::size_t t = 1; t < spec.length; ++t) {
        for (std::size_t i = 0; i < total; ++i) {
            auto& o = objects[i];
            const Bounds b = bounds_of(o, i);
            double x = o.cx.back() + vx[i];
            double y = o.cy.back() + vy[i];
            reflect(x, vx[i], b.x_lo, b.x_hi);
            reflect(y, vy[i], b.y_lo, b.y_hi);
            o.cx.push_back(x);
            o.cy.push_back(y);
        }
    }

    // draw order: distractors under targets unless occlusion is allowed
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    if (spec.allow_occlusion) {
        std::shuffle(order.begin(), order.end(), rng);
    } else {
        std::stable_partition(order.begin(), order.end(), [&](std::size_t i) { return objects[i].distractor; });
    }

    SynthResult result;
    auto& seq = result.sequence;
    seq.name = name;
    seq.object_count = spec.targets;
    std::uniform_int_distribution<int> noise(-static_cast<int>(std::lround(spec.color_noise)),
                                             static_cast<int>(std::lround(spec.color_noise)));
    for (std::size_t t = 0; t < spec.length; ++t) {
        RgbImage frame(spec.height, spec.width);
        LabelMap mask(spec.height, spec.width);
        for (std::size_t y = 0; y < spec.height; ++y) {
            for (std::size_t x = 0; x < spec.width; ++x) {
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                const std::array<double, 3>* color = &background;
                std::uint8_t label = 0;
                for (std::size_t i : order) {
                    if (covers(objects[i], t, px, py)) {
                        color = &objects[i].color;
                        label = objects[i].distractor ? 0 : static_cast<std::uint8_t>(i + 1);
                    }
                }
                for (std::size_t c = 0; c < 3; ++c) {
                    const double v = std::round((*color)[c]) + noise(rng);
                    frame.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
                }
                mask.at(y, x) = label;
            }
        }
        seq.frames.push_back(std::move(frame));
        seq.masks.emplace_back(std::move(mask));
    }
    result.objects = std::move(objects);
    seq.validate();
    return result;
}

VideoSequence generate_synthetic(const SynthSpec& spec, const std::string& name) {
    return generate_synthetic_detailed(spec, name).sequence;
}

std::vector<SuiteEntry> generate_suite(const SuiteSpec& spec) {
    if (spec.min_targets < 1 || spec.max_targets < spec.min_targets) {
        throw std::invalid_argument("SuiteSpec: targets must satisfy 1 <= min_targets <= max_targets");
    }
    std::mt19937_64 rng(spec.seed);
    std::vector<SuiteEntry> suite;
    auto add_split = [&](const std::string& split, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i) {
            SynthSpec s;
            s.height = spec.height;
            s.width = spec.width;
            s.length = spec.length;
            s.targets = spec.min_targets + rng() % (spec.max_targets - spec.min_targets + 1);
            s.distractors = spec.distractors;
            s.allow_occlusion = spec.allow_occlusion;
            s.seed = rng();
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%s_%03zu", split.c_str(), i);
            suite.push_back({split, generate_synthetic(s, buf)});
        }
    };
    add_split("train", spec.train);
    add_split("val", spec.val);
    add_split("eval", spec.eval);
    return suite;
}

}  // namespace cvos
