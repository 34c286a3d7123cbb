#include <cmath>
#include <filesystem>
#include <fstream>

#include "cvos/image_io.hpp"
#include "cvos/inference.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cvos;

namespace {

VideoSequence small_video(std::uint64_t seed, std::size_t size = 24, std::size_t length = 12) {
    SynthSpec s;
    s.height = s.width = size;
    s.length = length;
    s.min_size = size / 5.0;
    s.max_size = size / 3.5;
    s.max_speed = 2.0;
    s.seed = seed;
    return generate_synthetic(s, "v" + std::to_string(seed));
}

ModelConfig small_model(std::size_t size = 24) {
    ModelConfig m;
    m.height = m.width = size;
    m.feature_channels = 6;
    m.key_channels = 4;
    m.value_channels = 6;
    return m;
}

Tensor<float> planes(std::size_t n, std::size_t h, std::size_t w) { return Tensor<float>(Shape{n, h, w}); }

bool same_labels(const PropagationResult& a, const PropagationResult& b) {
    if (a.labels.size() != b.labels.size()) return false;
    for (std::size_t t = 0; t < a.labels.size(); ++t) {
        if (a.labels[t].data != b.labels[t].data) return false;
    }
    return true;
}

bool same_scores(const PropagationResult& a, const PropagationResult& b) {
    if (a.scores.size() != b.scores.size()) return false;
    for (std::size_t t = 0; t < a.scores.size(); ++t) {
        if (a.scores[t].data != b.scores[t].data) return false;
    }
    return true;
}

struct Fixture {
    ModelConfig model = small_model();
    Weights<float> weights = init_weights<float>(model, 3);
    VideoSequence video = small_video(11);
    Tensor<float> f1 = frame_tensor<float>(video.frames[0]);
    Tensor<float> ft = frame_tensor<float>(video.frames[4]);
    Tensor<float> y1 = object_planes<float>(*video.masks[0], video.object_count);
    Tensor<float> yt = object_planes<float>(*video.masks[4], video.object_count);
};

}  // namespace

TEST_CASE("strategy and degradation names round-trip") {
    for (auto k : {StrategyKind::First, StrategyKind::Prev, StrategyKind::FirstPrev, StrategyKind::Mem}) {
        CHECK(parse_strategy(strategy_name(k)) == k);
    }
    CHECK(parse_strategy("FIRST-PREV") == StrategyKind::FirstPrev);
    CHECK_THROWS(parse_strategy("last"));
    for (auto d : {DegradeMode::None, DegradeMode::BoundingBox, DegradeMode::BaselinePredict}) {
        CHECK(parse_degrade(degrade_name(d)) == d);
    }
    CHECK_THROWS(parse_degrade("blur"));
}

TEST_CASE("config validation") {
    Strategy s;
    s.mem_period = 0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    CorrectionConfig c;
    c.alpha = -1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.alpha = 1.0;
    c.period = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("correction schedule starts at frame 2") {
    CorrectionConfig c;
    c.enabled = true;
    c.period = 5;
    std::vector<std::size_t> hit;
    for (std::size_t t = 1; t <= 16; ++t) {
        if (c.applies_to(t)) hit.push_back(t);
    }
    CHECK(hit == std::vector<std::size_t>{2, 7, 12});
    c.enabled = false;
    CHECK_FALSE(c.applies_to(2));
}

TEST_CASE("gradient correction no-ops are bit-identical") {
    Fixture f;
    Tensor<float> pred = f.yt;
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = 0.25f + 0.5f * pred[i];
    const auto before = fingerprint(f.weights);

    CorrectionConfig zero_rate;
    zero_rate.alpha = 0.0;
    const auto a = gradient_correct(f.model, f.weights, pred, f.ft, f.f1, f.y1, zero_rate);
    CHECK(a.mask.data == pred.data);
    CHECK(a.losses.size() == zero_rate.iterations);

    CorrectionConfig zero_iters;
    zero_iters.iterations = 0;
    const auto b = gradient_correct(f.model, f.weights, pred, f.ft, f.f1, f.y1, zero_iters);
    CHECK(b.mask.data == pred.data);
    CHECK(b.losses.empty());

    CHECK(fingerprint(f.weights) == before);
}

TEST_CASE("gradient correction descends the reconstruction loss and keeps weights") {
    Fixture f;
    Tensor<float> pred = f.yt;
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = 0.3f + 0.4f * pred[i];
    const auto before = fingerprint(f.weights);
    CorrectionConfig c;
    c.alpha = 0.5;
    const auto r = gradient_correct(f.model, f.weights, pred, f.ft, f.f1, f.y1, c);
    REQUIRE(r.losses.size() == c.iterations);
    CHECK_FALSE(r.stopped_early);
    CHECK(r.mask.data != pred.data);
    for (float v : r.mask.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    const double final = reconstruction_loss(f.model, f.weights, r.mask, f.ft, f.f1, f.y1);
    CHECK(final < r.losses.front());
    CHECK(fingerprint(f.weights) == before);
}

TEST_CASE("unclamped correction may leave [0,1]") {
    Fixture f;
    Tensor<float> pred = f.yt;
    CorrectionConfig c;
    c.alpha = 200.0;
    c.iterations = 3;
    c.clamp = false;
    const auto r = gradient_correct(f.model, f.weights, pred, f.ft, f.f1, f.y1, c);
    bool outside = false;
    for (float v : r.mask.data) outside = outside || v < 0.0f || v > 1.0f;
    CHECK(outside);
}

TEST_CASE("gradient correction rejects shape mismatches") {
    Fixture f;
    CorrectionConfig c;
    CHECK_THROWS_AS(gradient_correct(f.model, f.weights, planes(1, 8, 8), f.ft, f.f1, f.y1, c), std::invalid_argument);
    Tensor<float> extra = planes(f.y1.dim(0) + 1, f.model.height, f.model.width);
    CHECK_THROWS_AS(gradient_correct(f.model, f.weights, extra, f.ft, f.f1, f.y1, c), std::invalid_argument);
}

TEST_CASE("FIRST keeps the same memory at every frame") {
    Fixture f;
    PropagationOptions o;
    o.strategy.kind = StrategyKind::First;
    const auto r = propagate(f.video, f.model, f.weights, o);
    REQUIRE(r.frames.size() == f.video.length() - 1);
    for (const auto& rec : r.frames) {
        CHECK(rec.memory_frames == std::vector<std::size_t>{1});
        CHECK(rec.memory_fingerprint == r.frames.front().memory_fingerprint);
    }
}

TEST_CASE("PREV and FIRST+PREV reference sets") {
    Fixture f;
    PropagationOptions o;
    o.strategy.kind = StrategyKind::Prev;
    const auto p = propagate(f.video, f.model, f.weights, o);
    for (const auto& rec : p.frames) CHECK(rec.memory_frames == std::vector<std::size_t>{rec.frame - 1});
    o.strategy.kind = StrategyKind::FirstPrev;
    const auto fp = propagate(f.video, f.model, f.weights, o);
    CHECK(fp.frames[0].memory_frames == std::vector<std::size_t>{1});
    for (std::size_t i = 1; i < fp.frames.size(); ++i) {
        CHECK(fp.frames[i].memory_frames == std::vector<std::size_t>{1, fp.frames[i].frame - 1});
    }
}

TEST_CASE("MEM appends at t = 2, 7, 12 for T = 12") {
    Fixture f;
    REQUIRE(f.video.length() == 12);
    PropagationOptions o;
    o.strategy = {StrategyKind::Mem, 5};
    const auto r = propagate(f.video, f.model, f.weights, o);

    // Direct simulation of the append rule.
    std::vector<std::size_t> expected_appends, memory{1};
    std::vector<std::vector<std::size_t>> expected_memory;
    for (std::size_t t = 2; t <= 12; ++t) {
        expected_memory.push_back(memory);
        if ((t - 2) % 5 == 0) {
            expected_appends.push_back(t);
            memory.push_back(t);
        }
    }
    std::vector<std::size_t> appended;
    for (std::size_t i = 0; i < r.frames.size(); ++i) {
        if (r.frames[i].appended) appended.push_back(r.frames[i].frame);
        CHECK(r.frames[i].memory_frames == expected_memory[i]);
    }
    CHECK(appended == expected_appends);
    CHECK(appended == std::vector<std::size_t>{2, 7, 12});
}

TEST_CASE("MEM stores the corrected prediction") {
    Fixture f;
    PropagationOptions o;
    o.strategy = {StrategyKind::Mem, 5};
    o.correction.enabled = true;
    o.correction.alpha = 1.0;
    o.correction.iterations = 2;
    const auto r = propagate(f.video, f.model, f.weights, o);
    CHECK(r.corrected_frames == 3);
    CHECK(r.frames[0].corrected);
    CHECK(r.frames[0].appended);

    // Re-derive the corrected frame-2 mask and compare with the stored one.
    Tape<float> tape;
    SegNet<float> net(f.model, f.weights, tape);
    const auto f2 = frame_tensor<float>(f.video.frames[1]);
    const auto raw = net.segment({{tape.constant(f.f1), tape.constant(f.y1)}}, tape.constant(f2)).value();
    const auto fixed = gradient_correct(f.model, f.weights, raw, f2, f.f1, f.y1, o.correction);
    CHECK(r.scores[1].data == fixed.mask.data);
    CHECK(r.scores[1].data != raw.data);
}

TEST_CASE("correction disabled equals alpha = 0") {
    Fixture f;
    for (auto kind : {StrategyKind::First, StrategyKind::Mem}) {
        PropagationOptions off;
        off.strategy.kind = kind;
        PropagationOptions zero = off;
        zero.correction.enabled = true;
        zero.correction.alpha = 0.0;
        const auto a = propagate(f.video, f.model, f.weights, off);
        const auto b = propagate(f.video, f.model, f.weights, zero);
        CHECK(same_scores(a, b));
        CHECK(same_labels(a, b));
        CHECK(b.corrected_frames == 3);
    }
}

TEST_CASE("propagation is deterministic and leaves weights untouched") {
    Fixture f;
    PropagationOptions o;
    o.correction.enabled = true;
    o.correction.iterations = 2;
    const auto before = fingerprint(f.weights);
    const auto a = propagate(f.video, f.model, f.weights, o);
    const auto b = propagate(f.video, f.model, f.weights, o);
    CHECK(same_scores(a, b));
    CHECK(fingerprint(f.weights) == before);
    CHECK(a.labels.front().data == f.video.masks[0]->data);
}

TEST_CASE("propagation requires a first mask") {
    Fixture f;
    auto v = f.video;
    v.masks[0].reset();
    CHECK_THROWS_AS(propagate(v, f.model, f.weights, PropagationOptions{}), std::invalid_argument);
    auto short_video = f.video;
    short_video.frames.resize(1);
    short_video.masks.resize(1);
    CHECK_THROWS_AS(propagate(short_video, f.model, f.weights, PropagationOptions{}), std::invalid_argument);
}

TEST_CASE("bounding box of a centered square is the square") {
    auto p = planes(1, 8, 8);
    for (std::size_t y = 2; y < 6; ++y) {
        for (std::size_t x = 2; x < 6; ++x) p[y * 8 + x] = 1.0f;
    }
    CHECK(bounding_box_mask(p).data == p.data);
}

TEST_CASE("bounding box of an L shape is its full rectangle") {
    auto p = planes(2, 10, 12);
    // Object 1: an L; object 2: a diagonal of soft values, some below threshold.
    for (std::size_t y = 1; y < 8; ++y) p[y * 12 + 3] = 1.0f;
    for (std::size_t x = 3; x < 10; ++x) p[7 * 12 + x] = 0.9f;
    const std::size_t off = 120;
    p[off + 2 * 12 + 2] = 0.6f;
    p[off + 5 * 12 + 6] = 0.51f;
    p[off + 9 * 12 + 11] = 0.5f;

    const auto box = bounding_box_mask(p);
    for (std::size_t i = 0; i < 2; ++i) {
        std::size_t r0 = 99, r1 = 0, c0 = 99, c1 = 0;
        for (std::size_t y = 0; y < 10; ++y) {
            for (std::size_t x = 0; x < 12; ++x) {
                if (p[i * 120 + y * 12 + x] > 0.5f) {
                    r0 = std::min(r0, y), r1 = std::max(r1, y);
                    c0 = std::min(c0, x), c1 = std::max(c1, x);
                }
            }
        }
        for (std::size_t y = 0; y < 10; ++y) {
            for (std::size_t x = 0; x < 12; ++x) {
                const bool inside = y >= r0 && y <= r1 && x >= c0 && x <= c1;
                CHECK(box[i * 120 + y * 12 + x] == (inside ? 1.0f : 0.0f));
            }
        }
    }
    CHECK(box[1 * 12 + 9] == 1.0f);
    CHECK(box[off + 9 * 12 + 11] == 0.0f);
}

TEST_CASE("bounding box keeps empty planes") {
    auto p = planes(2, 6, 6);
    p[7] = 0.3f;
    const auto box = bounding_box_mask(p);
    CHECK(box.data == p.data);
}

TEST_CASE("baseline-predict degradation gives hard planes") {
    Fixture f;
    const auto d = degrade_mask(f.y1, f.f1, {DegradeMode::BaselinePredict, &f.model, &f.weights});
    CHECK(d.shape == f.y1.shape);
    const std::size_t plane = f.model.height * f.model.width;
    for (std::size_t u = 0; u < plane; ++u) {
        float total = 0.0f;
        for (std::size_t i = 0; i < d.dim(0); ++i) {
            const float v = d[i * plane + u];
            CHECK((v == 0.0f || v == 1.0f));
            total += v;
        }
        CHECK(total <= 1.0f);
    }
    CHECK_THROWS_AS(degrade_mask(f.y1, f.f1, {DegradeMode::BaselinePredict, nullptr, nullptr}), std::invalid_argument);
    CHECK(degrade_mask(f.y1, f.f1, {}).data == f.y1.data);
}

TEST_CASE("outputs: masks, soft planes and timing JSON") {
    Fixture f;
    PropagationOptions o;
    o.correction.enabled = true;
    o.correction.iterations = 1;
    const auto r = propagate(f.video, f.model, f.weights, o);
    const auto dir = std::filesystem::temp_directory_path() / "cvos_test_inference";
    std::filesystem::remove_all(dir);
    save_propagation(r, dir, true);
    CHECK(std::filesystem::exists(dir / "masks" / "00000.png"));
    CHECK(std::filesystem::exists(dir / "masks" / "00011.png"));
    CHECK(std::filesystem::exists(dir / "soft" / "obj1" / "00011.pgm"));
    for (std::size_t t = 0; t < r.labels.size(); ++t) {
        CHECK(read_label_png(dir / "masks" / (frame_file_stem(t) + ".png")).data == r.labels[t].data);
    }

    write_timing_json({timing_of(r)}, o, dir / "timing.json");
    std::ifstream in(dir / "timing.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j["frames"] == f.video.length());
    CHECK(j["corrected_frames"] == 3);
    CHECK(j["correction"]["iterations"] == 1);
    CHECK(j["sequences"][0]["name"] == f.video.name);
    CHECK(j["seconds"].get<double>() >= j["correction_seconds"].get<double>());
    CHECK(j["fps_without_correction"].get<double>() >= j["fps"].get<double>());
}
