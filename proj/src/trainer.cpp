#include "cvos/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace cvos {

const char* cycle_mode_name(CycleMode mode) { return mode == CycleMode::Simple ? "simple" : "full-history"; }

CycleMode parse_cycle_mode(const std::string& name) {
    if (name == "simple") return CycleMode::Simple;
    if (name == "full-history" || name == "full") return CycleMode::FullHistory;
    throw std::invalid_argument("unknown cycle mode '" + name + "' (expected simple or full-history)");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("TrainConfig: " + what); };
    if (epochs == 0) fail("epochs must be > 0");
    if (batch_size == 0) fail("batch_size must be > 0");
    if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) fail("betas must lie in (0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
    if (curriculum_base == 0 || curriculum_period == 0) fail("curriculum base and period must be > 0");
    if (!(cycle_weight >= 0.0)) fail("cycle_weight must be >= 0");
    loss().validate();
}

LossConfig TrainConfig::loss() const {
    LossConfig l;
    l.gamma = gamma;
    return l;
}

namespace {

Tensor<float> flip_width(const Tensor<float>& t) {
    Tensor<float> out(t.shape);
    const std::size_t w = t.dim(t.rank() - 1), rows = t.size() / w;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t x = 0; x < w; ++x) out[r * w + x] = t[r * w + (w - 1 - x)];
    }
    return out;
}

}  // namespace

std::size_t max_interval(const TrainConfig& cfg, std::size_t epoch) {
    return cfg.curriculum_base + cfg.curriculum_step * (epoch / cfg.curriculum_period);
}

std::optional<std::array<std::size_t, 3>> sample_clip(const VideoSequence& video, std::size_t epoch,
                                                      const TrainConfig& cfg, std::mt19937_64& rng) {
    const std::size_t T = video.length();
    if (T < 3) {
        std::cerr << "warning: '" << video.name << "' has fewer than 3 frames, skipped\n";
        return std::nullopt;
    }
    const std::size_t m = max_interval(cfg, epoch);
    auto uniform = [&](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    std::array<std::size_t, 3> idx{};
    idx[0] = uniform(0, T - 3);
    idx[1] = idx[0] + uniform(1, std::min(m, T - 2 - idx[0]));
    idx[2] = idx[1] + uniform(1, std::min(m, T - 1 - idx[1]));
    for (auto i : idx) {
        if (!video.masks[i]) {
            std::cerr << "warning: '" << video.name << "' lacks ground truth at frame " << i + 1 << ", skipped\n";
            return std::nullopt;
        }
    }
    return idx;
}

template <typename T>
ClipData<T> make_clip(const VideoSequence& video, const std::array<std::size_t, 3>& index) {
    ClipData<T> c;
    for (std::size_t k = 0; k < 3; ++k) {
        if (index[k] >= video.length() || !video.masks[index[k]]) {
            throw std::invalid_argument("make_clip: frame " + std::to_string(index[k]) + " unavailable in '" +
                                        video.name + "'");
        }
        c.frames[k] = frame_tensor<T>(video.frames[index[k]]);
        c.masks[k] = object_planes<T>(*video.masks[index[k]], video.object_count);
    }
    return c;
}

template <typename T>
ClipGraph<T> forward_clip(SegNet<T>& net, const ClipData<T>& clip, const TrainConfig& cfg) {
    auto& tape = net.tape();
    const LossConfig loss_cfg = cfg.loss();
    const Var<T> x1 = tape.constant(clip.frames[0]);
    const Var<T> xa = tape.constant(clip.frames[1]);
    const Var<T> xt = tape.constant(clip.frames[2]);
    const Var<T> y1 = tape.constant(clip.masks[0]);
    const Var<T> ya = tape.constant(clip.masks[1]);
    const Var<T> yt = tape.constant(clip.masks[2]);
    (void)ya;

    ClipGraph<T> g;
    g.pred_a = net.segment({{x1, y1}}, xa);
    g.pred_t = net.segment({{x1, y1}, {xa, g.pred_a}}, xt);
    const Var<T> back_t = cfg.detach_cycle ? ad::stop_gradient(g.pred_t) : g.pred_t;
    std::vector<Reference<T>> cyclic;
    if (cfg.cycle_mode == CycleMode::FullHistory) {
        cyclic.push_back({xa, cfg.detach_cycle ? ad::stop_gradient(g.pred_a) : g.pred_a});
    }
    cyclic.push_back({xt, back_t});
    g.pred_1 = net.segment(cyclic, x1);
    g.forward_loss = seg_loss(g.pred_t, yt, loss_cfg);
    g.cycle_loss = seg_loss(g.pred_1, y1, loss_cfg);
    g.total = cfg.cycle_weight == 0.0 ? g.forward_loss
                                      : g.forward_loss + ad::mul_scalar(g.cycle_loss, static_cast<T>(cfg.cycle_weight));
    return g;
}

AdamState AdamState::zeros_like(const Weights<float>& w) {
    AdamState s;
    for (const auto& [name, t] : w.entries()) {
        s.m.emplace_back(t.shape);
        s.v.emplace_back(t.shape);
    }
    return s;
}

namespace {

bool finite(double v) { return std::isfinite(v); }

}  // namespace

LossBreakdown train_step(const std::vector<ClipData<float>>& batch, const ModelConfig& model, Weights<float>& weights,
                         AdamState& opt, const TrainConfig& cfg, std::map<std::string, double>* grad_norms) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    if (opt.m.size() != weights.entries().size()) throw std::invalid_argument("train_step: optimizer state mismatch");
    Tape<float> tape;
    SegNet<float> net(model, weights, tape, true);
    LossBreakdown out;
    std::vector<Var<float>> totals;
    for (const auto& clip : batch) {
        auto g = forward_clip(net, clip, cfg);
        out.forward += g.forward_loss.value().item();
        out.cycle += g.cycle_loss.value().item();
        totals.push_back(g.total);
    }
    Var<float> sum = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) sum = sum + totals[i];
    const Var<float> mean = ad::mul_scalar(sum, 1.0f / static_cast<float>(batch.size()));
    const double n = static_cast<double>(batch.size());
    out.forward /= n;
    out.cycle /= n;
    out.total = mean.value().item();
    if (!finite(out.forward) || !finite(out.cycle) || !finite(out.total)) {
        std::ostringstream os;
        os << "non-finite loss (forward " << out.forward << ", cycle " << out.cycle << ", total " << out.total
           << ") at optimizer step " << opt.step;
        throw TrainingDiverged(os.str());
    }
    const auto grads = tape.backward(mean);

    ++opt.step;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
    auto& entries = weights.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
        const auto& [name, var] = net.params()[p];
        const Tensor<float> g = grads[var];
        auto& w = entries[p].second;
        auto& m = opt.m[p];
        auto& v = opt.v[p];
        double norm2 = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            norm2 += gi * gi;
            m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
            v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
            const double mhat = m[i] / c1, vhat = v[i] / c2;
            w[i] = static_cast<float>(w[i] - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
        if (grad_norms) (*grad_norms)[name] = std::sqrt(norm2);
    }
    return out;
}

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(9);
    out << "epoch,step,forward-loss,cycle-loss,total\n";
    for (const auto& r : log) {
        out << r.epoch << "," << r.step << "," << r.loss.forward << "," << r.loss.cycle << "," << r.loss.total << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

namespace {

void dump_diagnostics(const std::filesystem::path& path, const std::string& what, std::size_t epoch,
                      std::size_t step, const std::vector<std::pair<std::string, std::array<std::size_t, 3>>>& batch,
                      const Weights<float>& weights, const std::vector<LossRecord>& log) {
    if (path.empty()) return;
    nlohmann::json j;
    j["error"] = what;
    j["epoch"] = epoch;
    j["step"] = step;
    j["weights_fingerprint"] = fingerprint(weights);
    for (const auto& [name, idx] : batch) j["batch"].push_back({{"sequence", name}, {"frames", idx}});
    const std::size_t tail = std::min<std::size_t>(log.size(), 20);
    for (std::size_t i = log.size() - tail; i < log.size(); ++i) {
        j["recent_losses"].push_back({log[i].step, log[i].loss.forward, log[i].loss.cycle, log[i].loss.total});
    }
    for (const auto& [name, t] : weights.entries()) {
        double mx = 0.0;
        bool ok = true;
        for (float v : t.data) {
            ok = ok && std::isfinite(v);
            mx = std::max(mx, static_cast<double>(std::abs(v)));
        }
        j["parameters"][name] = {{"max_abs", mx}, {"finite", ok}};
    }
    std::ofstream out(path);
    out << j.dump(2) << "\n";
}

}  // namespace

TrainResult run_training(const std::vector<VideoSequence>& dataset, const ModelConfig& model, const TrainConfig& cfg,
                         const TrainOutputs& outputs, const EpochCallback& on_epoch) {
    cfg.validate();
    model.validate();
    if (dataset.empty()) throw std::invalid_argument("run_training: empty dataset");
    for (const auto& seq : dataset) {
        if (seq.height() != model.height || seq.width() != model.width) {
            throw std::invalid_argument("run_training: '" + seq.name + "' is " + std::to_string(seq.height()) + "x" +
                                        std::to_string(seq.width()) + " but the model expects " +
                                        std::to_string(model.height) + "x" + std::to_string(model.width));
        }
    }
    const auto start = std::chrono::steady_clock::now();
    TrainResult result;
    result.weights = init_weights<float>(model, cfg.seed);
    AdamState opt = AdamState::zeros_like(result.weights);
    // data order and clip choice depend on the seed only
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;
    std::map<std::string, double> norms;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        LossBreakdown epoch_sum;
        std::size_t epoch_steps = 0;
        for (std::size_t start_i = 0; start_i < order.size(); start_i += cfg.batch_size) {
            std::vector<ClipData<float>> batch;
            std::vector<std::pair<std::string, std::array<std::size_t, 3>>> picked;
            for (std::size_t k = start_i; k < std::min(order.size(), start_i + cfg.batch_size); ++k) {
                const auto& seq = dataset[order[k]];
                auto idx = sample_clip(seq, epoch, cfg, rng);
                if (!idx) continue;
                bool flip = false;
                if (cfg.augment) {
                    std::bernoulli_distribution coin(0.5);
                    if (coin(rng)) {
                        for (auto& i : *idx) i = seq.length() - 1 - i;
                    }
                    flip = coin(rng);
                }
                batch.push_back(make_clip<float>(seq, *idx));
                if (flip) {
                    for (auto& f : batch.back().frames) f = flip_width(f);
                    for (auto& m : batch.back().masks) m = flip_width(m);
                }
                picked.emplace_back(seq.name, *idx);
            }
            if (batch.empty()) continue;
            LossBreakdown loss;
            try {
                loss = train_step(batch, model, result.weights, opt, cfg, &norms);
            } catch (const TrainingDiverged& e) {
                dump_diagnostics(outputs.diagnostics, e.what(), epoch, step, picked, result.weights, result.log);
                throw TrainingDiverged(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")");
            }
            for (const auto& [name, n] : norms) {
                auto& mx = result.max_grad_norm[name];
                mx = std::max(mx, n);
            }
            result.log.push_back({epoch, step, loss});
            epoch_sum.forward += loss.forward;
            epoch_sum.cycle += loss.cycle;
            epoch_sum.total += loss.total;
            ++epoch_steps;
            ++step;
        }
        if (on_epoch && epoch_steps > 0) {
            const double n = static_cast<double>(epoch_steps);
            on_epoch(epoch, {epoch_sum.forward / n, epoch_sum.cycle / n, epoch_sum.total / n});
        }
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!outputs.checkpoint.empty()) save_checkpoint(outputs.checkpoint, model, result.weights);
    if (!outputs.loss_csv.empty()) write_loss_csv(result.log, outputs.loss_csv);
    return result;
}

#define CVOS_INSTANTIATE_TRAINER(T)                                                             \
    template ClipData<T> make_clip<T>(const VideoSequence&, const std::array<std::size_t, 3>&); \
    template ClipGraph<T> forward_clip<T>(SegNet<T>&, const ClipData<T>&, const TrainConfig&);

CVOS_INSTANTIATE_TRAINER(float)
CVOS_INSTANTIATE_TRAINER(double)

#undef CVOS_INSTANTIATE_TRAINER

}  // namespace cvos
