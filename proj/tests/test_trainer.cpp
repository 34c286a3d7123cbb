#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>

#include "cvos/trainer.hpp"
#include "doctest.h"

using namespace cvos;

namespace {

VideoSequence small_video(std::uint64_t seed, std::size_t size = 32, std::size_t length = 10) {
    SynthSpec s;
    s.height = s.width = size;
    s.length = length;
    s.min_size = size / 5.0;
    s.max_size = size / 3.5;
    s.max_speed = 2.0;
    s.seed = seed;
    return generate_synthetic(s, "v" + std::to_string(seed));
}

ModelConfig small_model(std::size_t size = 32) {
    ModelConfig m;
    m.height = m.width = size;
    m.feature_channels = 8;
    m.key_channels = 4;
    m.value_channels = 8;
    return m;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "cvos_test_trainer";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("curriculum interval") {
    TrainConfig c;
    CHECK(max_interval(c, 0) == 5);
    CHECK(max_interval(c, 19) == 5);
    CHECK(max_interval(c, 20) == 10);
    CHECK(max_interval(c, 40) == 15);
    std::size_t prev = 0;
    for (std::size_t e = 0; e < 200; ++e) {
        CHECK(max_interval(c, e) >= prev);
        prev = max_interval(c, e);
    }
}

TEST_CASE("clip sampling respects ordering and gaps") {
    TrainConfig c;
    std::mt19937_64 rng(7);
    const auto v = small_video(1, 16, 30);
    std::set<std::size_t> seen_gaps;
    for (std::size_t epoch : {0, 25, 45}) {
        for (int i = 0; i < 300; ++i) {
            const auto idx = sample_clip(v, epoch, c, rng);
            REQUIRE(idx);
            CHECK((*idx)[0] < (*idx)[1]);
            CHECK((*idx)[1] < (*idx)[2]);
            CHECK((*idx)[2] < v.length());
            CHECK((*idx)[1] - (*idx)[0] <= max_interval(c, epoch));
            CHECK((*idx)[2] - (*idx)[1] <= max_interval(c, epoch));
            seen_gaps.insert((*idx)[1] - (*idx)[0]);
        }
    }
    CHECK(seen_gaps.count(1));
    CHECK(seen_gaps.count(15));
    CHECK_FALSE(seen_gaps.count(16));

    const auto short_video = small_video(2, 16, 2);
    CHECK_FALSE(sample_clip(short_video, 0, c, rng));
    auto partial = small_video(3, 16, 3);
    partial.masks[2].reset();
    CHECK_FALSE(sample_clip(partial, 0, c, rng));
}

TEST_CASE("config validation and cycle mode names") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.beta1 = 1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK(parse_cycle_mode("simple") == CycleMode::Simple);
    CHECK(parse_cycle_mode("full-history") == CycleMode::FullHistory);
    CHECK(std::string(cycle_mode_name(CycleMode::FullHistory)) == "full-history");
    CHECK_THROWS_AS(parse_cycle_mode("both"), std::invalid_argument);
}

TEST_CASE("detached cycle blocks gradient into the forward prediction") {
    const auto model = small_model(16);
    const auto w = init_weights<double>(model, 4);
    const auto clip = make_clip<double>(small_video(5, 16, 8), {0, 2, 5});
    for (bool detach : {false, true}) {
        for (auto mode : {CycleMode::Simple, CycleMode::FullHistory}) {
            TrainConfig c;
            c.detach_cycle = detach;
            c.cycle_mode = mode;
            Tape<double> tape;
            SegNet<double> net(model, w, tape, true);
            const auto g = forward_clip(net, clip, c);
            const auto grads = tape.backward(g.cycle_loss);
            double norm_t = 0.0;
            for (double v : grads[g.pred_t].data) norm_t += std::abs(v);
            if (detach) {
                CHECK(norm_t == 0.0);
            } else {
                CHECK(norm_t > 0.0);
            }
            CHECK(g.total.value().item() ==
                  doctest::Approx(g.forward_loss.value().item() + g.cycle_loss.value().item()).epsilon(1e-12));
        }
    }
}

TEST_CASE("zero cycle weight reduces to the forward loss") {
    const auto model = small_model(16);
    const auto w = init_weights<double>(model, 4);
    const auto clip = make_clip<double>(small_video(6, 16, 8), {0, 1, 3});
    TrainConfig c;
    c.cycle_weight = 0.0;
    Tape<double> tape;
    SegNet<double> net(model, w, tape, true);
    const auto g = forward_clip(net, clip, c);
    CHECK(g.total.id == g.forward_loss.id);
}

TEST_CASE("zero learning rate leaves weights bit-identical") {
    const auto model = small_model(16);
    auto w = init_weights<float>(model, 9);
    const auto before = w;
    auto opt = AdamState::zeros_like(w);
    TrainConfig c;
    c.learning_rate = 0.0;
    const auto loss = train_step({make_clip<float>(small_video(7, 16, 8), {0, 2, 4})}, model, w, opt, c);
    CHECK(std::isfinite(loss.total));
    CHECK(opt.step == 1);
    for (std::size_t p = 0; p < w.entries().size(); ++p) CHECK(w.entries()[p].second.data == before.entries()[p].second.data);
}

TEST_CASE("a training step changes weights and keeps moments finite") {
    const auto model = small_model(16);
    auto w = init_weights<float>(model, 9);
    const auto before = fingerprint(w);
    auto opt = AdamState::zeros_like(w);
    std::map<std::string, double> norms;
    train_step({make_clip<float>(small_video(7, 16, 8), {0, 2, 4})}, model, w, opt, TrainConfig{}, &norms);
    CHECK(fingerprint(w) != before);
    CHECK(norms.size() == w.entries().size());
    for (const auto& m : opt.m)
        for (float v : m.data) CHECK(std::isfinite(v));
    CHECK_THROWS_AS(train_step({}, model, w, opt, TrainConfig{}), std::invalid_argument);
}

TEST_CASE("training is deterministic and the cycle term matters") {
    const auto model = small_model(16);
    const std::vector<VideoSequence> data{small_video(11, 16, 8), small_video(12, 16, 8), small_video(13, 16, 8)};
    TrainConfig c;
    c.epochs = 3;
    c.seed = 21;
    const auto a = scratch("a.ckpt"), b = scratch("b.ckpt"), base = scratch("base.ckpt");
    const auto csv = scratch("loss.csv");
    const auto ra = run_training(data, model, c, {a, csv, {}});
    run_training(data, model, c, {b, {}, {}});
    CHECK(slurp(a) == slurp(b));
    CHECK(ra.log.size() == 6);

    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,step,forward-loss,cycle-loss,total");
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    CHECK(rows == ra.log.size());

    TrainConfig baseline = c;
    baseline.cycle_weight = 0.0;
    run_training(data, model, baseline, {base, {}, {}});
    CHECK(slurp(a) != slurp(base));

    const auto [cfg, loaded] = load_checkpoint(a);
    CHECK(fingerprint(loaded) == fingerprint(ra.weights));
}

TEST_CASE("model and data dimensions must agree") {
    TrainConfig c;
    c.epochs = 1;
    CHECK_THROWS_AS(run_training({small_video(1, 16, 5)}, small_model(32), c), std::invalid_argument);
    CHECK_THROWS_AS(run_training({}, small_model(32), c), std::invalid_argument);
}

TEST_CASE("loss decreases over 200 steps and every parameter learns") {
    const auto model = small_model(32);
    const std::vector<VideoSequence> data{small_video(31, 32, 12), small_video(32, 32, 12)};
    TrainConfig c;
    c.epochs = 200;
    c.seed = 5;
    const auto r = run_training(data, model, c);
    REQUIRE(r.log.size() == 200);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        head += r.log[i].loss.total;
        tail += r.log[r.log.size() - 1 - i].loss.total;
    }
    for (const auto& rec : r.log) CHECK(std::isfinite(rec.loss.total));
    CHECK(tail < head);
    REQUIRE(r.max_grad_norm.size() == r.weights.entries().size());
    for (const auto& [name, n] : r.max_grad_norm) {
        INFO(name);
        CHECK(n > 0.0);
    }
}
