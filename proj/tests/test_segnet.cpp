#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cvos/losses.hpp"
#include "cvos/segnet.hpp"
#include "doctest.h"
#include "gradcheck_fixture.hpp"
#include "test_helpers.hpp"

using namespace cvos;
using cvos::testing::random_tensor;

namespace {

ModelConfig small_config(std::size_t size = 16) {
    ModelConfig cfg;
    cfg.height = size;
    cfg.width = size;
    cfg.feature_channels = 4;
    cfg.key_channels = 3;
    cfg.value_channels = 3;
    return cfg;
}

}  // namespace

TEST_CASE("encode_query shape arithmetic") {
    ModelConfig cfg;
    cfg.height = cfg.width = 32;
    auto w = init_weights<float>(cfg, 1);
    Tape<float> tape;
    SegNet<float> net(cfg, w, tape);
    std::mt19937_64 rng(1);
    auto frame = random_tensor<float>(Shape{3, 32, 32}, rng, 0, 1);
    auto kv = net.encode_query(tape.constant(frame));
    CHECK(kv.key.shape() == Shape{8, 8, 8});
    CHECK(kv.value.shape() == Shape{16, 8, 8});
    auto again = net.encode_query(tape.constant(frame));
    CHECK(kv.key.value() == again.key.value());
    CHECK_THROWS_AS(net.encode_query(tape.constant(Tensor<float>(Shape{3, 16, 32}))), std::invalid_argument);
}

TEST_CASE("zero weights give zero key and value maps") {
    auto cfg = small_config();
    Tape<float> tape;
    SegNet<float> net(cfg, zero_weights<float>(cfg), tape);
    std::mt19937_64 rng(2);
    auto kv = net.encode_query(tape.constant(random_tensor<float>(Shape{3, 16, 16}, rng, 0, 1)));
    for (float v : kv.key.value().data) CHECK(v == 0.0f);
    for (float v : kv.value.value().data) CHECK(v == 0.0f);
}

TEST_CASE("encode_memory accepts an empty mask and is differentiable in the mask") {
    auto cfg = small_config();
    auto w = init_weights<double>(cfg, 3);
    std::mt19937_64 rng(3);
    auto frame = random_tensor<double>(Shape{3, 16, 16}, rng, 0, 1);
    {
        Tape<double> tape;
        SegNet<double> net(cfg, w, tape);
        auto kv = net.encode_memory(tape.constant(frame), tape.constant(Tensor<double>(Shape{16, 16})));
        for (double v : kv.key.value().data) CHECK(std::isfinite(v));
        CHECK_THROWS_AS(net.encode_memory(tape.constant(frame), tape.constant(Tensor<double>(Shape{8, 16}))),
                        std::invalid_argument);
    }
    auto mask = random_tensor<double>(Shape{16, 16}, rng, 0, 1);
    const double err = finite_diff_check(
        [&](Var<double> m) {
            SegNet<double> net(cfg, w, *m.tape);
            return ad::sum(net.encode_memory(m.tape->constant(frame), m).key);
        },
        mask);
    CHECK(err < 1e-4);
}

TEST_CASE("memory read: normalization, single position, two-position toy") {
    auto cfg = small_config(4);
    Tape<double> tape;
    SegNet<double> net(cfg, init_weights<double>(cfg, 4), tape);
    const std::size_t Ck = 2, Cv = 3;
    // query with 2 positions (1x2 map)
    auto qkey = tape.constant(Tensor<double>(Shape{Ck, 1, 2}, {1.0, 0.0, 0.0, 2.0}));
    auto qval = tape.constant(Tensor<double>(Shape{Cv, 1, 2}, {9, 9, 8, 8, 7, 7}));
    KeyValue<double> query{qkey, qval};

    SUBCASE("single memory position returns its value everywhere") {
        MemoryBank<double> mem;
        mem.append({tape.constant(Tensor<double>(Shape{Ck, 1, 1}, {0.3, -4.0})),
                    tape.constant(Tensor<double>(Shape{Cv, 1, 1}, {1.5, -2.0, 0.25}))});
        auto out = net.read(query, mem).value();
        CHECK(out.shape == Shape{2 * Cv, 1, 2});
        for (std::size_t p = 0; p < 2; ++p) {
            CHECK(out[(Cv + 0) * 2 + p] == doctest::Approx(1.5));
            CHECK(out[(Cv + 1) * 2 + p] == doctest::Approx(-2.0));
            CHECK(out[(Cv + 2) * 2 + p] == doctest::Approx(0.25));
            CHECK(out[0 * 2 + p] == 9.0);  // query value passes through
        }
    }
    SUBCASE("two memory positions match a brute-force softmax") {
        // keys k0 = (1, 1), k1 = (0, -1); values v0 = (1,2,3), v1 = (-1,0,5)
        MemoryBank<double> mem;
        mem.append({tape.constant(Tensor<double>(Shape{Ck, 1, 2}, {1.0, 0.0, 1.0, -1.0})),
                    tape.constant(Tensor<double>(Shape{Cv, 1, 2}, {1.0, -1.0, 2.0, 0.0, 3.0, 5.0}))});
        auto weights = net.attention(qkey, mem).value();
        auto out = net.read(query, mem).value();
        const double q[2][2] = {{1.0, 0.0}, {0.0, 2.0}};
        const double k[2][2] = {{1.0, 1.0}, {0.0, -1.0}};
        const double v[2][3] = {{1, 2, 3}, {-1, 0, 5}};
        for (int p = 0; p < 2; ++p) {
            double s[2];
            for (int m = 0; m < 2; ++m) s[m] = (q[p][0] * k[m][0] + q[p][1] * k[m][1]) / std::sqrt(2.0);
            const double z = std::exp(s[0]) + std::exp(s[1]);
            const double a0 = std::exp(s[0]) / z, a1 = std::exp(s[1]) / z;
            CHECK(weights[p * 2 + 0] == doctest::Approx(a0).epsilon(1e-12));
            CHECK(weights[p * 2 + 1] == doctest::Approx(a1).epsilon(1e-12));
            CHECK(weights[p * 2 + 0] + weights[p * 2 + 1] == doctest::Approx(1.0).epsilon(1e-14));
            for (int c = 0; c < 3; ++c)
                CHECK(out[(Cv + c) * 2 + p] == doctest::Approx(a0 * v[0][c] + a1 * v[1][c]).epsilon(1e-12));
        }
    }
    SUBCASE("empty memory is an error") {
        MemoryBank<double> empty;
        CHECK_THROWS_AS(net.read(query, empty), std::invalid_argument);
    }
}

TEST_CASE("attention rows sum to one for a real network") {
    auto cfg = small_config();
    Tape<float> tape;
    SegNet<float> net(cfg, init_weights<float>(cfg, 5), tape);
    std::mt19937_64 rng(5);
    auto f1 = tape.constant(random_tensor<float>(Shape{3, 16, 16}, rng, 0, 1));
    auto f2 = tape.constant(random_tensor<float>(Shape{3, 16, 16}, rng, 0, 1));
    MemoryBank<float> mem;
    mem.append(net.encode_memory(f1, tape.constant(random_tensor<float>(Shape{16, 16}, rng, 0, 1))));
    mem.append(net.encode_memory(f2, tape.constant(random_tensor<float>(Shape{16, 16}, rng, 0, 1))));
    auto a = net.attention(net.encode_query(f2).key, mem).value();
    CHECK(a.shape == Shape{16, 32});
    for (std::size_t r = 0; r < 16; ++r) {
        double total = 0;
        for (std::size_t j = 0; j < 32; ++j) total += a[r * 32 + j];
        CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("decode output shape and range") {
    auto cfg = small_config();
    std::mt19937_64 rng(6);
    auto w = init_weights<float>(cfg, 6);
    Tape<float> tape;
    SegNet<float> net(cfg, w, tape);
    auto readout = tape.constant(random_tensor<float>(Shape{6, 4, 4}, rng));
    auto p = net.decode(readout).value();
    CHECK(p.shape == Shape{16, 16});
    for (float v : p.data) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    auto zeroed = w;
    for (auto& v : zeroed.get("decoder.conv3.weight").data) v = 0;
    for (auto& v : zeroed.get("decoder.conv3.bias").data) v = 0;
    Tape<float> t2;
    SegNet<float> net2(cfg, zeroed, t2);
    for (float v : net2.decode(t2.constant(readout.value())).value().data) CHECK(v == 0.5f);
}

TEST_CASE("segment contracts") {
    auto cfg = small_config();
    std::mt19937_64 rng(7);
    auto w = init_weights<float>(cfg, 7);
    auto f1 = random_tensor<float>(Shape{3, 16, 16}, rng, 0, 1);
    auto f2 = random_tensor<float>(Shape{3, 16, 16}, rng, 0, 1);
    auto target = random_tensor<float>(Shape{3, 16, 16}, rng, 0, 1);
    auto m1 = random_tensor<float>(Shape{3, 16, 16}, rng, 0, 1);
    auto m2 = random_tensor<float>(Shape{3, 16, 16}, rng, 0, 1);

    auto run = [&](std::vector<std::pair<Tensor<float>, Tensor<float>>> refs) {
        Tape<float> tape;
        SegNet<float> net(cfg, w, tape);
        std::vector<Reference<float>> r;
        for (auto& [f, m] : refs) r.push_back({tape.constant(f), tape.constant(m)});
        return net.segment(r, tape.constant(target)).value();
    };

    SUBCASE("object count preserved and scores normalized") {
        auto out = run({{f1, m1}});
        CHECK(out.shape == Shape{3, 16, 16});
        for (std::size_t u = 0; u < 256; ++u) {
            const double s = out[u] + out[256 + u] + out[512 + u];
            CHECK(s <= 1.0 + 1e-6);
            for (std::size_t i = 0; i < 3; ++i) CHECK(out[i * 256 + u] >= 0.0f);
        }
    }
    SUBCASE("memory entry order does not change the output") {
        CHECK(run({{f1, m1}, {f2, m2}}) == run({{f2, m2}, {f1, m1}}));
    }
    SUBCASE("duplicating a reference leaves the read unchanged") {
        auto single = run({{f1, m1}});
        auto dup = run({{f1, m1}, {f1, m1}});
        for (std::size_t i = 0; i < single.size(); ++i) CHECK(dup[i] == doctest::Approx(single[i]).epsilon(1e-5));
    }
    SUBCASE("errors") {
        Tape<float> tape;
        SegNet<float> net(cfg, w, tape);
        CHECK_THROWS_AS(net.segment({}, tape.constant(target)), std::invalid_argument);
        std::vector<Reference<float>> bad{{tape.constant(f1), tape.constant(m1)},
                                          {tape.constant(f2), tape.constant(Tensor<float>(Shape{2, 16, 16}))}};
        CHECK_THROWS_AS(net.segment(bad, tape.constant(target)), std::invalid_argument);
    }
}

TEST_CASE("aggregation hand cases") {
    Tape<double> tape;
    SUBCASE("single object at p = 1") {
        auto agg = aggregate_objects(tape.constant(Tensor<double>(Shape{1, 2, 2}, 1.0)));
        for (auto l : label_map(agg.value())) CHECK(l == 1);
    }
    SUBCASE("all planes zero") {
        auto agg = aggregate_objects(tape.constant(Tensor<double>(Shape{2, 2, 2}, 0.0)));
        for (auto l : label_map(agg.value())) CHECK(l == 0);
    }
    SUBCASE("two objects (0.8, 0.6)") {
        auto agg = aggregate_objects(tape.constant(Tensor<double>(Shape{2, 1, 1}, {0.8, 0.6}))).value();
        // background = 0.2 * 0.4 = 0.08, total = 0.08 + 1.4 = 1.48
        CHECK(agg[0] == doctest::Approx(0.8 / 1.48).epsilon(1e-12));
        CHECK(agg[1] == doctest::Approx(0.6 / 1.48).epsilon(1e-12));
        CHECK(label_map(agg)[0] == 1);
    }
    SUBCASE("scores sum to one with background") {
        std::mt19937_64 rng(9);
        auto planes = random_tensor<double>(Shape{3, 4, 4}, rng, 0, 1);
        auto agg = aggregate_objects(tape.constant(planes)).value();
        for (std::size_t u = 0; u < 16; ++u) {
            double bg = 1;
            double total = 0;
            for (std::size_t i = 0; i < 3; ++i) {
                bg *= 1 - planes[i * 16 + u];
                total += agg[i * 16 + u];
            }
            double denom = bg;
            for (std::size_t i = 0; i < 3; ++i) denom += planes[i * 16 + u];
            CHECK(total + bg / denom == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("seg loss through the network matches finite differences (64-bit)") {
    for (const auto& c : cvos::testing::gradcheck_cases(2)) {
        auto r = cvos::testing::run_gradcheck(c, 1e-4);
        INFO("seed " << c.seed << " worst tensor " << r.worst_tensor);
        CHECK(r.mask_error < 1e-4);
        CHECK(r.weight_error < 1e-4);
        CHECK(r.skipped * 20 < r.checked);
    }
}

TEST_CASE("branch pattern tracks relu sides") {
    Tape<double> a;
    ad::relu(a.constant(Tensor<double>(Shape{2}, {-1.0, 2.0})));
    Tape<double> b;
    ad::relu(b.constant(Tensor<double>(Shape{2}, {1.0, 2.0})));
    CHECK(branch_pattern(a) != branch_pattern(b));
    CHECK(branch_pattern(a) == std::vector<std::uint8_t>{0, 1});
}

TEST_CASE("checkpoint round trip is bit exact") {
    ModelConfig cfg;
    cfg.height = 32;
    cfg.width = 48;
    auto w = init_weights<float>(cfg, 11);
    auto path = std::filesystem::temp_directory_path() / "cvos_test_checkpoint.bin";
    save_checkpoint(path, cfg, w);
    auto [cfg2, w2] = load_checkpoint(path);
    CHECK(cfg2 == cfg);
    CHECK(w2 == w);
    save_checkpoint(path.string() + ".2", cfg2, w2);
    std::ifstream a(path, std::ios::binary), b(path.string() + ".2", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
    CHECK(sa.substr(0, 4) == "CVOS");
    {
        std::ofstream bad(path, std::ios::binary);
        bad << "NOPE";
    }
    CHECK_THROWS(load_checkpoint(path));
    {
        std::ofstream trunc(path, std::ios::binary);
        trunc << sa.substr(0, sa.size() - 3);
    }
    CHECK_THROWS(load_checkpoint(path));
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".2");
}

TEST_CASE("weights validation and init scaling") {
    auto cfg = small_config();
    auto w = init_weights<float>(cfg, 12);
    CHECK_NOTHROW(validate_weights(cfg, w));
    for (const auto& l : layer_layout(cfg)) {
        const double a = std::sqrt(6.0 / double(l.in_channels * l.kernel * l.kernel));
        for (float v : w.get(l.name + ".weight").data) CHECK(std::abs(v) <= a);
    }
    CHECK(init_weights<float>(cfg, 12) == w);
    CHECK(fingerprint(init_weights<float>(cfg, 13)) != fingerprint(w));
    auto broken = w;
    broken.get("query.conv1.bias")[0] = std::nanf("");
    CHECK_THROWS(validate_weights(cfg, broken));
    ModelConfig odd = cfg;
    odd.height = 18;
    CHECK_THROWS(odd.validate());
}
