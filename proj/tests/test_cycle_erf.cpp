#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "cvos/cycle_erf.hpp"
#include "cvos/image_io.hpp"
#include "doctest.h"

using namespace cvos;

namespace {

struct Fixture {
    ModelConfig model;
    Weights<float> weights;
    VideoSequence video;
    Tensor<float> xl, x1, yl, y1;

    Fixture() {
        model.height = model.width = 24;
        model.feature_channels = 6;
        model.key_channels = 4;
        model.value_channels = 6;
        weights = init_weights<float>(model, 5);
        SynthSpec s;
        s.height = s.width = 24;
        s.length = 8;
        s.min_size = 5.0;
        s.max_size = 7.0;
        s.max_speed = 2.0;
        s.seed = 21;
        video = generate_synthetic(s, "erf");
        xl = frame_tensor<float>(video.frames[4]);
        x1 = frame_tensor<float>(video.frames[0]);
        yl = object_planes<float>(*video.masks[4], video.object_count);
        y1 = object_planes<float>(*video.masks[0], video.object_count);
    }
};

}  // namespace

TEST_CASE("M = 0 gives an all-zero heatmap") {
    Fixture f;
    ErfConfig c;
    c.iterations = 0;
    const auto r = compute_cycle_erf(f.model, f.weights, f.xl, f.x1, f.y1, c);
    CHECK(r.heatmap.shape == f.y1.shape);
    for (float v : r.heatmap.data) CHECK(v == 0.0f);
    for (const auto& l : r.losses) CHECK(l.empty());
}

TEST_CASE("heatmap is nonnegative, shaped like the frame and leaves weights alone") {
    Fixture f;
    const auto before = fingerprint(f.weights);
    ErfConfig c;
    c.iterations = 5;
    c.alpha = 20.0;
    const auto r = compute_cycle_erf(f.model, f.weights, f.xl, f.x1, f.y1, c);
    CHECK(r.heatmap.shape == Shape{f.video.object_count, 24, 24});
    bool any = false;
    for (float v : r.heatmap.data) {
        CHECK(v >= 0.0f);
        any = any || v > 0.0f;
    }
    CHECK(any);
    REQUIRE(r.losses.size() == f.video.object_count);
    for (const auto& l : r.losses) CHECK(l.size() == 5);
    CHECK_FALSE(r.stopped_early);
    CHECK(fingerprint(f.weights) == before);
}

TEST_CASE("iterations are unclamped") {
    Fixture f;
    ErfConfig c;
    c.iterations = 1;
    c.alpha = 1e6;
    const auto r = compute_cycle_erf(f.model, f.weights, f.xl, f.x1, f.y1, c);
    float mx = 0.0f;
    for (float v : r.heatmap.data) mx = std::max(mx, v);
    CHECK(mx > 1.0f);
}

TEST_CASE("erf config validation") {
    Fixture f;
    ErfConfig c;
    c.alpha = -1.0;
    CHECK_THROWS_AS(compute_cycle_erf(f.model, f.weights, f.xl, f.x1, f.y1, c), std::invalid_argument);
    CHECK_THROWS_AS(compute_cycle_erf(f.model, f.weights, f.xl, f.x1, Tensor<float>(Shape{1, 8, 8}), ErfConfig{}),
                    std::invalid_argument);
}

TEST_CASE("partitions sum to the heatmap") {
    Fixture f;
    ErfConfig c;
    c.iterations = 3;
    c.alpha = 20.0;
    const auto erf = compute_cycle_erf(f.model, f.weights, f.xl, f.x1, f.y1, c).heatmap;
    const auto in = partition_erf(erf, f.yl, ErfPartition::In);
    const auto ex = partition_erf(erf, f.yl, ErfPartition::Ex);
    for (std::size_t u = 0; u < erf.size(); ++u) CHECK(in[u] + ex[u] == erf[u]);
    CHECK_THROWS_AS(partition_erf(erf, Tensor<float>(Shape{1, 24, 23}), ErfPartition::In), std::invalid_argument);
}

TEST_CASE("zero heatmap reconstructs like an empty reference in both modes") {
    Fixture f;
    const Tensor<float> zero(f.yl.shape);
    const auto in = partitioned_reconstruct(f.model, f.weights, f.xl, zero, f.yl, ErfPartition::In, f.x1);
    const auto ex = partitioned_reconstruct(f.model, f.weights, f.xl, zero, f.yl, ErfPartition::Ex, f.x1);
    Tape<float> tape;
    SegNet<float> net(f.model, f.weights, tape);
    const auto empty = net.segment({{tape.constant(f.xl), tape.constant(zero)}}, tape.constant(f.x1)).value();
    CHECK(in.data == empty.data);
    CHECK(ex.data == empty.data);
}

TEST_CASE("heatmap export: PGM plus float sidecar") {
    const auto dir = std::filesystem::temp_directory_path() / "cvos_test_erf";
    std::filesystem::remove_all(dir);
    Tensor<float> p(Shape{3, 4});
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = 0.5f * static_cast<float>(i) - 1.0f;
    p[5] = 1.0e-30f;
    write_heatmap(dir / "obj1", p);

    const auto g = read_pgm(dir / "obj1.pgm");
    CHECK(g.height == 3);
    CHECK(g.width == 4);
    CHECK(g.data[0] == 0);
    CHECK(g.data[11] == 255);
    CHECK(g.data[7] == std::lround(255.0 * 2.5 / 4.5));

    std::ifstream in(dir / "obj1.f32", std::ios::binary);
    const std::string raw{std::istreambuf_iterator<char>(in), {}};
    const std::string header = "CVOSF32 4 3\n";
    REQUIRE(raw.size() == header.size() + 4 * 12);
    CHECK(raw.substr(0, header.size()) == header);
    // 1.0f little-endian at index 4.
    CHECK(raw.substr(header.size() + 16, 4) == std::string("\x00\x00\x80\x3f", 4));

    const auto back = read_heatmap_f32(dir / "obj1.f32");
    CHECK(back.shape == Shape{3, 4});
    CHECK(back.data == p.data);

    write_heatmap(dir / "neg", Tensor<float>(Shape{2, 2}, -1.0f));
    for (auto v : read_pgm(dir / "neg.pgm").data) CHECK(v == 0);
}
