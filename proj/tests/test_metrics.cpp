#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "cvos/metrics.hpp"
#include "doctest.h"
#include "json.hpp"
#include "metric_oracles.hpp"

using namespace cvos;

using namespace cvos::testing;

TEST_CASE("jaccard trivial cases") {
    auto a = rect(8, 8, 1, 1, 3, 3);
    CHECK(jaccard(a, a, 1) == 1.0);
    CHECK(jaccard(a, rect(8, 8, 5, 5, 2, 2), 1) == 0.0);
    CHECK(jaccard(LabelMap(8, 8), LabelMap(8, 8), 1) == 1.0);
    CHECK_THROWS_AS(jaccard(a, a, 0), std::invalid_argument);
    CHECK_THROWS_AS(jaccard(a, a, 3, 2), std::invalid_argument);
    CHECK_THROWS_AS(jaccard(a, LabelMap(4, 4), 1), std::invalid_argument);
}

TEST_CASE("jaccard equals the pixel-count oracle on random 16x16 masks") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 100; ++i) {
        auto a = random_labels(16, 16, rng, 2), b = random_labels(16, 16, rng, 2);
        for (std::uint8_t id : {1, 2}) {
            CHECK(jaccard(a, b, id) == oracle_jaccard(a, b, id));
            CHECK(jaccard(a, b, id) == jaccard(b, a, id));
        }
    }
}

TEST_CASE("boundary map of a filled rectangle is its outline") {
    auto m = rect(6, 6, 1, 1, 4, 4);
    auto b = boundary_map(m, 1);
    std::size_t n = 0;
    for (auto v : b) n += v;
    CHECK(n == 12);
    CHECK(b[2 * 6 + 2] == 0);
    // object touching the border keeps its border pixels
    auto full = rect(3, 3, 0, 0, 3, 3);
    auto fb = boundary_map(full, 1);
    CHECK(std::count(fb.begin(), fb.end(), 1) == 8);
}

TEST_CASE("boundary_f decision cases") {
    auto a = rect(10, 10, 2, 2, 4, 4);
    CHECK(boundary_f(a, a, 1, 1) == 1.0);
    CHECK(boundary_f(LabelMap(10, 10), LabelMap(10, 10), 1, 1) == 1.0);
    CHECK(boundary_f(a, LabelMap(10, 10), 1, 1) == 0.0);
    CHECK(boundary_f(LabelMap(10, 10), a, 1, 1) == 0.0);
    CHECK_THROWS_AS(boundary_f(a, a, 1, -1), std::invalid_argument);
    CHECK(default_boundary_tolerance(64, 64) == 1.0);
    CHECK(default_boundary_tolerance(480, 854) == 7.0);
    CHECK(default_boundary_tolerance(240, 427) == 4.0);
}

TEST_CASE("shifted square lowers precision and recall, matching the oracle") {
    for (double r : {1.0, 2.0}) {
        const std::size_t shift = static_cast<std::size_t>(2 * r + 2);
        auto gt = rect(24, 24, 4, 4, 8, 8);
        auto pred = rect(24, 24, 4, 4 + shift, 8, 8);
        const double f = boundary_f(pred, gt, 1, r);
        CHECK(f < 1.0);
        CHECK(f > 0.0);
        CHECK(std::abs(f - oracle_f(pred, gt, 1, r)) <= 1e-9);
    }
}

TEST_CASE("boundary_f equals the exhaustive oracle on all 3x3 mask pairs") {
    for (unsigned a = 0; a < 512; ++a) {
        LabelMap pa(3, 3);
        for (int k = 0; k < 9; ++k) pa.data[k] = (a >> k) & 1u;
        for (unsigned b = 0; b < 512; b += 7) {
            LabelMap pb(3, 3);
            for (int k = 0; k < 9; ++k) pb.data[k] = (b >> k) & 1u;
            for (double r : {0.0, 1.0, 1.5}) {
                const double f = boundary_f(pa, pb, 1, r);
                REQUIRE(std::abs(f - oracle_f(pa, pb, 1, r)) <= 1e-9);
            }
        }
    }
}

TEST_CASE("boundary_f equals the exhaustive oracle on shape fixtures up to 12x12") {
    std::mt19937_64 rng(2);
    for (std::size_t n : {4, 7, 9, 12}) {
        auto fx = fixtures(n, n, rng);
        for (const auto& a : fx) {
            for (const auto& b : fx) {
                for (double r : {0.0, 1.0, 2.0, 3.0}) {
                    const double f = boundary_f(a, b, 1, r);
                    REQUIRE(std::abs(f - oracle_f(a, b, 1, r)) <= 1e-9);
                    REQUIRE(f == boundary_f(b, a, 1, r));
                }
            }
        }
    }
}

TEST_CASE("scores are invariant to object relabeling") {
    std::mt19937_64 rng(3);
    auto a = random_labels(12, 12, rng, 2), b = random_labels(12, 12, rng, 2);
    auto swap_ids = [](LabelMap m) {
        for (auto& v : m.data) v = v == 1 ? 2 : (v == 2 ? 1 : 0);
        return m;
    };
    CHECK(jaccard(a, b, 1) == jaccard(swap_ids(a), swap_ids(b), 2));
    CHECK(boundary_f(a, b, 1, 1) == boundary_f(swap_ids(a), swap_ids(b), 2, 1));
}

namespace {

VideoSequence toy_sequence(std::vector<LabelMap> masks, std::size_t objects) {
    VideoSequence seq;
    seq.name = "toy";
    seq.object_count = objects;
    for (auto& m : masks) {
        seq.frames.emplace_back(m.height, m.width);
        seq.masks.emplace_back(std::move(m));
    }
    return seq;
}

}  // namespace

TEST_CASE("evaluate: perfect, empty and hand-computed cases") {
    auto gt = toy_sequence({rect(6, 6, 0, 0, 2, 2), rect(6, 6, 1, 1, 2, 2)}, 1);
    {
        PredictedSequence p{"toy", {*gt.masks[0], *gt.masks[1]}, 0.5};
        auto r = evaluate({p}, {gt});
        CHECK(r.j == 1.0);
        CHECK(r.f == 1.0);
        CHECK(r.jf == 1.0);
        CHECK(r.fps == doctest::Approx(4.0));
    }
    {
        PredictedSequence p{"toy", {*gt.masks[0], LabelMap(6, 6)}, 0};
        auto r = evaluate({p}, {gt});
        CHECK(r.j == 0.0);
    }
    {
        // frame 1 is never scored; frame 2 shifted by 2 columns:
        // J = 0, boundary precision = recall = 1/2 at r = 1
        PredictedSequence p{"toy", {LabelMap(6, 6), rect(6, 6, 1, 3, 2, 2)}, 0};
        auto r = evaluate({p}, {gt});
        CHECK(r.sequences.size() == 1);
        CHECK(r.j == 0.0);
        CHECK(r.f == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(r.jf == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("evaluate averages frames, then objects, then sequences") {
    auto m2 = rect(8, 8, 0, 0, 2, 2, 1);
    for (std::size_t y = 4; y < 6; ++y) {
        for (std::size_t x = 4; x < 8; ++x) m2.at(y, x) = 2;
    }
    auto gt = toy_sequence({m2, m2, m2}, 2);
    auto wrong2 = m2;
    for (auto& v : wrong2.data) {
        if (v == 2) v = 0;
    }
    PredictedSequence p{"toy", {m2, m2, wrong2}, 0};
    auto s = evaluate_sequence(p, gt);
    REQUIRE(s.objects.size() == 2);
    CHECK(s.objects[0].j == 1.0);
    CHECK(s.objects[1].j == 0.5);
    CHECK(s.j == 0.75);
    CHECK(s.jf == (s.j + s.f) / 2);

    auto gt_b = gt;
    gt_b.name = "other";
    PredictedSequence pb{"other", {m2, m2, m2}, 0};
    auto r = evaluate({p, pb}, {gt, gt_b});
    CHECK(r.j == (0.75 + 1.0) / 2);
}

TEST_CASE("evaluate skips sequences without ground truth") {
    auto gt = toy_sequence({rect(6, 6, 0, 0, 2, 2), rect(6, 6, 1, 1, 2, 2)}, 1);
    auto sparse = gt;
    sparse.name = "sparse";
    sparse.masks[1].reset();
    PredictedSequence a{"toy", {*gt.masks[0], *gt.masks[1]}, 0};
    PredictedSequence b{"sparse", {*gt.masks[0], *gt.masks[1]}, 0};
    auto r = evaluate({a, b}, {gt, sparse});
    CHECK(r.sequences.size() == 1);
    REQUIRE(r.skipped.size() == 1);
    CHECK(r.skipped[0] == "sparse");
    CHECK_THROWS(evaluate_sequence(b, sparse));
}

TEST_CASE("report files") {
    auto gt = toy_sequence({rect(6, 6, 0, 0, 2, 2), rect(6, 6, 1, 1, 2, 2)}, 1);
    PredictedSequence p{"toy", {*gt.masks[0], *gt.masks[1]}, 1.0};
    auto r = evaluate({p}, {gt});
    auto dir = std::filesystem::temp_directory_path() / "cvos_test_metrics";
    std::filesystem::create_directories(dir);
    write_eval_csv(r, dir / "eval.csv");
    write_eval_json(r, dir / "eval.json");
    std::ifstream csv(dir / "eval.csv");
    std::string header, row;
    std::getline(csv, header);
    std::getline(csv, row);
    CHECK(header == "sequence,object,J,F,J&F");
    CHECK(row == "toy,1,1,1,1");
    std::ifstream js(dir / "eval.json");
    auto j = nlohmann::json::parse(js);
    CHECK(j["J&F"].get<double>() == 1.0);
    CHECK(j["sequences"][0]["objects"][0]["id"].get<int>() == 1);
}
