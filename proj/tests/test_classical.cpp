#include "fssd/classical.hpp"
#include "fssd/shapegen.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

using namespace fssd;
using namespace fssd::classical;
using fssd::shapegen::ShapeParams;
using fssd::shapegen::render_from_params;
using fssd::shapegen::render_sample;

namespace {

std::vector<uint8_t> rot90_mask(const std::vector<uint8_t>& m, int S) {
    std::vector<uint8_t> out(m.size());
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j)
            out[static_cast<size_t>(i) * S + j] = m[static_cast<size_t>(j) * S + (S - 1 - i)];
    return out;
}

// independent oracle: naive double-precision central moment summation
double phi1_naive(const std::vector<uint8_t>& mask, int H, int W) {
    double m00 = 0, m10 = 0, m01 = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (mask[static_cast<size_t>(y) * W + x]) {
                m00 += 1;
                m10 += x;
                m01 += y;
            }
    const double cx = m10 / m00, cy = m01 / m00;
    double mu20 = 0, mu02 = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (mask[static_cast<size_t>(y) * W + x]) {
                mu20 += (x - cx) * (x - cx);
                mu02 += (y - cy) * (y - cy);
            }
    return (mu20 + mu02) / (m00 * m00);
}

double brute_force_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double total = 0;
        for (int i = 0; i < n; ++i) total += cost[static_cast<size_t>(i)][static_cast<size_t>(perm[static_cast<size_t>(i)])];
        best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

std::vector<uint8_t> filled_square(int S, int y0, int x0, int side) {
    std::vector<uint8_t> m(static_cast<size_t>(S) * S, 0);
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) m[static_cast<size_t>(y) * S + x] = 1;
    return m;
}

} // namespace

TEST_CASE("hu phi1 of a solid square approaches 1/6", "[classical]") {
    for (int side : {16, 20, 24}) {
        const auto m = filled_square(32, 4, 4, side);
        const auto phi = hu_raw(m, 32, 32);
        CHECK(std::abs(phi[0] - 1.0 / 6.0) / (1.0 / 6.0) < 0.02);
        // independent oracle agrees closely
        CHECK(phi[0] == Catch::Approx(phi1_naive(m, 32, 32)).epsilon(1e-9));
    }
}

TEST_CASE("hu invariants are exactly invariant to 90-degree rotation", "[classical]") {
    for (int cid : {3, 13, 19, 22}) {
        const auto s = render_sample(cid, 555 + static_cast<uint64_t>(cid), 32, 32);
        const auto a = hu_moments(s.mask, 32, 32);
        const auto b = hu_moments(rot90_mask(s.mask, 32), 32, 32);
        for (int i = 0; i < 7; ++i) CHECK(a.vec[static_cast<size_t>(i)] == b.vec[static_cast<size_t>(i)]);
    }
}

TEST_CASE("hu invariants are exactly invariant to integer translation", "[classical]") {
    const auto s = render_sample(14, 99, 32, 32);
    // find the mask bbox, then shift by (+3,+5) if it stays inside
    int miny = 32, maxy = -1, minx = 32, maxx = -1;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (s.mask[static_cast<size_t>(y) * 32 + x]) {
                miny = std::min(miny, y);
                maxy = std::max(maxy, y);
                minx = std::min(minx, x);
                maxx = std::max(maxx, x);
            }
    const int dy = maxy + 5 < 32 ? 5 : -(miny >= 5 ? 5 : 0);
    const int dx = maxx + 3 < 32 ? 3 : -(minx >= 3 ? 3 : 0);
    std::vector<uint8_t> shifted(s.mask.size(), 0);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (s.mask[static_cast<size_t>(y) * 32 + x])
                shifted[static_cast<size_t>(y + dy) * 32 + (x + dx)] = 1;
    const auto a = hu_moments(s.mask, 32, 32);
    const auto b = hu_moments(shifted, 32, 32);
    for (int i = 0; i < 7; ++i) CHECK(a.vec[static_cast<size_t>(i)] == b.vec[static_cast<size_t>(i)]);
}

TEST_CASE("hu drift under arbitrary re-rendered rotation is small", "[classical]") {
    // the L shape has no rotational or mirror symmetry, so all leading
    // invariants stay well away from zero
    ShapeParams p;
    p.cx = 16;
    p.cy = 16;
    p.scale = 24;
    p.rotation = 0.2;
    p.fg = 1;
    p.bg = 0;
    p.a = 0.5; // limb thickness
    const auto a = render_from_params(21, p, 32, 32);
    ShapeParams q = p;
    q.rotation = p.rotation + 0.9;
    const auto b = render_from_params(21, q, 32, 32);
    const auto da = hu_moments(a.mask, 32, 32);
    const auto db = hu_moments(b.mask, 32, 32);
    // log-domain drift below 5% for the leading invariants
    for (int i = 0; i < 4; ++i) {
        const double denom = std::max(std::abs(da.vec[static_cast<size_t>(i)]), 1e-3);
        CHECK(std::abs(da.vec[static_cast<size_t>(i)] - db.vec[static_cast<size_t>(i)]) / denom < 0.05);
    }
    CHECK_THROWS_AS(hu_moments(std::vector<uint8_t>(1024, 0), 32, 32), DescriptorError);
}

TEST_CASE("fourier descriptor of a circle is a single harmonic", "[classical]") {
    ShapeParams p;
    p.cx = 16;
    p.cy = 16;
    p.scale = 24;
    p.rotation = 0;
    p.fg = 1;
    p.bg = 0;
    const auto s = render_from_params(8, p, 32, 32);
    const auto d = fourier_descriptor(s.mask, 32, 32);
    REQUIRE(d.vec.size() == 16);
    CHECK(d.vec[0] == 1.0);
    for (size_t i = 1; i < d.vec.size(); ++i) CHECK(d.vec[i] < 0.05);
}

TEST_CASE("fourier descriptor scale and rotation invariance", "[classical]") {
    ShapeParams p;
    p.cx = 16;
    p.cy = 16;
    p.scale = 12;
    p.rotation = 0.4;
    p.fg = 1;
    p.bg = 0;
    p.a = 0.3; // trapezoid top
    const auto small = render_from_params(23, p, 32, 32);
    ShapeParams q = p;
    q.scale = 24;
    const auto big = render_from_params(23, q, 32, 32);
    const auto ds = fourier_descriptor(small.mask, 32, 32);
    const auto db = fourier_descriptor(big.mask, 32, 32);
    for (size_t i = 0; i < 16; ++i) CHECK(std::abs(ds.vec[i] - db.vec[i]) < 0.05);

    const auto dr = fourier_descriptor(rot90_mask(big.mask, 32), 32, 32);
    for (size_t i = 0; i < 16; ++i) CHECK(std::abs(db.vec[i] - dr.vec[i]) < 1e-6);
}

TEST_CASE("fourier magnitudes invariant to cyclic start-point shift", "[classical]") {
    const auto s = render_sample(13, 321, 32, 32);
    const auto trace = trace_boundary(s.mask, 32, 32);
    auto pts = resample_boundary(trace, 128);
    const auto base = fourier_magnitudes(pts, 16);
    for (int shift : {1, 17, 63}) {
        std::vector<std::complex<double>> shifted(pts.size());
        for (size_t i = 0; i < pts.size(); ++i) shifted[i] = pts[(i + static_cast<size_t>(shift)) % pts.size()];
        const auto m = fourier_magnitudes(shifted, 16);
        for (size_t i = 0; i < m.size(); ++i) CHECK(std::abs(m[i] - base[i]) < 1e-9);
    }
    CHECK_THROWS_AS(fourier_descriptor(filled_square(32, 10, 10, 2), 32, 32), DescriptorError);
}

TEST_CASE("shape context histograms sum to P-1", "[classical]") {
    const auto s = render_sample(5, 777, 32, 32);
    const auto d = shape_context(s.mask, 32, 32);
    REQUIRE(d.points >= 8);
    for (const auto& h : d.hists) {
        double sum = 0;
        for (double v : h) sum += v;
        CHECK(sum == Catch::Approx(static_cast<double>(d.points - 1)));
    }
}

TEST_CASE("sc_distance identity and symmetry", "[classical]") {
    const auto a = render_sample(6, 12, 32, 32);
    const auto b = render_sample(16, 13, 32, 32);
    const auto da = shape_context(a.mask, 32, 32);
    const auto db = shape_context(b.mask, 32, 32);
    CHECK(sc_distance(da, da) == 0.0);
    CHECK(std::abs(sc_distance(da, db) - sc_distance(db, da)) < 1e-9);
    CHECK(sc_distance(da, db) > 0.0);
}

TEST_CASE("hungarian equals brute force on the worked example", "[classical]") {
    const std::vector<std::vector<double>> cost = {{1, 2, 3}, {2, 4, 6}, {3, 6, 9}};
    CHECK(hungarian_min_cost(cost) == 10.0);
    CHECK(brute_force_assignment(cost) == 10.0);
}

TEST_CASE("hungarian equals brute force for all P <= 7, 20 trials", "[classical]") {
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + rng.uniform_int(6); // 2..7
        std::vector<std::vector<double>> cost(static_cast<size_t>(n),
                                              std::vector<double>(static_cast<size_t>(n)));
        for (auto& row : cost)
            for (auto& v : row) v = rng.uniform(0.0, 10.0);
        const double h = hungarian_min_cost(cost);
        const double b = brute_force_assignment(cost);
        CHECK(h == Catch::Approx(b).margin(1e-9));
    }
}

TEST_CASE("episode eval: identical query maps to its class", "[classical]") {
    using shapegen::DatasetSplit;
    using shapegen::Episode;
    std::vector<shapegen::ShapeSample> storage;
    storage.push_back(render_sample(8, 1, 32, 32));  // circle
    storage.push_back(render_sample(4, 2, 32, 32));  // square
    Episode ep;
    ep.ways = 2;
    ep.shots = 1;
    ep.queries = 1;
    ep.support = {&storage[0], &storage[1]};
    ep.query = {&storage[0], &storage[1]}; // deliberately identical to support
    ep.class_map = {8, 4};
    for (auto kind : {Descriptor::Kind::hu, Descriptor::Kind::fourier,
                      Descriptor::Kind::shape_context}) {
        const auto r = classical_episode_eval(kind, ep);
        CHECK(r.predicted == std::vector<int>{0, 1});
        CHECK(r.accuracy == 1.0);
    }
}

TEST_CASE("hu separates circles from squares at 5 shots", "[classical]") {
    using shapegen::Episode;
    std::vector<shapegen::ShapeSample> storage;
    for (int i = 0; i < 15; ++i) storage.push_back(render_sample(8, 100 + static_cast<uint64_t>(i), 32, 32));
    for (int i = 0; i < 15; ++i) storage.push_back(render_sample(4, 200 + static_cast<uint64_t>(i), 32, 32));
    Episode ep;
    ep.ways = 2;
    ep.shots = 5;
    ep.queries = 10;
    for (int i = 0; i < 5; ++i) ep.support.push_back(&storage[static_cast<size_t>(i)]);
    for (int i = 0; i < 5; ++i) ep.support.push_back(&storage[static_cast<size_t>(15 + i)]);
    for (int i = 5; i < 15; ++i) ep.query.push_back(&storage[static_cast<size_t>(i)]);
    for (int i = 5; i < 15; ++i) ep.query.push_back(&storage[static_cast<size_t>(15 + i)]);
    ep.class_map = {8, 4};
    const auto r = classical_episode_eval(Descriptor::Kind::hu, ep);
    CHECK(r.accuracy >= 0.9);
    // accuracy equals the mean of per-query correctness by construction
    int correct = 0;
    for (size_t i = 0; i < r.predicted.size(); ++i)
        correct += r.predicted[i] == (i < 10 ? 0 : 1);
    CHECK(r.accuracy == Catch::Approx(static_cast<double>(correct) / 20.0));
}
