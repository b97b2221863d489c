#include "fssd/gcnn.hpp"
#include "fssd/shapegen.hpp"
#include "support/testutil.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace fssd;
using namespace fssd::gcnn;
using testutil::max_grad_rel_err;
using testutil::random_tensor;

namespace {

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(a.data()[static_cast<size_t>(i)]) -
                                         static_cast<double>(b.data()[static_cast<size_t>(i)])));
    return worst;
}

// expected transform of a group feature under input rot90: shift the group
// axis by one and rotate each spatial slice
template <class T>
Tensor<T> expected_rot(const Tensor<T>& y) {
    return rot90_hw(roll_group(y, 1), 1);
}

} // namespace

TEST_CASE("lift_conv with a rotation-symmetric kernel has identical slices", "[gcnn]") {
    Rng rng(1);
    auto x = random_tensor({1, 1, 6, 6}, rng, false);
    auto k = Tensor<double>::from({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    auto y = lift_conv(x, k, Tensor<double>(), 1);
    REQUIRE(y.shape() == Shape{1, 1, 4, 6, 6});
    for (int j = 1; j < 4; ++j) {
        auto s0 = slice(y, 2, 0, 1);
        auto sj = slice(y, 2, j, 1);
        CHECK(max_abs_diff(s0, sj) == 0.0);
    }
}

TEST_CASE("lift_conv satisfies the p4 equivariance law", "[gcnn]") {
    Rng rng(2);
    auto x = random_tensor({2, 3, 8, 8}, rng, false);
    auto k = random_tensor({4, 3, 3, 3}, rng, false);
    auto b = random_tensor({4}, rng, false);
    auto lhs = lift_conv(rot90_hw(x, 1), k, b, 1);
    auto rhs = expected_rot(lift_conv(x, k, b, 1));
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("lift_conv impulse response recovers the four rotated kernels", "[gcnn]") {
    std::vector<double> dv(49, 0.0);
    dv[3 * 7 + 3] = 1.0;
    auto x = Tensor<double>::from({1, 1, 7, 7}, std::move(dv));
    Rng rng(3);
    auto k = random_tensor({1, 1, 3, 3}, rng, false);
    auto y = lift_conv(x, k, Tensor<double>(), 1);
    for (int j = 0; j < 4; ++j) {
        auto rk = rot90_hw(k, j); // 1x1x3x3
        // cross-correlation shows the reflected kernel around the impulse
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const double got =
                    y.data()[static_cast<size_t>(((0 * 1 + 0) * 4 + j) * 49 + (3 + dy) * 7 + (3 + dx))];
                const double expect = rk.data()[static_cast<size_t>((1 - dy) * 3 + (1 - dx))];
                CHECK(got == Catch::Approx(expect).margin(1e-14));
            }
    }
}

TEST_CASE("group_conv with the identity kernel is the identity", "[gcnn]") {
    Rng rng(4);
    auto x = random_tensor({2, 3, 4, 5, 5}, rng, false);
    std::vector<double> kv(3 * 3 * 4, 0.0);
    for (int o = 0; o < 3; ++o) kv[static_cast<size_t>((o * 3 + o) * 4 + 0)] = 1.0; // slice e only
    auto k = Tensor<double>::from({3, 3, 4, 1, 1}, std::move(kv));
    auto y = group_conv(x, k, Tensor<double>(), 0);
    CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("lift then group conv is equivariant end to end", "[gcnn]") {
    Rng rng(5);
    auto x = random_tensor({1, 2, 8, 8}, rng, false);
    auto k1 = random_tensor({3, 2, 3, 3}, rng, false);
    auto k2 = random_tensor({4, 3, 4, 3, 3}, rng, false);
    auto b2 = random_tensor({4}, rng, false);
    auto net = [&](const Tensor<double>& in) {
        return group_conv(relu(lift_conv(in, k1, Tensor<double>(), 1)), k2, b2, 1);
    };
    auto lhs = net(rot90_hw(x, 1));
    auto rhs = expected_rot(net(x));
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("group_conv gradients match finite differences", "[gcnn]") {
    Rng rng(6);
    auto x = random_tensor({1, 2, 4, 5, 5}, rng);
    auto k = random_tensor({2, 2, 4, 3, 3}, rng);
    auto b = random_tensor({2}, rng);
    const double err = max_grad_rel_err(
        {x, k, b},
        [&] {
            auto y = group_conv(x, k, b, 1);
            return mean(mul(y, y));
        },
        12);
    CHECK(err < 1e-5);
}

TEST_CASE("p4 kernel expansion gradients", "[gcnn]") {
    Rng rng(7);
    auto k = random_tensor({2, 2, 3, 3}, rng);
    const double err = max_grad_rel_err({k}, [&] {
        auto e = p4_lift_kernel(k);
        return sum(mul(e, e));
    });
    CHECK(err < 1e-6);
    auto kg = random_tensor({2, 2, 4, 3, 3}, rng);
    const double err2 = max_grad_rel_err({kg}, [&] {
        auto e = p4_group_kernel(kg);
        return sum(mul(e, e));
    });
    CHECK(err2 < 1e-6);
}

TEST_CASE("backbone embedding is exactly rot90 invariant", "[gcnn]") {
    BackboneConfig cfg;
    Rng rng(8);
    Backbone<float> bb(cfg, rng);
    Rng drng(9);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<float> data(1024);
        for (auto& v : data) v = static_cast<float>(drng.uniform());
        auto x = Tensor<float>::from({1, 1, 32, 32}, std::move(data));
        NoGradGuard ng;
        auto e0 = bb.embed(x);
        auto e1 = bb.embed(rot90_hw(x, 1));
        REQUIRE(e0.shape() == Shape{1, 64});
        CHECK(max_abs_diff(e0, e1) < 1e-5);
    }

    // f64 backbone: invariance down to accumulation noise
    Backbone<double> bb64(cfg, rng);
    std::vector<double> data(1024);
    for (auto& v : data) v = drng.uniform();
    auto x = Tensor<double>::from({1, 1, 32, 32}, std::move(data));
    NoGradGuard ng;
    CHECK(max_abs_diff(bb64.embed(x), bb64.embed(rot90_hw(x, 2))) < 1e-10);
}

TEST_CASE("embed(x + 0) is bit-identical to embed(x)", "[gcnn]") {
    BackboneConfig cfg;
    Rng rng(10);
    Backbone<float> bb(cfg, rng);
    auto s = shapegen::render_sample(8, 5, 32, 32);
    std::vector<float> img(s.image.begin(), s.image.end());
    auto x = Tensor<float>::from({1, 1, 32, 32}, img);
    NoGradGuard ng;
    auto a = bb.embed(x);
    auto b = bb.embed(add(x, 0.0f));
    for (int64_t i = 0; i < a.numel(); ++i)
        CHECK(a.data()[static_cast<size_t>(i)] == b.data()[static_cast<size_t>(i)]);
}

TEST_CASE("distinct samples embed with cosine below one", "[gcnn]") {
    BackboneConfig cfg;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Backbone<float> bb(cfg, rng);
        auto s1 = shapegen::render_sample(8, 100 + seed, 32, 32);
        auto s2 = shapegen::render_sample(4, 200 + seed, 32, 32);
        auto to_tensor = [](const shapegen::ShapeSample& s) {
            std::vector<float> img(s.image.begin(), s.image.end());
            return Tensor<float>::from({1, 1, 32, 32}, std::move(img));
        };
        NoGradGuard ng;
        auto e1 = bb.embed(to_tensor(s1));
        auto e2 = bb.embed(to_tensor(s2));
        double dot = 0, n1 = 0, n2 = 0;
        for (int i = 0; i < 64; ++i) {
            dot += static_cast<double>(e1.data()[static_cast<size_t>(i)]) * e2.data()[static_cast<size_t>(i)];
            n1 += static_cast<double>(e1.data()[static_cast<size_t>(i)]) * e1.data()[static_cast<size_t>(i)];
            n2 += static_cast<double>(e2.data()[static_cast<size_t>(i)]) * e2.data()[static_cast<size_t>(i)];
        }
        const double cosine = dot / std::sqrt(n1 * n2);
        CHECK(cosine < 1.0 - 1e-6);
    }
}

TEST_CASE("p4 backbone has at most the parameters of the 4x plain variant", "[gcnn]") {
    BackboneConfig cfg;
    Rng rng(11);
    Backbone<float> bb(cfg, rng);
    CHECK(bb.param_count() <= bb.plain_4x_param_count());
    CHECK(bb.param_count() > 0);
}
