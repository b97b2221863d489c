#include "fssd/model.hpp"
#include "support/testutil.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace fssd;
using namespace fssd::model;
using testutil::max_grad_rel_err;
using testutil::random_tensor;

namespace {

void set_identity(Tensor<double>& w) {
    auto d = w.raw_data();
    std::fill(d.begin(), d.end(), 0.0);
    const int n = w.shape()[0];
    for (int i = 0; i < n; ++i) d[static_cast<size_t>(i) * w.shape()[1] + i] = 1.0;
}

void set_zero(Tensor<double>& w) {
    auto d = w.raw_data();
    std::fill(d.begin(), d.end(), 0.0);
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(a.data()[static_cast<size_t>(i)]) -
                                         static_cast<double>(b.data()[static_cast<size_t>(i)])));
    return worst;
}

} // namespace

TEST_CASE("attend_single with a single primitive", "[model]") {
    Rng rng(1);
    auto q = random_tensor({3, 4}, rng, false);
    auto phi = random_tensor({1, 4}, rng, false);
    auto r = attend_single(q, phi);
    REQUIRE(r.weights.shape() == Shape{3, 1});
    for (auto w : r.weights.data()) CHECK(w == 1.0);
    for (int b = 0; b < 3; ++b)
        for (int k = 0; k < 4; ++k)
            CHECK(r.output.data()[static_cast<size_t>(b) * 4 + k] ==
                  Catch::Approx(phi.data()[static_cast<size_t>(k)]));
}

TEST_CASE("attend_single sharpens to a one-hot on aligned queries", "[model]") {
    // orthonormal primitives: the first four basis vectors of R^8
    const int d = 8, n = 4;
    std::vector<double> pv(static_cast<size_t>(n) * d, 0.0);
    for (int i = 0; i < n; ++i) pv[static_cast<size_t>(i) * d + i] = 1.0;
    auto phi = Tensor<double>::from({n, d}, std::move(pv));
    std::vector<double> qv(static_cast<size_t>(d), 0.0);
    qv[2] = 50.0; // beta * phi_2
    auto q = Tensor<double>::from({1, d}, std::move(qv));
    auto r = attend_single(q, phi);
    CHECK(r.weights.data()[2] > 1.0 - 1e-3);
    for (int k = 0; k < d; ++k)
        CHECK(std::abs(r.output.data()[static_cast<size_t>(k)] -
                       phi.data()[static_cast<size_t>(2) * d + k]) < 1e-3);
    double sum = 0;
    for (auto w : r.weights.data()) sum += w;
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("h_mca with one identity head reduces to attend_single", "[model]") {
    const int d = 6;
    Rng rng(3);
    HMca<double> h(d, 1, rng);
    set_identity(h.q_proj[0].w);
    set_identity(h.k_proj[0].w);
    set_identity(h.out_proj.w);
    set_zero(h.out_proj.b);
    auto q = random_tensor({4, d}, rng, false);
    auto phi = random_tensor({5, d}, rng, false);
    auto a = attend_single(q, phi);
    auto b = h(q, phi);
    CHECK(max_abs_diff(a.output, b.output) < 1e-12);
    CHECK(max_abs_diff(a.weights, b.weights) < 1e-12);
}

TEST_CASE("h_mca effective weights are a mean of softmax rows", "[model]") {
    const int d = 8;
    Rng rng(4);
    HMca<double> h(d, 4, rng);
    auto q = random_tensor({6, d}, rng, false);
    auto phi = random_tensor({10, d}, rng, false);
    auto r = h(q, phi);
    REQUIRE(r.weights.shape() == Shape{6, 10});
    for (int b = 0; b < 6; ++b) {
        double sum = 0;
        for (int j = 0; j < 10; ++j) sum += r.weights.data()[static_cast<size_t>(b) * 10 + j];
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
    // pre-projection output equals effective_weights * phi
    auto recomputed = matmul(r.weights, phi);
    CHECK(max_abs_diff(recomputed, r.pre_projection) < 1e-6);
}

TEST_CASE("s_mca with one identity head reduces to attend_single", "[model]") {
    const int d = 6;
    Rng rng(5);
    SMca<double> s(d, 1, rng);
    set_identity(s.q_proj[0].w);
    set_identity(s.k_proj[0].w);
    set_identity(s.v_proj[0].w);
    set_identity(s.out_proj.w);
    set_zero(s.out_proj.b);
    auto q = random_tensor({4, d}, rng, false);
    auto phi = random_tensor({5, d}, rng, false);
    auto a = attend_single(q, phi);
    auto b = s(q, phi);
    CHECK(max_abs_diff(a.output, b.output) < 1e-12);
}

TEST_CASE("s_mca shapes and heads-divide check", "[model]") {
    Rng rng(6);
    SMca<double> s(64, 4, rng);
    auto q = random_tensor({3, 64}, rng, false);
    auto phi = random_tensor({60, 64}, rng, false);
    CHECK(s(q, phi).output.shape() == Shape{3, 64});
    CHECK_THROWS_AS(SMca<double>(6, 4, rng), ShapeError);
}

TEST_CASE("s_mca gradient with respect to the bank", "[model]") {
    const int d = 8;
    Rng rng(7);
    SMca<double> s(d, 2, rng);
    auto q = random_tensor({3, d}, rng, false);
    auto phi = random_tensor({5, d}, rng, true);
    const double err = max_grad_rel_err({phi}, [&] {
        auto r = s(q, phi);
        return mean(mul(r.output, r.output));
    });
    CHECK(err < 1e-4);
}

TEST_CASE("dual attention identity Q' = Q'_H + Q'_S", "[model]") {
    ModelConfig cfg;
    cfg.backbone.embed_dim = 16;
    cfg.primitives = 6;
    cfg.heads = 2;
    Rng rng(8);
    FssdModel<double> m(cfg, rng);
    auto q = random_tensor({5, 16}, rng, false);
    auto r = m.reconstruct(q);
    REQUIRE(r.q_h.defined());
    REQUIRE(r.q_s.defined());
    for (int64_t i = 0; i < r.q_dual.numel(); ++i)
        CHECK(r.q_dual.data()[static_cast<size_t>(i)] ==
              r.q_h.data()[static_cast<size_t>(i)] + r.q_s.data()[static_cast<size_t>(i)]);

    // zeroing the S-MCA output projection leaves Q' == Q'_H
    set_zero(m.smca.out_proj.w);
    set_zero(m.smca.out_proj.b);
    auto r2 = m.reconstruct(q);
    CHECK(max_abs_diff(r2.q_dual, r2.q_h) == 0.0);
}

TEST_CASE("both attention paths read the same primitive bank", "[model]") {
    ModelConfig cfg;
    cfg.backbone.embed_dim = 16;
    cfg.primitives = 6;
    cfg.heads = 2;
    Rng rng(9);
    FssdModel<double> m(cfg, rng);
    auto q = random_tensor({4, 16}, rng, false);
    auto before = m.reconstruct(q);

    // gradient flows into phi from both paths in one backward pass
    m.bank.phi.zero_grad();
    auto r = m.reconstruct(q);
    backward(add(sum(mul(r.q_h, r.q_h)), sum(mul(r.q_s, r.q_s))));
    REQUIRE(m.bank.phi.has_grad());
    double gmag = 0;
    for (auto g : m.bank.phi.grad()) gmag += std::abs(g);
    CHECK(gmag > 0);

    // perturbing phi changes both outputs
    m.bank.phi.raw_data()[3] += 0.5;
    auto after = m.reconstruct(q);
    CHECK(max_abs_diff(before.q_h, after.q_h) > 0);
    CHECK(max_abs_diff(before.q_s, after.q_s) > 0);
}

TEST_CASE("episode similarity basics", "[model]") {
    Rng rng(10);
    auto support = random_tensor({3, 8}, rng, false);
    // query 0 identical to support row 1
    std::vector<double> qv;
    for (int k = 0; k < 8; ++k) qv.push_back(support.data()[static_cast<size_t>(8 + k)]);
    for (int k = 0; k < 8; ++k) qv.push_back(rng.uniform(-1, 1));
    auto query = Tensor<double>::from({2, 8}, std::move(qv));
    auto r = episode_similarity(support, query, 1, 3);
    REQUIRE(r.logits.shape() == Shape{2, 3});
    CHECK(r.logits.data()[1] == Catch::Approx(1.0).margin(1e-9));
    CHECK_FALSE(r.zero_norm_flag);
    const auto preds = predict_from_logits(r.logits);
    CHECK(preds[0] == 1);

    // cosine is invariant to positive rescaling of a row
    auto scaled_query = scale(query, 2.5);
    auto r2 = episode_similarity(support, scaled_query, 1, 3);
    CHECK(max_abs_diff(r.logits, r2.logits) < 1e-9);

    // zero-norm rows are flagged and their cosines vanish
    auto zq = Tensor<double>::from({1, 8}, std::vector<double>(8, 0.0));
    auto r3 = episode_similarity(support, zq, 1, 3);
    CHECK(r3.zero_norm_flag);
    for (auto v : r3.logits.data()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("prototype averaging for multi-shot support", "[model]") {
    Rng rng(11);
    auto support = random_tensor({6, 4}, rng, false); // c=2, m1=3
    auto query = random_tensor({2, 4}, rng, false);
    auto r = episode_similarity(support, query, 3, 2);
    // manual prototype for slot 0
    std::vector<double> proto(4, 0.0);
    for (int k = 0; k < 3; ++k)
        for (int j2 = 0; j2 < 4; ++j2)
            proto[static_cast<size_t>(j2)] += support.data()[static_cast<size_t>(k * 4 + j2)] / 3.0;
    double dot = 0, nq = 0, np = 0;
    for (int j2 = 0; j2 < 4; ++j2) {
        dot += query.data()[static_cast<size_t>(j2)] * proto[static_cast<size_t>(j2)];
        nq += query.data()[static_cast<size_t>(j2)] * query.data()[static_cast<size_t>(j2)];
        np += proto[static_cast<size_t>(j2)] * proto[static_cast<size_t>(j2)];
    }
    CHECK(r.logits.data()[0] == Catch::Approx(dot / std::sqrt(nq * np)).margin(1e-9));
}

TEST_CASE("weighted sum-kernel expansion matches the cosine numerator", "[model]") {
    Rng rng(12);
    const int n = 6, d = 8;
    for (int trial = 0; trial < 20; ++trial) {
        auto phi = random_tensor({n, d}, rng, false);
        // random softmax-like weights
        std::vector<double> ws(n), wq(n);
        double ss = 0, sq = 0;
        for (int i = 0; i < n; ++i) {
            ws[static_cast<size_t>(i)] = rng.uniform(0.01, 1.0);
            wq[static_cast<size_t>(i)] = rng.uniform(0.01, 1.0);
            ss += ws[static_cast<size_t>(i)];
            sq += wq[static_cast<size_t>(i)];
        }
        for (int i = 0; i < n; ++i) {
            ws[static_cast<size_t>(i)] /= ss;
            wq[static_cast<size_t>(i)] /= sq;
        }
        // q' vectors from the weights
        std::vector<double> qs(d, 0.0), qq(d, 0.0);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < d; ++k) {
                qs[static_cast<size_t>(k)] += ws[static_cast<size_t>(i)] * phi.data()[static_cast<size_t>(i) * d + k];
                qq[static_cast<size_t>(k)] += wq[static_cast<size_t>(i)] * phi.data()[static_cast<size_t>(i) * d + k];
            }
        double direct = 0;
        for (int k = 0; k < d; ++k) direct += qs[static_cast<size_t>(k)] * qq[static_cast<size_t>(k)];
        double expansion = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double gram = 0;
                for (int k = 0; k < d; ++k)
                    gram += phi.data()[static_cast<size_t>(i) * d + k] * phi.data()[static_cast<size_t>(j) * d + k];
                expansion += ws[static_cast<size_t>(i)] * wq[static_cast<size_t>(j)] * gram;
            }
        CHECK(std::abs(direct - expansion) < 1e-6);
    }

    // one-hot weights with orthonormal primitives: cosine equals sum_i w_i^s w_i^q
    std::vector<double> pv(static_cast<size_t>(4) * 8, 0.0);
    for (int i = 0; i < 4; ++i) pv[static_cast<size_t>(i) * 8 + i] = 1.0;
    auto phi = Tensor<double>::from({4, 8}, std::move(pv));
    auto support = slice(phi, 0, 1, 1);  // phi_1
    auto query = slice(phi, 0, 1, 1);    // same primitive
    auto r = episode_similarity(support, query, 1, 1);
    CHECK(r.logits.data()[0] == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("decoder output range and determinism", "[model]") {
    Rng rng(13);
    DecoderHead<float> head(16, rng);
    auto f = random_tensor({3, 16}, rng, false);
    std::vector<float> fv(f.data().begin(), f.data().end());
    auto ft = Tensor<float>::from({3, 16}, fv);
    NoGradGuard ng;
    auto out1 = head(ft);
    REQUIRE(out1.shape() == Shape{3, 1, 32, 32});
    for (auto v : out1.data()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    auto out2 = head(ft);
    for (int64_t i = 0; i < out1.numel(); ++i)
        CHECK(out1.data()[static_cast<size_t>(i)] == out2.data()[static_cast<size_t>(i)]);
}

TEST_CASE("primitive interpolation frames", "[model]") {
    ModelConfig cfg;
    cfg.backbone.embed_dim = 16;
    cfg.primitives = 8;
    cfg.heads = 2;
    Rng rng(14);
    FssdModel<float> m(cfg, rng);
    const auto frames = interpolate_primitives(m, 0, 1);
    REQUIRE(frames.size() == 11);

    // endpoint identity, bit exact: alpha=1 -> phi_i, alpha=0 -> phi_j
    const int d = 16;
    std::vector<float> phi0(m.bank.phi.data().begin() + 0 * d, m.bank.phi.data().begin() + d);
    std::vector<float> phi1(m.bank.phi.data().begin() + 1 * d, m.bank.phi.data().begin() + 2 * d);
    const auto direct_i = decode_vector(m.mask_head, phi0);
    const auto direct_j = decode_vector(m.mask_head, phi1);
    CHECK(frames[10] == direct_i);
    CHECK(frames[0] == direct_j);

    // adjacent-frame mean abs difference strictly below the endpoint difference
    auto mean_abs_diff = [](const std::vector<float>& a, const std::vector<float>& b) {
        double s = 0;
        for (size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
        return s / static_cast<double>(a.size());
    };
    const double endpoint = mean_abs_diff(frames[0], frames[10]);
    for (int k = 0; k + 1 <= 10; ++k)
        CHECK(mean_abs_diff(frames[static_cast<size_t>(k)], frames[static_cast<size_t>(k + 1)]) < endpoint);

    CHECK_THROWS_AS(interpolate_primitives(m, 0, 0), ShapeError);
    CHECK_THROWS_AS(interpolate_primitives(m, 0, 99), ShapeError);
}

TEST_CASE("episode logits are rot90 invariant end to end", "[model]") {
    ModelConfig cfg; // default desk-scale model
    cfg.primitives = 12;
    Rng rng(15);
    FssdModel<float> m(cfg, rng);
    Rng drng(16);
    // a tiny episode: 2 support, 2 query images
    auto make_img = [&] {
        std::vector<float> v(1024);
        for (auto& x : v) x = static_cast<float>(drng.uniform());
        return v;
    };
    std::vector<std::vector<float>> imgs = {make_img(), make_img(), make_img(), make_img()};
    auto run = [&](bool rotate_first_query) {
        NoGradGuard ng;
        std::vector<float> all;
        for (int i = 0; i < 4; ++i) {
            auto img = imgs[static_cast<size_t>(i)];
            all.insert(all.end(), img.begin(), img.end());
        }
        auto x = Tensor<float>::from({4, 1, 32, 32}, std::move(all));
        if (rotate_first_query) {
            auto head = slice(x, 0, 0, 2);
            auto q1 = rot90_hw(slice(x, 0, 2, 1), 1);
            auto q2 = slice(x, 0, 3, 1);
            x = concat<float>({head, q1, q2}, 0);
        }
        auto q = m.backbone.embed(x);
        auto r = m.reconstruct(q);
        auto sim = episode_similarity(slice(r.q_dual, 0, 0, 2), slice(r.q_dual, 0, 2, 2), 1, 2);
        return sim.logits;
    };
    auto base = run(false);
    auto rotated = run(true);
    CHECK(max_abs_diff(base, rotated) < 1e-4);
}
