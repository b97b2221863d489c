#pragma once

#include "fssd/gcnn.hpp"
#include "fssd/layers.hpp"
#include "fssd/tensor.hpp"

#include <string>
#include <vector>

namespace fssd::model {

enum class AttentionMode { smca, hmca, dual };
enum class DecoderMode { none, mask, edge, both };

inline const char* to_string(AttentionMode m) {
    switch (m) {
        case AttentionMode::smca: return "smca";
        case AttentionMode::hmca: return "hmca";
        case AttentionMode::dual: return "dual";
    }
    return "?";
}

inline const char* to_string(DecoderMode m) {
    switch (m) {
        case DecoderMode::none: return "none";
        case DecoderMode::mask: return "mask";
        case DecoderMode::edge: return "edge";
        case DecoderMode::both: return "both";
    }
    return "?";
}

// Learnable bank of N shape primitives of dimension d; both attention paths
// read their values from this single tensor.
template <class T>
struct PrimitiveBank {
    Tensor<T> phi; // N x d

    PrimitiveBank() = default;
    PrimitiveBank(int n, int d, Rng& rng) {
        if (n < 1) throw ShapeError("primitive bank needs N >= 1");
        std::vector<T> data(static_cast<size_t>(n) * d);
        for (int i = 0; i < n; ++i) {
            double norm2 = 0;
            for (int k = 0; k < d; ++k) {
                const double v = rng.normal();
                data[static_cast<size_t>(i) * d + k] = static_cast<T>(v);
                norm2 += v * v;
            }
            const T inv = static_cast<T>(1.0 / std::sqrt(std::max(norm2, 1e-30)));
            for (int k = 0; k < d; ++k) data[static_cast<size_t>(i) * d + k] *= inv;
        }
        phi = Tensor<T>::from({n, d}, std::move(data), true);
    }

    int count() const { return phi.dim(0); }
    int dim() const { return phi.dim(1); }

    void collect(ParamList<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".phi", phi);
    }
};

template <class T>
struct AttendResult {
    Tensor<T> weights; // B x N softmax scores (effective weights for H-MCA)
    Tensor<T> output;  // B x d
    Tensor<T> pre_projection; // H-MCA only: exact row-space combination of phi
};

// single-head attention over the bank: W = softmax(Q phi^T / sqrt(d)), Q' = W phi
template <class T>
AttendResult<T> attend_single(const Tensor<T>& q, const Tensor<T>& phi) {
    const int d = phi.dim(1);
    auto scores = scale(matmul(q, transpose(phi, {1, 0})), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    AttendResult<T> r;
    r.weights = softmax_rows(scores);
    r.output = matmul(r.weights, phi);
    return r;
}

// Holistic multi-head cross-attention: queries/keys are projected to d*h and
// split into h heads of width d, while the value path is the unprojected bank
// in every head. Head weight matrices are averaged, so the pre-projection
// output is an exact linear combination of whole primitives.
template <class T>
struct HMca {
    int heads = 4;
    std::vector<Linear<T>> q_proj, k_proj; // per head, d -> d, no bias
    Linear<T> out_proj;                    // d -> d

    HMca() = default;
    HMca(int d, int h, Rng& rng) : heads(h) {
        for (int j = 0; j < h; ++j) {
            q_proj.emplace_back(d, d, rng, /*bias=*/false);
            k_proj.emplace_back(d, d, rng, /*bias=*/false);
        }
        out_proj = Linear<T>(d, d, rng);
    }

    AttendResult<T> operator()(const Tensor<T>& q, const Tensor<T>& phi) const {
        const int d = phi.dim(1);
        const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
        Tensor<T> weight_sum;
        for (int j = 0; j < heads; ++j) {
            auto qj = q_proj[static_cast<size_t>(j)](q);
            auto kj = k_proj[static_cast<size_t>(j)](phi);
            auto wj = softmax_rows(scale(matmul(qj, transpose(kj, {1, 0})), inv_sqrt_dk));
            weight_sum = weight_sum.defined() ? add(weight_sum, wj) : wj;
        }
        AttendResult<T> r;
        r.weights = scale(weight_sum, static_cast<T>(1.0 / heads));
        r.pre_projection = matmul(r.weights, phi);
        r.output = out_proj(r.pre_projection);
        return r;
    }

    void collect(ParamList<T>& ps, const std::string& prefix) const {
        for (int j = 0; j < heads; ++j) {
            q_proj[static_cast<size_t>(j)].collect(ps, prefix + ".q" + std::to_string(j));
            k_proj[static_cast<size_t>(j)].collect(ps, prefix + ".k" + std::to_string(j));
        }
        out_proj.collect(ps, prefix + ".out");
    }
};

// Standard multi-head cross-attention: values are per-head projections of the
// bank, splitting each primitive into sub-primitives.
template <class T>
struct SMca {
    int heads = 4;
    std::vector<Linear<T>> q_proj, k_proj, v_proj; // per head, d -> d/h, no bias
    Linear<T> out_proj;                            // d -> d

    SMca() = default;
    SMca(int d, int h, Rng& rng) : heads(h) {
        if (d % h != 0) throw ShapeError("S-MCA requires heads to divide the feature dim");
        const int dh = d / h;
        for (int j = 0; j < h; ++j) {
            q_proj.emplace_back(d, dh, rng, /*bias=*/false);
            k_proj.emplace_back(d, dh, rng, /*bias=*/false);
            v_proj.emplace_back(d, dh, rng, /*bias=*/false);
        }
        out_proj = Linear<T>(d, d, rng);
    }

    AttendResult<T> operator()(const Tensor<T>& q, const Tensor<T>& phi) const {
        const int d = phi.dim(1);
        const int dh = d / heads;
        const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        std::vector<Tensor<T>> head_outs;
        Tensor<T> first_weights;
        for (int j = 0; j < heads; ++j) {
            auto qj = q_proj[static_cast<size_t>(j)](q);
            auto kj = k_proj[static_cast<size_t>(j)](phi);
            auto vj = v_proj[static_cast<size_t>(j)](phi);
            auto wj = softmax_rows(scale(matmul(qj, transpose(kj, {1, 0})), inv_sqrt_dk));
            if (j == 0) first_weights = wj;
            head_outs.push_back(matmul(wj, vj));
        }
        AttendResult<T> r;
        r.weights = first_weights;
        r.output = out_proj(concat(head_outs, 1));
        return r;
    }

    void collect(ParamList<T>& ps, const std::string& prefix) const {
        for (int j = 0; j < heads; ++j) {
            q_proj[static_cast<size_t>(j)].collect(ps, prefix + ".q" + std::to_string(j));
            k_proj[static_cast<size_t>(j)].collect(ps, prefix + ".k" + std::to_string(j));
            v_proj[static_cast<size_t>(j)].collect(ps, prefix + ".v" + std::to_string(j));
        }
        out_proj.collect(ps, prefix + ".out");
    }
};

// Decoder head: d -> 32x4x4 seed, three upsample+conv+relu stages, then a
// 1-channel conv + sigmoid to 32x32.
template <class T>
struct DecoderHead {
    Linear<T> proj;
    Conv2dLayer<T> c1, c2, c3, out;

    DecoderHead() = default;
    DecoderHead(int d, Rng& rng)
        : proj(d, 32 * 4 * 4, rng),
          c1(32, 16, 3, rng),
          c2(16, 8, 3, rng),
          c3(8, 8, 3, rng),
          out(8, 1, 3, rng) {}

    Tensor<T> operator()(const Tensor<T>& features) const {
        const int B = features.dim(0);
        auto h = reshape(proj(features), {B, 32, 4, 4});
        h = relu(c1(upsample_nearest2x(h)));
        h = relu(c2(upsample_nearest2x(h)));
        h = relu(c3(upsample_nearest2x(h)));
        return sigmoid(out(h));
    }

    void collect(ParamList<T>& ps, const std::string& prefix) const {
        proj.collect(ps, prefix + ".proj");
        c1.collect(ps, prefix + ".c1");
        c2.collect(ps, prefix + ".c2");
        c3.collect(ps, prefix + ".c3");
        out.collect(ps, prefix + ".out");
    }
};

// ---------------------------------------------------------------------------
// Episode similarity
// ---------------------------------------------------------------------------

template <class T>
struct SimilarityResult {
    Tensor<T> logits; // (m2*c) x c cosine similarities
    bool zero_norm_flag = false;
};

template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    auto norms = sqrt_t(clamp_min(sum_last(mul(x, x)), static_cast<T>(1e-24)));
    return div(x, norms);
}

// support_recon: (c*m1) x d slot-major; query_recon: (c*m2) x d slot-major.
// Prototypes average the support rows per slot; logits are cosines.
template <class T>
SimilarityResult<T> episode_similarity(const Tensor<T>& support_recon,
                                       const Tensor<T>& query_recon, int m1, int c) {
    const int d = support_recon.dim(1);
    Tensor<T> protos;
    if (m1 == 1) {
        protos = support_recon;
    } else {
        std::vector<T> avg(static_cast<size_t>(c) * (c * m1), T(0));
        for (int slot = 0; slot < c; ++slot)
            for (int k = 0; k < m1; ++k)
                avg[static_cast<size_t>(slot) * (c * m1) + slot * m1 + k] =
                    static_cast<T>(1.0 / m1);
        protos = matmul(Tensor<T>::from({c, c * m1}, std::move(avg)), support_recon);
    }
    SimilarityResult<T> r;
    // flag zero-norm rows before normalization
    auto flag_rows = [&](const Tensor<T>& x) {
        const int rows = x.dim(0);
        for (int i = 0; i < rows; ++i) {
            double n2 = 0;
            for (int k = 0; k < d; ++k) {
                const double v = x.data()[static_cast<size_t>(i) * d + k];
                n2 += v * v;
            }
            if (n2 < 1e-12) r.zero_norm_flag = true;
        }
    };
    flag_rows(protos);
    flag_rows(query_recon);
    r.logits = matmul(l2_normalize_rows(query_recon), transpose(l2_normalize_rows(protos), {1, 0}));
    return r;
}

// argmax with lowest-slot tie break
template <class T>
std::vector<int> predict_from_logits(const Tensor<T>& logits) {
    const int rows = logits.dim(0), cols = logits.dim(1);
    std::vector<int> out(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) {
        int best = 0;
        T bv = logits.data()[static_cast<size_t>(i) * cols];
        for (int j = 1; j < cols; ++j) {
            const T v = logits.data()[static_cast<size_t>(i) * cols + j];
            if (v > bv) {
                bv = v;
                best = j;
            }
        }
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

struct ModelConfig {
    gcnn::BackboneConfig backbone;
    int primitives = 60;
    int heads = 4;
    AttentionMode attention = AttentionMode::dual;
    DecoderMode decoder = DecoderMode::both;
    bool align_qh_q = false; // optional direct MSE(Q'_H, Q) alignment term
};

template <class T>
struct Reconstruction {
    Tensor<T> q;      // original embeddings B x d
    Tensor<T> q_h;    // H-MCA output (defined for hmca/dual)
    Tensor<T> q_s;    // S-MCA output (defined for smca/dual)
    Tensor<T> q_dual; // final Q' per the attention mode
    Tensor<T> effective_weights; // H-MCA effective weights when available
};

template <class T>
struct FssdModel {
    ModelConfig cfg;
    gcnn::Backbone<T> backbone;
    PrimitiveBank<T> bank;
    HMca<T> hmca;
    SMca<T> smca;
    DecoderHead<T> mask_head;
    DecoderHead<T> edge_head;

    FssdModel() = default;
    FssdModel(const ModelConfig& config, Rng& rng)
        : cfg(config),
          backbone(config.backbone, rng),
          bank(config.primitives, config.backbone.embed_dim, rng),
          hmca(config.backbone.embed_dim, config.heads, rng),
          smca(config.backbone.embed_dim, config.heads, rng),
          mask_head(config.backbone.embed_dim, rng),
          edge_head(config.backbone.embed_dim, rng) {}

    Reconstruction<T> reconstruct(const Tensor<T>& q) const {
        Reconstruction<T> r;
        r.q = q;
        switch (cfg.attention) {
            case AttentionMode::hmca: {
                auto h = hmca(q, bank.phi);
                r.q_h = h.output;
                r.effective_weights = h.weights;
                r.q_dual = r.q_h;
                break;
            }
            case AttentionMode::smca: {
                auto s = smca(q, bank.phi);
                r.q_s = s.output;
                r.q_dual = r.q_s;
                break;
            }
            case AttentionMode::dual: {
                auto h = hmca(q, bank.phi);
                auto s = smca(q, bank.phi);
                r.q_h = h.output;
                r.q_s = s.output;
                r.effective_weights = h.weights;
                r.q_dual = add(r.q_h, r.q_s);
                break;
            }
        }
        return r;
    }

    void collect(ParamList<T>& ps) const {
        backbone.collect(ps, "backbone");
        bank.collect(ps, "primitives");
        hmca.collect(ps, "hmca");
        smca.collect(ps, "smca");
        mask_head.collect(ps, "decoder.mask");
        edge_head.collect(ps, "decoder.edge");
    }

    std::vector<Tensor<T>> parameters() const {
        ParamList<T> ps;
        collect(ps);
        return ps.tensors();
    }
};

// Eq.-style interpolation between two primitives: alpha = i*0.1 for
// i = 0..10, frames decoded one at a time through the mask head so endpoint
// frames are bit-identical to direct decodings.
template <class T>
std::vector<std::vector<T>> interpolate_primitives(const FssdModel<T>& m, int i, int j) {
    const int n = m.bank.count();
    if (i < 0 || j < 0 || i >= n || j >= n || i == j)
        throw ShapeError("interpolate_primitives needs distinct valid indices");
    const int d = m.bank.dim();
    NoGradGuard ng;
    std::vector<std::vector<T>> frames;
    for (int step = 0; step <= 10; ++step) {
        const T alpha = static_cast<T>(step) * static_cast<T>(0.1);
        std::vector<T> row(static_cast<size_t>(d));
        for (int k = 0; k < d; ++k) {
            const T a = m.bank.phi.data()[static_cast<size_t>(i) * d + k];
            const T b = m.bank.phi.data()[static_cast<size_t>(j) * d + k];
            row[static_cast<size_t>(k)] = alpha * a + (T(1) - alpha) * b;
        }
        auto out = m.mask_head(Tensor<T>::from({1, d}, std::move(row)));
        frames.emplace_back(out.data().begin(), out.data().end());
    }
    return frames;
}

// decode a single d-vector through a head (for visualization and tests)
template <class T>
std::vector<T> decode_vector(const DecoderHead<T>& head, const std::vector<T>& v) {
    NoGradGuard ng;
    auto out = head(Tensor<T>::from({1, static_cast<int>(v.size())}, v));
    return {out.data().begin(), out.data().end()};
}

} // namespace fssd::model
