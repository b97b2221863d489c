#pragma once

#include "fssd/checkpoint.hpp"
#include "fssd/metrics.hpp"
#include "fssd/model.hpp"
#include "fssd/shapegen.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <omp.h>
#include <string>
#include <vector>

namespace fssd::trainer {

using json = nlohmann::json;

class TrainError : public std::runtime_error {
public:
    explicit TrainError(const std::string& m) : std::runtime_error("trainer: " + m) {}
};

struct TrainConfig {
    int ways = 5, shots = 1, queries = 15;
    int episodes = 3000;
    double lr = 1e-3;
    double lr_decay_factor = 0.5;
    int lr_decay_every = 1000;
    uint64_t seed = 0;
    int primitives = 60;
    int heads = 4;
    model::AttentionMode attention = model::AttentionMode::dual;
    model::DecoderMode decoder = model::DecoderMode::both;
    bool align_qh_q = false;
    double cls_temperature = 10.0;
    int checkpoint_every = 500;
    std::string out_dir; // empty: keep everything in memory

    void validate() const {
        if (lr <= 0) throw TrainError("lr must be positive");
        if (lr_decay_factor <= 0 || lr_decay_factor > 1)
            throw TrainError("lr decay factor must be in (0,1]");
        if (episodes < 1) throw TrainError("episodes must be >= 1");
        if (ways < 1 || shots < 1 || queries < 1)
            throw TrainError("episode sizes must be positive");
    }

    model::ModelConfig model_config() const {
        model::ModelConfig mc;
        mc.primitives = primitives;
        mc.heads = heads;
        mc.attention = attention;
        mc.decoder = decoder;
        mc.align_qh_q = align_qh_q;
        return mc;
    }

    json to_json() const {
        return json{{"ways", ways},
                    {"shots", shots},
                    {"queries", queries},
                    {"episodes", episodes},
                    {"lr", lr},
                    {"lr_decay_factor", lr_decay_factor},
                    {"lr_decay_every", lr_decay_every},
                    {"seed", seed},
                    {"primitives", primitives},
                    {"heads", heads},
                    {"attention", model::to_string(attention)},
                    {"decoder", model::to_string(decoder)},
                    {"align_qh_q", align_qh_q},
                    {"cls_temperature", cls_temperature}};
    }
};

inline model::AttentionMode attention_from_string(const std::string& s) {
    if (s == "smca") return model::AttentionMode::smca;
    if (s == "hmca") return model::AttentionMode::hmca;
    if (s == "dual") return model::AttentionMode::dual;
    throw TrainError("unknown attention mode: " + s);
}

inline model::DecoderMode decoder_from_string(const std::string& s) {
    if (s == "none") return model::DecoderMode::none;
    if (s == "mask") return model::DecoderMode::mask;
    if (s == "edge") return model::DecoderMode::edge;
    if (s == "both") return model::DecoderMode::both;
    throw TrainError("unknown decoder mode: " + s);
}

// ---------------------------------------------------------------------------
// Episode batch assembly
// ---------------------------------------------------------------------------

struct EpisodeBatch {
    int ways = 0, shots = 0, queries = 0;
    Tensor<float> images; // B x 1 x 32 x 32, support rows first (slot-major)
    Tensor<float> masks;  // B x 1 x 32 x 32
    Tensor<float> edges;  // B x 1 x 32 x 32
    std::vector<int> query_labels; // slot per query row
};

inline EpisodeBatch make_batch(const shapegen::Episode& ep) {
    EpisodeBatch b;
    b.ways = ep.ways;
    b.shots = ep.shots;
    b.queries = ep.queries;
    const int total = static_cast<int>(ep.support.size() + ep.query.size());
    const int hw = 32 * 32;
    std::vector<float> img(static_cast<size_t>(total) * hw);
    std::vector<float> msk(static_cast<size_t>(total) * hw);
    std::vector<float> edg(static_cast<size_t>(total) * hw);
    auto put = [&](int row, const shapegen::ShapeSample& s) {
        for (int i = 0; i < hw; ++i) {
            img[static_cast<size_t>(row) * hw + i] = s.image[static_cast<size_t>(i)];
            msk[static_cast<size_t>(row) * hw + i] = static_cast<float>(s.mask[static_cast<size_t>(i)]);
            edg[static_cast<size_t>(row) * hw + i] = static_cast<float>(s.edge[static_cast<size_t>(i)]);
        }
    };
    int row = 0;
    for (const auto* s : ep.support) put(row++, *s);
    for (const auto* s : ep.query) put(row++, *s);
    b.images = Tensor<float>::from({total, 1, 32, 32}, std::move(img));
    b.masks = Tensor<float>::from({total, 1, 32, 32}, std::move(msk));
    b.edges = Tensor<float>::from({total, 1, 32, 32}, std::move(edg));
    for (int slot = 0; slot < ep.ways; ++slot)
        for (int k = 0; k < ep.queries; ++k) b.query_labels.push_back(slot);
    return b;
}

// ---------------------------------------------------------------------------
// Episode forward pass and total loss
// ---------------------------------------------------------------------------

struct LossTerms {
    double total = 0, cls = 0;
    double mask_q = 0, edge_q = 0;
    double mask_qh = 0, edge_qh = 0;
    double mask_qd = 0, edge_qd = 0;
    double align = 0;
};

template <class T>
struct EpisodeOutput {
    Tensor<T> loss;
    LossTerms terms;
    Tensor<T> logits; // raw cosine logits, (m2*c) x c
    model::Reconstruction<T> recon;
    bool zero_norm_flag = false;
    // decoded rasters per feature tag, query rows included, for metrics
    std::vector<std::pair<std::string, Tensor<T>>> mask_decodes;
    std::vector<std::pair<std::string, Tensor<T>>> edge_decodes;
};

// Features entering the reconstruction losses: the original embedding plus
// the distinct reconstructed features of the active attention mode.
template <class T>
std::vector<std::pair<std::string, Tensor<T>>> loss_features(const model::Reconstruction<T>& r,
                                                             model::AttentionMode mode) {
    std::vector<std::pair<std::string, Tensor<T>>> f;
    f.emplace_back("q", r.q);
    switch (mode) {
        case model::AttentionMode::dual:
            f.emplace_back("qh", r.q_h);
            f.emplace_back("qdual", r.q_dual);
            break;
        case model::AttentionMode::hmca: f.emplace_back("qh", r.q_h); break;
        case model::AttentionMode::smca: f.emplace_back("qdual", r.q_dual); break;
    }
    return f;
}

template <class T>
EpisodeOutput<T> episode_forward(const model::FssdModel<T>& m, const EpisodeBatch& batch,
                                 const TrainConfig& cfg, bool want_decodes = false) {
    const int c = batch.ways, m1 = batch.shots;
    const int n_support = c * m1;
    const int n_query = c * batch.queries;

    EpisodeOutput<T> out;
    auto q = m.backbone.embed(batch.images);
    out.recon = m.reconstruct(q);

    auto support = slice(out.recon.q_dual, 0, 0, n_support);
    auto query = slice(out.recon.q_dual, 0, n_support, n_query);
    auto sim = model::episode_similarity(support, query, m1, c);
    out.logits = sim.logits;
    out.zero_norm_flag = sim.zero_norm_flag;

    auto loss = cross_entropy_logits(scale(sim.logits, static_cast<T>(cfg.cls_temperature)),
                                     batch.query_labels);
    out.terms.cls = loss.item();

    const bool want_mask =
        cfg.decoder == model::DecoderMode::mask || cfg.decoder == model::DecoderMode::both;
    const bool want_edge =
        cfg.decoder == model::DecoderMode::edge || cfg.decoder == model::DecoderMode::both;
    const auto features = loss_features(out.recon, cfg.attention);

    auto add_term = [&](double& slot_val, Tensor<T> term) {
        slot_val = term.item();
        loss = add(loss, term);
    };
    if (want_mask || want_edge || want_decodes) {
        std::vector<Tensor<T>> feats;
        for (const auto& [_, f] : features) feats.push_back(f);
        auto stacked = concat(feats, 0); // (k*B) x d
        const int B = batch.images.dim(0);
        if (want_mask || want_decodes) {
            auto decoded = m.mask_head(stacked);
            for (size_t fi = 0; fi < features.size(); ++fi) {
                auto dec = slice(decoded, 0, static_cast<int>(fi) * B, B);
                if (want_mask) {
                    auto term = mse_loss(dec, batch.masks);
                    const auto& tag = features[fi].first;
                    if (tag == "q") add_term(out.terms.mask_q, term);
                    else if (tag == "qh") add_term(out.terms.mask_qh, term);
                    else add_term(out.terms.mask_qd, term);
                }
                if (want_decodes) out.mask_decodes.emplace_back(features[fi].first, dec);
            }
        }
        if (want_edge || want_decodes) {
            auto decoded = m.edge_head(stacked);
            for (size_t fi = 0; fi < features.size(); ++fi) {
                auto dec = slice(decoded, 0, static_cast<int>(fi) * B, B);
                if (want_edge) {
                    auto term = mse_loss(dec, batch.edges);
                    const auto& tag = features[fi].first;
                    if (tag == "q") add_term(out.terms.edge_q, term);
                    else if (tag == "qh") add_term(out.terms.edge_qh, term);
                    else add_term(out.terms.edge_qd, term);
                }
                if (want_decodes) out.edge_decodes.emplace_back(features[fi].first, dec);
            }
        }
    }
    if (cfg.align_qh_q && out.recon.q_h.defined()) {
        auto term = mse_loss(out.recon.q_h, out.recon.q);
        out.terms.align = term.item();
        loss = add(loss, term);
    }
    out.loss = loss;
    out.terms.total = loss.item();
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
    std::vector<LossTerms> history;
    std::string checkpoint_path;
    uint64_t episodes_run = 0;

    double mean_total(size_t lo, size_t hi) const {
        double s = 0;
        size_t n = 0;
        for (size_t i = lo; i < hi && i < history.size(); ++i) {
            s += history[i].total;
            ++n;
        }
        return n ? s / static_cast<double>(n) : 0.0;
    }
};

inline double lr_at(const TrainConfig& cfg, int episode) {
    const int steps = cfg.lr_decay_every > 0 ? episode / cfg.lr_decay_every : 0;
    return cfg.lr * std::pow(cfg.lr_decay_factor, steps);
}

template <class T>
void write_checkpoint(const std::string& path, const model::FssdModel<T>& m,
                      const AdamState<T>* adam, uint64_t episode, const TrainConfig& cfg) {
    ParamList<T> ps;
    m.collect(ps);
    ckpt::save_state<T>(path, ps, adam, episode, cfg.to_json().dump());
}

inline std::string curves_header() {
    return "episode,l_cls,l_mask_q,l_edge_q,l_mask_qh,l_edge_qh,l_mask_qd,l_edge_qd,lr\n";
}

inline std::string curves_row(int episode, const LossTerms& t, double lr) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", episode,
                  t.cls, t.mask_q, t.edge_q, t.mask_qh, t.edge_qh, t.mask_qd, t.edge_qd, lr);
    return buf;
}

inline TrainResult train(const TrainConfig& cfg, const shapegen::DatasetSplit& train_split,
                         model::FssdModel<float>* model_out = nullptr,
                         bool log_progress = false) {
    cfg.validate();
    Rng seed_rng(cfg.seed);
    Rng init_rng = seed_rng.fork(0x696e6974); // init stream
    Rng data_rng = seed_rng.fork(0x64617461); // data stream

    model::FssdModel<float> m(cfg.model_config(), init_rng);
    ParamList<float> ps;
    m.collect(ps);
    auto params = ps.tensors();
    AdamState<float> adam;
    adam.init(params);

    TrainResult result;
    std::string curves = curves_header();
    const bool to_disk = !cfg.out_dir.empty();
    std::string ckpt_path;
    if (to_disk) {
        std::filesystem::create_directories(cfg.out_dir);
        ckpt_path = cfg.out_dir + "/checkpoint.fssd";
    }

    const auto t_start = std::chrono::steady_clock::now();
    for (int e = 0; e < cfg.episodes; ++e) {
        const double lr = lr_at(cfg, e);
        auto ep = shapegen::sample_episode(train_split, cfg.ways, cfg.shots, cfg.queries, data_rng);
        auto batch = make_batch(ep);
        EpisodeOutput<float> fwd;
        try {
            fwd = episode_forward(m, batch, cfg);
            backward(fwd.loss);
        } catch (const NumericError& err) {
            throw TrainError("non-finite loss at episode " + std::to_string(e) + ": " +
                             err.what());
        }
        adam_step(params, adam, static_cast<float>(lr));
        zero_grads(params);
        result.history.push_back(fwd.terms);
        curves += curves_row(e, fwd.terms, lr);
        if (to_disk && ((e + 1) % cfg.checkpoint_every == 0))
            write_checkpoint(ckpt_path, m, &adam, static_cast<uint64_t>(e + 1), cfg);
        if (log_progress && ((e + 1) % 100 == 0 || e == 0)) {
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
            std::fprintf(stderr, "episode %d/%d  loss %.4f  cls %.4f  lr %.2g  (%.2f ep/s)\n",
                         e + 1, cfg.episodes, fwd.terms.total, fwd.terms.cls, lr,
                         (e + 1) / secs);
        }
    }
    result.episodes_run = static_cast<uint64_t>(cfg.episodes);
    if (to_disk) {
        write_checkpoint(ckpt_path, m, &adam, result.episodes_run, cfg);
        result.checkpoint_path = ckpt_path;
        std::ofstream cf(cfg.out_dir + "/curves.csv", std::ios::binary);
        cf << curves;
    }
    if (model_out) *model_out = m;
    return result;
}

// Repeated optimization of a single fixed episode (capacity check).
inline LossTerms train_single_episode(model::FssdModel<float>& m, const EpisodeBatch& batch,
                                      const TrainConfig& cfg, int steps) {
    ParamList<float> ps;
    m.collect(ps);
    auto params = ps.tensors();
    AdamState<float> adam;
    adam.init(params);
    LossTerms last;
    for (int s = 0; s < steps; ++s) {
        auto fwd = episode_forward(m, batch, cfg);
        backward(fwd.loss);
        adam_step(params, adam, static_cast<float>(cfg.lr));
        zero_grads(params);
        last = fwd.terms;
    }
    return last;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalConfig {
    int ways = 5, shots = 1, queries = 15;
    int episodes = 500;
    uint64_t seed = 0;
    double cls_temperature = 10.0;
};

inline metrics::MetricsReport evaluate(const model::FssdModel<float>& m,
                                       const shapegen::DatasetSplit& split,
                                       const EvalConfig& cfg) {
    if (cfg.episodes < 1) throw TrainError("evaluation needs at least one episode");
    // pre-sample the episodes on the main thread for determinism
    Rng rng = Rng(cfg.seed).fork(0x6576616c);
    std::vector<shapegen::Episode> episodes;
    episodes.reserve(static_cast<size_t>(cfg.episodes));
    for (int e = 0; e < cfg.episodes; ++e)
        episodes.push_back(
            shapegen::sample_episode(split, cfg.ways, cfg.shots, cfg.queries, rng));

    std::vector<double> acc(static_cast<size_t>(cfg.episodes), 0.0);
    std::vector<std::map<std::string, double>> recon(static_cast<size_t>(cfg.episodes));
    std::vector<char> flagged(static_cast<size_t>(cfg.episodes), 0);

    TrainConfig fcfg;
    fcfg.ways = cfg.ways;
    fcfg.shots = cfg.shots;
    fcfg.queries = cfg.queries;
    fcfg.cls_temperature = cfg.cls_temperature;
    fcfg.attention = m.cfg.attention;
    fcfg.decoder = model::DecoderMode::none; // metrics are computed from decodes directly

#pragma omp parallel for schedule(dynamic)
    for (int e = 0; e < cfg.episodes; ++e) {
        NoGradGuard ng;
        const auto batch = make_batch(episodes[static_cast<size_t>(e)]);
        auto fwd = episode_forward(m, batch, fcfg, /*want_decodes=*/true);
        const auto preds = model::predict_from_logits(fwd.logits);
        int correct = 0;
        for (size_t i = 0; i < preds.size(); ++i)
            correct += preds[i] == batch.query_labels[i];
        acc[static_cast<size_t>(e)] = static_cast<double>(correct) / static_cast<double>(preds.size());
        flagged[static_cast<size_t>(e)] = fwd.zero_norm_flag ? 1 : 0;

        const int n_support = cfg.ways * cfg.shots;
        const int hw = 32 * 32;
        auto add_metrics = [&](const std::string& target,
                               const std::vector<std::pair<std::string, Tensor<float>>>& decs,
                               const Tensor<float>& gt) {
            for (const auto& [tag, dec] : decs) {
                double p = 0, s = 0;
                const int nq = cfg.ways * cfg.queries;
                for (int qi = 0; qi < nq; ++qi) {
                    const int row = n_support + qi;
                    std::span<const float> a{dec.data().data() + static_cast<int64_t>(row) * hw,
                                             static_cast<size_t>(hw)};
                    std::span<const float> b{gt.data().data() + static_cast<int64_t>(row) * hw,
                                             static_cast<size_t>(hw)};
                    p += metrics::psnr(a, b);
                    s += metrics::ssim(a, b);
                }
                recon[static_cast<size_t>(e)][target + "_" + tag + "_psnr"] = p / nq;
                recon[static_cast<size_t>(e)][target + "_" + tag + "_ssim"] = s / nq;
            }
        };
        add_metrics("mask", fwd.mask_decodes, batch.masks);
        add_metrics("edge", fwd.edge_decodes, batch.edges);
    }

    metrics::MetricsReport rep;
    rep.episodes = cfg.episodes;
    rep.ways = cfg.ways;
    rep.shots = cfg.shots;
    rep.queries = cfg.queries;
    double mean = 0;
    for (double a : acc) mean += a;
    mean /= cfg.episodes;
    double var = 0;
    for (double a : acc) var += (a - mean) * (a - mean);
    const double sd = cfg.episodes > 1 ? std::sqrt(var / (cfg.episodes - 1)) : 0.0;
    rep.accuracy_mean = mean;
    rep.accuracy_ci95 = 1.96 * sd / std::sqrt(static_cast<double>(cfg.episodes));
    for (char f : flagged) rep.zero_norm_flagged = rep.zero_norm_flagged || f;
    // average the reconstruction metrics over episodes
    for (const auto& [k, _] : recon[0]) {
        double s = 0;
        for (int e = 0; e < cfg.episodes; ++e) s += recon[static_cast<size_t>(e)].at(k);
        rep.reconstruction[k] = s / cfg.episodes;
    }
    return rep;
}

// rebuild a model from a checkpoint file
inline model::FssdModel<float> load_model(const std::string& path, TrainConfig* cfg_out = nullptr) {
    auto recs = ckpt::read_all(path);
    auto it = recs.find("config.json");
    if (it == recs.end()) throw TrainError("checkpoint has no config record: " + path);
    const json j = json::parse(std::string(it->second.payload.begin(), it->second.payload.end()));
    TrainConfig cfg;
    cfg.ways = j.value("ways", 5);
    cfg.shots = j.value("shots", 1);
    cfg.queries = j.value("queries", 15);
    cfg.lr = j.value("lr", 1e-3);
    cfg.seed = j.value("seed", 0ull);
    cfg.primitives = j.value("primitives", 60);
    cfg.heads = j.value("heads", 4);
    cfg.attention = attention_from_string(j.value("attention", "dual"));
    cfg.decoder = decoder_from_string(j.value("decoder", "both"));
    cfg.align_qh_q = j.value("align_qh_q", false);
    cfg.cls_temperature = j.value("cls_temperature", 10.0);
    Rng dummy(0);
    model::FssdModel<float> m(cfg.model_config(), dummy);
    ParamList<float> ps;
    m.collect(ps);
    ckpt::load_state<float>(path, ps, nullptr);
    if (cfg_out) *cfg_out = cfg;
    return m;
}

} // namespace fssd::trainer
