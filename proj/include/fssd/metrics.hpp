#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fssd::metrics {

// peak signal-to-noise ratio for signals in [0,1], capped at 100 dB
inline double psnr(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw std::runtime_error("psnr: size mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

// global single-window SSIM with the standard constants
inline double ssim(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw std::runtime_error("ssim: size mismatch");
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double va = 0, vb = 0, cov = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    va /= n;
    vb /= n;
    cov /= n;
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    return ((2 * ma * mb + c1) * (2 * cov + c2)) /
           ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

struct MetricsReport {
    double accuracy_mean = 0;
    double accuracy_ci95 = 0;
    int episodes = 0;
    int ways = 0, shots = 0, queries = 0;
    // reconstruction quality keyed as "<target>_<feature>_<metric>",
    // e.g. "mask_q_psnr", "edge_qdual_ssim"
    std::map<std::string, double> reconstruction;
    bool zero_norm_flagged = false;

    nlohmann::json to_json() const {
        nlohmann::json j{{"accuracy_mean", accuracy_mean},
                         {"accuracy_ci95", accuracy_ci95},
                         {"episodes", episodes},
                         {"ways", ways},
                         {"shots", shots},
                         {"queries", queries},
                         {"zero_norm_flagged", zero_norm_flagged}};
        nlohmann::json recon = nlohmann::json::object();
        for (const auto& [k, v] : reconstruction) recon[k] = v;
        j["reconstruction"] = recon;
        return j;
    }
};

} // namespace fssd::metrics
