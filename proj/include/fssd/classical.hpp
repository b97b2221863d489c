#pragma once

#include "fssd/shapegen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace fssd::classical {

class DescriptorError : public std::runtime_error {
public:
    explicit DescriptorError(const std::string& m) : std::runtime_error("classical: " + m) {}
};

struct Descriptor {
    enum class Kind { hu, fourier, shape_context };
    Kind kind;
    std::vector<double> vec;                 // hu: 7 entries, fourier: K entries
    std::vector<std::vector<double>> hists;  // shape_context: P x (5*12)
    int points = 0;
};

// ---------------------------------------------------------------------------
// Hu moments
// ---------------------------------------------------------------------------

// Central moments are evaluated with exact integer arithmetic (coordinates
// scaled by the area) so 90-degree rotations and integer translations of the
// raster leave all seven invariants bit-identical.
inline std::array<double, 7> hu_raw(const std::vector<uint8_t>& mask, int H, int W) {
    int64_t m00 = 0, m10 = 0, m01 = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (mask[static_cast<size_t>(y) * W + x]) {
                m00 += 1;
                m10 += x;
                m01 += y;
            }
    if (m00 == 0) throw DescriptorError("hu_moments on empty mask");

    // X = m00*x - m10 and Y = m00*y - m01 are exact integers
    __int128 s20 = 0, s02 = 0, s11 = 0, s30 = 0, s03 = 0, s21 = 0, s12 = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (mask[static_cast<size_t>(y) * W + x]) {
                const int64_t X = m00 * x - m10;
                const int64_t Y = m00 * y - m01;
                s20 += static_cast<__int128>(X) * X;
                s02 += static_cast<__int128>(Y) * Y;
                s11 += static_cast<__int128>(X) * Y;
                s30 += static_cast<__int128>(X) * X * X;
                s03 += static_cast<__int128>(Y) * Y * Y;
                s21 += static_cast<__int128>(X) * X * Y;
                s12 += static_cast<__int128>(X) * Y * Y;
            }
    // eta_pq = mu_pq / m00^(1+(p+q)/2) with mu_pq = s_pq / m00^(p+q),
    // so order 2 divides by m00^4 and order 3 by m00^5.5
    const double a = static_cast<double>(m00);
    const double d2 = a * a * a * a;
    const double d3 = a * a * a * a * a * std::sqrt(a);
    const double n20 = static_cast<double>(s20) / d2;
    const double n02 = static_cast<double>(s02) / d2;
    const double n11 = static_cast<double>(s11) / d2;
    const double n30 = static_cast<double>(s30) / d3;
    const double n03 = static_cast<double>(s03) / d3;
    const double n21 = static_cast<double>(s21) / d3;
    const double n12 = static_cast<double>(s12) / d3;

    const double p30_12 = n30 + n12;
    const double p21_03 = n21 + n03;
    std::array<double, 7> phi;
    phi[0] = n20 + n02;
    phi[1] = (n20 - n02) * (n20 - n02) + 4.0 * n11 * n11;
    phi[2] = (n30 - 3 * n12) * (n30 - 3 * n12) + (3 * n21 - n03) * (3 * n21 - n03);
    phi[3] = p30_12 * p30_12 + p21_03 * p21_03;
    phi[4] = (n30 - 3 * n12) * p30_12 * (p30_12 * p30_12 - 3 * p21_03 * p21_03) +
             (3 * n21 - n03) * p21_03 * (3 * p30_12 * p30_12 - p21_03 * p21_03);
    // grouping (p*q) first keeps the value bit-identical under 90-degree
    // rotation, where (p, q, n11) -> (q, -p, -n11)
    phi[5] = (n20 - n02) * (p30_12 * p30_12 - p21_03 * p21_03) +
             4.0 * n11 * (p30_12 * p21_03);
    phi[6] = (3 * n21 - n03) * p30_12 * (p30_12 * p30_12 - 3 * p21_03 * p21_03) -
             (n30 - 3 * n12) * p21_03 * (3 * p30_12 * p30_12 - p21_03 * p21_03);
    return phi;
}

// Seven invariants, sign(phi)*log10|phi| transformed. Magnitudes at or below
// 1e-4 collapse to a single canonical entry: it keeps every entry finite, and
// at 32x32 the higher invariants of symmetric shapes are pure rasterization
// noise below that level (with noisy sign) that would otherwise dominate
// euclidean comparisons.
constexpr double kHuFloor = 1e-4;

inline Descriptor hu_moments(const std::vector<uint8_t>& mask, int H, int W) {
    const auto phi = hu_raw(mask, H, W);
    Descriptor d;
    d.kind = Descriptor::Kind::hu;
    d.vec.resize(7);
    for (int i = 0; i < 7; ++i) {
        const double v = phi[static_cast<size_t>(i)];
        const double mag = std::abs(v);
        d.vec[static_cast<size_t>(i)] =
            mag <= kHuFloor ? std::log10(kHuFloor)
                            : (v < 0.0 ? -std::log10(mag) : std::log10(mag));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Boundary tracing (Moore neighbourhood, fixed chirality)
// ---------------------------------------------------------------------------

struct Pt {
    int x, y;
    bool operator==(const Pt&) const = default;
};

inline std::vector<Pt> trace_boundary(const std::vector<uint8_t>& mask, int H, int W) {
    auto at = [&](int y, int x) -> bool {
        return y >= 0 && y < H && x >= 0 && x < W && mask[static_cast<size_t>(y) * W + x];
    };
    int sy = -1, sx = -1;
    for (int y = 0; y < H && sy < 0; ++y)
        for (int x = 0; x < W; ++x)
            if (at(y, x)) {
                sy = y;
                sx = x;
                break;
            }
    if (sy < 0) throw DescriptorError("boundary trace on empty mask");

    // clockwise neighbour order (dy,dx) starting north
    static const int dy[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
    static const int dx[8] = {0, 1, 1, 1, 0, -1, -1, -1};

    std::vector<Pt> out;
    int cy = sy, cx = sx;
    int back = 6; // came from the west (scan order guarantees west neighbour is empty)
    const int start_back = back;
    const int64_t max_steps = static_cast<int64_t>(H) * W * 4 + 8;
    for (int64_t step = 0; step < max_steps; ++step) {
        out.push_back({cx, cy});
        int k = -1;
        for (int i = 1; i <= 8; ++i) {
            const int cand = (back + i) % 8;
            if (at(cy + dy[cand], cx + dx[cand])) {
                k = cand;
                break;
            }
        }
        if (k < 0) break; // isolated pixel
        const int ny = cy + dy[k], nx = cx + dx[k];
        // new backtrack: direction from the new pixel towards the last empty cell
        const int prev = (k + 7) % 8;
        const int ey = cy + dy[prev], ex = cx + dx[prev];
        cy = ny;
        cx = nx;
        // direction index from (cy,cx) to (ey,ex)
        back = -1;
        for (int i = 0; i < 8; ++i)
            if (cy + dy[i] == ey && cx + dx[i] == ex) {
                back = i;
                break;
            }
        if (back < 0) back = 6;
        if (cy == sy && cx == sx && back == start_back) break;
    }
    return out;
}

// closed-polyline resampling to n points by arc length, anchored at the
// vertex farthest from the vertex centroid (ties: first in trace order)
inline std::vector<std::complex<double>> resample_boundary(const std::vector<Pt>& trace, int n) {
    const size_t m = trace.size();
    if (m < 2) throw DescriptorError("boundary too short to resample");
    int64_t sx = 0, sy = 0;
    for (const auto& p : trace) {
        sx += p.x;
        sy += p.y;
    }
    const double cx = static_cast<double>(sx) / static_cast<double>(m);
    const double cy = static_cast<double>(sy) / static_cast<double>(m);
    size_t anchor = 0;
    double best = -1;
    for (size_t i = 0; i < m; ++i) {
        const double ddx = trace[i].x - cx, ddy = trace[i].y - cy;
        const double d2 = ddx * ddx + ddy * ddy;
        if (d2 > best) {
            best = d2;
            anchor = i;
        }
    }
    // cumulative lengths starting at the anchor, wrapping around
    std::vector<double> seg(m);
    double total = 0;
    for (size_t i = 0; i < m; ++i) {
        const auto& a = trace[(anchor + i) % m];
        const auto& b = trace[(anchor + i + 1) % m];
        const double dxx = b.x - a.x, dyy = b.y - a.y;
        seg[i] = std::sqrt(dxx * dxx + dyy * dyy);
        total += seg[i];
    }
    if (total <= 0) throw DescriptorError("degenerate boundary");
    std::vector<std::complex<double>> pts(static_cast<size_t>(n));
    size_t si = 0;
    double acc = 0;
    for (int k = 0; k < n; ++k) {
        const double target = total * k / n;
        while (si < m && acc + seg[si] < target) {
            acc += seg[si];
            ++si;
        }
        const size_t i = std::min(si, m - 1);
        const auto& a = trace[(anchor + i) % m];
        const auto& b = trace[(anchor + i + 1) % m];
        const double t = seg[i] > 0 ? (target - acc) / seg[i] : 0.0;
        pts[static_cast<size_t>(k)] = {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
    }
    return pts;
}

// magnitudes of DFT coefficients 1..K of the closed signature, normalized by |c1|
inline std::vector<double> fourier_magnitudes(const std::vector<std::complex<double>>& z, int K) {
    const int n = static_cast<int>(z.size());
    std::vector<double> mags(static_cast<size_t>(K));
    double c1 = 0;
    for (int m = 1; m <= K; ++m) {
        std::complex<double> c{0, 0};
        for (int k = 0; k < n; ++k) {
            const double ang = -2.0 * shapegen::kPi * m * k / n;
            c += z[static_cast<size_t>(k)] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        c /= static_cast<double>(n);
        mags[static_cast<size_t>(m - 1)] = std::abs(c);
        if (m == 1) c1 = std::abs(c);
    }
    if (c1 < 1e-12) throw DescriptorError("vanishing fundamental coefficient");
    for (auto& v : mags) v /= c1;
    return mags;
}

inline Descriptor fourier_descriptor(const std::vector<uint8_t>& mask, int H, int W, int K = 16) {
    const auto trace = trace_boundary(mask, H, W);
    if (trace.size() < 8) throw DescriptorError("boundary shorter than 8 pixels");
    const auto pts = resample_boundary(trace, 128);
    Descriptor d;
    d.kind = Descriptor::Kind::fourier;
    d.vec = fourier_magnitudes(pts, K);
    return d;
}

// ---------------------------------------------------------------------------
// Shape context
// ---------------------------------------------------------------------------

constexpr int kScRadialBins = 5;
constexpr int kScAngleBins = 12;

inline Descriptor shape_context(const std::vector<uint8_t>& mask, int H, int W, int P = 64) {
    const auto trace = trace_boundary(mask, H, W);
    if (trace.size() < 8) throw DescriptorError("boundary shorter than 8 pixels");
    const int p_eff = std::min<int>(P, static_cast<int>(trace.size()));
    const auto pts = resample_boundary(trace, p_eff);

    double mean_dist = 0;
    int pairs = 0;
    for (int i = 0; i < p_eff; ++i)
        for (int j = i + 1; j < p_eff; ++j) {
            mean_dist += std::abs(pts[static_cast<size_t>(i)] - pts[static_cast<size_t>(j)]);
            ++pairs;
        }
    mean_dist /= std::max(1, pairs);
    if (mean_dist <= 0) throw DescriptorError("degenerate point set");

    // radial bin edges log-spaced on [0.125, 2] * mean distance
    double edges[kScRadialBins + 1];
    const double lo = std::log(0.125), hi = std::log(2.0);
    for (int k = 0; k <= kScRadialBins; ++k)
        edges[k] = mean_dist * std::exp(lo + (hi - lo) * k / kScRadialBins);

    Descriptor d;
    d.kind = Descriptor::Kind::shape_context;
    d.points = p_eff;
    d.hists.assign(static_cast<size_t>(p_eff),
                   std::vector<double>(kScRadialBins * kScAngleBins, 0.0));
    for (int i = 0; i < p_eff; ++i) {
        auto& h = d.hists[static_cast<size_t>(i)];
        for (int j = 0; j < p_eff; ++j) {
            if (j == i) continue;
            const auto dv = pts[static_cast<size_t>(j)] - pts[static_cast<size_t>(i)];
            const double r = std::abs(dv);
            int rb = kScRadialBins - 1;
            for (int k = 1; k <= kScRadialBins; ++k)
                if (r <= edges[k]) {
                    rb = k - 1;
                    break;
                }
            double th = std::atan2(dv.imag(), dv.real());
            if (th < 0) th += 2 * shapegen::kPi;
            int ab = static_cast<int>(th / (2 * shapegen::kPi) * kScAngleBins);
            ab = std::clamp(ab, 0, kScAngleBins - 1);
            h[static_cast<size_t>(rb * kScAngleBins + ab)] += 1.0;
        }
    }
    return d;
}

// exact O(n^3) Hungarian algorithm (potentials formulation), square cost
inline double hungarian_min_cost(const std::vector<std::vector<double>>& cost,
                                 std::vector<int>* row_of_col = nullptr) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) return 0.0;
    for (const auto& row : cost)
        if (static_cast<int>(row.size()) != n) throw DescriptorError("cost matrix not square");
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0), v(static_cast<size_t>(n) + 1, 0);
    std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, INF);
        std::vector<char> used(static_cast<size_t>(n) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int i0 = p[static_cast<size_t>(j0)];
            int j1 = -1;
            double delta = INF;
            for (int j = 1; j <= n; ++j)
                if (!used[static_cast<size_t>(j)]) {
                    const double cur =
                        cost[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                        u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                    if (cur < minv[static_cast<size_t>(j)]) {
                        minv[static_cast<size_t>(j)] = cur;
                        way[static_cast<size_t>(j)] = j0;
                    }
                    if (minv[static_cast<size_t>(j)] < delta) {
                        delta = minv[static_cast<size_t>(j)];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    double total = 0;
    if (row_of_col) row_of_col->assign(static_cast<size_t>(n), -1);
    for (int j = 1; j <= n; ++j) {
        total += cost[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)][static_cast<size_t>(j - 1)];
        if (row_of_col) (*row_of_col)[static_cast<size_t>(j - 1)] = p[static_cast<size_t>(j)] - 1;
    }
    return total;
}

// mean per-point chi-square cost under the optimal assignment; histograms of
// unequal point counts are padded with a fixed dummy cost
inline double sc_distance(const Descriptor& a, const Descriptor& b) {
    if (a.kind != Descriptor::Kind::shape_context || b.kind != Descriptor::Kind::shape_context)
        throw DescriptorError("sc_distance needs shape_context descriptors");
    const int na = a.points, nb = b.points;
    const int n = std::max(na, nb);
    constexpr double kDummyCost = 0.25;
    std::vector<std::vector<double>> cost(static_cast<size_t>(n),
                                          std::vector<double>(static_cast<size_t>(n), kDummyCost));
    for (int i = 0; i < na; ++i)
        for (int j = 0; j < nb; ++j) {
            double c = 0;
            const auto& ha = a.hists[static_cast<size_t>(i)];
            const auto& hb = b.hists[static_cast<size_t>(j)];
            for (size_t k = 0; k < ha.size(); ++k) {
                const double s = ha[k] + hb[k];
                if (s > 0) {
                    const double dxy = ha[k] - hb[k];
                    c += dxy * dxy / s;
                }
            }
            cost[static_cast<size_t>(i)][static_cast<size_t>(j)] = 0.5 * c;
        }
    return hungarian_min_cost(cost) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Episodic nearest-neighbour evaluation
// ---------------------------------------------------------------------------

struct EpisodeEval {
    std::vector<int> predicted; // per query, episode slot
    double accuracy = 0;
};

inline Descriptor describe(Descriptor::Kind kind, const shapegen::ShapeSample& s) {
    switch (kind) {
        case Descriptor::Kind::hu: return hu_moments(s.mask, s.H, s.W);
        case Descriptor::Kind::fourier: return fourier_descriptor(s.mask, s.H, s.W);
        case Descriptor::Kind::shape_context: return shape_context(s.mask, s.H, s.W);
    }
    throw DescriptorError("unknown descriptor kind");
}

inline EpisodeEval classical_episode_eval(Descriptor::Kind kind, const shapegen::Episode& ep) {
    const int c = ep.ways, m1 = ep.shots;
    EpisodeEval out;
    if (kind == Descriptor::Kind::shape_context) {
        std::vector<Descriptor> sup;
        sup.reserve(ep.support.size());
        for (const auto* s : ep.support) sup.push_back(describe(kind, *s));
        for (size_t qi = 0; qi < ep.query.size(); ++qi) {
            const auto qd = describe(kind, *ep.query[qi]);
            int best_slot = 0;
            double best_cost = std::numeric_limits<double>::infinity();
            for (int slot = 0; slot < c; ++slot) {
                double mean_cost = 0;
                for (int k = 0; k < m1; ++k)
                    mean_cost += sc_distance(qd, sup[static_cast<size_t>(slot * m1 + k)]);
                mean_cost /= m1;
                if (mean_cost < best_cost) {
                    best_cost = mean_cost;
                    best_slot = slot;
                }
            }
            out.predicted.push_back(best_slot);
        }
    } else {
        // per-class mean descriptor of the support, euclidean nearest neighbour
        std::vector<std::vector<double>> protos(static_cast<size_t>(c));
        for (int slot = 0; slot < c; ++slot) {
            std::vector<double> acc;
            for (int k = 0; k < m1; ++k) {
                const auto d = describe(kind, *ep.support[static_cast<size_t>(slot * m1 + k)]);
                if (acc.empty()) acc.assign(d.vec.size(), 0.0);
                for (size_t i = 0; i < d.vec.size(); ++i) acc[i] += d.vec[i];
            }
            for (auto& v : acc) v /= m1;
            protos[static_cast<size_t>(slot)] = std::move(acc);
        }
        for (size_t qi = 0; qi < ep.query.size(); ++qi) {
            const auto qd = describe(kind, *ep.query[qi]);
            int best_slot = 0;
            double best = std::numeric_limits<double>::infinity();
            for (int slot = 0; slot < c; ++slot) {
                double d2 = 0;
                const auto& pr = protos[static_cast<size_t>(slot)];
                for (size_t i = 0; i < qd.vec.size() && i < pr.size(); ++i) {
                    const double dv = qd.vec[i] - pr[i];
                    d2 += dv * dv;
                }
                if (d2 < best) {
                    best = d2;
                    best_slot = slot;
                }
            }
            out.predicted.push_back(best_slot);
        }
    }
    int correct = 0;
    const int m2 = ep.queries;
    for (size_t qi = 0; qi < out.predicted.size(); ++qi) {
        const int true_slot = static_cast<int>(qi) / m2;
        correct += out.predicted[qi] == true_slot;
    }
    out.accuracy = out.predicted.empty()
                       ? 0.0
                       : static_cast<double>(correct) / static_cast<double>(out.predicted.size());
    return out;
}

} // namespace fssd::classical
