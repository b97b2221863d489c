#pragma once

#include "fssd/png.hpp"
#include "fssd/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fssd::shapegen {

using json = nlohmann::json;

class GenError : public std::runtime_error {
public:
    explicit GenError(const std::string& m) : std::runtime_error("shapegen: " + m) {}
};

constexpr int kNumClasses = 25;
constexpr double kStrokeWidthPx = 2.0;
constexpr double kMarginPx = 2.0;
constexpr double kMinContrast = 0.3;
constexpr double kPi = 3.14159265358979323846;

// Generation parameters of one sample. (cx, cy) are continuous raster
// coordinates, scale is the shape's nominal diameter in pixels, a/b/c are
// class-specific shape knobs.
struct ShapeParams {
    double cx = 0, cy = 0;
    double scale = 0;
    double rotation = 0;
    double a = 0, b = 0, c = 0;
    double fg = 1, bg = 0;

    json to_json() const {
        return json{{"cx", cx}, {"cy", cy}, {"scale", scale}, {"rotation", rotation},
                    {"a", a},   {"b", b},   {"c", c},         {"fg", fg},
                    {"bg", bg}};
    }
    static ShapeParams from_json(const json& j) {
        ShapeParams p;
        p.cx = j.at("cx");
        p.cy = j.at("cy");
        p.scale = j.at("scale");
        p.rotation = j.at("rotation");
        p.a = j.at("a");
        p.b = j.at("b");
        p.c = j.at("c");
        p.fg = j.at("fg");
        p.bg = j.at("bg");
        return p;
    }
};

struct ShapeSample {
    int H = 0, W = 0;
    int class_id = -1;
    uint64_t seed = 0;
    std::vector<float> image;  // H*W in [0,1]
    std::vector<uint8_t> mask; // H*W in {0,1}
    std::vector<uint8_t> edge; // H*W in {0,1}
    ShapeParams params;
};

struct ClassDef {
    int id;
    std::string name;
    bool stroked; // open shapes rendered as strokes
};

inline const std::vector<ClassDef>& class_library() {
    static const std::vector<ClassDef> lib = {
        {0, "line", true},        {1, "folding_line", true}, {2, "angle", true},
        {3, "triangle", false},   {4, "square", false},      {5, "pentagon", false},
        {6, "hexagon", false},    {7, "octagon", false},     {8, "circle", false},
        {9, "ellipse", false},    {10, "arc", true},         {11, "semicircle", false},
        {12, "cross", false},     {13, "arrow", false},      {14, "star4", false},
        {15, "star5", false},     {16, "star6", false},      {17, "star8", false},
        {18, "annulus", false},   {19, "crescent", false},   {20, "t_shape", false},
        {21, "l_shape", false},   {22, "zigzag", true},      {23, "trapezoid", false},
        {24, "rhombus", false},
    };
    return lib;
}

inline std::vector<ClassDef> generate_class_library() { return class_library(); }

namespace detail {

struct Vec2 {
    double x, y;
};

inline double dist_point_segment(double px, double py, Vec2 a, Vec2 b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double wx = px - a.x, wy = py - a.y;
    const double vv = vx * vx + vy * vy;
    double t = vv > 0 ? (wx * vx + wy * vy) / vv : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

inline bool in_polygon(double px, double py, const std::vector<Vec2>& poly) {
    // even-odd ray casting
    bool in = false;
    const size_t n = poly.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
        const Vec2& pi = poly[i];
        const Vec2& pj = poly[j];
        if ((pi.y > py) != (pj.y > py)) {
            const double xint = pj.x + (py - pj.y) / (pi.y - pj.y) * (pi.x - pj.x);
            if (px < xint) in = !in;
        }
    }
    return in;
}

inline std::vector<Vec2> regular_polygon(int k, double phase) {
    std::vector<Vec2> pts;
    pts.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        const double t = phase + 2.0 * kPi * i / k;
        pts.push_back({std::cos(t), std::sin(t)});
    }
    return pts;
}

inline std::vector<Vec2> star_polygon(int points, double inner) {
    std::vector<Vec2> pts;
    for (int i = 0; i < 2 * points; ++i) {
        const double r = (i % 2 == 0) ? 1.0 : inner;
        const double t = kPi / 2 + kPi * i / points;
        pts.push_back({r * std::cos(t), r * std::sin(t)});
    }
    return pts;
}

inline void normalize_to_unit(std::vector<Vec2>& pts) {
    double m = 0;
    for (const auto& p : pts) m = std::max(m, std::hypot(p.x, p.y));
    if (m > 0)
        for (auto& p : pts) {
            p.x /= m;
            p.y /= m;
        }
}

} // namespace detail

// Canonical geometry predicate: decides membership for a point in the
// canonical frame (shape fits inside the unit disk). `hw` is the stroke
// half-width in canonical units for stroked classes.
using CanonPredicate = std::function<bool(double, double)>;

inline CanonPredicate make_canonical_geometry(int class_id, const ShapeParams& p, double hw) {
    using namespace detail;
    switch (class_id) {
        case 0: { // line
            return [hw](double x, double y) {
                return dist_point_segment(x, y, {-1, 0}, {1, 0}) <= hw;
            };
        }
        case 1: { // folding_line: bend height from param a
            const double e = p.a;
            const double n = std::sqrt(1.0 + e * e);
            std::vector<Vec2> pts = {{-1 / n, -e / n}, {0, e / n}, {1 / n, -e / n}};
            return [pts, hw](double x, double y) {
                return dist_point_segment(x, y, pts[0], pts[1]) <= hw ||
                       dist_point_segment(x, y, pts[1], pts[2]) <= hw;
            };
        }
        case 2: { // angle: two rays from a shared vertex, opening from a
            const double phi = p.a;
            const Vec2 v0{-0.5, -0.35}, e1{0.5, -0.35};
            const Vec2 e2{v0.x + std::cos(phi), v0.y + std::sin(phi)};
            std::vector<Vec2> pts = {v0, e1, e2};
            normalize_to_unit(pts);
            return [pts, hw](double x, double y) {
                return dist_point_segment(x, y, pts[0], pts[1]) <= hw ||
                       dist_point_segment(x, y, pts[0], pts[2]) <= hw;
            };
        }
        case 3: { // triangle with per-sample vertex jitter
            std::vector<Vec2> pts;
            const double jit[3] = {p.a, p.b, p.c};
            for (int i = 0; i < 3; ++i) {
                const double t = kPi / 2 + 2.0 * kPi * i / 3 + jit[i];
                pts.push_back({std::cos(t), std::sin(t)});
            }
            return [pts](double x, double y) { return in_polygon(x, y, pts); };
        }
        case 4: { // square
            const double s = 1.0 / std::sqrt(2.0);
            return [s](double x, double y) { return std::abs(x) <= s && std::abs(y) <= s; };
        }
        case 5:
        case 6:
        case 7: { // pentagon / hexagon / octagon
            const int k = class_id == 5 ? 5 : class_id == 6 ? 6 : 8;
            auto pts = regular_polygon(k, kPi / 2);
            return [pts](double x, double y) { return in_polygon(x, y, pts); };
        }
        case 8: { // circle
            return [](double x, double y) { return x * x + y * y <= 1.0; };
        }
        case 9: { // ellipse, aspect from a
            const double b = 1.0 / p.a;
            return [b](double x, double y) {
                const double ny = y / b;
                return x * x + ny * ny <= 1.0;
            };
        }
        case 10: { // arc: angular span from a
            const double span = p.a;
            const double R = 1.0 - hw;
            return [span, R, hw](double x, double y) {
                const double r = std::hypot(x, y);
                if (std::abs(r - R) > hw) return false;
                double t = std::atan2(y, x);
                if (t < 0) t += 2 * kPi;
                return t <= span;
            };
        }
        case 11: { // semicircle
            return [](double x, double y) { return x * x + y * y <= 1.0 && y >= 0.0; };
        }
        case 12: { // cross, arm half-width from a
            const double w = p.a;
            const double n = std::sqrt(1.0 + w * w);
            const double lw = w / n, ll = 1.0 / n;
            return [lw, ll](double x, double y) {
                return (std::abs(x) <= lw && std::abs(y) <= ll) ||
                       (std::abs(y) <= lw && std::abs(x) <= ll);
            };
        }
        case 13: { // arrow pointing +x, head start from a
            const double h = p.a, w = 0.22, H = 0.55;
            std::vector<Vec2> pts = {{-1, -w}, {h, -w}, {h, -H}, {1, 0},
                                     {h, H},   {h, w},  {-1, w}};
            normalize_to_unit(pts);
            return [pts](double x, double y) { return in_polygon(x, y, pts); };
        }
        case 14:
        case 15:
        case 16:
        case 17: { // stars
            const int k = class_id == 14 ? 4 : class_id == 15 ? 5 : class_id == 16 ? 6 : 8;
            auto pts = star_polygon(k, p.a);
            return [pts](double x, double y) { return in_polygon(x, y, pts); };
        }
        case 18: { // annulus, inner radius from a
            const double ri = p.a;
            return [ri](double x, double y) {
                const double r2 = x * x + y * y;
                return r2 <= 1.0 && r2 >= ri * ri;
            };
        }
        case 19: { // crescent: unit disk minus offset cutter disk
            const double d = p.a, rc = p.b;
            return [d, rc](double x, double y) {
                if (x * x + y * y > 1.0) return false;
                const double dx = x - d;
                return dx * dx + y * y >= rc * rc;
            };
        }
        case 20: { // t_shape: bar thickness a, stem half-width b
            const double t = p.a, s = p.b;
            const double n = std::sqrt(2.0);
            return [t, s, n](double x, double y) {
                const double ux = x * n, uy = y * n;
                const bool bar = std::abs(ux) <= 1.0 && uy >= 1.0 - t && uy <= 1.0;
                const bool stem = std::abs(ux) <= s && uy >= -1.0 && uy <= 1.0 - t;
                return bar || stem;
            };
        }
        case 21: { // l_shape: limb thickness a
            const double t = p.a;
            const double n = std::sqrt(2.0);
            return [t, n](double x, double y) {
                const double ux = x * n, uy = y * n;
                const bool vert = ux >= -1.0 && ux <= -1.0 + t && std::abs(uy) <= 1.0;
                const bool horz = uy >= -1.0 && uy <= -1.0 + t && std::abs(ux) <= 1.0;
                return vert || horz;
            };
        }
        case 22: { // zigzag, amplitude from a
            const double amp = p.a;
            const double n = std::sqrt(1.0 + amp * amp);
            std::vector<Vec2> pts;
            for (int i = 0; i <= 4; ++i) {
                const double x = -1.0 + 0.5 * i;
                const double y = (i % 2 == 0) ? -amp : amp;
                pts.push_back({x / n, y / n});
            }
            return [pts, hw](double x, double y) {
                for (size_t i = 0; i + 1 < pts.size(); ++i)
                    if (dist_point_segment(x, y, pts[i], pts[i + 1]) <= hw) return true;
                return false;
            };
        }
        case 23: { // trapezoid, top half-width from a
            const double b = p.a, h = 0.6;
            std::vector<Vec2> pts = {{-1, -h}, {1, -h}, {b, h}, {-b, h}};
            normalize_to_unit(pts);
            return [pts](double x, double y) { return in_polygon(x, y, pts); };
        }
        case 24: { // rhombus, minor semi-axis from a
            const double b = p.a;
            return [b](double x, double y) { return std::abs(x) + std::abs(y) / b <= 1.0; };
        }
        default:
            throw GenError("unknown class id " + std::to_string(class_id));
    }
}

namespace detail {

inline void sample_shape_knobs(int class_id, Rng& rng, ShapeParams& p) {
    switch (class_id) {
        case 1: p.a = rng.uniform(0.35, 0.8); break;              // folding line bend
        case 2: p.a = rng.uniform(0.6, 2.4); break;               // angle opening (rad)
        case 3:                                                   // triangle jitter
            p.a = rng.uniform(-0.25, 0.25);
            p.b = rng.uniform(-0.25, 0.25);
            p.c = rng.uniform(-0.25, 0.25);
            break;
        case 9: p.a = rng.uniform(1.8, 2.8); break;               // ellipse aspect
        case 10: p.a = rng.uniform(1.9, 4.4); break;              // arc span (rad)
        case 12: p.a = rng.uniform(0.24, 0.4); break;             // cross arm
        case 13: p.a = rng.uniform(0.05, 0.4); break;             // arrow head start
        case 14: p.a = rng.uniform(0.3, 0.45); break;             // star inner radii
        case 15: p.a = rng.uniform(0.4, 0.55); break;
        case 16: p.a = rng.uniform(0.45, 0.6); break;
        case 17: p.a = rng.uniform(0.55, 0.7); break;
        case 18: p.a = rng.uniform(0.5, 0.68); break;             // annulus inner r
        case 19:                                                  // crescent cutter
            p.a = rng.uniform(0.5, 0.7);
            p.b = rng.uniform(0.78, 0.95);
            break;
        case 20:                                                  // T: bar, stem
            p.a = rng.uniform(0.5, 0.7);
            p.b = rng.uniform(0.2, 0.3);
            break;
        case 21: p.a = rng.uniform(0.4, 0.6); break;              // L thickness
        case 22: p.a = rng.uniform(0.4, 0.75); break;             // zigzag amplitude
        case 23: p.a = rng.uniform(0.25, 0.55); break;            // trapezoid top
        case 24: p.a = rng.uniform(0.3, 0.55); break;             // rhombus minor
        default: break;
    }
}

struct RasterCheck {
    bool ok;
    std::string why;
};

inline RasterCheck validate_mask(const std::vector<uint8_t>& mask, int H, int W) {
    int area = 0;
    for (uint8_t v : mask) area += v;
    if (area < 8) return {false, "area too small"};
    // margin: nothing within kMarginPx of the border
    const int m = static_cast<int>(kMarginPx);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (mask[static_cast<size_t>(y) * W + x] &&
                (y < m || y >= H - m || x < m || x >= W - m))
                return {false, "margin violated"};
    // single 8-connected component
    std::vector<uint8_t> vis(mask.size(), 0);
    int sy = -1, sx = -1;
    for (int i = 0; i < H * W && sy < 0; ++i)
        if (mask[static_cast<size_t>(i)]) {
            sy = i / W;
            sx = i % W;
        }
    std::deque<std::pair<int, int>> q{{sy, sx}};
    vis[static_cast<size_t>(sy) * W + sx] = 1;
    int count = 1;
    while (!q.empty()) {
        auto [y, x] = q.front();
        q.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (!dy && !dx) continue;
                const int ny = y + dy, nx = x + dx;
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                const size_t idx = static_cast<size_t>(ny) * W + nx;
                if (mask[idx] && !vis[idx]) {
                    vis[idx] = 1;
                    ++count;
                    q.push_back({ny, nx});
                }
            }
    }
    if (count != area) return {false, "disconnected mask"};
    return {true, ""};
}

} // namespace detail

inline std::vector<uint8_t> edge_from_mask(const std::vector<uint8_t>& mask, int H, int W) {
    std::vector<uint8_t> edge(mask.size(), 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const size_t i = static_cast<size_t>(y) * W + x;
            if (!mask[i]) continue;
            const bool boundary = (y == 0 || !mask[i - static_cast<size_t>(W)]) ||
                                  (y == H - 1 || !mask[i + static_cast<size_t>(W)]) ||
                                  (x == 0 || !mask[i - 1]) || (x == W - 1 || !mask[i + 1]);
            if (boundary) edge[i] = 1;
        }
    return edge;
}

// Rasterizes the mask for explicit parameters (no validation, no sampling).
inline std::vector<uint8_t> rasterize_mask(int class_id, const ShapeParams& p, int H, int W) {
    const double r = p.scale / 2.0;
    const double hw = (kStrokeWidthPx / 2.0) / r;
    auto canon = make_canonical_geometry(class_id, p, hw);
    const double cr = std::cos(p.rotation), sr = std::sin(p.rotation);
    std::vector<uint8_t> mask(static_cast<size_t>(H) * W, 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double px = (x + 0.5) - p.cx;
            const double py = (y + 0.5) - p.cy;
            // rotate by -rotation into the canonical frame
            const double qx = (cr * px + sr * py) / r;
            const double qy = (-sr * px + cr * py) / r;
            if (canon(qx, qy)) mask[static_cast<size_t>(y) * W + x] = 1;
        }
    return mask;
}

inline ShapeSample render_from_params(int class_id, const ShapeParams& p, int H, int W,
                                      uint64_t seed = 0) {
    ShapeSample s;
    s.H = H;
    s.W = W;
    s.class_id = class_id;
    s.seed = seed;
    s.params = p;
    s.mask = rasterize_mask(class_id, p, H, W);
    s.edge = edge_from_mask(s.mask, H, W);
    s.image.resize(s.mask.size());
    for (size_t i = 0; i < s.mask.size(); ++i)
        s.image[i] = static_cast<float>(s.mask[i] ? p.fg : p.bg);
    return s;
}

// Samples parameters and renders; resamples degenerate draws up to 10 times.
inline ShapeSample render_sample(int class_id, uint64_t seed, int H, int W) {
    if (H < 32 || W < 32) throw GenError("raster must be at least 32x32");
    if (class_id < 0 || class_id >= kNumClasses) throw GenError("class id out of range");
    Rng rng(Rng::mix(seed) ^ Rng::mix(static_cast<uint64_t>(class_id) * 0x100000001b3ull) ^
            Rng::mix((static_cast<uint64_t>(H) << 32) | static_cast<uint64_t>(W)));
    const double sz = static_cast<double>(std::min(H, W));
    std::string last_err;
    for (int attempt = 0; attempt < 10; ++attempt) {
        ShapeParams p;
        p.scale = rng.uniform(0.4, 0.9) * sz;
        // clamp the radius so the bounding disk keeps the 2 px margin
        const double rmax = (sz - 2.0 * (kMarginPx + 0.5)) / 2.0;
        if (p.scale / 2.0 > rmax) p.scale = 2.0 * rmax;
        const double r = p.scale / 2.0;
        p.cx = rng.uniform(r + kMarginPx + 0.5, W - r - kMarginPx - 0.5);
        p.cy = rng.uniform(r + kMarginPx + 0.5, H - r - kMarginPx - 0.5);
        p.rotation = rng.uniform(0.0, 2.0 * kPi);
        detail::sample_shape_knobs(class_id, rng, p);
        do {
            p.fg = rng.uniform(0.05, 0.95);
            p.bg = rng.uniform(0.05, 0.95);
        } while (std::abs(p.fg - p.bg) < kMinContrast);

        auto mask = rasterize_mask(class_id, p, H, W);
        auto check = detail::validate_mask(mask, H, W);
        if (!check.ok) {
            last_err = check.why;
            continue;
        }
        auto edge = edge_from_mask(mask, H, W);
        int ec = 0, mc = 0;
        for (size_t i = 0; i < mask.size(); ++i) {
            ec += edge[i];
            mc += mask[i];
        }
        if (ec == 0 || ec >= mc) {
            last_err = "degenerate edge";
            continue;
        }
        ShapeSample s;
        s.H = H;
        s.W = W;
        s.class_id = class_id;
        s.seed = seed;
        s.params = p;
        s.mask = std::move(mask);
        s.edge = std::move(edge);
        s.image.resize(s.mask.size());
        for (size_t i = 0; i < s.mask.size(); ++i)
            s.image[i] = static_cast<float>(s.mask[i] ? p.fg : p.bg);
        return s;
    }
    throw GenError("class " + std::to_string(class_id) + " seed " + std::to_string(seed) +
                   ": 10 resampling attempts failed (" + last_err + ")");
}

// ---------------------------------------------------------------------------
// Splits and episodes
// ---------------------------------------------------------------------------

inline std::pair<std::vector<int>, std::vector<int>> split_classes(int num_train, int num_test,
                                                                   uint64_t seed) {
    if (num_train < 0 || num_test < 0 || num_train + num_test > kNumClasses)
        throw GenError("split sizes must be nonnegative and sum to at most " +
                       std::to_string(kNumClasses));
    std::vector<int> ids(kNumClasses);
    for (int i = 0; i < kNumClasses; ++i) ids[static_cast<size_t>(i)] = i;
    Rng rng(Rng::mix(seed) ^ 0x5f3759df);
    for (int i = kNumClasses - 1; i > 0; --i)
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(rng.uniform_int(i + 1))]);
    std::vector<int> train(ids.begin(), ids.begin() + num_train);
    std::vector<int> test(ids.begin() + num_train, ids.begin() + num_train + num_test);
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

// A split is a set of classes, each with its loaded samples.
struct DatasetSplit {
    std::vector<int> class_ids;                            // global class ids
    std::vector<std::vector<const ShapeSample*>> samples;  // per class
};

struct Episode {
    int ways = 0, shots = 0, queries = 0;
    std::vector<const ShapeSample*> support; // slot-major: slot 0 shots, slot 1 shots, ...
    std::vector<const ShapeSample*> query;   // slot-major
    std::vector<int> class_map;              // episode slot -> global class id
};

inline Episode sample_episode(const DatasetSplit& split, int c, int m1, int m2, Rng& rng) {
    const int nc = static_cast<int>(split.class_ids.size());
    if (nc < c) throw GenError("split has fewer than c classes");
    // choose c classes without replacement
    std::vector<int> order(static_cast<size_t>(nc));
    for (int i = 0; i < nc; ++i) order[static_cast<size_t>(i)] = i;
    for (int i = 0; i < c; ++i) {
        const int j = i + rng.uniform_int(nc - i);
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    Episode ep;
    ep.ways = c;
    ep.shots = m1;
    ep.queries = m2;
    for (int slot = 0; slot < c; ++slot) {
        const int ci = order[static_cast<size_t>(slot)];
        const auto& pool = split.samples[static_cast<size_t>(ci)];
        const int n = static_cast<int>(pool.size());
        if (n < m1 + m2) throw GenError("class has fewer than m1+m2 samples");
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        for (int i = 0; i < m1 + m2; ++i) {
            const int j = i + rng.uniform_int(n - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        ep.class_map.push_back(split.class_ids[static_cast<size_t>(ci)]);
        for (int i = 0; i < m1; ++i) ep.support.push_back(pool[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
        for (int i = 0; i < m2; ++i)
            ep.query.push_back(pool[static_cast<size_t>(idx[static_cast<size_t>(m1 + i)])]);
    }
    return ep;
}

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

struct GenConfig {
    std::string root;
    int per_class = 400;
    int size = 32;
    uint64_t seed = 0;
    int train_classes = 15;
    int test_classes = 10;
};

inline uint64_t sample_seed_for(uint64_t gen_seed, int class_id, int index) {
    return Rng::mix(gen_seed ^ Rng::mix(static_cast<uint64_t>(class_id) * 1000003ull +
                                        static_cast<uint64_t>(index)));
}

inline void write_png_gray(const std::string& path, const std::vector<uint8_t>& v01, int H,
                           int W) {
    std::vector<uint8_t> px(v01.size());
    for (size_t i = 0; i < v01.size(); ++i) px[i] = v01[i] ? 255 : 0;
    png::write_gray8(path, px.data(), W, H);
}

inline void generate_dataset(const GenConfig& cfg) {
    namespace fs = std::filesystem;
    auto [train_ids, test_ids] = split_classes(cfg.train_classes, cfg.test_classes, cfg.seed);
    const auto& lib = class_library();
    fs::create_directories(cfg.root);
    std::ofstream manifest(cfg.root + "/manifest.jsonl", std::ios::binary);
    if (!manifest) throw GenError("cannot write manifest in " + cfg.root);

    auto emit_class = [&](const std::string& split_name, int cid) {
        const auto& def = lib[static_cast<size_t>(cid)];
        const fs::path dir = fs::path(cfg.root) / split_name / def.name;
        fs::create_directories(dir);
        for (int i = 0; i < cfg.per_class; ++i) {
            const uint64_t seed = sample_seed_for(cfg.seed, cid, i);
            const auto s = render_sample(cid, seed, cfg.size, cfg.size);
            const std::string stem = std::to_string(seed);
            std::vector<uint8_t> img_px(s.image.size());
            for (size_t k = 0; k < s.image.size(); ++k)
                img_px[k] = static_cast<uint8_t>(std::lround(s.image[k] * 255.0f));
            png::write_gray8((dir / (stem + ".png")).string(), img_px.data(), s.W, s.H);
            write_png_gray((dir / (stem + "_mask.png")).string(), s.mask, s.H, s.W);
            write_png_gray((dir / (stem + "_edge.png")).string(), s.edge, s.H, s.W);
            json rec{{"class_id", cid},
                     {"class_name", def.name},
                     {"seed", seed},
                     {"split", split_name},
                     {"params", s.params.to_json()}};
            manifest << rec.dump() << "\n";
        }
    };
    for (int cid : train_ids) emit_class("train", cid);
    for (int cid : test_ids) emit_class("test", cid);
}

struct LoadedDataset {
    int H = 0, W = 0;
    std::vector<ShapeSample> all;
    DatasetSplit train, test;
    std::vector<int> train_ids, test_ids;
};

inline LoadedDataset load_dataset(const std::string& root) {
    namespace fs = std::filesystem;
    const std::string manifest_path = root + "/manifest.jsonl";
    std::ifstream manifest(manifest_path, std::ios::binary);
    if (!manifest) throw GenError("dataset manifest not found: " + manifest_path);
    const auto& lib = class_library();

    LoadedDataset ds;
    std::string line;
    struct Rec {
        int cid;
        uint64_t seed;
        std::string split;
        std::string name;
        ShapeParams params;
    };
    std::vector<Rec> recs;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        Rec r;
        r.cid = j.at("class_id");
        r.seed = j.at("seed");
        r.split = j.at("split");
        r.name = j.at("class_name");
        r.params = ShapeParams::from_json(j.at("params"));
        recs.push_back(std::move(r));
    }
    if (recs.empty()) throw GenError("empty manifest: " + manifest_path);
    ds.all.reserve(recs.size());
    for (const auto& r : recs) {
        const fs::path dir = fs::path(root) / r.split / lib[static_cast<size_t>(r.cid)].name;
        const std::string stem = std::to_string(r.seed);
        const auto img = png::read_gray8((dir / (stem + ".png")).string());
        const auto msk = png::read_gray8((dir / (stem + "_mask.png")).string());
        const auto edg = png::read_gray8((dir / (stem + "_edge.png")).string());
        ShapeSample s;
        s.H = img.height;
        s.W = img.width;
        s.class_id = r.cid;
        s.seed = r.seed;
        s.params = r.params;
        s.image.resize(img.pixels.size());
        for (size_t i = 0; i < img.pixels.size(); ++i)
            s.image[i] = static_cast<float>(img.pixels[i]) / 255.0f;
        s.mask.resize(msk.pixels.size());
        for (size_t i = 0; i < msk.pixels.size(); ++i) s.mask[i] = msk.pixels[i] > 127 ? 1 : 0;
        s.edge.resize(edg.pixels.size());
        for (size_t i = 0; i < edg.pixels.size(); ++i) s.edge[i] = edg.pixels[i] > 127 ? 1 : 0;
        ds.H = s.H;
        ds.W = s.W;
        ds.all.push_back(std::move(s));
        if (r.split == "train") {
            if (std::find(ds.train_ids.begin(), ds.train_ids.end(), r.cid) == ds.train_ids.end())
                ds.train_ids.push_back(r.cid);
        } else {
            if (std::find(ds.test_ids.begin(), ds.test_ids.end(), r.cid) == ds.test_ids.end())
                ds.test_ids.push_back(r.cid);
        }
    }
    auto build_split = [&](const std::vector<int>& ids) {
        DatasetSplit sp;
        sp.class_ids = ids;
        sp.samples.resize(ids.size());
        for (const auto& s : ds.all) {
            const auto it = std::find(ids.begin(), ids.end(), s.class_id);
            if (it != ids.end())
                sp.samples[static_cast<size_t>(it - ids.begin())].push_back(&s);
        }
        return sp;
    };
    ds.train = build_split(ds.train_ids);
    ds.test = build_split(ds.test_ids);
    return ds;
}

} // namespace fssd::shapegen
