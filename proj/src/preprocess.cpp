#include "afnet/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "afnet/rng.hpp"

namespace afnet {

namespace {

const char* kExpressionNames[kNumExpressions] = {"anger",     "disgust", "fear",
                                                 "happiness", "sadness", "surprise"};

const char* kRegions[4] = {"left-eye", "right-eye", "nose", "mouth"};

bool is_region(const std::string& s) {
    for (const char* r : kRegions)
        if (s == r) return true;
    return false;
}

double median_of(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    return v[(v.size() - 1) / 2];  // lower median: a selection, never a blend
}

}  // namespace

int expression_from_name(const std::string& name) {
    for (int i = 0; i < kNumExpressions; ++i)
        if (name == kExpressionNames[i]) return i;
    try {
        const int v = std::stoi(name);
        if (v >= 0 && v < kNumExpressions) return v;
    } catch (...) {
    }
    throw InputError("unknown expression class '" + name + "'");
}

const char* expression_name(int label) {
    if (label < 0 || label >= kNumExpressions)
        throw InputError("expression label out of range: " + std::to_string(label));
    return kExpressionNames[label];
}

void Scan::validate() const {
    if (points.empty()) throw InputError("scan has no points");
    if (points.size() != colors.size())
        throw InputError("scan has " + std::to_string(points.size()) + " points but " +
                         std::to_string(colors.size()) + " colors");
    for (const char* r : kRegions) {
        bool seen = false;
        for (const auto& lm : landmarks)
            if (lm.region == r) seen = true;
        if (!seen) throw InputError(std::string("scan is missing landmarks for region ") + r);
    }
    if (expression < 0 || expression >= kNumExpressions)
        throw InputError("scan expression label out of range");
}

RawProjection project_to_grid(const Scan& scan, std::int64_t grid_size) {
    scan.validate();
    if (grid_size < 16) throw InputError("project_to_grid: grid must be at least 16");
    const std::int64_t s = grid_size;

    double xmin = scan.points[0][0], xmax = xmin;
    double ymin = scan.points[0][1], ymax = ymin;
    for (const auto& p : scan.points) {
        xmin = std::min(xmin, p[0]);
        xmax = std::max(xmax, p[0]);
        ymin = std::min(ymin, p[1]);
        ymax = std::max(ymax, p[1]);
    }
    const double w = xmax - xmin, h = ymax - ymin;

    RawProjection out;
    out.texture = Tensor::zeros({3, s, s});
    out.depth = Tensor::zeros({s, s});
    out.holes.assign(static_cast<std::size_t>(s * s), 1);
    std::vector<double> best_z(static_cast<std::size_t>(s * s), 0.0);

    for (std::size_t i = 0; i < scan.points.size(); ++i) {
        const auto& p = scan.points[i];
        const std::int64_t col =
            w > 0 ? std::min<std::int64_t>(s - 1, static_cast<std::int64_t>((p[0] - xmin) / w * s))
                  : (s - 1) / 2;
        const std::int64_t row =
            h > 0 ? std::min<std::int64_t>(s - 1, static_cast<std::int64_t>((ymax - p[1]) / h * s))
                  : (s - 1) / 2;
        const std::size_t cell = static_cast<std::size_t>(row * s + col);
        if (out.holes[cell] || p[2] > best_z[cell]) {
            out.holes[cell] = 0;
            best_z[cell] = p[2];
            for (int c = 0; c < 3; ++c)
                out.texture.data()[static_cast<std::size_t>(c * s * s) + cell] =
                    std::clamp(scan.colors[i][static_cast<std::size_t>(c)], 0.0, 1.0);
        }
    }

    double zmin = 0, zmax = 0;
    bool first = true;
    for (std::size_t i = 0; i < out.holes.size(); ++i) {
        if (out.holes[i]) continue;
        if (first) {
            zmin = zmax = best_z[i];
            first = false;
        } else {
            zmin = std::min(zmin, best_z[i]);
            zmax = std::max(zmax, best_z[i]);
        }
    }
    const double zr = zmax - zmin;
    for (std::size_t i = 0; i < out.holes.size(); ++i)
        if (!out.holes[i]) out.depth.data()[i] = zr > 0 ? (best_z[i] - zmin) / zr : 0.0;
    return out;
}

Tensor fill_holes(const Tensor& plane, std::vector<std::uint8_t> holes) {
    if (plane.rank() != 2) throw ShapeError("fill_holes: expected a [S,S] plane");
    const std::int64_t s = plane.dim(0);
    if (static_cast<std::int64_t>(holes.size()) != s * s)
        throw ShapeError("fill_holes: hole map size mismatch");
    Tensor out = Tensor::from_data(plane.shape(), plane.data());
    std::size_t remaining = 0;
    for (auto f : holes) remaining += f;
    if (remaining == holes.size()) throw InputError("fill_holes: every cell is a hole");

    while (remaining > 0) {
        std::vector<std::pair<std::size_t, double>> wave;
        for (std::int64_t y = 0; y < s; ++y)
            for (std::int64_t x = 0; x < s; ++x) {
                const std::size_t i = static_cast<std::size_t>(y * s + x);
                if (!holes[i]) continue;
                double acc = 0.0;
                int cnt = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (!dy && !dx) continue;
                        const std::int64_t ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= s || nx < 0 || nx >= s) continue;
                        const std::size_t j = static_cast<std::size_t>(ny * s + nx);
                        if (holes[j]) continue;
                        acc += out.data()[j];
                        ++cnt;
                    }
                if (cnt > 0) wave.emplace_back(i, acc / cnt);
            }
        for (const auto& [i, v] : wave) {
            out.data()[i] = v;
            holes[i] = 0;
        }
        remaining -= wave.size();
    }
    return out;
}

namespace {

// 5x5 robust outlier scan; returns flagged cells (holes are skipped).
std::vector<std::uint8_t> outlier_flags(const Tensor& depth,
                                        const std::vector<std::uint8_t>& holes) {
    const std::int64_t s = depth.dim(0);
    std::vector<std::uint8_t> flag(holes.size(), 0);
    std::vector<double> window;
    for (std::int64_t y = 0; y < s; ++y)
        for (std::int64_t x = 0; x < s; ++x) {
            const std::size_t i = static_cast<std::size_t>(y * s + x);
            if (holes[i]) continue;
            window.clear();
            for (std::int64_t dy = -2; dy <= 2; ++dy)
                for (std::int64_t dx = -2; dx <= 2; ++dx) {
                    const std::int64_t ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= s || nx < 0 || nx >= s) continue;
                    const std::size_t j = static_cast<std::size_t>(ny * s + nx);
                    if (!holes[j]) window.push_back(depth.data()[j]);
                }
            if (window.size() < 5) continue;
            std::vector<double> tmp = window;
            const double med = median_of(tmp);
            for (auto& v : tmp) v = std::abs(v - med);
            const double mad = median_of(tmp);
            const double sigma = 1.4826 * mad;
            if (std::abs(depth.data()[i] - med) > 3.0 * sigma + 1e-4) flag[i] = 1;
        }
    return flag;
}

// Median of nine by a minimum-exchange sorting network.
inline double median9(double p0, double p1, double p2, double p3, double p4, double p5, double p6,
                      double p7, double p8) {
    auto mnmx = [](double& a, double& b) {
        if (b < a) std::swap(a, b);
    };
    mnmx(p1, p2); mnmx(p4, p5); mnmx(p7, p8);
    mnmx(p0, p1); mnmx(p3, p4); mnmx(p6, p7);
    mnmx(p1, p2); mnmx(p4, p5); mnmx(p7, p8);
    mnmx(p0, p3); mnmx(p5, p8); mnmx(p4, p7);
    mnmx(p3, p6); mnmx(p1, p4); mnmx(p2, p5);
    mnmx(p4, p7); mnmx(p4, p2); mnmx(p6, p4);
    mnmx(p4, p2);
    return p4;
}

// 3x3 clamp-to-edge median filter run to its fixpoint.
Tensor median_fixpoint(Tensor cur) {
    const std::int64_t s = cur.dim(0);
    for (int iter = 0; iter < 100; ++iter) {
        Tensor next = Tensor::zeros(cur.shape());
        bool changed = false;
        const double* src = cur.data().data();
        double* dst = next.data().data();
        for (std::int64_t y = 0; y < s; ++y) {
            const double* r0 = src + std::max<std::int64_t>(y - 1, 0) * s;
            const double* r1 = src + y * s;
            const double* r2 = src + std::min<std::int64_t>(y + 1, s - 1) * s;
            for (std::int64_t x = 0; x < s; ++x) {
                const std::int64_t xl = std::max<std::int64_t>(x - 1, 0);
                const std::int64_t xr = std::min<std::int64_t>(x + 1, s - 1);
                const double med = median9(r0[xl], r0[x], r0[xr], r1[xl], r1[x], r1[xr], r2[xl],
                                           r2[x], r2[xr]);
                dst[y * s + x] = med;
                if (med != r1[x]) changed = true;
            }
        }
        cur = next;
        if (!changed) break;
    }
    return cur;
}

}  // namespace

Tensor surface_clean(const Tensor& depth, const std::vector<std::uint8_t>& holes) {
    if (depth.rank() != 2) throw ShapeError("surface_clean: expected a [S,S] depth plane");
    const std::int64_t s = depth.dim(0);
    if (static_cast<std::int64_t>(holes.size()) != s * s)
        throw ShapeError("surface_clean: hole map size mismatch");

    // The outlier->fill->median triple repeats until either the outlier scan
    // comes back empty or a full round leaves the plane bit-identical. Both
    // exits make the function idempotent: the rounds are deterministic, so a
    // second call walks the same fixpoint.
    Tensor cur = depth;
    std::vector<std::uint8_t> h = holes;
    for (int round = 0; round < 60; ++round) {
        const std::vector<std::uint8_t> flags = outlier_flags(cur, h);
        bool any_hole = false;
        for (std::size_t i = 0; i < h.size(); ++i) {
            if (flags[i]) h[i] = 1;
            any_hole = any_hole || h[i];
        }
        if (round > 0 && !any_hole) break;
        const std::vector<double> before = cur.data();
        if (any_hole) cur = fill_holes(cur, h);
        h.assign(h.size(), 0);
        cur = median_fixpoint(cur);
        if (round > 0 && cur.data() == before) break;
    }
    for (auto& v : cur.data()) v = std::clamp(v, 0.0, 1.0);
    return cur;
}

// ---------------------------------------------------------------------------
// mask rasterization

namespace {

struct Pt {
    double x, y;
};

// Monotone-chain convex hull; handles duplicate and collinear input.
std::vector<Pt> convex_hull(std::vector<Pt> pts) {
    std::sort(pts.begin(), pts.end(), [](const Pt& a, const Pt& b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](const Pt& a, const Pt& b) { return a.x == b.x && a.y == b.y; }),
              pts.end());
    if (pts.size() <= 2) return pts;
    auto cross = [](const Pt& o, const Pt& a, const Pt& b) {
        return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    };
    std::vector<Pt> hull(2 * pts.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    const std::size_t lower = k + 1;
    for (std::size_t i = pts.size() - 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

double seg_dist(const Pt& p, const Pt& a, const Pt& b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

double hull_distance(const Pt& p, const std::vector<Pt>& hull) {
    if (hull.empty()) return std::numeric_limits<double>::infinity();
    if (hull.size() == 1) {
        const double dx = p.x - hull[0].x, dy = p.y - hull[0].y;
        return std::sqrt(dx * dx + dy * dy);
    }
    if (hull.size() == 2) return seg_dist(p, hull[0], hull[1]);
    bool inside = true;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const Pt& a = hull[i];
        const Pt& b = hull[(i + 1) % hull.size()];
        const double cr = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        if (cr < 0) inside = false;
        best = std::min(best, seg_dist(p, a, b));
    }
    return inside ? 0.0 : best;
}

}  // namespace

MaskPyramid rasterize_masks(const std::vector<Landmark>& landmarks, std::int64_t grid_size) {
    if (grid_size < 16 || grid_size % 8 != 0)
        throw InputError("rasterize_masks: grid must be >= 16 and divisible by 8");
    const std::int64_t m1 = grid_size / 4;
    const double radius = static_cast<double>(grid_size) / 32.0;

    MaskPyramid py;
    py.mask1 = Tensor::zeros({1, m1, m1});

    for (const char* region : kRegions) {
        std::vector<Pt> pts;
        for (const auto& lm : landmarks)
            if (lm.region == region)
                pts.push_back({lm.u * static_cast<double>(m1 - 1),
                               lm.v * static_cast<double>(m1 - 1)});
        if (pts.empty())
            throw InputError(std::string("rasterize_masks: region ") + region + " has no landmarks");
        const std::vector<Pt> hull = convex_hull(pts);
        double xlo = pts[0].x, xhi = pts[0].x, ylo = pts[0].y, yhi = pts[0].y;
        for (const auto& p : pts) {
            xlo = std::min(xlo, p.x);
            xhi = std::max(xhi, p.x);
            ylo = std::min(ylo, p.y);
            yhi = std::max(yhi, p.y);
        }
        const std::int64_t cx0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(xlo - radius) - 1);
        const std::int64_t cx1 = std::min<std::int64_t>(m1 - 1, static_cast<std::int64_t>(xhi + radius) + 1);
        const std::int64_t cy0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(ylo - radius) - 1);
        const std::int64_t cy1 = std::min<std::int64_t>(m1 - 1, static_cast<std::int64_t>(yhi + radius) + 1);
        for (std::int64_t y = cy0; y <= cy1; ++y)
            for (std::int64_t x = cx0; x <= cx1; ++x)
                if (hull_distance({static_cast<double>(x), static_cast<double>(y)}, hull) <= radius)
                    py.mask1.data()[static_cast<std::size_t>(y * m1 + x)] = 1.0;
    }

    const std::int64_t m2 = m1 / 2;
    py.mask2 = Tensor::zeros({1, m2, m2});
    for (std::int64_t y = 0; y < m2; ++y)
        for (std::int64_t x = 0; x < m2; ++x) {
            double acc = 0.0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    acc += py.mask1.data()[static_cast<std::size_t>((2 * y + dy) * m1 + 2 * x + dx)];
            py.mask2.data()[static_cast<std::size_t>(y * m2 + x)] = acc / 4.0;
        }
    return py;
}

// ---------------------------------------------------------------------------
// synthetic scans

namespace {

struct Bump {
    double x, y, amp, sigma;
};

// Class-specific displacement fields. Each class perturbs a distinct
// combination of the eye/nose/mouth neighborhoods.
std::vector<Bump> expression_bumps(int expression) {
    switch (expression) {
        case 0:  // anger: lowered brows, tightened mouth, furrowed bridge
            return {{-0.30, 0.45, -0.10, 0.13}, {0.30, 0.45, -0.10, 0.13},
                    {0.0, -0.50, -0.05, 0.12},  {0.0, 0.25, 0.06, 0.10}};
        case 1:  // disgust: scrunched nose, mouth corners down, raised lip
            return {{0.0, 0.05, 0.11, 0.14},    {-0.22, -0.55, -0.07, 0.10},
                    {0.22, -0.55, -0.07, 0.10}, {0.0, -0.40, 0.05, 0.10}};
        case 2:  // fear: widened eyes, open mouth, raised inner brows
            return {{-0.34, 0.28, 0.09, 0.12}, {0.34, 0.28, 0.09, 0.12},
                    {0.0, -0.52, -0.09, 0.12}, {0.0, 0.48, 0.05, 0.20}};
        case 3:  // happiness: mouth corners up, cheeks raised, slight squint
            return {{-0.25, -0.48, 0.11, 0.11}, {0.25, -0.48, 0.11, 0.11},
                    {-0.40, -0.10, 0.07, 0.16}, {0.40, -0.10, 0.07, 0.16},
                    {-0.34, 0.28, -0.03, 0.10}, {0.34, 0.28, -0.03, 0.10}};
        case 4:  // sadness: mouth corners down, inner brow up, cheeks drop
            return {{-0.25, -0.52, -0.10, 0.11}, {0.25, -0.52, -0.10, 0.11},
                    {0.0, 0.42, 0.07, 0.13},     {-0.35, -0.15, -0.04, 0.14},
                    {0.35, -0.15, -0.04, 0.14}};
        case 5:  // surprise: mouth wide open, widened eyes, raised brows
            return {{0.0, -0.50, -0.13, 0.15},  {-0.34, 0.30, 0.10, 0.12},
                    {0.34, 0.30, 0.10, 0.12},   {-0.28, 0.50, 0.07, 0.12},
                    {0.28, 0.50, 0.07, 0.12}};
        default: throw InputError("synth_scan: unknown expression class");
    }
}

// Regions tinted per class, painted into the albedo.
std::vector<Bump> expression_tints(int expression) {
    switch (expression) {
        case 0: return {{-0.30, 0.45, 0.20, 0.14}, {0.30, 0.45, 0.20, 0.14}};
        case 1: return {{0.0, 0.05, 0.22, 0.14}};
        case 2: return {{-0.34, 0.28, 0.18, 0.12}, {0.34, 0.28, 0.18, 0.12}};
        case 3: return {{-0.25, -0.48, 0.22, 0.12}, {0.25, -0.48, 0.22, 0.12}};
        case 4: return {{0.0, -0.52, 0.20, 0.13}};
        case 5: return {{0.0, -0.50, 0.24, 0.16}};
        default: return {};
    }
}

double gauss2(double x, double y, const Bump& b) {
    const double dx = x - b.x, dy = y - b.y;
    return b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
}

}  // namespace

Scan synth_scan(int expression, std::uint64_t subject_seed, int intensity, int grid_n) {
    if (expression < 0 || expression >= kNumExpressions)
        throw InputError("synth_scan: unknown expression class " + std::to_string(expression));
    if (intensity < 1 || intensity > 4)
        throw InputError("synth_scan: intensity must be in 1..4");
    if (grid_n < 16) throw InputError("synth_scan: grid_n too small");

    // Base face shape is a pure function of the subject, shared across all
    // of that subject's expressions.
    Rng base_rng(mix_seed(subject_seed, 0xFACEULL));
    const double ax = 0.90 * (1.0 + 0.08 * (base_rng.next_double() * 2 - 1));
    const double by = 1.00 * (1.0 + 0.08 * (base_rng.next_double() * 2 - 1));
    const double cz = 0.55 * (1.0 + 0.08 * (base_rng.next_double() * 2 - 1));
    struct SubjBump {
        double x, y, amp, sigma;
    };
    std::vector<SubjBump> subj_bumps;
    for (int i = 0; i < 3; ++i)
        subj_bumps.push_back({base_rng.next_double() * 1.6 - 0.8,
                              base_rng.next_double() * 1.6 - 0.8,
                              0.04 * (base_rng.next_double() * 2 - 1), 0.35});
    const double skin_r = 0.72 + 0.08 * base_rng.next_double();
    const double skin_g = 0.55 + 0.08 * base_rng.next_double();
    const double skin_b = 0.45 + 0.08 * base_rng.next_double();

    Rng noise_rng(mix_seed(mix_seed(subject_seed, static_cast<std::uint64_t>(expression)),
                           static_cast<std::uint64_t>(intensity)));

    const double level = 0.35 + 0.25 * static_cast<double>(intensity);
    const auto bumps = expression_bumps(expression);
    const auto tints = expression_tints(expression);

    Scan scan;
    scan.expression = expression;
    scan.intensity = intensity;
    scan.subject_id = static_cast<int>(subject_seed & 0x7fffffff);

    const double sx = 70.0, sy = 90.0, sz = 60.0;  // local units -> millimeters
    for (int i = 0; i < grid_n; ++i)
        for (int j = 0; j < grid_n; ++j) {
            const double x = -1.0 + 2.0 * (static_cast<double>(j) + 0.5) / grid_n;
            const double y = -1.0 + 2.0 * (static_cast<double>(i) + 0.5) / grid_n;
            const double rr = (x / ax) * (x / ax) + (y / by) * (y / by);
            double z = 0.0;
            double r = 0.25, g = 0.25, b = 0.28;  // background skirt
            if (rr < 1.0) {
                z = cz * std::sqrt(1.0 - rr);
                for (const auto& sb : subj_bumps)
                    z += sb.amp * std::exp(-((x - sb.x) * (x - sb.x) + (y - sb.y) * (y - sb.y)) /
                                           (2 * sb.sigma * sb.sigma));
                for (const auto& bump : bumps) z += level * gauss2(x, y, bump);
                r = skin_r;
                g = skin_g;
                b = skin_b;
                for (const auto& tint : tints) {
                    const double t = level * gauss2(x, y, tint);
                    r = std::clamp(r + t, 0.0, 1.0);
                    g = std::clamp(g - 0.4 * t, 0.0, 1.0);
                }
            }
            z += 0.004 * noise_rng.next_normal();
            r = std::clamp(r + 0.01 * noise_rng.next_normal(), 0.0, 1.0);
            g = std::clamp(g + 0.01 * noise_rng.next_normal(), 0.0, 1.0);
            b = std::clamp(b + 0.01 * noise_rng.next_normal(), 0.0, 1.0);
            scan.points.push_back({x * sx, y * sy, z * sz});
            scan.colors.push_back({r, g, b});
        }

    // Landmarks from the analytic feature anchors, expressed in the same
    // normalized frame the projection uses (u right, v down).
    double xmin = scan.points[0][0], xmax = xmin, ymin = scan.points[0][1], ymax = ymin;
    for (const auto& p : scan.points) {
        xmin = std::min(xmin, p[0]);
        xmax = std::max(xmax, p[0]);
        ymin = std::min(ymin, p[1]);
        ymax = std::max(ymax, p[1]);
    }
    auto emit_ring = [&](const char* region, double cx, double cy, double rx, double ry, int n) {
        for (int i = 0; i < n; ++i) {
            const double a = 2.0 * 3.14159265358979323846 * i / n;
            const double lx = (cx + rx * std::cos(a)) * sx;
            const double ly = (cy + ry * std::sin(a)) * sy;
            Landmark lm;
            lm.region = region;
            lm.u = (lx - xmin) / (xmax - xmin);
            lm.v = (ymax - ly) / (ymax - ymin);
            scan.landmarks.push_back(lm);
        }
    };
    emit_ring("left-eye", -0.34, 0.28, 0.13, 0.09, 6);
    emit_ring("right-eye", 0.34, 0.28, 0.13, 0.09, 6);
    emit_ring("nose", 0.0, -0.02, 0.10, 0.14, 5);
    emit_ring("mouth", 0.0, -0.50, 0.28, 0.12, 8);
    return scan;
}

Preprocessed preprocess_scan(const Scan& scan, std::int64_t grid_size) {
    RawProjection raw = project_to_grid(scan, grid_size);
    Tensor depth = surface_clean(raw.depth, raw.holes);
    const std::int64_t s = grid_size;

    Preprocessed out;
    out.pair.texture = Tensor::zeros({3, s, s});
    for (int c = 0; c < 3; ++c) {
        Tensor plane = Tensor::zeros({s, s});
        std::copy(raw.texture.data().begin() + c * s * s,
                  raw.texture.data().begin() + (c + 1) * s * s, plane.data().begin());
        Tensor filled = fill_holes(plane, raw.holes);
        std::copy(filled.data().begin(), filled.data().end(),
                  out.pair.texture.data().begin() + c * s * s);
    }
    out.pair.depth = Tensor::zeros({3, s, s});
    for (int c = 0; c < 3; ++c)
        std::copy(depth.data().begin(), depth.data().end(),
                  out.pair.depth.data().begin() + c * s * s);

    for (double v : out.pair.texture.data())
        if (!std::isfinite(v)) throw InputError("preprocess_scan: non-finite texture value");
    for (double v : out.pair.depth.data())
        if (!std::isfinite(v)) throw InputError("preprocess_scan: non-finite depth value");

    out.masks = rasterize_masks(scan.landmarks, grid_size);
    return out;
}

// ---------------------------------------------------------------------------
// scan files

void write_scan(const std::string& path, const Scan& scan) {
    scan.validate();
    std::ofstream os(path);
    if (!os) throw InputError("write_scan: cannot open " + path);
    os << scan.subject_id << " " << expression_name(scan.expression) << " " << scan.intensity
       << "\n";
    char buf[256];
    for (const auto& lm : scan.landmarks) {
        std::snprintf(buf, sizeof buf, "%s %.17g %.17g\n", lm.region.c_str(), lm.u, lm.v);
        os << buf;
    }
    for (std::size_t i = 0; i < scan.points.size(); ++i) {
        const auto& p = scan.points[i];
        const auto& c = scan.colors[i];
        std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g %.17g\n", p[0], p[1], p[2],
                      c[0], c[1], c[2]);
        os << buf;
    }
    if (!os) throw InputError("write_scan: write failed for " + path);
}

Scan read_scan(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("read_scan: cannot open " + path);
    Scan scan;
    std::string line;
    if (!std::getline(is, line)) throw InputError("read_scan: empty file " + path);
    {
        std::istringstream hs(line);
        std::string cls;
        if (!(hs >> scan.subject_id >> cls >> scan.intensity))
            throw InputError("read_scan: bad header in " + path);
        scan.expression = expression_from_name(cls);
    }
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string first;
        ls >> first;
        if (first.empty()) continue;
        if (is_region(first)) {
            Landmark lm;
            lm.region = first;
            if (!(ls >> lm.u >> lm.v))
                throw InputError("read_scan: bad landmark at line " + std::to_string(lineno));
            scan.landmarks.push_back(lm);
        } else {
            std::array<double, 3> p{}, c{};
            try {
                p[0] = std::stod(first);
            } catch (...) {
                throw InputError("read_scan: bad point at line " + std::to_string(lineno));
            }
            if (!(ls >> p[1] >> p[2] >> c[0] >> c[1] >> c[2]))
                throw InputError("read_scan: bad point at line " + std::to_string(lineno));
            scan.points.push_back(p);
            scan.colors.push_back(c);
        }
    }
    scan.validate();
    return scan;
}

}  // namespace afnet
