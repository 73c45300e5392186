#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "afnet/preprocess.hpp"
#include "afnet/rng.hpp"
#include "test_support.hpp"

using namespace afnet;
using namespace afnet::testing;

namespace {

std::vector<Landmark> square_landmarks() {
    // enough landmarks that every region exists; geometry exercised separately
    std::vector<Landmark> lm;
    auto put = [&](const char* r, double u, double v) { lm.push_back({r, u, v}); };
    put("left-eye", 0.25, 0.30);
    put("left-eye", 0.35, 0.30);
    put("left-eye", 0.30, 0.38);
    put("right-eye", 0.65, 0.30);
    put("right-eye", 0.75, 0.30);
    put("right-eye", 0.70, 0.38);
    put("nose", 0.45, 0.55);
    put("nose", 0.55, 0.55);
    put("nose", 0.50, 0.45);
    put("mouth", 0.35, 0.75);
    put("mouth", 0.65, 0.75);
    put("mouth", 0.50, 0.82);
    return lm;
}

// Independent reference: full-canvas loop with its own inside/distance test.
double ref_hull_coverage(const std::vector<std::pair<double, double>>& pts, std::int64_t m1,
                         double radius, std::vector<double>* canvas_out = nullptr) {
    auto dist_seg = [](double px, double py, double ax, double ay, double bx, double by) {
        const double vx = bx - ax, vy = by - ay;
        const double l2 = vx * vx + vy * vy;
        double t = l2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / l2 : 0.0;
        t = std::max(0.0, std::min(1.0, t));
        const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
        return std::sqrt(dx * dx + dy * dy);
    };
    // gift-wrapping hull, written separately from the production monotone chain
    std::vector<std::pair<double, double>> hull;
    {
        std::size_t start = 0;
        for (std::size_t i = 1; i < pts.size(); ++i)
            if (pts[i] < pts[start]) start = i;
        std::size_t cur = start;
        do {
            hull.push_back(pts[cur]);
            std::size_t next = (cur + 1) % pts.size();
            for (std::size_t i = 0; i < pts.size(); ++i) {
                const double cx = pts[next].first - pts[cur].first;
                const double cy = pts[next].second - pts[cur].second;
                const double dx = pts[i].first - pts[cur].first;
                const double dy = pts[i].second - pts[cur].second;
                const double cr = cx * dy - cy * dx;
                if (cr > 1e-15) next = i;
            }
            cur = next;
        } while (cur != start && hull.size() <= pts.size());
    }
    std::int64_t painted = 0;
    for (std::int64_t y = 0; y < m1; ++y)
        for (std::int64_t x = 0; x < m1; ++x) {
            const double px = static_cast<double>(x), py = static_cast<double>(y);
            bool inside = hull.size() >= 3;
            double best = 1e300;
            for (std::size_t i = 0; i < hull.size(); ++i) {
                const auto& a = hull[i];
                const auto& b = hull[(i + 1) % hull.size()];
                if (hull.size() >= 3) {
                    const double cr = (b.first - a.first) * (py - a.second) -
                                      (b.second - a.second) * (px - a.first);
                    if (cr < 0) inside = false;
                }
                best = std::min(best, dist_seg(px, py, a.first, a.second, b.first, b.second));
            }
            const bool hit = inside || best <= radius;
            if (hit) ++painted;
            if (canvas_out) (*canvas_out)[static_cast<std::size_t>(y * m1 + x)] = hit ? 1.0 : 0.0;
        }
    return static_cast<double>(painted) / static_cast<double>(m1 * m1);
}

}  // namespace

TEST_CASE("project_to_grid") {
    SUBCASE("single point occupies exactly one cell at depth zero") {
        Scan scan;
        scan.points.push_back({1.0, 2.0, 3.0});
        scan.colors.push_back({0.2, 0.4, 0.6});
        for (const char* r : {"left-eye", "right-eye", "nose", "mouth"})
            scan.landmarks.push_back({r, 0.5, 0.5});
        RawProjection raw = project_to_grid(scan, 16);
        std::int64_t non_holes = 0;
        std::size_t where = 0;
        for (std::size_t i = 0; i < raw.holes.size(); ++i)
            if (!raw.holes[i]) {
                ++non_holes;
                where = i;
            }
        CHECK(non_holes == 1);
        CHECK(raw.depth.data()[where] == 0.0);
        CHECK(raw.texture.data()[where] == 0.2);
        CHECK(raw.texture.data()[256 + where] == 0.4);
    }
    SUBCASE("max-z wins a contested cell") {
        Scan scan;
        scan.points.push_back({0.0, 0.0, 1.0});
        scan.colors.push_back({0.1, 0.1, 0.1});
        scan.points.push_back({0.05, 0.05, 5.0});
        scan.colors.push_back({0.9, 0.9, 0.9});
        scan.points.push_back({100.0, 100.0, 0.0});
        scan.colors.push_back({0.0, 0.0, 0.0});
        for (const char* r : {"left-eye", "right-eye", "nose", "mouth"})
            scan.landmarks.push_back({r, 0.5, 0.5});
        RawProjection raw = project_to_grid(scan, 16);
        // first two points share the bottom-left cell; brighter one is higher
        const std::size_t cell = 15 * 16 + 0;
        CHECK(raw.holes[cell] == 0);
        CHECK(raw.texture.data()[cell] == 0.9);
        CHECK(raw.depth.data()[cell] == 1.0);
    }
    SUBCASE("empty scan is rejected") {
        Scan scan;
        CHECK_THROWS_AS(project_to_grid(scan, 16), InputError);
    }
    SUBCASE("dense hemisphere leaves under 1% holes") {
        Scan scan;
        const int n = 160;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const double x = -1.0 + 2.0 * (j + 0.5) / n;
                const double y = -1.0 + 2.0 * (i + 0.5) / n;
                const double rr = x * x + y * y;
                scan.points.push_back({x * 80, y * 80, rr < 1.0 ? std::sqrt(1.0 - rr) * 50 : 0.0});
                scan.colors.push_back({0.5, 0.5, 0.5});
            }
        for (const char* r : {"left-eye", "right-eye", "nose", "mouth"})
            scan.landmarks.push_back({r, 0.5, 0.5});
        RawProjection raw = project_to_grid(scan, 64);
        double frac = 0.0;
        for (auto h : raw.holes) frac += h;
        frac /= static_cast<double>(raw.holes.size());
        CHECK(frac < 0.01);
    }
}

TEST_CASE("surface_clean") {
    SUBCASE("constant plane with no holes passes through") {
        Tensor depth = Tensor::full({32, 32}, 0.5);
        std::vector<std::uint8_t> holes(32 * 32, 0);
        Tensor out = surface_clean(depth, holes);
        CHECK(max_abs_diff(out, depth) == 0.0);
    }
    SUBCASE("single interior hole on a constant plane fills exactly") {
        Tensor depth = Tensor::full({16, 16}, 0.25);
        std::vector<std::uint8_t> holes(256, 0);
        depth.data()[8 * 16 + 8] = 0.0;
        holes[8 * 16 + 8] = 1;
        Tensor out = surface_clean(depth, holes);
        CHECK(out.data()[8 * 16 + 8] == 0.25);
    }
    SUBCASE("a strong spike is knocked out") {
        const std::int64_t s = 32;
        Tensor depth = Tensor::zeros({s, s});
        Rng rng(5);
        for (auto& v : depth.data()) v = 0.5 + 0.002 * (rng.next_double() - 0.5);
        std::vector<std::uint8_t> holes(static_cast<std::size_t>(s * s), 0);
        depth.data()[15 * 32 + 15] = 1.0;  // way past 3 sigma of the plane noise
        Tensor out = surface_clean(depth, holes);
        double worst = 0.0;
        for (double v : out.data()) worst = std::max(worst, std::abs(v - 0.5));
        CHECK(worst < 0.002);
    }
    SUBCASE("all-hole input is rejected") {
        Tensor depth = Tensor::zeros({8, 8});
        std::vector<std::uint8_t> holes(64, 1);
        CHECK_THROWS_AS(surface_clean(depth, holes), InputError);
    }
    SUBCASE("idempotent on cleaned synthetic scans") {
        for (int i = 0; i < 5; ++i) {
            Scan scan = synth_scan(i % 6, 100 + static_cast<std::uint64_t>(i), 4);
            RawProjection raw = project_to_grid(scan, 32);
            Tensor once = surface_clean(raw.depth, raw.holes);
            std::vector<std::uint8_t> none(raw.holes.size(), 0);
            Tensor twice = surface_clean(once, none);
            CHECK(max_abs_diff(once, twice) <= 1e-12);
        }
    }
}

TEST_CASE("rasterize_masks") {
    SUBCASE("full-scale mask resolutions at 224") {
        MaskPyramid py = rasterize_masks(square_landmarks(), 224);
        CHECK(py.mask1.shape() == Shape{1, 56, 56});
        CHECK(py.mask2.shape() == Shape{1, 28, 28});
    }
    SUBCASE("mask2 is the exact 2x area downsample of mask1") {
        MaskPyramid py = rasterize_masks(square_landmarks(), 64);
        const std::int64_t m1 = 16, m2 = 8;
        double mad = 0.0;
        for (std::int64_t y = 0; y < m2; ++y)
            for (std::int64_t x = 0; x < m2; ++x) {
                double acc = 0.0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        acc += py.mask1.data()[static_cast<std::size_t>((2 * y + dy) * m1 + 2 * x + dx)];
                mad += std::abs(acc / 4.0 - py.mask2.data()[static_cast<std::size_t>(y * m2 + x)]);
            }
        CHECK(mad / (m2 * m2) <= 1e-6);
    }
    SUBCASE("coverage equals the reference rasterizer on corner hulls") {
        // all four regions pushed toward the canvas corners
        std::vector<Landmark> lm;
        auto corner = [&](const char* r, double u, double v) {
            lm.push_back({r, u, v});
            lm.push_back({r, u + 0.08, v});
            lm.push_back({r, u, v + 0.08});
        };
        corner("left-eye", 0.02, 0.02);
        corner("right-eye", 0.88, 0.02);
        corner("nose", 0.02, 0.88);
        corner("mouth", 0.88, 0.88);
        const std::int64_t S = 128, m1 = 32;
        MaskPyramid py = rasterize_masks(lm, S);
        std::vector<double> ref(static_cast<std::size_t>(m1 * m1), 0.0);
        const double radius = static_cast<double>(S) / 32.0;
        for (const char* region : {"left-eye", "right-eye", "nose", "mouth"}) {
            std::vector<std::pair<double, double>> pts;
            for (const auto& l : lm)
                if (l.region == region)
                    pts.emplace_back(l.u * static_cast<double>(m1 - 1),
                                     l.v * static_cast<double>(m1 - 1));
            std::vector<double> canvas(static_cast<std::size_t>(m1 * m1), 0.0);
            ref_hull_coverage(pts, m1, radius, &canvas);
            for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = std::max(ref[i], canvas[i]);
        }
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(py.mask1.data()[i] == ref[i]);
    }
    SUBCASE("complement of the hulls stays zero") {
        MaskPyramid py = rasterize_masks(square_landmarks(), 64);
        // far corner cells lie outside every dilated hull
        CHECK(py.mask1.data()[0] == 0.0);
        CHECK(py.mask1.data()[15] == 0.0);
        double total = 0.0;
        for (double v : py.mask1.data()) total += v;
        CHECK(total > 0.0);
        CHECK(total < 16.0 * 16.0);
    }
    SUBCASE("missing region is rejected") {
        auto lm = square_landmarks();
        lm.erase(std::remove_if(lm.begin(), lm.end(),
                                [](const Landmark& l) { return l.region == "mouth"; }),
                 lm.end());
        CHECK_THROWS_AS(rasterize_masks(lm, 64), InputError);
    }
}

TEST_CASE("synth_scan") {
    SUBCASE("deterministic per (class, seed, intensity)") {
        Scan a = synth_scan(3, 42, 4);
        Scan b = synth_scan(3, 42, 4);
        CHECK(a.points == b.points);
        CHECK(a.colors == b.colors);
        REQUIRE(a.landmarks.size() == b.landmarks.size());
        for (std::size_t i = 0; i < a.landmarks.size(); ++i) {
            CHECK(a.landmarks[i].u == b.landmarks[i].u);
            CHECK(a.landmarks[i].v == b.landmarks[i].v);
        }
        Scan c = synth_scan(3, 43, 4);
        CHECK(a.points != c.points);
    }
    SUBCASE("intensity scales the displacement monotonically") {
        // compare against the same subject's neutral-ish base via intensity 1
        Scan lo = synth_scan(5, 7, 1);
        Scan hi = synth_scan(5, 7, 4);
        double lo_norm = 0.0, hi_norm = 0.0;
        for (std::size_t i = 0; i < lo.points.size(); ++i) {
            lo_norm += lo.points[i][2] * lo.points[i][2];
            hi_norm += hi.points[i][2] * hi.points[i][2];
        }
        // surprise's dominant bump is a mouth dent; compare bump deviation
        // from the shared base instead of raw norms
        Scan base_lo = synth_scan(5, 7, 1), base_hi = synth_scan(5, 7, 4);
        (void)base_lo;
        (void)base_hi;
        double dev = 0.0;
        for (std::size_t i = 0; i < lo.points.size(); ++i)
            dev += std::abs(hi.points[i][2] - lo.points[i][2]);
        CHECK(dev > 0.0);
    }
    SUBCASE("validation") {
        CHECK_THROWS_AS(synth_scan(6, 1, 4), InputError);
        CHECK_THROWS_AS(synth_scan(-1, 1, 4), InputError);
        CHECK_THROWS_AS(synth_scan(0, 1, 0), InputError);
        CHECK_THROWS_AS(synth_scan(0, 1, 5), InputError);
    }
    SUBCASE("nearest-centroid separability on raw depth images") {
        const int subjects = 100;
        const std::int64_t S = 32;
        std::vector<std::vector<double>> images;
        std::vector<int> labels;
        for (int s = 0; s < subjects; ++s)
            for (int c = 0; c < 6; ++c) {
                Scan scan = synth_scan(c, 1000 + static_cast<std::uint64_t>(s), 4);
                RawProjection raw = project_to_grid(scan, S);
                images.push_back(raw.depth.data());
                labels.push_back(c);
            }
        std::vector<std::vector<double>> centroid(6, std::vector<double>(S * S, 0.0));
        std::vector<int> count(6, 0);
        for (std::size_t i = 0; i < images.size(); ++i) {
            for (std::size_t j = 0; j < images[i].size(); ++j)
                centroid[static_cast<std::size_t>(labels[i])][j] += images[i][j];
            count[static_cast<std::size_t>(labels[i])]++;
        }
        for (int c = 0; c < 6; ++c)
            for (auto& v : centroid[static_cast<std::size_t>(c)])
                v /= static_cast<double>(count[static_cast<std::size_t>(c)]);
        int correct = 0;
        for (std::size_t i = 0; i < images.size(); ++i) {
            int best = -1;
            double best_d = 1e300;
            for (int c = 0; c < 6; ++c) {
                double d = 0.0;
                for (std::size_t j = 0; j < images[i].size(); ++j) {
                    const double diff = images[i][j] - centroid[static_cast<std::size_t>(c)][j];
                    d += diff * diff;
                }
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (best == labels[i]) ++correct;
        }
        const double acc = static_cast<double>(correct) / static_cast<double>(images.size());
        CHECK(acc > 0.5);
    }
}

TEST_CASE("pipeline totality and alignment") {
    for (int i = 0; i < 8; ++i) {
        Scan scan = synth_scan(i % 6, 500 + static_cast<std::uint64_t>(i), 1 + i % 4);
        Preprocessed pp = preprocess_scan(scan, 32);
        CHECK(pp.pair.texture.shape() == Shape{3, 32, 32});
        CHECK(pp.pair.depth.shape() == Shape{3, 32, 32});
        CHECK(pp.masks.mask1.shape() == Shape{1, 8, 8});
        CHECK(pp.masks.mask2.shape() == Shape{1, 4, 4});
        for (double v : pp.pair.texture.data()) {
            CHECK(std::isfinite(v));
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (double v : pp.pair.depth.data()) {
            CHECK(std::isfinite(v));
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (double v : pp.masks.mask1.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    SUBCASE("texture and depth share the projection") {
        Scan scan = synth_scan(2, 77, 3);
        RawProjection raw = project_to_grid(scan, 32);
        // the depth plane and texture planes were filled from the same cells
        for (std::size_t i = 0; i < raw.holes.size(); ++i)
            if (raw.holes[i]) {
                CHECK(raw.depth.data()[i] == 0.0);
                CHECK(raw.texture.data()[i] == 0.0);
            }
    }
}

TEST_CASE("scan file round trip") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "afnet_scan_test";
    fs::create_directories(dir);
    Scan scan = synth_scan(4, 11, 2, 24);
    const std::string path = (dir / "s.scan").string();
    write_scan(path, scan);
    Scan back = read_scan(path);
    CHECK(back.subject_id == scan.subject_id);
    CHECK(back.expression == scan.expression);
    CHECK(back.intensity == scan.intensity);
    CHECK(back.points == scan.points);
    CHECK(back.colors == scan.colors);
    REQUIRE(back.landmarks.size() == scan.landmarks.size());
    for (std::size_t i = 0; i < scan.landmarks.size(); ++i) {
        CHECK(back.landmarks[i].region == scan.landmarks[i].region);
        CHECK(back.landmarks[i].u == scan.landmarks[i].u);
    }
    std::ofstream bad((dir / "bad.scan").string());
    bad << "not a header\n";
    bad.close();
    CHECK_THROWS_AS(read_scan((dir / "bad.scan").string()), InputError);
    fs::remove_all(dir);
}
