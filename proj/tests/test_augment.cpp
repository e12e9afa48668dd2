#include <doctest.h>

#include <cmath>
#include <numbers>

#include "rescr/augment.hpp"

using namespace rescr;

namespace {

std::vector<double> vals(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

Tensor<double> grid(std::size_t H, std::size_t W, std::size_t C, Rng& rng) {
    Tensor<double> t(Shape{H, W, C});
    for (auto& v : t.data()) v = uniform01(rng);
    return t;
}

Tensor<double> random_onehot(std::size_t H, std::size_t W, std::size_t K, Rng& rng) {
    Tensor<double> t(Shape{H, W, K});
    for (std::size_t p = 0; p < H * W; ++p) t[p * K + static_cast<std::size_t>(uniform01(rng) * double(K))] = 1;
    return t;
}

// Channels hold the source row and column.
Tensor<double> coordinate_image(std::size_t H, std::size_t W) {
    Tensor<double> t(Shape{H, W, 2});
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
            t.at({r, c, 0}) = double(r);
            t.at({r, c, 1}) = double(c);
        }
    return t;
}

AugmentParams rot(double deg) {
    AugmentParams p;
    p.rotation_deg = deg;
    return p;
}

bool is_onehot(const Tensor<double>& m) {
    const std::size_t K = m.dim(2);
    for (std::size_t p = 0; p < m.size() / K; ++p) {
        int ones = 0;
        for (std::size_t k = 0; k < K; ++k) {
            const double v = m[p * K + k];
            if (v == 1) ++ones;
            else if (v != 0) return false;
        }
        if (ones != 1) return false;
    }
    return true;
}

// Straightforward mirror: bounce back and forth until inside.
long long mirror(long long i, long long n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
}

}  // namespace

TEST_CASE("identity transform is bit-exact") {
    Rng rng(1);
    const auto img = grid(7, 9, 3, rng);
    const auto mask = random_onehot(7, 9, 4, rng);
    AugmentParams id;
    REQUIRE(id.is_identity());
    const auto [a, b] = apply_affine(img, mask, id);
    CHECK(vals(a) == vals(img));
    CHECK(vals(b) == vals(mask));
    CHECK(vals(warp_image(img, id, Interp::nearest)) == vals(img));
}

TEST_CASE("horizontal and vertical flips") {
    const Tensor<double> img(Shape{2, 2, 1}, {1, 2, 3, 4});
    AugmentParams h;
    h.flip_h = true;
    CHECK(vals(warp_image(img, h)) == std::vector<double>{2, 1, 4, 3});
    AugmentParams v;
    v.flip_v = true;
    CHECK(vals(warp_image(img, v)) == std::vector<double>{3, 4, 1, 2});
    h.flip_v = true;
    CHECK(vals(warp_image(img, h)) == std::vector<double>{4, 3, 2, 1});
}

TEST_CASE("90 degree rotation is transpose followed by horizontal flip") {
    for (std::size_t n : {3u, 4u, 9u}) {
        Rng rng(n);
        const auto img = grid(n, n, 2, rng);
        const auto out = warp_image(img, rot(90), Interp::nearest);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c)
                for (std::size_t k = 0; k < 2; ++k) {
                    // transpose: t(r,c) = img(c,r); hflip: out(r,c) = t(r, n-1-c)
                    CHECK(out.at({r, c, k}) == img.at({n - 1 - c, r, k}));
                }
        // the same on the mask path
        const auto mask = random_onehot(n, n, 3, rng);
        const auto wm = warp_mask(mask, rot(90));
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c)
                for (std::size_t k = 0; k < 3; ++k) CHECK(wm.at({r, c, k}) == mask.at({n - 1 - c, r, k}));
    }
}

TEST_CASE("positive rotation turns content clockwise on screen") {
    // a marker right of centre ends up below centre
    Tensor<double> img(Shape{5, 5, 1});
    img.at({2, 4, 0}) = 1;
    const auto out = warp_image(img, rot(90), Interp::nearest);
    CHECK(out.at({4, 2, 0}) == 1);
    CHECK(out.at({0, 2, 0}) == 0);
}

TEST_CASE("positive shift moves content right and down") {
    Rng rng(3);
    const auto img = grid(6, 8, 1, rng);
    AugmentParams p;
    p.shift_x = 1.0 / 8;
    p.shift_y = 2.0 / 6;
    const auto out = warp_image(img, p);
    for (std::size_t r = 2; r < 6; ++r)
        for (std::size_t c = 1; c < 8; ++c) CHECK(out.at({r, c, 0}) == img.at({r - 2, c - 1, 0}));
}

TEST_CASE("reflect indexing mirrors without repeating the edge") {
    CHECK(reflect_index(-1, 5) == 1);
    CHECK(reflect_index(-2, 5) == 2);
    CHECK(reflect_index(5, 5) == 3);
    CHECK(reflect_index(6, 5) == 2);
    CHECK(reflect_index(0, 1) == 0);
    CHECK(reflect_index(-7, 1) == 0);
    for (long long i = -40; i < 40; ++i)
        for (std::size_t n : {2u, 3u, 7u}) CHECK(reflect_index(i, n) == std::size_t(mirror(i, (long long)n)));
}

TEST_CASE("coordinate-grid oracle for random transforms") {
    // Independent composition: dest = S R Sh (flip(src) - c) + c + t,
    // inverted with Cramer's rule.
    const std::size_t H = 13, W = 17;
    const auto coords = coordinate_image(H, W);
    Rng rng(11);
    const AugmentRanges ranges;
    const double deg = std::numbers::pi / 180;
    std::size_t checked = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const auto p = sample_params(ranges, rng);
        const double c = std::cos(p.rotation_deg * deg), s = std::sin(p.rotation_deg * deg);
        const double k = std::tan(p.shear_deg * deg);
        // R * Sh, then scale
        const double m[2][2] = {{p.scale * c, p.scale * (c * k - s)}, {p.scale * s, p.scale * (s * k + c)}};
        const double det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
        const auto out = warp_image(coords, p, Interp::nearest);
        Tensor<double> mask(Shape{H, W, H * W});
        for (std::size_t i = 0; i < H * W; ++i) mask[i * H * W + i] = 1;
        const auto wm = warp_mask(mask, p);
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t col = 0; col < W; ++col) {
                const double bx = double(col) - cx - p.shift_x * W, by = double(r) - cy - p.shift_y * H;
                double x = (m[1][1] * bx - m[0][1] * by) / det + cx;
                double y = (-m[1][0] * bx + m[0][0] * by) / det + cy;
                if (p.flip_h) x = (W - 1) - x;
                if (p.flip_v) y = (H - 1) - y;
                // skip samples within rounding distance of a pixel boundary
                if (std::abs(x - std::floor(x) - 0.5) < 1e-9 || std::abs(y - std::floor(y) - 0.5) < 1e-9) continue;
                const auto sy = mirror((long long)std::floor(y + 0.5), H);
                const auto sx = mirror((long long)std::floor(x + 0.5), W);
                CHECK(out.at({r, col, 0}) == double(sy));
                CHECK(out.at({r, col, 1}) == double(sx));
                CHECK(wm.at({r, col, std::size_t(sy) * W + std::size_t(sx)}) == 1.0);
                ++checked;
            }
    }
    CHECK(checked > 60 * H * W * 9 / 10);
}

TEST_CASE("bilinear interpolation of a linear ramp is exact inside the image") {
    // f(r,c) = 2r + 3c is reproduced by bilinear sampling at any interior point
    const std::size_t H = 21, W = 21;
    Tensor<double> ramp(Shape{H, W, 1});
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) ramp.at({r, c, 0}) = 2.0 * r + 3.0 * c;
    AugmentParams p;
    p.rotation_deg = 17;
    p.scale = 1.1;
    const auto map = AffineMap::from(p, H, W);
    const auto out = warp_image(ramp, p);
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
            const auto [y, x] = map.source(double(r), double(c));
            if (y < 0 || x < 0 || y > H - 1 || x > W - 1) continue;
            CHECK(out.at({r, c, 0}) == doctest::Approx(2 * y + 3 * x).epsilon(1e-12));
        }
}

TEST_CASE("masks stay one-hot under 1000 random transforms") {
    Rng rng(5);
    const auto mask = random_onehot(11, 14, 3, rng);
    const AugmentRanges ranges;
    for (int i = 0; i < 1000; ++i) {
        const auto wm = warp_mask(mask, sample_params(ranges, rng));
        REQUIRE(wm.shape() == mask.shape());
        REQUIRE(is_onehot(wm));
    }
}

TEST_CASE("image and mask must share spatial size") {
    Rng rng(1);
    CHECK_THROWS_AS(apply_affine(grid(4, 5, 1, rng), random_onehot(4, 6, 2, rng), AugmentParams{}), ShapeError);
    CHECK_THROWS_AS(warp_image(Tensor<double>(Shape{4, 5}), AugmentParams{}), ShapeError);
}

TEST_CASE("degenerate transforms are rejected") {
    AugmentParams p;
    p.scale = 0;
    CHECK_THROWS_AS(AffineMap::from(p, 4, 4), ValueError);
    p.scale = 1e-7;
    CHECK_THROWS_AS(AffineMap::from(p, 4, 4), ValueError);
}

TEST_CASE("parameter sampling") {
    SUBCASE("point ranges are returned exactly") {
        AugmentRanges r;
        r.rotation_deg = {12.5, 12.5};
        r.shear_deg = {-3, -3};
        r.shift_x = {0.05, 0.05};
        r.shift_y = {0, 0};
        r.scale = {1.2, 1.2};
        r.flip_h_prob = 1;
        r.flip_v_prob = 0;
        Rng rng(9);
        for (int i = 0; i < 20; ++i) {
            const auto p = sample_params(r, rng);
            CHECK(p.rotation_deg == 12.5);
            CHECK(p.shear_deg == -3);
            CHECK(p.shift_x == 0.05);
            CHECK(p.scale == 1.2);
            CHECK(p.flip_h);
            CHECK_FALSE(p.flip_v);
        }
        Rng id_rng(1);
        CHECK(sample_params(AugmentRanges::identity(), id_rng).is_identity());
    }
    SUBCASE("draws stay in range and the rotation mean is centred") {
        const AugmentRanges r;
        Rng rng(2024);
        double sum = 0;
        int flips = 0;
        for (int i = 0; i < 10000; ++i) {
            const auto p = sample_params(r, rng);
            REQUIRE(p.rotation_deg >= -30);
            REQUIRE(p.rotation_deg <= 30);
            REQUIRE(p.scale >= 0.8);
            REQUIRE(p.scale <= 1.25);
            REQUIRE(std::abs(p.shear_deg) <= 15);
            sum += p.rotation_deg;
            flips += p.flip_h;
        }
        CHECK(std::abs(sum / 10000) < 1.0);
        CHECK(std::abs(flips / 10000.0 - 0.5) < 0.02);
    }
    SUBCASE("same seed, same stream") {
        Rng a(77), b(77);
        for (int i = 0; i < 50; ++i) {
            const auto pa = sample_params(AugmentRanges{}, a), pb = sample_params(AugmentRanges{}, b);
            CHECK(pa.rotation_deg == pb.rotation_deg);
            CHECK(pa.scale == pb.scale);
            CHECK(pa.flip_v == pb.flip_v);
        }
    }
    SUBCASE("invalid ranges") {
        Rng rng(1);
        AugmentRanges r;
        r.rotation_deg = {10, -10};
        CHECK_THROWS_AS(sample_params(r, rng), ValueError);
        r = AugmentRanges{};
        r.scale = {0, 1};
        CHECK_THROWS_AS(sample_params(r, rng), ValueError);
        r = AugmentRanges{};
        r.shear_deg = {-90, 0};
        CHECK_THROWS_AS(sample_params(r, rng), ValueError);
        r = AugmentRanges{};
        r.flip_h_prob = 1.5;
        CHECK_THROWS_AS(sample_params(r, rng), ValueError);
    }
}

TEST_CASE("epoch stream") {
    Rng rng(4);
    std::vector<Sample> data;
    for (int i = 0; i < 8; ++i)
        data.push_back({grid(9, 10, 1, rng), random_onehot(9, 10, 3, rng), "item" + std::to_string(i)});

    SUBCASE("shape of an epoch") {
        const auto epoch = epoch_stream(data, 15, AugmentRanges{}, 3, 1);
        REQUIRE(epoch.size() == 15);
        for (const auto& batch : epoch) {
            REQUIRE(batch.size() == 8);
            for (std::size_t i = 0; i < 8; ++i) {
                CHECK(batch[i].id == data[i].id);
                CHECK(batch[i].image.shape() == data[i].image.shape());
                CHECK(is_onehot(batch[i].mask));
            }
        }
        // items are re-augmented independently per step
        CHECK(vals(epoch[0][0].image) != vals(epoch[1][0].image));
    }
    SUBCASE("identity ranges reproduce the raw data") {
        const auto epoch = epoch_stream(data, 3, AugmentRanges::identity(), 3, 1);
        for (const auto& batch : epoch)
            for (std::size_t i = 0; i < 8; ++i) {
                CHECK(vals(batch[i].image) == vals(data[i].image));
                CHECK(vals(batch[i].mask) == vals(data[i].mask));
            }
    }
    SUBCASE("deterministic in seed and epoch") {
        const auto a = epoch_stream(data, 4, AugmentRanges{}, 10, 2);
        const auto b = epoch_stream(data, 4, AugmentRanges{}, 10, 2);
        const auto c = epoch_stream(data, 4, AugmentRanges{}, 10, 3);
        const auto d = epoch_stream(data, 4, AugmentRanges{}, 11, 2);
        for (std::size_t s = 0; s < 4; ++s)
            for (std::size_t i = 0; i < 8; ++i) CHECK(vals(a[s][i].image) == vals(b[s][i].image));
        CHECK(vals(a[0][0].image) != vals(c[0][0].image));
        CHECK(vals(a[0][0].image) != vals(d[0][0].image));
        CHECK(augment_seed(10, 2, 0, 0) != augment_seed(10, 2, 0, 1));
        CHECK(augment_seed(10, 2, 0, 0) != augment_seed(10, 2, 1, 0));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(epoch_stream({}, 3, AugmentRanges{}, 0, 1), ValueError);
        CHECK_THROWS_AS(epoch_stream(data, 0, AugmentRanges{}, 0, 1), ValueError);
    }
}
