#include "rescr/augment.hpp"

#include <cmath>
#include <numbers>

namespace rescr {

AugmentRanges AugmentRanges::identity() {
    AugmentRanges r;
    r.rotation_deg = r.shear_deg = r.shift_x = r.shift_y = Range{0, 0};
    r.scale = Range{1, 1};
    r.flip_h_prob = r.flip_v_prob = 0;
    return r;
}

void AugmentRanges::validate() const {
    auto check = [](const Range& r, const char* name) {
        if (!std::isfinite(r.lo) || !std::isfinite(r.hi)) throw ValueError(std::string(name) + " range is not finite");
        if (r.lo > r.hi)
            throw ValueError(std::string(name) + " range is inverted: [" + std::to_string(r.lo) + ", " +
                             std::to_string(r.hi) + "]");
    };
    check(rotation_deg, "rotation");
    check(shear_deg, "shear");
    check(shift_x, "shift_x");
    check(shift_y, "shift_y");
    check(scale, "scale");
    if (!(scale.lo > 0)) throw ValueError("scale range must be positive");
    if (shear_deg.lo <= -90 || shear_deg.hi >= 90) throw ValueError("shear must lie strictly inside (-90, 90) degrees");
    for (double p : {flip_h_prob, flip_v_prob})
        if (!(p >= 0 && p <= 1)) throw ValueError("flip probabilities must lie in [0,1]");
}

bool AugmentParams::is_identity() const noexcept {
    return rotation_deg == 0 && shear_deg == 0 && shift_x == 0 && shift_y == 0 && scale == 1 && !flip_h && !flip_v;
}

AugmentParams sample_params(const AugmentRanges& ranges, Rng& rng) {
    ranges.validate();
    // fixed draw order keeps streams stable when ranges collapse to points
    auto draw = [&](const Range& r) {
        const double u = uniform01(rng);
        return r.lo == r.hi ? r.lo : r.lo + (r.hi - r.lo) * u;
    };
    AugmentParams p;
    p.rotation_deg = draw(ranges.rotation_deg);
    p.shear_deg = draw(ranges.shear_deg);
    p.shift_x = draw(ranges.shift_x);
    p.shift_y = draw(ranges.shift_y);
    p.scale = draw(ranges.scale);
    p.flip_h = uniform01(rng) < ranges.flip_h_prob;
    p.flip_v = uniform01(rng) < ranges.flip_v_prob;
    return p;
}

AffineMap AffineMap::from(const AugmentParams& p, std::size_t height, std::size_t width) {
    const double deg = std::numbers::pi / 180.0;
    // exact values at the angles where the test oracles live
    auto cos_sin = [&](double a) -> std::pair<double, double> {
        if (a == 0) return {1.0, 0.0};
        return {std::cos(a * deg), std::sin(a * deg)};
    };
    const auto [c, s] = cos_sin(p.rotation_deg);
    const double k = p.shear_deg == 0 ? 0.0 : std::tan(p.shear_deg * deg);
    // forward M = scale * R * Sh, R = [[c,-s],[s,c]], Sh = [[1,k],[0,1]]
    const double m00 = p.scale * c, m01 = p.scale * (c * k - s);
    const double m10 = p.scale * s, m11 = p.scale * (s * k + c);
    const double det = m00 * m11 - m01 * m10;
    if (!std::isfinite(det) || std::abs(det) < 1e-12)
        throw ValueError("degenerate augmentation transform (determinant " + std::to_string(det) + ")");

    AffineMap a;
    a.a00 = m11 / det;
    a.a01 = -m01 / det;
    a.a10 = -m10 / det;
    a.a11 = m00 / det;
    a.cx = (double(width) - 1) / 2;
    a.cy = (double(height) - 1) / 2;
    a.tx = p.shift_x * double(width);
    a.ty = p.shift_y * double(height);
    a.flip_h = p.flip_h;
    a.flip_v = p.flip_v;
    a.height = height;
    a.width = width;
    return a;
}

std::pair<double, double> AffineMap::source(double row, double col) const {
    const double dx = col - cx - tx, dy = row - cy - ty;
    double x = a00 * dx + a01 * dy + cx;
    double y = a10 * dx + a11 * dy + cy;
    if (flip_h) x = double(width) - 1 - x;
    if (flip_v) y = double(height) - 1 - y;
    return {y, x};
}

std::size_t reflect_index(long long i, std::size_t n) {
    if (n == 1) return 0;
    const long long period = 2 * (static_cast<long long>(n) - 1);
    long long m = i % period;
    if (m < 0) m += period;
    return static_cast<std::size_t>(m < static_cast<long long>(n) ? m : period - m);
}

namespace {

void check_hwc(const Tensor<double>& t, const char* what) {
    if (t.rank() != 3) throw ShapeError(std::string(what) + " must be [H,W,C], got " + to_string(t.shape()));
}

long long nearest(double v) { return static_cast<long long>(std::floor(v + 0.5)); }

}  // namespace

Tensor<double> warp_image(const Tensor<double>& image, const AugmentParams& p, Interp interp) {
    check_hwc(image, "image");
    const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
    const auto map = AffineMap::from(p, H, W);
    Tensor<double> out(image.shape());
    const double* in = image.data().data();
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
            const auto [y, x] = map.source(double(r), double(c));
            double* o = &out[(r * W + c) * C];
            if (interp == Interp::nearest) {
                const double* s = in + (reflect_index(nearest(y), H) * W + reflect_index(nearest(x), W)) * C;
                for (std::size_t k = 0; k < C; ++k) o[k] = s[k];
                continue;
            }
            const double fy0 = std::floor(y), fx0 = std::floor(x);
            const double fy = y - fy0, fx = x - fx0;
            const auto y0 = static_cast<long long>(fy0), x0 = static_cast<long long>(fx0);
            const std::size_t r0 = reflect_index(y0, H), c0 = reflect_index(x0, W);
            if (fy == 0 && fx == 0) {
                const double* s = in + (r0 * W + c0) * C;
                for (std::size_t k = 0; k < C; ++k) o[k] = s[k];
                continue;
            }
            const std::size_t r1 = reflect_index(y0 + 1, H), c1 = reflect_index(x0 + 1, W);
            const double* s00 = in + (r0 * W + c0) * C;
            const double* s01 = in + (r0 * W + c1) * C;
            const double* s10 = in + (r1 * W + c0) * C;
            const double* s11 = in + (r1 * W + c1) * C;
            const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
            for (std::size_t k = 0; k < C; ++k) o[k] = w00 * s00[k] + w01 * s01[k] + w10 * s10[k] + w11 * s11[k];
        }
    return out;
}

Tensor<double> warp_mask(const Tensor<double>& mask, const AugmentParams& p) {
    check_hwc(mask, "mask");
    const std::size_t H = mask.dim(0), W = mask.dim(1), K = mask.dim(2);
    const auto map = AffineMap::from(p, H, W);
    Tensor<double> out(mask.shape());
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
            const auto [y, x] = map.source(double(r), double(c));
            const double* s = &mask[(reflect_index(nearest(y), H) * W + reflect_index(nearest(x), W)) * K];
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (s[k] > s[best]) best = k;
            out[(r * W + c) * K + best] = 1.0;
        }
    return out;
}

std::pair<Tensor<double>, Tensor<double>> apply_affine(const Tensor<double>& image, const Tensor<double>& mask,
                                                       const AugmentParams& p, Interp interp) {
    check_hwc(image, "image");
    check_hwc(mask, "mask");
    if (image.dim(0) != mask.dim(0) || image.dim(1) != mask.dim(1))
        throw ShapeError("image " + to_string(image.shape()) + " and mask " + to_string(mask.shape()) +
                         " differ in size");
    return {warp_image(image, p, interp), warp_mask(mask, p)};
}

std::uint64_t augment_seed(std::uint64_t base_seed, std::size_t epoch, std::size_t step, std::size_t item) {
    return derive_seed(derive_seed(derive_seed(base_seed, epoch), step), item);
}

std::vector<std::vector<Sample>> epoch_stream(const std::vector<Sample>& dataset, std::size_t steps,
                                              const AugmentRanges& ranges, std::uint64_t base_seed,
                                              std::size_t epoch) {
    if (dataset.empty()) throw ValueError("cannot augment an empty dataset");
    if (steps < 1) throw ValueError("steps per epoch must be >= 1");
    ranges.validate();
    std::vector<std::vector<Sample>> batches(steps);
    for (std::size_t s = 0; s < steps; ++s) {
        batches[s].reserve(dataset.size());
        for (std::size_t i = 0; i < dataset.size(); ++i) {
            const auto seed = augment_seed(base_seed, epoch, s, i);
            Rng rng(seed);
            auto params = sample_params(ranges, rng);
            params.seed = seed;
            auto [img, msk] = apply_affine(dataset[i].image, dataset[i].mask, params);
            batches[s].push_back(Sample{std::move(img), std::move(msk), dataset[i].id});
        }
    }
    return batches;
}

}  // namespace rescr
