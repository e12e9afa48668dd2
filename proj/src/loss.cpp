#include "rescr/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>

namespace rescr {

void LossConfig::validate(std::size_t num_classes) const {
    if (!(smooth >= 0.0) || !std::isfinite(smooth)) throw ConfigError("loss smooth must be >= 0");
    if (!class_weights.empty()) {
        if (class_weights.size() != num_classes)
            throw ConfigError("class_weights has " + std::to_string(class_weights.size()) + " entries, expected " +
                              std::to_string(num_classes));
        for (double w : class_weights)
            if (!(w > 0.0) || !std::isfinite(w)) throw ConfigError("class_weights must be positive");
    }
    if (!(contour_sigma > 0.0)) throw ConfigError("contour_sigma must be > 0");
    if (!(contour_w0 >= 0.0)) throw ConfigError("contour_w0 must be >= 0");
}

namespace {

struct View {
    std::size_t items, pixels, classes;
};

View view_of(const Shape& s) {
    if (s.size() == 1) return {1, s[0], 1};
    if (s.size() == 4) return {s[0], s[1] * s[2], s[3]};
    return {1, numel(s) / s.back(), s.back()};
}

template <typename T>
View checked_view(const Tensor<T>& yhat, const Tensor<T>& y, const Tensor<T>* weights) {
    if (yhat.shape() != y.shape())
        throw ShapeError("prediction " + to_string(yhat.shape()) + " vs labels " + to_string(y.shape()));
    for (T v : yhat.data())
        if (!(v >= T(0) && v <= T(1))) throw ValueError("predicted probabilities must lie in [0,1]");
    for (T v : y.data())
        if (v != T(0) && v != T(1)) throw ValueError("labels must be 0 or 1");
    const View vw = view_of(yhat.shape());
    if (weights) {
        if (weights->size() != vw.items * vw.pixels)
            throw ShapeError("weight map " + to_string(weights->shape()) + " does not cover " +
                             std::to_string(vw.items * vw.pixels) + " pixels");
        for (T w : weights->data())
            if (!(w >= T(0)) || !std::isfinite(w)) throw ValueError("weights must be finite and >= 0");
    }
    return vw;
}

// Smoothed ratio; an empty class with s == 0 counts as perfect agreement.
double ratio(double num, double den) {
    return den == 0.0 ? 1.0 : num / den;
}

struct Sums {
    double inter = 0, pred = 0, label = 0, squares = 0;
};

// Per (item, class) sums over pixels; complement uses 1-yhat and 1-y.
template <typename T>
std::vector<Sums> class_sums(const Tensor<T>& yhat, const Tensor<T>& y, const View& v, const Tensor<T>* w,
                             const std::vector<double>* class_w, bool complement) {
    std::vector<Sums> out(v.items * v.classes);
    for (std::size_t it = 0; it < v.items; ++it)
        for (std::size_t p = 0; p < v.pixels; ++p) {
            const double wp = w ? static_cast<double>((*w)[it * v.pixels + p]) : 1.0;
            for (std::size_t k = 0; k < v.classes; ++k) {
                const std::size_t i = (it * v.pixels + p) * v.classes + k;
                double a = yhat[i], b = y[i];
                if (complement) {
                    a = 1.0 - a;
                    b = 1.0 - b;
                }
                const double wk = wp * (class_w ? (*class_w)[k] : 1.0);
                Sums& s = out[it * v.classes + k];
                s.inter += wk * a * b;
                s.pred += wk * a;
                s.label += wk * b;
                s.squares += wk * (a * a + b * b);
            }
        }
    return out;
}

double mean_tanimoto(const std::vector<Sums>& sums, double s) {
    double acc = 0;
    for (const auto& c : sums) acc += ratio(c.inter + s, c.squares - c.inter + s);
    return acc / static_cast<double>(sums.size());
}

}  // namespace

template <typename T>
double dice_coefficient(const Tensor<T>& yhat, const Tensor<T>& y, double smooth, const Tensor<T>* weights) {
    const View v = checked_view(yhat, y, weights);
    const auto sums = class_sums(yhat, y, v, weights, nullptr, false);
    double acc = 0;
    for (const auto& c : sums) acc += ratio(2 * c.inter + smooth, c.pred + c.label + smooth);
    return acc / static_cast<double>(sums.size());
}

template <typename T>
double tanimoto(const Tensor<T>& yhat, const Tensor<T>& y, double smooth, const Tensor<T>* weights) {
    const View v = checked_view(yhat, y, weights);
    return mean_tanimoto(class_sums(yhat, y, v, weights, nullptr, false), smooth);
}

template <typename T>
double tanimoto_with_complement(const Tensor<T>& yhat, const Tensor<T>& y, double smooth, const Tensor<T>* weights) {
    const View v = checked_view(yhat, y, weights);
    return 0.5 * (mean_tanimoto(class_sums(yhat, y, v, weights, nullptr, false), smooth) +
                  mean_tanimoto(class_sums(yhat, y, v, weights, nullptr, true), smooth));
}

template <typename T>
Var<T> tanimoto_loss(const Var<T>& yhat, const Tensor<T>& y, const LossConfig& cfg, const Tensor<T>* weight_map) {
    const View v = checked_view(yhat.value(), y, weight_map);
    cfg.validate(v.classes);
    const std::vector<double>* cw = cfg.class_weights.empty() ? nullptr : &cfg.class_weights;
    const double s = cfg.smooth;
    auto direct = class_sums(yhat.value(), y, v, weight_map, cw, false);
    auto comp = class_sums(yhat.value(), y, v, weight_map, cw, true);
    const double score = 0.5 * (mean_tanimoto(direct, s) + mean_tanimoto(comp, s));
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(1.0 - score));
    if (!yhat.requires_grad()) return constant(std::move(out));

    std::shared_ptr<Node<T>> yn = yhat.node();
    std::vector<T> wcopy;
    if (weight_map) wcopy.assign(weight_map->data().begin(), weight_map->data().end());
    std::vector<double> class_w = cfg.class_weights;
    Tensor<T> labels = y;
    return yhat.tape()->record("tanimoto_loss", std::move(out), [=](const Tensor<T>& gy) {
        T* g = yn->grad_buffer().data().data();
        const auto& pred = yn->value;
        const double scale = -static_cast<double>(gy[0]) / (2.0 * static_cast<double>(v.items * v.classes));
        for (std::size_t it = 0; it < v.items; ++it)
            for (std::size_t p = 0; p < v.pixels; ++p) {
                const double wp = wcopy.empty() ? 1.0 : static_cast<double>(wcopy[it * v.pixels + p]);
                for (std::size_t k = 0; k < v.classes; ++k) {
                    const std::size_t i = (it * v.pixels + p) * v.classes + k;
                    const double w = wp * (class_w.empty() ? 1.0 : class_w[k]);
                    const double a = pred[i], b = labels[i];
                    const Sums& d = direct[it * v.classes + k];
                    const Sums& c = comp[it * v.classes + k];
                    double dt = 0, dc = 0;
                    // d/da of (A+s)/(Q-A+s) with dA/da = w b, dQ/da = 2 w a
                    const double num = d.inter + s, den = d.squares - d.inter + s;
                    if (den != 0.0) dt = w * (b * den - num * (2 * a - b)) / (den * den);
                    const double cnum = c.inter + s, cden = c.squares - c.inter + s;
                    if (cden != 0.0) dc = -w * ((1 - b) * cden - cnum * (2 * (1 - a) - (1 - b))) / (cden * cden);
                    g[i] += static_cast<T>(scale * (dt + dc));
                }
            }
    });
}

// ---------------------------------------------------------------------------
// weight maps

namespace {

struct MaskView {
    std::size_t items, H, W, K;
};

template <typename T>
MaskView mask_view(const Tensor<T>& onehot) {
    const Shape& s = onehot.shape();
    if (s.size() == 3) return {1, s[0], s[1], s[2]};
    if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
    throw ShapeError("one-hot mask must be [H,W,K] or [B,H,W,K], got " + to_string(s));
}

Shape pixel_shape(const Shape& s) {
    return Shape(s.begin(), s.end() - 1);
}

// Exact 1-D squared distance transform (lower envelope of parabolas).
void squared_edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                    std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    auto intersect = [&](int q, int r) {
        return ((f[q] + double(q) * q) - (f[r] + double(r) * r)) / (2.0 * q - 2.0 * r);
    };
    for (int q = 1; q < n; ++q) {
        double sq = intersect(q, v[k]);
        while (sq <= z[k]) {  // z[0] is -inf, so this stops at k == 0
            --k;
            sq = intersect(q, v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = sq;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
}

// Squared Euclidean distance from every pixel to the nearest set pixel.
std::vector<double> squared_edt(const std::vector<char>& feature, std::size_t H, std::size_t W) {
    const double far = 1e20;
    const std::size_t n = std::max(H, W);
    std::vector<double> f(n), d(n), z(n + 1);
    std::vector<int> v(n);
    std::vector<double> grid(H * W);
    for (std::size_t i = 0; i < H * W; ++i) grid[i] = feature[i] ? 0.0 : far;
    f.resize(H);
    d.resize(H);
    for (std::size_t x = 0; x < W; ++x) {
        for (std::size_t y = 0; y < H; ++y) f[y] = grid[y * W + x];
        squared_edt_1d(f, d, v, z);
        for (std::size_t y = 0; y < H; ++y) grid[y * W + x] = d[y];
    }
    f.resize(W);
    d.resize(W);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) f[x] = grid[y * W + x];
        squared_edt_1d(f, d, v, z);
        for (std::size_t x = 0; x < W; ++x) grid[y * W + x] = d[x];
    }
    return grid;
}

// 8-connected component labels of `fg`; returns the component count.
std::size_t label_components(const std::vector<char>& fg, std::size_t H, std::size_t W, std::vector<int>& label) {
    label.assign(H * W, -1);
    int next = 0;
    std::queue<std::size_t> queue;
    for (std::size_t start = 0; start < H * W; ++start) {
        if (!fg[start] || label[start] >= 0) continue;
        label[start] = next;
        queue.push(start);
        while (!queue.empty()) {
            const std::size_t p = queue.front();
            queue.pop();
            const long y = static_cast<long>(p / W), x = static_cast<long>(p % W);
            for (long dy = -1; dy <= 1; ++dy)
                for (long dx = -1; dx <= 1; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
                    const std::size_t q = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx);
                    if (fg[q] && label[q] < 0) {
                        label[q] = next;
                        queue.push(q);
                    }
                }
        }
        ++next;
    }
    return static_cast<std::size_t>(next);
}

template <typename T>
std::vector<std::size_t> labels_of(const Tensor<T>& onehot, const MaskView& m, std::size_t item) {
    std::vector<std::size_t> lab(m.H * m.W);
    for (std::size_t p = 0; p < m.H * m.W; ++p) {
        const T* px = onehot.data().data() + (item * m.H * m.W + p) * m.K;
        lab[p] = static_cast<std::size_t>(std::max_element(px, px + m.K) - px);
    }
    return lab;
}

}  // namespace

template <typename T>
Tensor<T> class_balance_weights(const Tensor<T>& onehot) {
    const MaskView m = mask_view(onehot);
    Tensor<T> out(pixel_shape(onehot.shape()));
    const std::size_t N = m.H * m.W;
    for (std::size_t it = 0; it < m.items; ++it) {
        const auto lab = labels_of(onehot, m, it);
        std::vector<std::size_t> count(m.K, 0);
        for (auto c : lab) ++count[c];
        for (std::size_t p = 0; p < N; ++p)
            out[it * N + p] = static_cast<T>(double(N) / (double(m.K) * double(count[lab[p]])));
    }
    return out;
}

template <typename T>
Tensor<T> contour_weight_map(const Tensor<T>& onehot, const LossConfig& cfg) {
    Tensor<T> out = class_balance_weights(onehot);
    if (!cfg.contour_weighting || cfg.contour_w0 == 0.0) return out;
    const MaskView m = mask_view(onehot);
    const std::size_t N = m.H * m.W;
    const double two_sigma_sq = 2.0 * cfg.contour_sigma * cfg.contour_sigma;
    for (std::size_t it = 0; it < m.items; ++it) {
        const auto lab = labels_of(onehot, m, it);
        std::vector<double> border(N, 0.0);
        for (std::size_t k = 0; k < m.K; ++k) {
            std::vector<char> fg(N);
            for (std::size_t p = 0; p < N; ++p) fg[p] = lab[p] == k;
            std::vector<int> comp;
            const std::size_t ncomp = label_components(fg, m.H, m.W, comp);
            if (ncomp < 2) continue;
            std::vector<double> d1(N, 1e20), d2(N, 1e20);
            for (std::size_t c = 0; c < ncomp; ++c) {
                std::vector<char> feature(N);
                for (std::size_t p = 0; p < N; ++p) feature[p] = comp[p] == static_cast<int>(c);
                const auto dist = squared_edt(feature, m.H, m.W);
                for (std::size_t p = 0; p < N; ++p) {
                    if (dist[p] < d1[p]) {
                        d2[p] = d1[p];
                        d1[p] = dist[p];
                    } else if (dist[p] < d2[p]) {
                        d2[p] = dist[p];
                    }
                }
            }
            for (std::size_t p = 0; p < N; ++p) {
                if (fg[p]) continue;
                const double s = std::sqrt(d1[p]) + std::sqrt(d2[p]);
                border[p] = std::max(border[p], cfg.contour_w0 * std::exp(-s * s / two_sigma_sq));
            }
        }
        for (std::size_t p = 0; p < N; ++p) out[it * N + p] += static_cast<T>(border[p]);
    }
    return out;
}

#define RESCR_INSTANTIATE_LOSS(T)                                                                          \
    template double dice_coefficient(const Tensor<T>&, const Tensor<T>&, double, const Tensor<T>*);       \
    template double tanimoto(const Tensor<T>&, const Tensor<T>&, double, const Tensor<T>*);               \
    template double tanimoto_with_complement(const Tensor<T>&, const Tensor<T>&, double, const Tensor<T>*); \
    template Var<T> tanimoto_loss(const Var<T>&, const Tensor<T>&, const LossConfig&, const Tensor<T>*);  \
    template Tensor<T> class_balance_weights(const Tensor<T>&);                                           \
    template Tensor<T> contour_weight_map(const Tensor<T>&, const LossConfig&);

RESCR_INSTANTIATE_LOSS(float)
RESCR_INSTANTIATE_LOSS(double)

}  // namespace rescr
