#include "rescr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

namespace rescr::ops {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// The tape shared by every grad-requiring input, or null if none.
template <typename T>
Tape<T>* common_tape(const char* op, std::initializer_list<const Var<T>*> inputs) {
    Tape<T>* tape = nullptr;
    for (const Var<T>* v : inputs) {
        if (!v->valid() || !v->requires_grad()) continue;
        if (tape && v->tape() != tape) throw ValueError(std::string(op) + ": inputs recorded on different tapes");
        tape = v->tape();
    }
    return tape;
}

template <typename T>
Tape<T>* common_tape(const char* op, const std::vector<Var<T>>& inputs) {
    Tape<T>* tape = nullptr;
    for (const Var<T>& v : inputs) {
        if (!v.requires_grad()) continue;
        if (tape && v.tape() != tape) throw ValueError(std::string(op) + ": inputs recorded on different tapes");
        tape = v.tape();
    }
    return tape;
}

template <typename T>
Var<T> finish(const char* op, Tensor<T> value, Tape<T>* tape, typename Tape<T>::BackwardFn fn) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
    if (!tape) return constant(std::move(value));
    return tape->record(op, std::move(value), std::move(fn));
}

// Grad buffer of `n` if it wants one, else null.
template <typename T>
T* grad_ptr(const NodePtr<T>& n) {
    if (!n || !n->requires_grad) return nullptr;
    return n->grad_buffer().data().data();
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

std::ptrdiff_t half_extent(const char* op, std::size_t k, std::size_t dilation) {
    if (k % 2 == 0) throw ShapeError(std::string(op) + ": kernel extent must be odd, got " + std::to_string(k));
    if (dilation == 0) throw ValueError(std::string(op) + ": dilation must be >= 1");
    std::uint64_t off = 0;
    if (__builtin_mul_overflow(static_cast<std::uint64_t>(k / 2), static_cast<std::uint64_t>(dilation), &off) ||
        off > static_cast<std::uint64_t>(std::numeric_limits<std::int32_t>::max()))
        throw ValueError(std::string(op) + ": dilated kernel offset exceeds representable index");
    return static_cast<std::ptrdiff_t>(off);
}

}  // namespace

// ---------------------------------------------------------------------------
// convolutions

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t dilation) {
    require(x.rank() == 4, "conv2d: input must be rank 4, got " + to_string(x.shape()));
    require(kernel.rank() == 4, "conv2d: kernel must be rank 4, got " + to_string(kernel.shape()));
    const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), Co = kernel.dim(3);
    require(kernel.dim(2) == Ci, "conv2d: kernel expects " + std::to_string(kernel.dim(2)) +
                                     " input channels, input has " + std::to_string(Ci));
    if (bias.valid()) require(bias.shape() == Shape{Co}, "conv2d: bias shape " + to_string(bias.shape()));
    const auto ph = half_extent("conv2d", kh, dilation);
    const auto pw = half_extent("conv2d", kw, dilation);
    const auto d = static_cast<std::ptrdiff_t>(dilation);
    const auto sH = static_cast<std::ptrdiff_t>(H), sW = static_cast<std::ptrdiff_t>(W);

    Tensor<T> out(Shape{B, H, W, Co});
    const T* xp = x.value().data().data();
    const T* kp = kernel.value().data().data();
    T* op = out.data().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::ptrdiff_t i = 0; i < sH; ++i)
            for (std::ptrdiff_t j = 0; j < sW; ++j) {
                T* o = op + ((b * H + i) * W + j) * Co;
                if (bias.valid()) std::copy_n(bias.value().data().data(), Co, o);
                for (std::size_t u = 0; u < kh; ++u) {
                    const std::ptrdiff_t ii = i + static_cast<std::ptrdiff_t>(u) * d - ph;
                    if (ii < 0 || ii >= sH) continue;
                    for (std::size_t v = 0; v < kw; ++v) {
                        const std::ptrdiff_t jj = j + static_cast<std::ptrdiff_t>(v) * d - pw;
                        if (jj < 0 || jj >= sW) continue;
                        const T* in = xp + ((b * H + ii) * W + jj) * Ci;
                        const T* k = kp + (u * kw + v) * Ci * Co;
                        for (std::size_t c = 0; c < Ci; ++c) {
                            const T xv = in[c];
                            const T* krow = k + c * Co;
                            for (std::size_t q = 0; q < Co; ++q) o[q] += xv * krow[q];
                        }
                    }
                }
            }

    Tape<T>* tape = common_tape<T>("conv2d", {&x, &kernel, &bias});
    NodePtr<T> xn = x.node(), kn = kernel.node(), bn = bias.node();
    return finish<T>("conv2d", std::move(out), tape, [=](const Tensor<T>& gy) {
        T* gx = grad_ptr(xn);
        T* gk = grad_ptr(kn);
        T* gb = grad_ptr(bn);
        const T* xv = xn->value.data().data();
        const T* kv = kn->value.data().data();
        const T* g = gy.data().data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::ptrdiff_t i = 0; i < sH; ++i)
                for (std::ptrdiff_t j = 0; j < sW; ++j) {
                    const T* go = g + ((b * H + i) * W + j) * Co;
                    if (gb)
                        for (std::size_t q = 0; q < Co; ++q) gb[q] += go[q];
                    for (std::size_t u = 0; u < kh; ++u) {
                        const std::ptrdiff_t ii = i + static_cast<std::ptrdiff_t>(u) * d - ph;
                        if (ii < 0 || ii >= sH) continue;
                        for (std::size_t v = 0; v < kw; ++v) {
                            const std::ptrdiff_t jj = j + static_cast<std::ptrdiff_t>(v) * d - pw;
                            if (jj < 0 || jj >= sW) continue;
                            const std::size_t in_off = ((b * H + ii) * W + jj) * Ci;
                            const std::size_t k_off = (u * kw + v) * Ci * Co;
                            for (std::size_t c = 0; c < Ci; ++c) {
                                const T* krow = kv + k_off + c * Co;
                                if (gx) {
                                    T s = 0;
                                    for (std::size_t q = 0; q < Co; ++q) s += go[q] * krow[q];
                                    gx[in_off + c] += s;
                                }
                                if (gk) {
                                    const T xin = xv[in_off + c];
                                    T* gkrow = gk + k_off + c * Co;
                                    for (std::size_t q = 0; q < Co; ++q) gkrow[q] += xin * go[q];
                                }
                            }
                        }
                    }
                }
    });
}

template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t dilation) {
    require(x.rank() == 4, "depthwise_conv2d: input must be rank 4, got " + to_string(x.shape()));
    require(kernel.rank() == 3, "depthwise_conv2d: kernel must be rank 3, got " + to_string(kernel.shape()));
    const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
    require(kernel.dim(2) == C, "depthwise_conv2d: kernel has " + std::to_string(kernel.dim(2)) +
                                    " channels, input has " + std::to_string(C));
    if (bias.valid()) require(bias.shape() == Shape{C}, "depthwise_conv2d: bias shape " + to_string(bias.shape()));
    const auto ph = half_extent("depthwise_conv2d", kh, dilation);
    const auto pw = half_extent("depthwise_conv2d", kw, dilation);
    const auto d = static_cast<std::ptrdiff_t>(dilation);
    const auto sH = static_cast<std::ptrdiff_t>(H), sW = static_cast<std::ptrdiff_t>(W);

    Tensor<T> out(Shape{B, H, W, C});
    const T* xp = x.value().data().data();
    const T* kp = kernel.value().data().data();
    T* op = out.data().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::ptrdiff_t i = 0; i < sH; ++i)
            for (std::ptrdiff_t j = 0; j < sW; ++j) {
                T* o = op + ((b * H + i) * W + j) * C;
                if (bias.valid()) std::copy_n(bias.value().data().data(), C, o);
                for (std::size_t u = 0; u < kh; ++u) {
                    const std::ptrdiff_t ii = i + static_cast<std::ptrdiff_t>(u) * d - ph;
                    if (ii < 0 || ii >= sH) continue;
                    for (std::size_t v = 0; v < kw; ++v) {
                        const std::ptrdiff_t jj = j + static_cast<std::ptrdiff_t>(v) * d - pw;
                        if (jj < 0 || jj >= sW) continue;
                        const T* in = xp + ((b * H + ii) * W + jj) * C;
                        const T* k = kp + (u * kw + v) * C;
                        for (std::size_t c = 0; c < C; ++c) o[c] += in[c] * k[c];
                    }
                }
            }

    Tape<T>* tape = common_tape<T>("depthwise_conv2d", {&x, &kernel, &bias});
    NodePtr<T> xn = x.node(), kn = kernel.node(), bn = bias.node();
    return finish<T>("depthwise_conv2d", std::move(out), tape, [=](const Tensor<T>& gy) {
        T* gx = grad_ptr(xn);
        T* gk = grad_ptr(kn);
        T* gb = grad_ptr(bn);
        const T* xv = xn->value.data().data();
        const T* kv = kn->value.data().data();
        const T* g = gy.data().data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::ptrdiff_t i = 0; i < sH; ++i)
                for (std::ptrdiff_t j = 0; j < sW; ++j) {
                    const T* go = g + ((b * H + i) * W + j) * C;
                    if (gb)
                        for (std::size_t c = 0; c < C; ++c) gb[c] += go[c];
                    for (std::size_t u = 0; u < kh; ++u) {
                        const std::ptrdiff_t ii = i + static_cast<std::ptrdiff_t>(u) * d - ph;
                        if (ii < 0 || ii >= sH) continue;
                        for (std::size_t v = 0; v < kw; ++v) {
                            const std::ptrdiff_t jj = j + static_cast<std::ptrdiff_t>(v) * d - pw;
                            if (jj < 0 || jj >= sW) continue;
                            const std::size_t in_off = ((b * H + ii) * W + jj) * C;
                            const std::size_t k_off = (u * kw + v) * C;
                            if (gx)
                                for (std::size_t c = 0; c < C; ++c) gx[in_off + c] += go[c] * kv[k_off + c];
                            if (gk)
                                for (std::size_t c = 0; c < C; ++c) gk[k_off + c] += go[c] * xv[in_off + c];
                        }
                    }
                }
    });
}

template <typename T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    require(weight.rank() == 2, "pointwise_conv: weight must be rank 2, got " + to_string(weight.shape()));
    const std::size_t Ci = weight.dim(0), Co = weight.dim(1);
    require(x.shape().back() == Ci, "pointwise_conv: input has " + std::to_string(x.shape().back()) +
                                        " channels, weight expects " + std::to_string(Ci));
    if (bias.valid()) require(bias.shape() == Shape{Co}, "pointwise_conv: bias shape " + to_string(bias.shape()));
    const std::size_t N = x.value().size() / Ci;
    Shape out_shape = x.shape();
    out_shape.back() = Co;

    Tensor<T> out(out_shape);
    const T* xp = x.value().data().data();
    const T* wp = weight.value().data().data();
    T* op = out.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        T* o = op + n * Co;
        if (bias.valid()) std::copy_n(bias.value().data().data(), Co, o);
        const T* in = xp + n * Ci;
        for (std::size_t c = 0; c < Ci; ++c) {
            const T xv = in[c];
            const T* wrow = wp + c * Co;
            for (std::size_t q = 0; q < Co; ++q) o[q] += xv * wrow[q];
        }
    }

    Tape<T>* tape = common_tape<T>("pointwise_conv", {&x, &weight, &bias});
    NodePtr<T> xn = x.node(), wn = weight.node(), bn = bias.node();
    return finish<T>("pointwise_conv", std::move(out), tape, [=](const Tensor<T>& gy) {
        T* gx = grad_ptr(xn);
        T* gw = grad_ptr(wn);
        T* gb = grad_ptr(bn);
        const T* xv = xn->value.data().data();
        const T* wv = wn->value.data().data();
        const T* g = gy.data().data();
        for (std::size_t n = 0; n < N; ++n) {
            const T* go = g + n * Co;
            if (gb)
                for (std::size_t q = 0; q < Co; ++q) gb[q] += go[q];
            for (std::size_t c = 0; c < Ci; ++c) {
                const T* wrow = wv + c * Co;
                if (gx) {
                    T s = 0;
                    for (std::size_t q = 0; q < Co; ++q) s += go[q] * wrow[q];
                    gx[n * Ci + c] += s;
                }
                if (gw) {
                    const T xin = xv[n * Ci + c];
                    T* gwrow = gw + c * Co;
                    for (std::size_t q = 0; q < Co; ++q) gwrow[q] += xin * go[q];
                }
            }
        }
    });
}

template <typename T>
Var<T> separable_atrous_conv(const Var<T>& x, const Var<T>& depthwise, const Var<T>& pointwise,
                             const Var<T>& bias, std::size_t dilation) {
    if (depthwise.rank() == 3 && pointwise.rank() == 2 && depthwise.dim(2) != pointwise.dim(0))
        throw ShapeError("separable_atrous_conv: depthwise emits " + std::to_string(depthwise.dim(2)) +
                         " channels, pointwise expects " + std::to_string(pointwise.dim(0)));
    return pointwise_conv(depthwise_conv2d(x, depthwise, Var<T>{}, dilation), pointwise, bias);
}

// ---------------------------------------------------------------------------
// elementwise

namespace {
thread_local BranchProbe* active_probe = nullptr;
}

BranchProbe::BranchProbe() : outer_(active_probe) { active_probe = this; }
BranchProbe::~BranchProbe() { active_probe = outer_; }
BranchProbe* BranchProbe::active() noexcept { return active_probe; }

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T alpha) {
    if (!(alpha > T(0) && alpha < T(1))) throw ValueError("leaky_relu: alpha must lie in (0,1)");
    Tensor<T> out(x.shape());
    const auto& in = x.value();
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] >= T(0) ? in[i] : alpha * in[i];
    if (auto* probe = BranchProbe::active())
        for (std::size_t i = 0; i < in.size(); ++i) probe->record(in[i] >= T(0));
    NodePtr<T> xn = x.node();
    return finish<T>("leaky_relu", std::move(out), common_tape<T>("leaky_relu", {&x}), [=](const Tensor<T>& gy) {
        T* gx = grad_ptr(xn);
        const auto& v = xn->value;
        for (std::size_t i = 0; i < v.size(); ++i) gx[i] += v[i] >= T(0) ? gy[i] : alpha * gy[i];
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const auto& in = x.value();
    for (std::size_t i = 0; i < in.size(); ++i) {
        const T v = in[i];
        if (v >= 0) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    NodePtr<T> xn = x.node();
    auto result = finish<T>("sigmoid", std::move(out), common_tape<T>("sigmoid", {&x}), {});
    if (result.requires_grad()) {
        // backward reads the output, so capture it weakly to avoid a cycle
        std::weak_ptr<Node<T>> self = result.node();
        result.node()->backward = [xn, self](const Tensor<T>& gy) {
            T* gx = grad_ptr(xn);
            const auto& s = self.lock()->value;
            for (std::size_t i = 0; i < s.size(); ++i) gx[i] += gy[i] * s[i] * (T(1) - s[i]);
        };
    }
    return result;
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const auto& in = x.value();
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::tanh(in[i]);
    NodePtr<T> xn = x.node();
    auto result = finish<T>("tanh", std::move(out), common_tape<T>("tanh", {&x}), {});
    if (result.requires_grad()) {
        std::weak_ptr<Node<T>> self = result.node();
        result.node()->backward = [xn, self](const Tensor<T>& gy) {
            T* gx = grad_ptr(xn);
            const auto& t = self.lock()->value;
            for (std::size_t i = 0; i < t.size(); ++i) gx[i] += gy[i] * (T(1) - t[i] * t[i]);
        };
    }
    return result;
}

template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
    const std::size_t C = x.shape().back();
    require(C >= 2, "softmax_channels: need at least 2 channels, got " + to_string(x.shape()));
    const std::size_t N = x.value().size() / C;
    Tensor<T> out(x.shape());
    const T* in = x.value().data().data();
    T* op = out.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        const T* z = in + n * C;
        T* y = op + n * C;
        const T m = *std::max_element(z, z + C);
        T s = 0;
        for (std::size_t c = 0; c < C; ++c) s += (y[c] = std::exp(z[c] - m));
        for (std::size_t c = 0; c < C; ++c) y[c] /= s;
    }
    NodePtr<T> xn = x.node();
    auto result = finish<T>("softmax_channels", std::move(out), common_tape<T>("softmax_channels", {&x}), {});
    if (result.requires_grad()) {
        std::weak_ptr<Node<T>> self = result.node();
        result.node()->backward = [xn, self, N, C](const Tensor<T>& gy) {
            T* gx = grad_ptr(xn);
            const T* y = self.lock()->value.data().data();
            const T* g = gy.data().data();
            for (std::size_t n = 0; n < N; ++n) {
                T dot = 0;
                for (std::size_t c = 0; c < C; ++c) dot += g[n * C + c] * y[n * C + c];
                for (std::size_t c = 0; c < C; ++c) gx[n * C + c] += y[n * C + c] * (g[n * C + c] - dot);
            }
        };
    }
    return result;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require(a.shape() == b.shape(), "add: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    NodePtr<T> an = a.node(), bn = b.node();
    return finish<T>("add", std::move(out), common_tape<T>("add", {&a, &b}), [=](const Tensor<T>& gy) {
        if (T* ga = grad_ptr(an))
            for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        if (T* gb = grad_ptr(bn))
            for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
    });
}

template <typename T>
Var<T> multiply(const Var<T>& a, const Var<T>& b) {
    require(a.shape() == b.shape(), "multiply: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    NodePtr<T> an = a.node(), bn = b.node();
    return finish<T>("multiply", std::move(out), common_tape<T>("multiply", {&a, &b}), [=](const Tensor<T>& gy) {
        if (T* ga = grad_ptr(an))
            for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bn->value[i];
        if (T* gb = grad_ptr(bn))
            for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * an->value[i];
    });
}

// ---------------------------------------------------------------------------
// shape

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    require(!parts.empty(), "concat_channels: empty input list");
    const Shape& ref = parts.front().shape();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require(p.rank() == ref.size() && std::equal(ref.begin(), ref.end() - 1, p.shape().begin()),
                "concat_channels: shape " + to_string(p.shape()) + " incompatible with " + to_string(ref));
        widths.push_back(p.shape().back());
        total += widths.back();
    }
    Shape out_shape = ref;
    out_shape.back() = total;
    const std::size_t N = numel(ref) / ref.back();
    Tensor<T> out(out_shape);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const T* src = parts[k].value().data().data();
        const std::size_t w = widths[k];
        for (std::size_t n = 0; n < N; ++n) std::copy_n(src + n * w, w, out.data().data() + n * total + off);
        off += w;
    }
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return finish<T>("concat_channels", std::move(out), common_tape<T>("concat_channels", parts),
                     [=](const Tensor<T>& gy) {
                         std::size_t o = 0;
                         for (std::size_t k = 0; k < nodes.size(); ++k) {
                             const std::size_t w = widths[k];
                             if (T* g = grad_ptr(nodes[k]))
                                 for (std::size_t n = 0; n < N; ++n)
                                     for (std::size_t c = 0; c < w; ++c) g[n * w + c] += gy[n * total + o + c];
                             o += w;
                         }
                     });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end) {
    const std::size_t C = x.shape().back();
    require(begin < end && end <= C, "slice_channels: range [" + std::to_string(begin) + "," +
                                         std::to_string(end) + ") outside " + to_string(x.shape()));
    const std::size_t w = end - begin, N = x.value().size() / C;
    Shape out_shape = x.shape();
    out_shape.back() = w;
    Tensor<T> out(out_shape);
    const T* src = x.value().data().data();
    for (std::size_t n = 0; n < N; ++n) std::copy_n(src + n * C + begin, w, out.data().data() + n * w);
    NodePtr<T> xn = x.node();
    return finish<T>("slice_channels", std::move(out), common_tape<T>("slice_channels", {&x}),
                     [=](const Tensor<T>& gy) {
                         T* g = grad_ptr(xn);
                         for (std::size_t n = 0; n < N; ++n)
                             for (std::size_t c = 0; c < w; ++c) g[n * C + begin + c] += gy[n * w + c];
                     });
}

namespace {

// out[idx] = in[idx permuted]; out axis a reads input axis perm[a].
template <typename T>
void permute_into(const Tensor<T>& in, const std::vector<std::size_t>& perm, T* out, bool accumulate) {
    const Shape& s = in.shape();
    const std::size_t r = s.size();
    const Shape in_strides = strides_of(s);
    Shape out_shape(r), src_stride(r);
    for (std::size_t a = 0; a < r; ++a) {
        out_shape[a] = s[perm[a]];
        src_stride[a] = in_strides[perm[a]];
    }
    std::size_t idx[kMaxRank] = {0, 0, 0, 0, 0};
    const T* src = in.data().data();
    const std::size_t n = in.size();
    const std::size_t inner = out_shape[r - 1], inner_stride = src_stride[r - 1];
    std::size_t o = 0;
    while (o < n) {
        std::size_t base = 0;
        for (std::size_t a = 0; a + 1 < r; ++a) base += idx[a] * src_stride[a];
        for (std::size_t k = 0; k < inner; ++k, ++o) {
            if (accumulate)
                out[o] += src[base + k * inner_stride];
            else
                out[o] = src[base + k * inner_stride];
        }
        for (std::size_t a = r - 1; a-- > 0;) {
            if (++idx[a] < out_shape[a]) break;
            idx[a] = 0;
        }
    }
}

}  // namespace

template <typename T>
Var<T> transpose_axes(const Var<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    require(perm.size() == r, "transpose_axes: permutation length " + std::to_string(perm.size()) +
                                  " for rank " + std::to_string(r));
    std::vector<std::size_t> inverse(r, r);
    for (std::size_t a = 0; a < r; ++a) {
        require(perm[a] < r && inverse[perm[a]] == r, "transpose_axes: not a permutation of axes");
        inverse[perm[a]] = a;
    }
    Shape out_shape(r);
    for (std::size_t a = 0; a < r; ++a) out_shape[a] = x.dim(perm[a]);
    Tensor<T> out(out_shape);
    permute_into(x.value(), perm, out.data().data(), false);
    NodePtr<T> xn = x.node();
    return finish<T>("transpose_axes", std::move(out), common_tape<T>("transpose_axes", {&x}),
                     [=](const Tensor<T>& gy) { permute_into(gy, inverse, grad_ptr(xn), true); });
}

template <typename T>
Var<T> expand_last_dim(const Var<T>& x) {
    require(x.rank() < kMaxRank, "expand_last_dim: rank already 5");
    Shape s = x.shape();
    s.push_back(1);
    NodePtr<T> xn = x.node();
    return finish<T>("expand_last_dim", x.value().reshaped(s), common_tape<T>("expand_last_dim", {&x}),
                     [=](const Tensor<T>& gy) {
                         T* g = grad_ptr(xn);
                         for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
                     });
}

template <typename T>
Var<T> sum_last_dim(const Var<T>& x) {
    require(x.rank() >= 2, "sum_last_dim: need rank >= 2, got " + to_string(x.shape()));
    Shape s = x.shape();
    const std::size_t n = s.back();
    s.pop_back();
    Tensor<T> out(s);
    const T* src = x.value().data().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        T acc = 0;
        for (std::size_t k = 0; k < n; ++k) acc += src[i * n + k];
        out[i] = acc;
    }
    NodePtr<T> xn = x.node();
    return finish<T>("sum_last_dim", std::move(out), common_tape<T>("sum_last_dim", {&x}),
                     [=](const Tensor<T>& gy) {
                         T* g = grad_ptr(xn);
                         for (std::size_t i = 0; i < gy.size(); ++i)
                             for (std::size_t k = 0; k < n; ++k) g[i * n + k] += gy[i];
                     });
}

template <typename T>
Var<T> select(const Var<T>& x, std::size_t axis, std::size_t index) {
    require(x.rank() >= 2 && axis < x.rank(), "select: axis " + std::to_string(axis) + " invalid for " +
                                                  to_string(x.shape()));
    require(index < x.dim(axis), "select: index " + std::to_string(index) + " out of range for " +
                                     to_string(x.shape()));
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
    for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
    const std::size_t len = s[axis];
    Shape out_shape = s;
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor<T> out(out_shape);
    const T* src = x.value().data().data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(src + (o * len + index) * inner, inner, out.data().data() + o * inner);
    NodePtr<T> xn = x.node();
    return finish<T>("select", std::move(out), common_tape<T>("select", {&x}), [=](const Tensor<T>& gy) {
        T* g = grad_ptr(xn);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < inner; ++k) g[(o * len + index) * inner + k] += gy[o * inner + k];
    });
}

template <typename T>
Var<T> stack(const std::vector<Var<T>>& parts, std::size_t axis) {
    require(!parts.empty(), "stack: empty input list");
    const Shape& ref = parts.front().shape();
    require(ref.size() < kMaxRank && axis <= ref.size(), "stack: axis " + std::to_string(axis) + " invalid for " +
                                                             to_string(ref));
    for (const auto& p : parts)
        require(p.shape() == ref, "stack: shape " + to_string(p.shape()) + " vs " + to_string(ref));
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= ref[a];
    for (std::size_t a = axis; a < ref.size(); ++a) inner *= ref[a];
    const std::size_t len = parts.size();
    Shape out_shape = ref;
    out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), len);
    Tensor<T> out(out_shape);
    for (std::size_t t = 0; t < len; ++t) {
        const T* src = parts[t].value().data().data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src + o * inner, inner, out.data().data() + (o * len + t) * inner);
    }
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return finish<T>("stack", std::move(out), common_tape<T>("stack", parts), [=](const Tensor<T>& gy) {
        for (std::size_t t = 0; t < len; ++t) {
            T* g = grad_ptr(nodes[t]);
            if (!g) continue;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t k = 0; k < inner; ++k) g[o * inner + k] += gy[(o * len + t) * inner + k];
        }
    });
}

// ---------------------------------------------------------------------------
// misc

template <typename T>
Var<T> spatial_dropout(const Var<T>& x, double rate, bool training, Rng& rng) {
    require(x.rank() == 4, "spatial_dropout: input must be rank 4, got " + to_string(x.shape()));
    if (!(rate >= 0.0 && rate < 1.0)) throw ValueError("spatial_dropout: rate must lie in [0,1)");
    if (!training || rate == 0.0) return x;
    const std::size_t B = x.dim(0), HW = x.dim(1) * x.dim(2), C = x.dim(3);
    std::vector<T> scale(B * C);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& s : scale) s = uniform01(rng) < rate ? T(0) : keep_scale;
    Tensor<T> out(x.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < HW; ++p)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t i = (b * HW + p) * C + c;
                out[i] = x.value()[i] * scale[b * C + c];
            }
    NodePtr<T> xn = x.node();
    return finish<T>("spatial_dropout", std::move(out), common_tape<T>("spatial_dropout", {&x}),
                     [=](const Tensor<T>& gy) {
                         T* g = grad_ptr(xn);
                         for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t p = 0; p < HW; ++p)
                                 for (std::size_t c = 0; c < C; ++c) {
                                     const std::size_t i = (b * HW + p) * C + c;
                                     g[i] += gy[i] * scale[b * C + c];
                                 }
                     });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T acc = 0;
    for (T v : x.value().data()) acc += v;
    NodePtr<T> xn = x.node();
    return finish<T>("sum", Tensor<T>::scalar(acc), common_tape<T>("sum", {&x}), [=](const Tensor<T>& gy) {
        T* g = grad_ptr(xn);
        const std::size_t n = xn->value.size();
        for (std::size_t i = 0; i < n; ++i) g[i] += gy[0];
    });
}

#define RESCR_INSTANTIATE_OPS(T)                                                                      \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);                 \
    template Var<T> depthwise_conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);       \
    template Var<T> pointwise_conv(const Var<T>&, const Var<T>&, const Var<T>&);                      \
    template Var<T> separable_atrous_conv(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, \
                                          std::size_t);                                               \
    template Var<T> leaky_relu(const Var<T>&, T);                                                     \
    template Var<T> sigmoid(const Var<T>&);                                                           \
    template Var<T> tanh(const Var<T>&);                                                              \
    template Var<T> softmax_channels(const Var<T>&);                                                  \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                \
    template Var<T> multiply(const Var<T>&, const Var<T>&);                                           \
    template Var<T> concat_channels(const std::vector<Var<T>>&);                                      \
    template Var<T> slice_channels(const Var<T>&, std::size_t, std::size_t);                          \
    template Var<T> transpose_axes(const Var<T>&, const std::vector<std::size_t>&);                   \
    template Var<T> expand_last_dim(const Var<T>&);                                                   \
    template Var<T> sum_last_dim(const Var<T>&);                                                      \
    template Var<T> select(const Var<T>&, std::size_t, std::size_t);                                  \
    template Var<T> stack(const std::vector<Var<T>>&, std::size_t);                                   \
    template Var<T> spatial_dropout(const Var<T>&, double, bool, Rng&);                               \
    template Var<T> sum(const Var<T>&);

RESCR_INSTANTIATE_OPS(float)
RESCR_INSTANTIATE_OPS(double)

}  // namespace rescr::ops
