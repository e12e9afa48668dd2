#include "rescr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>

#include "rescr/loss.hpp"
#include "rescr/network.hpp"
#include "rescr/ops.hpp"

namespace rescr {

std::size_t GradcheckReport::kinks() const {
    std::size_t n = 0;
    for (const auto& c : cases) n += c.kinks;
    return n;
}

double GradcheckReport::max_rel_err() const {
    double worst = 0;
    for (const auto& c : cases) worst = std::max(worst, c.max_rel_err);
    return worst;
}

namespace {

using Builder = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct Input {
    Shape shape;
    double lo = -1, hi = 1;
};

Tensor<double> draw(const Shape& shape, Rng& rng, double lo, double hi) {
    Tensor<double> t(shape);
    for (auto& v : t.data()) v = uniform(rng, lo, hi);
    return t;
}

double compare(const std::vector<Tensor<double>>& inputs, const Builder& build, Rng& rng,
               const GradcheckOptions& opts, bool centre, std::size_t& kinks) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    const auto out = build(leaves);

    Tensor<double> w = draw(out.shape(), rng, -1, 1);
    if (centre && out.rank() > 0) {
        const std::size_t K = out.shape().back();
        for (std::size_t p = 0; p < w.size() / K; ++p) {
            double mean = 0;
            for (std::size_t k = 0; k < K; ++k) mean += w[p * K + k];
            mean /= double(K);
            for (std::size_t k = 0; k < K; ++k) w[p * K + k] -= mean;
        }
    }
    tape.backward(ops::sum(ops::multiply(out, constant(w))));

    // value of the weighted sum, plus the LeakyReLU branch pattern
    auto objective = [&](const std::vector<Tensor<double>>& xs, std::vector<bool>& pattern) {
        ops::BranchProbe probe;
        std::vector<Var<double>> cs;
        for (const auto& t : xs) cs.push_back(constant(t));
        const auto y = build(cs).value();
        long double acc = 0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += static_cast<long double>(y[i]) * w[i];
        pattern = probe.pattern();
        return static_cast<double>(acc);
    };

    auto xs = inputs;
    double worst = 0;
    std::vector<bool> up_pattern, down_pattern;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const Tensor<double>* g = leaves[k].grad();
        for (std::size_t i = 0; i < xs[k].size(); ++i) {
            const double orig = xs[k][i];
            xs[k][i] = orig + opts.step;
            const double up = objective(xs, up_pattern);
            xs[k][i] = orig - opts.step;
            const double down = objective(xs, down_pattern);
            xs[k][i] = orig;
            // the central difference spans a breakpoint: not a derivative
            if (up_pattern != down_pattern) {
                ++kinks;
                continue;
            }
            const double numeric = (up - down) / (2 * opts.step);
            const double analytic = g ? (*g)[i] : 0.0;
            const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
        }
    }
    return worst;
}

GradcheckCase sweep(const std::string& name, const std::vector<Input>& inputs, const Builder& build,
                    const GradcheckOptions& opts, std::uint64_t salt, bool centre = false) {
    GradcheckCase c{name, 0, opts.trials, 0, 0};
    for (const auto& in : inputs) {
        std::size_t n = 1;
        for (auto d : in.shape) n *= d;
        c.entries += n;
    }
    for (std::size_t t = 0; t < opts.trials; ++t) {
        Rng rng(derive_seed(derive_seed(opts.seed, salt), t));
        std::vector<Tensor<double>> xs;
        for (const auto& in : inputs) xs.push_back(draw(in.shape, rng, in.lo, in.hi));
        c.max_rel_err = std::max(c.max_rel_err, compare(xs, build, rng, opts, centre, c.kinks));
    }
    return c;
}

GradcheckCase network_case(const GradcheckOptions& opts) {
    NetworkConfig cfg;
    cfg.n_conv_blocks = opts.n_conv_blocks;
    cfg.n_lstm_blocks = opts.n_lstm_blocks;
    GradcheckCase c{"network n=" + std::to_string(cfg.n_conv_blocks) + " m=" + std::to_string(cfg.n_lstm_blocks) +
                        " " + std::to_string(opts.height) + "x" + std::to_string(opts.width),
                    0, opts.trials, 0, 0};
    for (std::size_t t = 0; t < opts.trials; ++t) {
        // draw t uses seed opts.seed + t + 1 for weights, biases, input and
        // the fixed dropout masks
        const std::uint64_t seed = opts.seed + t + 1;
        Rng rng(seed);
        const auto net = ResCrNet<double>::build(cfg, rng);
        std::vector<std::string> names;
        std::vector<Tensor<double>> xs;
        for (const auto& [name, tensor] : net.parameters()) {
            names.push_back(name);
            // perturb biases away from their zero initialization
            xs.push_back(name.ends_with(".bias") ? draw(tensor.shape(), rng, -0.2, 0.2) : tensor);
        }
        xs.push_back(draw(Shape{1, opts.height, opts.width, 1}, rng, 0, 1));
        const std::uint64_t dropout_seed = seed * 31;
        Builder build = [&](const std::vector<Var<double>>& v) {
            std::map<std::string, Var<double>> m;
            for (std::size_t i = 0; i < names.size(); ++i) m.emplace(names[i], v[i]);
            Rng dropout(dropout_seed);
            return net.forward(ParamVars<double>::wrap(std::move(m)), v.back(), true, dropout);
        };
        c.entries = 0;
        for (const auto& x : xs) c.entries += x.size();
        c.max_rel_err = std::max(c.max_rel_err, compare(xs, build, rng, opts, true, c.kinks));
    }
    return c;
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opts, std::ostream* progress) {
    if (opts.trials == 0) throw ValueError("gradcheck needs at least one trial");
    if (!opts.include_ops && !opts.include_network) throw ValueError("gradcheck has nothing to check");
    if (!(opts.step > 0) || !(opts.floor > 0)) throw ValueError("gradcheck step and floor must be positive");
    GradcheckReport report;
    auto record = [&](GradcheckCase c) {
        if (progress) {
            *progress << "  " << c.name << ": max rel err " << c.max_rel_err;
            if (c.kinks) *progress << " (" << c.kinks << " steps across a LeakyReLU breakpoint skipped)";
            *progress << "\n" << std::flush;
        }
        report.cases.push_back(std::move(c));
    };
    std::uint64_t salt = 0;
    auto op = [&](const std::string& name, std::vector<Input> in, Builder b, bool centre = false) {
        record(sweep(name, in, b, opts, ++salt, centre));
    };

    if (opts.include_ops) {
        op("conv2d", {{{2, 5, 4, 2}}, {{3, 3, 2, 3}}, {{3}}}, [](auto& v) { return ops::conv2d(v[0], v[1], v[2], 2); });
        op("depthwise_conv2d", {{{1, 5, 6, 3}}, {{3, 3, 3}}, {{3}}},
           [](auto& v) { return ops::depthwise_conv2d(v[0], v[1], v[2], 3); });
        op("pointwise_conv", {{{1, 3, 3, 2}}, {{2, 4}}, {{4}}},
           [](auto& v) { return ops::pointwise_conv(v[0], v[1], v[2]); });
        op("separable_atrous_conv", {{{1, 5, 5, 2}}, {{3, 3, 2}}, {{2, 3}}, {{3}}},
           [](auto& v) { return ops::separable_atrous_conv(v[0], v[1], v[2], v[3], 2); });
        op("leaky_relu", {{{3, 7}}}, [](auto& v) { return ops::leaky_relu(v[0], 0.3); });
        op("sigmoid", {{{4, 5}, -4, 4}}, [](auto& v) { return ops::sigmoid(v[0]); });
        op("tanh", {{{4, 5}, -3, 3}}, [](auto& v) { return ops::tanh(v[0]); });
        op("softmax_channels", {{{1, 2, 3, 4}, -3, 3}}, [](auto& v) { return ops::softmax_channels(v[0]); });
        op("add", {{{2, 3}}, {{2, 3}}}, [](auto& v) { return ops::add(v[0], v[1]); });
        op("multiply", {{{2, 3}}, {{2, 3}}}, [](auto& v) { return ops::multiply(v[0], v[1]); });
        op("concat_channels", {{{1, 2, 2, 2}}, {{1, 2, 2, 3}}},
           [](auto& v) { return ops::concat_channels<double>({v[0], v[1]}); });
        op("slice_channels", {{{1, 2, 2, 5}}}, [](auto& v) { return ops::slice_channels(v[0], 1, 4); });
        op("transpose_axes", {{{2, 3, 4, 2, 1}}},
           [](auto& v) { return ops::transpose_axes(v[0], {0, 2, 1, 3, 4}); });
        op("expand_last_dim", {{{2, 3, 2}}}, [](auto& v) { return ops::expand_last_dim(v[0]); });
        op("sum_last_dim", {{{2, 3, 2}}}, [](auto& v) { return ops::sum_last_dim(v[0]); });
        op("select", {{{2, 3, 4}}}, [](auto& v) { return ops::select(v[0], 1, 2); });
        op("stack", {{{2, 3}}, {{2, 3}}, {{2, 3}}}, [](auto& v) { return ops::stack<double>({v[0], v[1], v[2]}, 1); });
        op("sum", {{{3, 3}}}, [](auto& v) { return ops::sum(v[0]); });
        op("spatial_dropout", {{{2, 3, 3, 4}}}, [](auto& v) {
            Rng r(77);
            return ops::spatial_dropout(v[0], 0.4, true, r);
        });
        op("bidirectional_conv_lstm", {{{1, 3, 4, 2, 1}}, {{3, 3, 2, 4}, -0.5, 0.5}, {{4}, -0.5, 0.5},
                                       {{3, 3, 2, 4}, -0.5, 0.5}, {{4}, -0.5, 0.5}},
           [](auto& v) {
               return bidirectional_conv_lstm(v[0], ConvLSTMParams<double>{v[1], v[2]},
                                              ConvLSTMParams<double>{v[3], v[4]});
           });
        // the loss on softmax outputs, so predictions stay inside (0,1)
        Tensor<double> truth(Shape{1, 3, 3, 3});
        for (std::size_t p = 0; p < 9; ++p) truth[p * 3 + (p * 5) % 3] = 1;
        op("tanimoto_loss", {{{1, 3, 3, 3}, -2, 2}}, [truth](auto& v) {
            return tanimoto_loss(ops::softmax_channels(v[0]), truth, LossConfig{});
        });
        op("tanimoto_loss (contour weighted)", {{{1, 3, 3, 3}, -2, 2}}, [truth](auto& v) {
            LossConfig cfg;
            cfg.contour_weighting = true;
            cfg.class_weights = {1.0, 2.0, 0.5};
            const auto w = contour_weight_map(truth, cfg);
            return tanimoto_loss(ops::softmax_channels(v[0]), truth, cfg, &w);
        });
    }
    if (opts.include_network) record(network_case(opts));
    return report;
}

}  // namespace rescr
