// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance --cli build/tools/rescrnet --config configs/synthetic.cfg [--only 3,4]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "fd_oracle.hpp"
#include "rescr/augment.hpp"
#include "rescr/dataset_io.hpp"
#include "rescr/gradcheck.hpp"
#include "rescr/loss.hpp"
#include "rescr/metrics.hpp"
#include "rescr/network.hpp"
#include "rescr/trainer.hpp"
#include "temp_dir.hpp"

using namespace rescr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Settings {
    std::string cli;
    std::string config;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 3) {
    std::ostringstream os;
    os.precision(digits);
    os << v;
    return os.str();
}

Tensor<double> complement(const Tensor<double>& t) {
    Tensor<double> c(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) c[i] = 1.0 - t[i];
    return c;
}

bool is_onehot(const Tensor<double>& m) {
    const std::size_t K = m.shape().back();
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

long long mirror(long long i, long long n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
}

void zero_matching(ParameterStore<double>& store, const std::string& prefix) {
    for (auto& [name, t] : store)
        if (name.rfind(prefix, 0) == 0) t = Tensor<double>(t.shape());
}

SegDataset load_synthetic(const RunConfig& cfg) {
    return load_dataset(cfg.train_images, cfg.train_masks, cfg.palette, cfg.mask_decode);
}

// 1. Gradients of every operation and of a 1x8x8x1 network against central
// differences, 20 draws each.
Outcome gradients(const Settings&) {
    const auto t0 = Clock::now();
    GradcheckOptions opts;
    opts.trials = 20;
    opts.include_network = false;
    const auto ops = run_gradcheck(opts);

    NetworkConfig cfg;
    cfg.n_conv_blocks = 1;
    cfg.n_lstm_blocks = 1;
    double net_worst = 0;
    std::size_t kinks = ops.kinks();
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        auto net = ResCrNet<double>::build(cfg, rng);
        std::vector<std::string> names;
        std::vector<Tensor<double>> inputs;
        for (const auto& [name, t] : net.parameters()) {
            names.push_back(name);
            inputs.push_back(name.ends_with(".bias") ? fd::random_tensor(t.shape(), rng, -0.2, 0.2) : t);
        }
        inputs.push_back(fd::random_tensor({1, 8, 8, 1}, rng, 0, 1));
        auto build = [&](const std::vector<Var<double>>& v) {
            std::map<std::string, Var<double>> m;
            for (std::size_t i = 0; i < names.size(); ++i) m.emplace(names[i], v[i]);
            Rng dropout(seed * 31);
            return net.forward(ParamVars<double>::wrap(std::move(m)), v.back(), true, dropout);
        };
        net_worst = std::max(net_worst, fd::check_builder(inputs, build, rng, 1e-6, true, &kinks));
    }
    const double secs = seconds_since(t0);
    const double worst = std::max(ops.max_rel_err(), net_worst);
    return {worst < 1e-4 && secs < 120,
            std::to_string(ops.cases.size()) + " ops max rel err " + fmt(ops.max_rel_err()) + ", network " +
                fmt(net_worst) + " over seeds 1-20, " + std::to_string(kinks) + " breakpoint steps skipped, " +
                fmt(secs) + " s"};
}

// 2. Loss identities and the 2x2 enumeration against set arithmetic.
Outcome loss_identities(const Settings&) {
    Rng rng(2);
    Tensor<double> y(Shape{2, 4, 5, 3});
    for (std::size_t p = 0; p < 40; ++p) y[p * 3 + static_cast<std::size_t>(uniform01(rng) * 3)] = 1;
    bool ok = true;
    std::string why;
    auto expect = [&](bool cond, const std::string& what) {
        if (!cond && ok) why = what;
        ok = ok && cond;
    };
    for (double s : {0.0, 1.0}) {
        expect(std::abs(tanimoto(y, y, s) - 1) < 1e-15, "T(y,y) != 1");
        expect(std::abs(tanimoto_with_complement(y, y, s) - 1) < 1e-15, "complement T(y,y) != 1");
        LossConfig lc;
        lc.smooth = s;
        expect(std::abs(tanimoto_loss(constant(y), y, lc).value()[0]) < 1e-15, "loss on perfect prediction != 0");
    }
    for (int trial = 0; trial < 200; ++trial) {
        Tensor<double> yhat(y.shape());
        for (auto& v : yhat.data()) v = std::round(uniform01(rng) * 1024) / 1024;  // dyadic: 1-(1-p) == p
        expect(tanimoto_with_complement(yhat, y, 1.0) == tanimoto_with_complement(complement(yhat), complement(y), 1.0),
               "complement symmetry not exact");
    }
    std::size_t pairs = 0;
    for (unsigned a = 0; a < 16; ++a)
        for (unsigned b = 0; b < 16; ++b) {
            Tensor<double> ph(Shape{2, 2, 1}), pt(Shape{2, 2, 1});
            std::set<unsigned> A, B, both, either;
            for (unsigned p = 0; p < 4; ++p) {
                ph[p] = (a >> p) & 1u;
                pt[p] = (b >> p) & 1u;
                if (ph[p] == 1) A.insert(p);
                if (pt[p] == 1) B.insert(p);
            }
            std::set_intersection(A.begin(), A.end(), B.begin(), B.end(), std::inserter(both, both.end()));
            std::set_union(A.begin(), A.end(), B.begin(), B.end(), std::inserter(either, either.end()));
            if (either.empty()) continue;  // 0/0 without smoothing
            // TP / (TP+FP+FN) is |A n B| / |A u B|
            const double jaccard = double(both.size()) / double(either.size());
            expect(std::abs(tanimoto(ph, pt, 0.0) - jaccard) < 1e-15, "2x2 mask pair disagrees with set arithmetic");
            ++pairs;
        }
    return {ok, ok ? "T, complement T, L and symmetry exact; " + std::to_string(pairs) + " mask pairs match" : why};
}

// 3. F1 from reference precision/recall pairs.
Outcome table_consistency(const Settings&) {
    struct Row {
        const char* name;
        double p, r, f1;
    };
    bool ok = true;
    std::string detail;
    for (const Row& row : {Row{"EM", 0.926, 0.922, 0.924}, Row{"FM", 0.917, 0.914, 0.915}}) {
        const double f1 = f1_score(row.p, row.r);
        const double oracle = 2 * row.p * row.r / (row.p + row.r);
        ok = ok && std::abs(f1 - row.f1) <= 5e-4 && std::abs(f1 - oracle) < 1e-15;
        detail += std::string(detail.empty() ? "" : ", ") + row.name + " F1 " + fmt(f1, 6) + " vs " + fmt(row.f1);
    }
    return {ok, detail};
}

// 4. One n=6, m=1 model over three input sizes.
Outcome shape_invariance(const Settings&) {
    NetworkConfig cfg;
    cfg.n_conv_blocks = 6;
    cfg.n_lstm_blocks = 1;
    Rng rng(4);
    const auto net = ResCrNet<double>::build(cfg, rng);
    const std::size_t count = net.parameter_count();
    bool ok = true;
    double worst_sum = 0;
    for (auto [H, W] : std::vector<std::pair<std::size_t, std::size_t>>{{31, 47}, {64, 80}, {262, 400}}) {
        const auto y = net.infer(fd::random_tensor({1, H, W, 1}, rng, 0, 1));
        ok = ok && y.shape() == Shape{1, H, W, 3} && net.parameter_count() == count;
        for (std::size_t p = 0; p < H * W; ++p) worst_sum = std::max(worst_sum, std::abs(y[3 * p] + y[3 * p + 1] + y[3 * p + 2] - 1));
    }
    std::size_t summed = 0;
    for (const auto& [name, t] : net.parameters()) summed += t.size();
    ok = ok && worst_sum <= 1e-6 && count == summed;
    return {ok, std::to_string(count) + " parameters for 31x47, 64x80, 262x400; max |sum-1| " + fmt(worst_sum)};
}

// 5. Intermediate shapes of the LSTM RES BLOCK for a [4,260,400,3] input.
Outcome lstm_choreography(const Settings&) {
    Rng rng(5);
    ParameterStore<double> store;
    add_lstm_res_block_params(store, "lstm0", rng);
    const auto p = ParamVars<double>::bind(store, nullptr);
    ShapeTrace trace;
    const auto y = lstm_res_block(constant(fd::random_tensor({4, 260, 400, 3}, rng)), p, "lstm0", &trace);
    // expected sequence, in order
    const std::vector<Shape> printed{
        {4, 260, 400, 3, 1}, {4, 260, 400, 3, 2}, {4, 400, 260, 3, 1}, {4, 400, 260, 3, 2}, {4, 260, 400, 3}};
    std::size_t next = 0;
    std::string seen;
    for (const auto& [label, shape] : trace) {
        seen += (seen.empty() ? "" : " -> ") + to_string(shape);
        if (next < printed.size() && shape == printed[next]) ++next;
    }
    const bool ok = next == printed.size() && y.shape() == Shape{4, 260, 400, 3} && trace.back().second == y.shape();
    return {ok, seen};
}

// 6. Zeroed residual paths: every block is the identity.
Outcome residual_identity(const Settings&) {
    bool ok = true;
    double end_to_end = 0;
    for (auto merge : {BranchMerge::concat, BranchMerge::add}) {
        NetworkConfig cfg;
        cfg.n_conv_blocks = 6;
        cfg.n_lstm_blocks = 1;
        cfg.branch_merge = merge;
        Rng rng(6);
        auto net = ResCrNet<double>::build(cfg, rng);
        // nonzero stem and head so the blocks see informative inputs
        for (auto& [name, t] : net.parameters())
            if (name.ends_with(".bias")) t = fd::random_tensor(t.shape(), rng, -0.2, 0.2);
        zero_matching(net.parameters(), "conv");
        zero_matching(net.parameters(), "lstm");
        const auto x = fd::random_tensor({2, 20, 24, 1}, rng, 0, 1);
        const auto p = ParamVars<double>::bind(net.parameters(), nullptr);
        Rng unused(0);
        auto h = stem_block(constant(x), cfg, p);
        for (std::size_t j = 0; j < cfg.n_conv_blocks; ++j) {
            auto next = conv_res_block(h, cfg, p, "conv" + std::to_string(j), false, unused);
            ok = ok && next.value() == h.value();
            h = next;
        }
        h = ops::leaky_relu(ops::pointwise_conv(h, p["head.weight"], p["head.bias"]), cfg.leaky_alpha);
        const auto after_lstm = lstm_res_block(h, p, "lstm0");
        ok = ok && after_lstm.value() == h.value();
        end_to_end = std::max(end_to_end, max_abs_diff(net.infer(x), ops::softmax_channels(h).value()));
    }
    ok = ok && end_to_end == 0;
    return {ok, "6 CONV RES + 1 LSTM RES blocks exact identities (concat and add), end-to-end difference " +
                    fmt(end_to_end)};
}

// 7. Overfit run on the bundled synthetic set.
Outcome overfit(const Settings& s) {
    const RunConfig cfg = RunConfig::load(s.config);
    const auto data = load_synthetic(cfg);
    TempDir out;
    const auto t0 = Clock::now();
    Rng init(derive_seed(cfg.seed, kInitStream));
    auto model = ResCrNet<double>::build(cfg.network, init);
    const auto run = train(model, data, nullptr, cfg, TrainOutputs{out.path(), nullptr});
    const double secs = seconds_since(t0);

    double best = 0;
    std::size_t first = 0;
    for (const auto& r : run.records) {
        best = std::max(best, r.train_tanimoto);
        if (!first && r.train_tanimoto >= 0.95) first = r.epoch;
    }
    // largest rise of a later epoch over an earlier one inside any 50-epoch window
    auto worst_rise = [&](auto get) {
        double worst = 0;
        for (std::size_t j = 0; j < run.records.size(); ++j)
            for (std::size_t i = j >= 49 ? j - 49 : 0; i < j; ++i)
                worst = std::max(worst, get(run.records[j]) - get(run.records[i]));
        return worst;
    };
    const double train_rise = worst_rise([](const EpochRecord& r) { return r.train_loss; });
    const double eval_rise = worst_rise([](const EpochRecord& r) { return r.val_loss; });
    const bool ok = first != 0 && run.records.size() <= 300 && secs < 600 && train_rise <= 0.02 && eval_rise <= 0.02;
    return {ok, "training T~ max " + fmt(best, 4) + (first ? " (>= 0.95 from epoch " + std::to_string(first) + ")" : "") +
                    ", " + fmt(secs) + " s, worst rise in a 50-epoch window: training loss " + fmt(train_rise) +
                    ", un-augmented loss " + fmt(eval_rise) + " (band 0.02)"};
}

// 8. Augmentation: one-hot masks, identity round trips, geometric agreement.
Outcome augmentation(const Settings& s) {
    const auto data = load_synthetic(RunConfig::load(s.config));
    const AugmentRanges ranges;
    Rng rng(8);
    bool ok = true;
    for (int i = 0; i < 1000; ++i) {
        const auto& item = data.items[std::size_t(i) % data.size()];
        const auto [img, mask] = apply_affine(item.image, item.mask, sample_params(ranges, rng));
        ok = ok && img.shape() == item.image.shape() && mask.shape() == item.mask.shape() && is_onehot(mask);
    }
    for (const auto& item : data.items) {
        const auto [img, mask] = apply_affine(item.image, item.mask, AugmentParams{});
        ok = ok && img == item.image && mask == item.mask;
    }

    // Coordinate grid: channels hold the source row and column; the mask has
    // one class per source pixel. The oracle inverts S R Sh with Cramer's rule.
    const std::size_t H = 13, W = 17;
    Tensor<double> coords(Shape{H, W, 2}), ids(Shape{H, W, H * W});
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
            coords.at({r, c, 0}) = double(r);
            coords.at({r, c, 1}) = double(c);
            ids.at({r, c, r * W + c}) = 1;
        }
    const double deg = std::numbers::pi / 180;
    std::size_t checked = 0, wrong = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = sample_params(ranges, rng);
        const double cs = std::cos(p.rotation_deg * deg), sn = std::sin(p.rotation_deg * deg);
        const double k = std::tan(p.shear_deg * deg);
        const double m[2][2] = {{p.scale * cs, p.scale * (cs * k - sn)}, {p.scale * sn, p.scale * (sn * k + cs)}};
        const double det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
        const auto [img, mask] = apply_affine(coords, ids, p, Interp::nearest);
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t col = 0; col < W; ++col) {
                const double bx = double(col) - cx - p.shift_x * W, by = double(r) - cy - p.shift_y * H;
                double x = (m[1][1] * bx - m[0][1] * by) / det + cx;
                double y = (-m[1][0] * bx + m[0][0] * by) / det + cy;
                if (p.flip_h) x = (W - 1) - x;
                if (p.flip_v) y = (H - 1) - y;
                if (std::abs(x - std::floor(x) - 0.5) < 1e-9 || std::abs(y - std::floor(y) - 0.5) < 1e-9) continue;
                const auto sy = std::size_t(mirror((long long)std::floor(y + 0.5), H));
                const auto sx = std::size_t(mirror((long long)std::floor(x + 0.5), W));
                ++checked;
                if (img.at({r, col, 0}) != double(sy) || img.at({r, col, 1}) != double(sx) ||
                    mask.at({r, col, sy * W + sx}) != 1.0)
                    ++wrong;
            }
    }
    ok = ok && wrong == 0 && checked > 100 * H * W * 9 / 10;
    return {ok, "1000 transforms one-hot, identity bit-exact, " + std::to_string(checked) + " grid samples, " +
                    std::to_string(wrong) + " disagreements"};
}

std::string read_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot read '" + p.string() + "'");
    return {std::istreambuf_iterator<char>(is), {}};
}

std::string without_line(const std::string& text, const std::string& prefix) {
    std::istringstream is(text);
    std::string out, line;
    while (std::getline(is, line))
        if (line.rfind(prefix, 0) != 0) out += line + "\n";
    return out;
}

// 9. Two CLI train invocations with one seed give identical bytes.
Outcome determinism(const Settings& s) {
    if (s.cli.empty()) return {false, "no --cli executable given"};
    TempDir dir;
    for (const char* run : {"a", "b"}) {
        const std::string cmd = "\"" + s.cli + "\" train --config \"" + s.config + "\" --epochs 3 --seed 7 --output_dir \"" +
                                (dir / run).string() + "\" 2> \"" + (dir / (std::string(run) + ".err")).string() + "\"";
        if (std::system(cmd.c_str()) != 0) return {false, "train exited nonzero: " + read_bytes(dir / (std::string(run) + ".err"))};
    }
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), dir / "a");
        auto a = read_bytes(e.path()), b = read_bytes(dir / "b" / rel);
        if (rel == "run.cfg") {
            // the saved config names its own output directory
            a = without_line(a, "output_dir ="), b = without_line(b, "output_dir =");
        }
        if (a != b) return {false, rel.string() + " differs"};
        ++files;
    }
    const bool ok = fs::exists(dir / "a" / "log.csv") && fs::exists(dir / "a" / "best.ckpt") &&
                    fs::exists(dir / "a" / "last.ckpt");
    return {ok, std::to_string(files) + " output files byte-identical (log.csv, checkpoints, metrics, predictions)"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    Settings settings;
    std::vector<int> only;
    app.add_option("--cli", settings.cli, "rescrnet executable");
    app.add_option("--config", settings.config, "synthetic run config")->required();
    app.add_option("--only", only, "criteria to run")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<const char*, std::function<Outcome(const Settings&)>>> criteria{
        {"gradient suite", gradients},        {"loss identities", loss_identities},
        {"table consistency", table_consistency}, {"shape invariance", shape_invariance},
        {"lstm choreography", lstm_choreography}, {"residual identity", residual_identity},
        {"overfit", overfit},                  {"augmentation validity", augmentation},
        {"determinism", determinism}};

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = int(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[i].second(settings);
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << ": " << criteria[i].first << " ("
                  << o.detail << ")" << std::endl;
    }
    return failures ? 1 : 0;
}
