#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "rescr/checkpoint.hpp"
#include "rescr/trainer.hpp"
#include "temp_dir.hpp"

using namespace rescr;

namespace {

ParameterStore<double> store(std::vector<double> a, std::vector<double> b) {
    ParameterStore<double> s;
    const std::size_t na = a.size(), nb = b.size();
    s.add("a", Tensor<double>(Shape{na}, std::move(a)));
    s.add("b", Tensor<double>(Shape{nb}, std::move(b)));
    return s;
}

std::map<std::string, Tensor<double>> grads(std::vector<double> a, std::vector<double> b) {
    std::map<std::string, Tensor<double>> g;
    const std::size_t na = a.size(), nb = b.size();
    g.emplace("a", Tensor<double>(Shape{na}, std::move(a)));
    g.emplace("b", Tensor<double>(Shape{nb}, std::move(b)));
    return g;
}

RunConfig small_run() {
    RunConfig c;
    c.network.n_conv_blocks = 2;
    c.network.filters_per_branch = 3;
    c.palette = synthetic_palette();
    c.epochs = 3;
    c.steps_per_epoch = 2;
    c.seed = 5;
    return c;
}

template <typename T>
ResCrNet<T> model_for(const RunConfig& c, std::uint64_t seed = 1) {
    Rng rng(seed);
    return ResCrNet<T>::build(c.network, rng);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("Adam first step moves each weight by about the learning rate") {
    Optimizer<double> opt(OptimizerConfig{});
    auto p = store({0, 1, -2}, {5});
    opt.step(p, grads({0.3, -7, 1e-3}, {0}));
    CHECK(opt.steps() == 1);
    // m_hat = g, v_hat = g^2: the step is lr * g / (|g| + eps)
    CHECK(p.get("a")[0] == doctest::Approx(-0.001).epsilon(1e-6));
    CHECK(p.get("a")[1] == doctest::Approx(1.001).epsilon(1e-9));
    CHECK(p.get("a")[2] == doctest::Approx(-2.001).epsilon(1e-6));
    CHECK(p.get("b")[0] == 5);
}

TEST_CASE("Adam matches a scalar recurrence over several steps") {
    OptimizerConfig cfg;
    cfg.learning_rate = 0.01;
    Optimizer<double> opt(cfg);
    auto p = store({0.5}, {0});
    double theta = 0.5, m = 0, v = 0;
    const double gs[] = {0.2, -0.1, 0.4, 0.0, -0.3};
    for (int t = 1; t <= 5; ++t) {
        const double g = gs[t - 1];
        opt.step(p, grads({g}, {0}));
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        theta -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
        CHECK(p.get("a")[0] == doctest::Approx(theta).epsilon(1e-13));
    }
}

TEST_CASE("SGD with momentum") {
    OptimizerConfig cfg;
    cfg.kind = "sgd";
    cfg.learning_rate = 0.1;
    cfg.momentum = 0.5;
    Optimizer<double> opt(cfg);
    auto p = store({1}, {0});
    opt.step(p, grads({2}, {0}));  // v = 2, theta = 1 - 0.2
    CHECK(p.get("a")[0] == doctest::Approx(0.8));
    opt.step(p, grads({2}, {0}));  // v = 3, theta = 0.8 - 0.3
    CHECK(p.get("a")[0] == doctest::Approx(0.5));
}

TEST_CASE("zero or missing gradients leave parameters unchanged") {
    for (const char* kind : {"adam", "sgd"}) {
        OptimizerConfig cfg;
        cfg.kind = kind;
        Optimizer<double> opt(cfg);
        auto p = store({0.25, -3}, {7});
        const auto before = p;
        opt.step(p, grads({0, 0}, {0}));
        opt.step(p, {});
        CHECK(p == before);
    }
}

TEST_CASE("optimizer input validation") {
    Optimizer<double> opt(OptimizerConfig{});
    auto p = store({1, 2}, {3});
    const auto before = p;
    auto g = grads({0.1, NAN}, {0});
    CHECK_THROWS_WITH_AS(opt.step(p, g), doctest::Contains("'a'"), NumericError);
    CHECK(p == before);
    CHECK(opt.steps() == 0);
    CHECK_THROWS_AS(opt.step(p, grads({0.1}, {0})), ShapeError);
    std::map<std::string, Tensor<double>> stray;
    stray.emplace("zzz", Tensor<double>(Shape{1}));
    CHECK_THROWS_AS(opt.step(p, stray), ValueError);
    OptimizerConfig bad;
    bad.kind = "lion";
    CHECK_THROWS_AS(Optimizer<double>{bad}, ConfigError);
}

TEST_CASE("synthetic dataset") {
    const auto a = make_synthetic_dataset(2, 32, 48, 0);
    const auto b = make_synthetic_dataset(2, 32, 48, 0);
    REQUIRE(a.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(a.items[i].image.shape() == Shape{32, 48, 1});
        CHECK(a.items[i].mask.shape() == Shape{32, 48, 3});
        CHECK(std::equal(a.items[i].image.data().begin(), a.items[i].image.data().end(),
                         b.items[i].image.data().begin()));
        // every class is present
        const auto labels = argmax_labels(a.items[i].mask);
        for (std::size_t k = 0; k < 3; ++k) CHECK(std::count(labels.begin(), labels.end(), k) > 20);
    }
    SUBCASE("PNG round trip is exact") {
        TempDir dir;
        write_dataset(a, dir / "img", dir / "mask");
        const auto back = load_dataset(dir / "img", dir / "mask", a.palette, MaskDecodeOptions{true, 30, 0.01});
        REQUIRE(back.size() == 2);
        for (std::size_t i = 0; i < 2; ++i) {
            CHECK(back.items[i].id == a.items[i].id);
            CHECK(std::equal(a.items[i].image.data().begin(), a.items[i].image.data().end(),
                             back.items[i].image.data().begin()));
            CHECK(std::equal(a.items[i].mask.data().begin(), a.items[i].mask.data().end(),
                             back.items[i].mask.data().begin()));
        }
    }
}

TEST_CASE("uniform predictions against a scalar oracle") {
    // Zero weights make the network output 1/K everywhere. With three equally
    // frequent classes over N pixels and smoothing s:
    //   T = (N/9 + s) / (N/3 + s), complement T = (4N/9 + s) / (2N/3 + s).
    const std::size_t H = 6, W = 9, N = H * W;
    Tensor<double> mask(Shape{H, W, 3});
    for (std::size_t p = 0; p < N; ++p) mask[p * 3 + p % 3] = 1;
    std::vector<Sample> data{{Tensor<double>(Shape{H, W, 1}), mask, "u"}};
    RunConfig c = small_run();
    auto m = model_for<double>(c);
    for (auto& [name, t] : m.parameters())
        for (auto& v : t.data()) v = 0;
    for (double s : {1.0, 0.0, 5.0}) {
        LossConfig loss;
        loss.smooth = s;
        const double n = double(N);
        const double t = (n / 9 + s) / (n / 3 + s), tc = (4 * n / 9 + s) / (2 * n / 3 + s);
        const auto ev = evaluate(m, data, loss);
        CHECK(ev.report.soft_tanimoto == doctest::Approx((t + tc) / 2).epsilon(1e-12));
        CHECK(ev.mean_loss == doctest::Approx(1 - (t + tc) / 2).epsilon(1e-12));
        // argmax of a uniform prediction is class 0 everywhere
        CHECK(ev.report.counts.tp[0] == N / 3);
        CHECK(ev.report.counts.fp[0] == 2 * N / 3);
        CHECK(ev.report.counts.tp[1] == 0);
    }
}

TEST_CASE("evaluation sums counts over items") {
    const auto ds = make_synthetic_dataset(3, 16, 20, 4);
    const auto c = small_run();
    const auto m = model_for<double>(c);
    const auto ev = evaluate(m, ds.items, c.loss);
    ConfusionCounts total;
    double soft = 0;
    for (const auto& s : ds.items) {
        const auto one = evaluate(m, {s}, c.loss);
        accumulate(total, one.report.counts);
        soft += one.report.soft_tanimoto / 3;
    }
    CHECK(ev.report.counts.tp == total.tp);
    CHECK(ev.report.counts.fn == total.fn);
    CHECK(ev.report.counts.pixels == 3 * 16 * 20);
    CHECK(ev.report.soft_tanimoto == doctest::Approx(soft).epsilon(1e-14));
}

TEST_CASE("frozen batch: loss never increases over 50 small steps") {
    auto c = small_run();
    c.augment_enabled = false;
    c.network.dropout_rate = 0;
    c.optimizer.learning_rate = 1e-4;
    c.epochs = 50;
    c.steps_per_epoch = 1;
    const auto ds = make_synthetic_dataset(2, 32, 48, 0);
    auto m = model_for<double>(c, 3);
    const auto run = train(m, ds, nullptr, c);
    REQUIRE(run.records.size() == 50);
    CHECK(run.optimizer_steps == 50);
    CHECK(run.validated_on_train);
    int increases = 0;
    for (std::size_t i = 1; i < 50; ++i)
        if (run.records[i].train_loss > run.records[i - 1].train_loss) ++increases;
    CHECK(increases == 0);
    CHECK(run.records.back().train_loss < run.records.front().train_loss);
}

TEST_CASE("training is deterministic in the seed") {
    auto c = small_run();
    const auto ds = make_synthetic_dataset(2, 16, 24, 0);
    auto m1 = model_for<double>(c), m2 = model_for<double>(c), m3 = model_for<double>(c);
    const auto r1 = train(m1, ds, nullptr, c);
    const auto r2 = train(m2, ds, nullptr, c);
    CHECK(m1.parameters() == m2.parameters());
    for (std::size_t e = 0; e < r1.records.size(); ++e) {
        CHECK(r1.records[e].train_loss == r2.records[e].train_loss);
        CHECK(r1.records[e].val_tanimoto == r2.records[e].val_tanimoto);
    }
    c.seed = 6;
    train(m3, ds, nullptr, c);
    CHECK_FALSE(m1.parameters() == m3.parameters());
}

TEST_CASE("validation does not touch the training trajectory") {
    auto c = small_run();
    const auto ds = make_synthetic_dataset(2, 16, 24, 0);
    const auto other = make_synthetic_dataset(3, 20, 20, 9);
    auto m1 = model_for<double>(c), m2 = model_for<double>(c);
    const auto r1 = train(m1, ds, nullptr, c);
    const auto r2 = train(m2, ds, &other, c);
    CHECK_FALSE(r2.validated_on_train);
    CHECK(m1.parameters() == m2.parameters());
    for (std::size_t e = 0; e < r1.records.size(); ++e) CHECK(r1.records[e].train_loss == r2.records[e].train_loss);

    const auto before = m1.parameters();
    evaluate(m1, other.items, c.loss);
    CHECK(m1.parameters() == before);
}

TEST_CASE("run outputs") {
    TempDir dir;
    auto c = small_run();
    const auto ds = make_synthetic_dataset(2, 16, 24, 0);

    SUBCASE("log and checkpoints") {
        auto m = model_for<double>(c);
        std::ostringstream progress;
        const auto run = train(m, ds, nullptr, c, TrainOutputs{dir.path(), &progress});
        std::istringstream log(slurp(dir / "log.csv"));
        std::string line;
        std::getline(log, line);
        CHECK(line == log_header(c.palette.names()));
        CHECK(line.find("disk_dice,disk_jaccard,disk_precision,disk_recall,disk_f1") != std::string::npos);
        int rows = 0;
        while (std::getline(log, line)) {
            ++rows;
            CHECK(std::count(line.begin(), line.end(), ',') == 4 + 5 * 3);
            CHECK(line.starts_with(std::to_string(rows) + ","));
        }
        CHECK(rows == 3);
        const auto text = progress.str();
        CHECK(std::count(text.begin(), text.end(), '\n') == 3);

        const auto last = load_checkpoint<double>(dir / "last.ckpt");
        CHECK(last.parameters() == m.parameters());
        const auto best = load_checkpoint<double>(dir / "best.ckpt");
        CHECK(evaluate(best, ds.items, c.loss).report.soft_tanimoto ==
              doctest::Approx(run.best_tanimoto).epsilon(1e-14));
        for (const auto& r : run.records) CHECK(r.val_tanimoto <= run.best_tanimoto);
    }
    SUBCASE("zero epochs saves the initial weights") {
        c.epochs = 0;
        auto m = model_for<double>(c);
        const auto initial = m.parameters();
        const auto run = train(m, ds, nullptr, c, TrainOutputs{dir.path(), nullptr});
        CHECK(run.records.empty());
        CHECK(run.optimizer_steps == 0);
        CHECK(load_checkpoint<double>(dir / "best.ckpt").parameters() == initial);
        CHECK(load_checkpoint<double>(dir / "last.ckpt").parameters() == initial);
        CHECK(slurp(dir / "log.csv") == log_header(c.palette.names()) + "\n");
    }
    SUBCASE("checkpoint reload reproduces evaluation exactly") {
        auto m = model_for<double>(c);
        train(m, ds, nullptr, c, TrainOutputs{dir.path(), nullptr});
        const auto a = evaluate(m, ds.items, c.loss);
        const auto b = evaluate(load_checkpoint<double>(dir / "last.ckpt"), ds.items, c.loss);
        CHECK(a.mean_loss == b.mean_loss);
        CHECK(a.report.soft_tanimoto == b.report.soft_tanimoto);
        CHECK(a.report.counts.tp == b.report.counts.tp);
    }
}

TEST_CASE("single precision and contour weighting train") {
    auto c = small_run();
    c.loss.contour_weighting = true;
    c.epochs = 2;
    const auto ds = make_synthetic_dataset(2, 16, 24, 0);
    auto m = model_for<float>(c);
    const auto run = train(m, ds, nullptr, c);
    REQUIRE(run.records.size() == 2);
    for (const auto& r : run.records) {
        CHECK(std::isfinite(r.train_loss));
        CHECK(r.val_tanimoto > 0);
        CHECK(r.val_tanimoto <= 1);
    }
}

TEST_CASE("training errors") {
    auto c = small_run();
    auto ds = make_synthetic_dataset(2, 16, 24, 0);
    SUBCASE("non-finite input names the batch") {
        ds.items[1].image[5] = NAN;
        auto m = model_for<double>(c);
        c.augment_enabled = false;
        CHECK_THROWS_WITH_AS(train(m, ds, nullptr, c), doctest::Contains("synthetic_1"), NumericError);
    }
    SUBCASE("channel and class mismatches") {
        auto m = model_for<double>(c);
        auto wide = ds;
        wide.items[0].image = Tensor<double>(Shape{16, 24, 3});
        CHECK_THROWS_AS(train(m, wide, nullptr, c), ShapeError);
        auto four = ds;
        four.items[0].mask = Tensor<double>(Shape{16, 24, 4});
        CHECK_THROWS_AS(evaluate(m, four.items, c.loss), ShapeError);
    }
    SUBCASE("model built for another config") {
        auto other = c;
        other.network.n_conv_blocks = 1;
        auto m = model_for<double>(other);
        CHECK_THROWS_AS(train(m, ds, nullptr, c), ConfigError);
    }
}

TEST_CASE("prediction") {
    const auto c = small_run();
    const auto m = model_for<double>(c);
    const auto ds = make_synthetic_dataset(1, 16, 24, 0);
    const auto pred = predict(m, ds.items[0].image, c.palette);
    CHECK(pred.probs.shape() == Shape{16, 24, 3});
    for (std::size_t p = 0; p < 16 * 24; ++p)
        CHECK(pred.probs[3 * p] + pred.probs[3 * p + 1] + pred.probs[3 * p + 2] == doctest::Approx(1));
    CHECK(pred.color.channels == 3);
    CHECK(pred.color.samples.size() == 16 * 24 * 3);
    const auto decoded = decode_mask(pred.color, c.palette);
    CHECK(argmax_labels(decoded.onehot) == argmax_labels(pred.probs));
    CHECK_THROWS_AS(predict(m, Tensor<double>(Shape{4, 4, 2}), c.palette), ShapeError);
}
