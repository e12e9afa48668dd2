#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <sstream>

#include "rescr/augment.hpp"
#include "rescr/checkpoint.hpp"
#include "rescr/config.hpp"
#include "rescr/dataset_io.hpp"
#include "rescr/gradcheck.hpp"
#include "rescr/loss.hpp"
#include "rescr/metrics.hpp"
#include "rescr/network.hpp"
#include "rescr/trainer.hpp"

namespace py = pybind11;
using namespace rescr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor<double>(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor<double>& t) {
    Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), a.mutable_data());
    return a;
}

py::dict metrics_dict(const ClassMetrics& m) {
    py::dict d;
    d["dice"] = m.dice;
    d["jaccard"] = m.jaccard;
    d["precision"] = m.precision;
    d["recall"] = m.recall;
    d["f1"] = m.f1;
    return d;
}

py::dict report_dict(const MetricReport& r) {
    py::dict d;
    py::list per_class;
    for (const auto& m : r.per_class) per_class.append(metrics_dict(m));
    d["per_class"] = per_class;
    d["macro"] = metrics_dict(r.macro);
    d["soft_dice"] = r.soft_dice;
    d["soft_tanimoto"] = r.soft_tanimoto;
    d["tp"] = r.counts.tp;
    d["fp"] = r.counts.fp;
    d["fn"] = r.counts.fn;
    return d;
}

ClassPalette palette_from(const std::optional<std::vector<std::pair<std::string, Rgb>>>& entries) {
    if (!entries) return ClassPalette::rgb3();
    ClassPalette p;
    for (const auto& [name, color] : *entries) p.entries.push_back({name, color});
    p.validate();
    return p;
}

std::vector<py::tuple> samples_list(const std::vector<Sample>& items) {
    std::vector<py::tuple> out;
    for (const auto& s : items)
        out.push_back(py::make_tuple(s.id, to_array(s.image), s.mask.empty() ? py::object(py::none())
                                                                               : py::object(to_array(s.mask))));
    return out;
}

class Model {
public:
    explicit Model(ResCrNet<double> net) : net_(std::move(net)) {}
    Model(const NetworkConfig& cfg, std::uint64_t seed) : net_(build(cfg, seed)) {}

    static ResCrNet<double> build(const NetworkConfig& cfg, std::uint64_t seed) {
        Rng rng(derive_seed(seed, kInitStream));
        return ResCrNet<double>::build(cfg, rng);
    }

    const NetworkConfig& config() const { return net_.config(); }
    std::size_t parameter_count() const { return net_.parameter_count(); }

    Array infer(const Array& x) const {
        const auto t = to_tensor(x);
        Tensor<double> y;
        {
            py::gil_scoped_release release;
            y = net_.infer(t);
        }
        return to_array(y);
    }

    py::tuple predict(const Array& image, const std::optional<std::vector<std::pair<std::string, Rgb>>>& palette) {
        const auto p = rescr::predict(net_, to_tensor(image), palette_from(palette));
        Array color(std::vector<py::ssize_t>{py::ssize_t(p.color.height), py::ssize_t(p.color.width), 3});
        std::transform(p.color.samples.begin(), p.color.samples.end(), color.mutable_data(),
                       [](std::uint16_t v) { return double(v); });
        return py::make_tuple(to_array(p.probs), color);
    }

    std::map<std::string, Array> parameters() const {
        std::map<std::string, Array> out;
        for (const auto& [name, t] : net_.parameters()) out.emplace(name, to_array(t));
        return out;
    }

    void set_parameter(const std::string& name, const Array& value) {
        if (!net_.parameters().contains(name)) throw ValueError("no parameter named '" + name + "'");
        auto& dst = net_.parameters().get(name);
        auto src = to_tensor(value);
        if (src.shape() != dst.shape())
            throw ShapeError(name + " has shape " + to_string(dst.shape()) + ", got " + to_string(src.shape()));
        if (!src.all_finite()) throw NumericError(name + " contains non-finite values");
        dst = std::move(src);
    }

    py::dict evaluate(const Array& images, const Array& masks, const LossConfig& loss) const {
        auto x = to_tensor(images), y = to_tensor(masks);
        if (x.rank() != 4 || y.rank() != 4 || x.dim(0) != y.dim(0))
            throw ShapeError("evaluate expects [B,H,W,C] images and [B,H,W,K] masks");
        std::vector<Sample> items;
        const std::size_t xs = x.size() / x.dim(0), ys = y.size() / y.dim(0);
        for (std::size_t b = 0; b < x.dim(0); ++b) {
            Sample s;
            s.image = Tensor<double>(Shape{x.dim(1), x.dim(2), x.dim(3)},
                                     std::vector<double>(x.data().begin() + b * xs, x.data().begin() + (b + 1) * xs));
            s.mask = Tensor<double>(Shape{y.dim(1), y.dim(2), y.dim(3)},
                                    std::vector<double>(y.data().begin() + b * ys, y.data().begin() + (b + 1) * ys));
            items.push_back(std::move(s));
        }
        const auto r = rescr::evaluate(net_, items, loss);
        auto d = report_dict(r.report);
        d["mean_loss"] = r.mean_loss;
        return d;
    }

    void save(const std::filesystem::path& path) const { save_checkpoint(path, net_); }
    static Model load(const std::filesystem::path& path) { return Model(load_checkpoint<double>(path)); }

private:
    ResCrNet<double> net_;
};

py::tuple loss_and_grad(const Array& yhat, const Array& y, const LossConfig& cfg, const std::optional<Array>& weights) {
    Tape<double> tape;
    const auto leaf = tape.leaf(to_tensor(yhat));
    std::optional<Tensor<double>> w;
    if (weights) w = to_tensor(*weights);
    const auto loss = tanimoto_loss(leaf, to_tensor(y), cfg, w ? &*w : nullptr);
    tape.backward(loss);
    const auto* g = leaf.grad();
    return py::make_tuple(loss.value()[0], g ? to_array(*g) : to_array(Tensor<double>(leaf.shape())));
}

std::vector<py::dict> train_from_config(const std::filesystem::path& config_path,
                                        const std::optional<std::filesystem::path>& output_dir,
                                        std::optional<std::size_t> epochs, std::optional<std::uint64_t> seed,
                                        bool augment) {
    RunConfig cfg = RunConfig::load(config_path);
    if (output_dir) cfg.output_dir = *output_dir;
    if (epochs) cfg.epochs = *epochs;
    if (seed) cfg.seed = *seed;
    if (!augment) cfg.augment_enabled = false;
    cfg.validate();
    if (cfg.train_images.empty()) throw ConfigError("[data] train_images and train_masks are required");
    const auto train_set = load_dataset(cfg.train_images, cfg.train_masks, cfg.palette, cfg.mask_decode);
    std::optional<SegDataset> val_set;
    if (cfg.has_validation()) val_set = load_dataset(cfg.val_images, cfg.val_masks, cfg.palette, cfg.mask_decode);

    auto model = Model::build(cfg.network, cfg.seed);
    TrainRun run;
    {
        py::gil_scoped_release release;
        run = train(model, train_set, val_set ? &*val_set : nullptr, cfg, TrainOutputs{cfg.output_dir, nullptr});
    }
    std::vector<py::dict> out;
    for (const auto& r : run.records) {
        py::dict d;
        d["epoch"] = r.epoch;
        d["train_loss"] = r.train_loss;
        d["train_tanimoto"] = r.train_tanimoto;
        d["val_loss"] = r.val_loss;
        d["val_tanimoto"] = r.val_tanimoto;
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Res-CR-Net segmentation engine";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<ValueError>(m, "InvalidValueError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

    py::class_<NetworkConfig>(m, "NetworkConfig")
        .def(py::init<>())
        .def_readwrite("n_conv_blocks", &NetworkConfig::n_conv_blocks)
        .def_readwrite("n_lstm_blocks", &NetworkConfig::n_lstm_blocks)
        .def_readwrite("filters_per_branch", &NetworkConfig::filters_per_branch)
        .def_readwrite("kernel_sizes", &NetworkConfig::kernel_sizes)
        .def_readwrite("dilation_rates", &NetworkConfig::dilation_rates)
        .def_property(
            "branch_merge", [](const NetworkConfig& c) { return to_string(c.branch_merge); },
            [](NetworkConfig& c, const std::string& s) { c.branch_merge = parse_branch_merge(s); })
        .def_readwrite("dropout_rate", &NetworkConfig::dropout_rate)
        .def_readwrite("num_classes", &NetworkConfig::num_classes)
        .def_readwrite("leaky_alpha", &NetworkConfig::leaky_alpha)
        .def_readwrite("input_channels", &NetworkConfig::input_channels)
        .def("validate", &NetworkConfig::validate)
        .def("__eq__", [](const NetworkConfig& a, const NetworkConfig& b) { return a == b; });

    py::class_<LossConfig>(m, "LossConfig")
        .def(py::init<>())
        .def_readwrite("smooth", &LossConfig::smooth)
        .def_readwrite("class_weights", &LossConfig::class_weights)
        .def_readwrite("contour_weighting", &LossConfig::contour_weighting)
        .def_readwrite("contour_sigma", &LossConfig::contour_sigma)
        .def_readwrite("contour_w0", &LossConfig::contour_w0);

    py::class_<AugmentParams>(m, "AugmentParams")
        .def(py::init<>())
        .def_readwrite("rotation_deg", &AugmentParams::rotation_deg)
        .def_readwrite("shear_deg", &AugmentParams::shear_deg)
        .def_readwrite("shift_x", &AugmentParams::shift_x)
        .def_readwrite("shift_y", &AugmentParams::shift_y)
        .def_readwrite("scale", &AugmentParams::scale)
        .def_readwrite("flip_h", &AugmentParams::flip_h)
        .def_readwrite("flip_v", &AugmentParams::flip_v)
        .def_readwrite("seed", &AugmentParams::seed)
        .def("is_identity", &AugmentParams::is_identity);

    py::class_<Model>(m, "Model")
        .def(py::init<const NetworkConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
        .def_static("load", &Model::load, py::arg("path"))
        .def("save", &Model::save, py::arg("path"))
        .def_property_readonly("config", &Model::config)
        .def_property_readonly("parameter_count", &Model::parameter_count)
        .def("infer", &Model::infer, py::arg("images"), "Softmax probabilities [B,H,W,K] for images [B,H,W,C].")
        .def("predict", &Model::predict, py::arg("image"), py::arg("palette") = py::none(),
             "(probs [H,W,K], rgb [H,W,3]) for one image [H,W,C].")
        .def("parameters", &Model::parameters)
        .def("set_parameter", &Model::set_parameter, py::arg("name"), py::arg("value"))
        .def("evaluate", &Model::evaluate, py::arg("images"), py::arg("masks"), py::arg("loss") = LossConfig{});

    m.def(
        "tanimoto", [](const Array& a, const Array& b, double s) { return tanimoto(to_tensor(a), to_tensor(b), s); },
        py::arg("yhat"), py::arg("y"), py::arg("smooth") = 1.0);
    m.def(
        "tanimoto_with_complement",
        [](const Array& a, const Array& b, double s) { return tanimoto_with_complement(to_tensor(a), to_tensor(b), s); },
        py::arg("yhat"), py::arg("y"), py::arg("smooth") = 1.0);
    m.def(
        "dice_coefficient",
        [](const Array& a, const Array& b, double s) { return dice_coefficient(to_tensor(a), to_tensor(b), s); },
        py::arg("yhat"), py::arg("y"), py::arg("smooth") = 1.0);
    m.def("loss_and_grad", &loss_and_grad, py::arg("yhat"), py::arg("y"), py::arg("config") = LossConfig{},
          py::arg("weights") = py::none(), "Complement Tanimoto loss and its gradient with respect to yhat.");
    m.def(
        "contour_weight_map",
        [](const Array& onehot, const LossConfig& cfg) { return to_array(contour_weight_map(to_tensor(onehot), cfg)); },
        py::arg("onehot"), py::arg("config") = LossConfig{});
    m.def(
        "metrics",
        [](const Array& yhat, const Array& y, double s) {
            return report_dict(confusion_and_metrics(to_tensor(yhat), to_tensor(y), s));
        },
        py::arg("yhat"), py::arg("y"), py::arg("smooth") = 1.0);
    m.def("f1_score", &f1_score, py::arg("precision"), py::arg("recall"));

    m.def(
        "sample_params",
        [](std::uint64_t seed) {
            Rng rng(seed);
            return sample_params(AugmentRanges{}, rng);
        },
        py::arg("seed"), "Draws transform parameters from the default ranges.");
    m.def(
        "apply_affine",
        [](const Array& image, const Array& mask, const AugmentParams& p) {
            const auto [x, y] = apply_affine(to_tensor(image), to_tensor(mask), p);
            return py::make_tuple(to_array(x), to_array(y));
        },
        py::arg("image"), py::arg("mask"), py::arg("params"));

    m.def(
        "read_image", [](const std::filesystem::path& p) { return to_array(image_to_tensor(read_png(p))); },
        py::arg("path"), "PNG samples scaled to [0,1], shape [H,W,C].");
    m.def(
        "load_dataset",
        [](const std::filesystem::path& images, const std::filesystem::path& masks,
           const std::optional<std::vector<std::pair<std::string, Rgb>>>& palette) {
            return samples_list(load_dataset(images, masks, palette_from(palette)).items);
        },
        py::arg("images_dir"), py::arg("masks_dir"), py::arg("palette") = py::none(),
        "List of (id, image [H,W,C], one-hot mask [H,W,K]).");
    m.def(
        "synthetic_dataset",
        [](std::size_t count, std::size_t h, std::size_t w, std::uint64_t seed) {
            return samples_list(make_synthetic_dataset(count, h, w, seed).items);
        },
        py::arg("count") = 2, py::arg("height") = 32, py::arg("width") = 48, py::arg("seed") = 0);
    m.def("write_synthetic_dataset", [](const std::filesystem::path& dir, std::size_t count, std::uint64_t seed) {
        write_dataset(make_synthetic_dataset(count, 32, 48, seed), dir / "images", dir / "masks");
    }, py::arg("directory"), py::arg("count") = 2, py::arg("seed") = 0);

    m.def("train", &train_from_config, py::arg("config"), py::arg("output_dir") = py::none(),
          py::arg("epochs") = py::none(), py::arg("seed") = py::none(), py::arg("augment") = true,
          "Runs the training loop of a config file; returns one record per epoch.");

    m.def(
        "gradcheck",
        [](std::size_t trials, std::uint64_t seed, bool network_only) {
            GradcheckOptions o;
            o.trials = trials;
            o.seed = seed;
            o.include_ops = !network_only;
            GradcheckReport r;
            {
                py::gil_scoped_release release;
                r = run_gradcheck(o);
            }
            std::map<std::string, double> out;
            for (const auto& c : r.cases) out[c.name] = c.max_rel_err;
            return out;
        },
        py::arg("trials") = 2, py::arg("seed") = 0, py::arg("network_only") = false,
        "Maximum relative error of analytic against central-difference gradients, per case.");
}
