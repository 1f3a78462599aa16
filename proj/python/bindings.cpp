#include "stainseg/dataset.hpp"
#include "stainseg/generate.hpp"
#include "stainseg/inference.hpp"
#include "stainseg/introspection.hpp"
#include "stainseg/network.hpp"
#include "stainseg/stain.hpp"
#include "stainseg/training.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace stainseg;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Image& img)
{
    py::array_t<double> out({img.channels, img.height, img.width});
    std::copy(img.data.begin(), img.data.end(), out.mutable_data());
    return out;
}

py::array_t<double> to_numpy(const Tensor& t)
{
    py::array_t<double> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

py::array_t<std::uint8_t> to_numpy(const LabelMap& l)
{
    py::array_t<std::uint8_t> out({l.height, l.width});
    std::copy(l.data.begin(), l.data.end(), out.mutable_data());
    return out;
}

// Accepts [C, H, W] or [H, W] (one channel).
Image to_image(const F64Array& a)
{
    if (a.ndim() != 2 && a.ndim() != 3)
        throw std::invalid_argument("expected an array of shape [C, H, W] or [H, W]");
    const bool planar = a.ndim() == 3;
    Image img(planar ? a.shape(0) : 1, a.shape(planar ? 1 : 0), a.shape(planar ? 2 : 1));
    std::copy(a.data(), a.data() + a.size(), img.data.begin());
    return img;
}

LabelMap to_labels(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a)
{
    if (a.ndim() != 2)
        throw std::invalid_argument("expected a label array of shape [H, W]");
    LabelMap l(a.shape(0), a.shape(1));
    std::copy(a.data(), a.data() + a.size(), l.data.begin());
    return l;
}

Tensor to_tensor(const F64Array& a)
{
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict report_dict(const F1Report& r)
{
    py::dict d;
    d["precision"] = r.precision;
    d["recall"] = r.recall;
    d["f1"] = r.f1;
    d["support"] = r.support;
    d["defined"] = r.defined;
    d["macro_f1"] = r.macro_f1;
    d["loss"] = r.loss;
    return d;
}

py::tuple ascent_tuple(const AscentResult& r)
{
    return py::make_tuple(to_numpy(r.image), r.initial_objective, r.final_objective);
}

} // namespace

PYBIND11_MODULE(stainseg, m)
{
    m.doc() = "Multi-stain histopathology segmentation (UNET and CD-UNET) on a small autodiff core";
    m.attr("NUM_CLASSES") = kNumClasses;
    m.attr("IGNORE_LABEL") = kIgnoreLabel;
    m.attr("CLASS_NAMES") = py::make_tuple("background", "tumor", "tissue", "necrosis");

    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p)
                std::rethrow_exception(p);
        } catch (const std::invalid_argument& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        }
    });

    m.def("transmittance", &transmittance, py::arg("od"));
    m.def("builtin_profile_names", &builtin_profile_names);
    m.def(
        "render",
        [](const std::vector<F64Array>& maps, const std::string& profile, double i0) {
            std::vector<Image> c;
            for (const auto& a : maps)
                c.push_back(to_image(a));
            return to_numpy(render(c, resolve_profile(profile), i0));
        },
        py::arg("concentrations"), py::arg("profile"), py::arg("i0") = 1.0,
        "Beer-Lambert rendering of per-stain concentration maps to an RGB image [3, H, W].");
    m.def(
        "mfb_weights",
        [](const std::array<double, kNumClasses>& frequencies) {
            ClassStats s;
            s.frequencies = frequencies;
            return mfb_weights(s);
        },
        py::arg("frequencies"));
    m.def("scaled_learning_rate", &scaled_learning_rate, py::arg("base_lr"), py::arg("workers"));
    m.def("colorize_labels", [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& l) {
        return to_numpy(colorize_labels(to_labels(l)));
    });
    m.def("parse_label_image", [](const F64Array& rgb) { return to_numpy(parse_label_image(to_image(rgb))); });
    m.def(
        "dominant_hue",
        [](const F64Array& rgb) {
            const auto h = dominant_hue(to_image(rgb));
            return py::make_tuple(h.hue, h.saturation);
        },
        "(hue in degrees, saturation) of the mean colour of an RGB image.");
    m.def("hue_distance", &hue_distance);

    py::class_<NetworkConfig>(m, "NetworkConfig")
        .def(py::init([](const std::string& arch, std::size_t base_width, std::size_t depth) {
                 NetworkConfig c;
                 c.arch = parse_arch(arch);
                 c.base_width = base_width;
                 c.depth = depth;
                 c.validate();
                 return c;
             }),
             py::arg("arch") = "cd-unet", py::arg("base_width") = NetworkConfig{}.base_width,
             py::arg("depth") = NetworkConfig{}.depth)
        .def_property_readonly("arch", [](const NetworkConfig& c) { return std::string(arch_name(c.arch)); })
        .def_readonly("base_width", &NetworkConfig::base_width)
        .def_readonly("depth", &NetworkConfig::depth)
        .def_readonly("num_classes", &NetworkConfig::num_classes);

    py::class_<Model>(m, "Model")
        .def_static("build", &Model::build, py::arg("config"), py::arg("seed") = 0)
        .def_static("load", &load_checkpoint, py::arg("path"))
        .def("save", [](const Model& model, const std::filesystem::path& p) { save_checkpoint(model, p); })
        .def_property_readonly("config", &Model::config)
        .def("param_count", &Model::param_count)
        .def("clone", &Model::clone)
        .def(
            "forward",
            [](Model& model, const F64Array& batch, bool train) {
                return to_numpy(model.forward(nullptr, to_tensor(batch), train ? ops::Mode::train : ops::Mode::eval));
            },
            py::arg("batch"), py::arg("train") = false, "Class probabilities [N, 4, T, T] for a BGR batch [N, 3, T, T].")
        .def(
            "logits",
            [](Model& model, const F64Array& batch) {
                return to_numpy(model.logits(nullptr, to_tensor(batch), ops::Mode::eval));
            },
            py::arg("batch"));

    py::class_<SynthConfig>(m, "SynthConfig")
        .def(py::init<>())
        .def_readwrite("slides", &SynthConfig::slides)
        .def_readwrite("profiles", &SynthConfig::profiles)
        .def_readwrite("slide_size", &SynthConfig::slide_size)
        .def_readwrite("tile_size", &SynthConfig::tile_size)
        .def_readwrite("stride", &SynthConfig::stride)
        .def_readwrite("test_slides", &SynthConfig::test_slides)
        .def_readwrite("val_fraction", &SynthConfig::val_fraction)
        .def_readwrite("seed", &SynthConfig::seed);

    py::class_<Dataset>(m, "Dataset")
        .def_static("read", &read_dataset, py::arg("directory"))
        .def("write", [](Dataset& d, const std::filesystem::path& dir) { write_dataset(dir, d); })
        .def("__len__", [](const Dataset& d) { return d.tiles.size(); })
        .def("count", [](const Dataset& d, const std::string& split) { return d.manifest.count(parse_split(split)); })
        .def(
            "tile",
            [](const Dataset& d, std::size_t i) {
                if (i >= d.tiles.size())
                    throw py::index_error("tile index out of range");
                const auto& t = d.tiles[i];
                py::dict out;
                out["image"] = to_numpy(t.image);
                out["labels"] = to_numpy(t.labels);
                out["slide"] = t.source_slide;
                out["stain"] = t.stain;
                out["split"] = split_name(d.manifest.records[i].split);
                out["origin"] = py::make_tuple(t.origin_row, t.origin_col);
                return out;
            },
            "Tile i as a dict; the image is BGR [3, T, T].")
        .def("class_frequencies", [](const Dataset& d, const std::string& split) {
            const auto s = class_frequencies(d, parse_split(split));
            return py::make_tuple(s.counts, s.frequencies);
        });
    m.def("generate_dataset", [](const SynthConfig& c) { return generate_dataset(c).dataset; }, py::arg("config"));

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("base_lr", &TrainConfig::base_lr)
        .def_readwrite("momentum", &TrainConfig::momentum)
        .def_readwrite("workers", &TrainConfig::workers)
        .def_readwrite("per_worker_batch", &TrainConfig::per_worker_batch)
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("eval_every", &TrainConfig::eval_every)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("class_weights", &TrainConfig::class_weights)
        .def_readwrite("augment", &TrainConfig::augment)
        .def_readwrite("freeze_batchnorm", &TrainConfig::freeze_batchnorm);

    m.def(
        "train",
        [](const TrainConfig& tc, const NetworkConfig& nc, const Dataset& data, const std::filesystem::path& out) {
            TrainResult r = [&] {
                py::gil_scoped_release release;
                return train(tc, nc, data, TrainHooks{out, {}});
            }();
            py::list metrics;
            for (const auto& rec : r.log.records()) {
                py::dict d;
                d["epoch"] = rec.epoch;
                d["split"] = split_name(rec.split);
                d["loss"] = rec.loss;
                d["f1"] = rec.f1;
                d["macro_f1"] = rec.macro_f1;
                metrics.append(d);
            }
            py::dict d;
            d["model"] = std::move(r.model);
            d["best"] = std::move(r.best);
            d["best_epoch"] = r.best_epoch;
            d["best_macro_f1"] = r.best_macro_f1;
            d["class_weights"] = r.class_weights;
            d["metrics"] = metrics;
            d["diverged"] = r.diverged;
            d["failure"] = r.failure;
            return d;
        },
        py::arg("config"), py::arg("network"), py::arg("dataset"), py::arg("output_dir") = std::filesystem::path());
    m.def(
        "evaluate",
        [](Model& model, const Dataset& data, const std::string& split) {
            F1Report r;
            {
                py::gil_scoped_release release;
                r = evaluate(model, data, parse_split(split));
            }
            return report_dict(r);
        },
        py::arg("model"), py::arg("dataset"), py::arg("split") = "val");
    m.def(
        "infer",
        [](Model& model, const F64Array& rgb, std::size_t tile, std::size_t stride) {
            return to_numpy(infer_probabilities(model, to_image(rgb), tile, stride));
        },
        py::arg("model"), py::arg("rgb"), py::arg("tile_size") = 64, py::arg("stride") = 32,
        "Overlap-averaged class probabilities [4, H, W] for an RGB image [3, H, W].");
    m.def("argmax_labels", [](const F64Array& probs) { return to_numpy(argmax_labels(to_image(probs))); });

    py::class_<VizOptions>(m, "VizOptions")
        .def(py::init<>())
        .def_readwrite("steps", &VizOptions::steps)
        .def_readwrite("step_size", &VizOptions::step_size)
        .def_readwrite("noise_samples", &VizOptions::noise_samples)
        .def_readwrite("noise_sigma", &VizOptions::noise_sigma)
        .def_readwrite("threshold", &VizOptions::threshold)
        .def_readwrite("seed", &VizOptions::seed)
        .def_readwrite("tile_size", &VizOptions::tile_size);

    m.def(
        "maximize_filter_activation",
        [](Model& model, std::size_t filter, const VizOptions& o) {
            return ascent_tuple(maximize_filter_activation(model, filter, o));
        },
        py::arg("model"), py::arg("filter"), py::arg("options") = VizOptions{},
        "(BGR image, initial objective, final objective).");
    m.def(
        "maximize_output_activation",
        [](Model& model, std::size_t row, std::size_t col, std::size_t category, const VizOptions& o) {
            return ascent_tuple(maximize_output_activation(model, row, col, category, o));
        },
        py::arg("model"), py::arg("row"), py::arg("col"), py::arg("category"), py::arg("options") = VizOptions{});
    m.def(
        "smoothgrad",
        [](Model& model, const F64Array& image, std::size_t row, std::size_t col, std::size_t category,
           const VizOptions& o) {
            const auto a = smoothgrad(model, to_image(image), row, col, category, o);
            py::dict d;
            d["gradient"] = to_numpy(a.gradient);
            d["mask"] = to_numpy(a.mask);
            d["overlay"] = to_numpy(a.overlay);
            return d;
        },
        py::arg("model"), py::arg("image"), py::arg("row"), py::arg("col"), py::arg("category"),
        py::arg("options") = VizOptions{});
    m.def(
        "cd_segment_outputs",
        [](Model& model, const F64Array& image) {
            const auto out = cd_segment_outputs(model, to_image(image));
            py::list raw, normalized;
            for (std::size_t c = 0; c < 3; ++c) {
                raw.append(to_numpy(out.raw[c]));
                normalized.append(to_numpy(out.normalized[c]));
            }
            return py::make_tuple(raw, normalized);
        },
        py::arg("model"), py::arg("image"));
}
