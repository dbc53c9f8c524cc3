// Python module: IDFS feature files, mask down-sampling, synthetic worlds,
// score maps and the image-level metrics.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "deviant/feature_store.hpp"
#include "deviant/metrics.hpp"
#include "deviant/optim.hpp"
#include "deviant/scoring.hpp"
#include "deviant/synth_oracle.hpp"

namespace py = pybind11;
using namespace deviant;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

template <typename T>
py::array_t<T> to_array(const std::vector<T>& v, std::vector<py::ssize_t> shape) {
    py::array_t<T> out(shape);
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

py::dict feature_set_dict(const FeatureSet& fs) {
    const auto n = py::ssize_t(fs.n_images), p = py::ssize_t(fs.n_patches), c = py::ssize_t(fs.channels);
    py::dict d;
    d["features"] = to_array(fs.features, {n, p, c});
    d["masks"] = to_array(fs.masks, {n, p});
    d["labels"] = to_array(fs.labels, {n});
    d["anomaly_types"] = fs.anomaly_types;
    d["grid"] = fs.grid();
    return d;
}

FeatureSet feature_set_from(const F32& features, const U8& masks, const U8& labels,
                            const std::vector<std::string>& anomaly_types) {
    if (features.ndim() != 3) throw DimensionError("features must be (images, patches, channels)");
    const auto n = std::size_t(features.shape(0)), p = std::size_t(features.shape(1)), c = std::size_t(features.shape(2));
    if (masks.ndim() != 2 || std::size_t(masks.shape(0)) != n || std::size_t(masks.shape(1)) != p) {
        throw DimensionError("masks must be (images, patches)");
    }
    if (labels.ndim() != 1 || std::size_t(labels.shape(0)) != n) throw DimensionError("labels must be (images,)");
    if (anomaly_types.size() != n) throw DimensionError("anomaly_types must have one entry per image");
    FeatureSet fs = FeatureSet::empty(p, c);
    for (std::size_t i = 0; i < n; ++i) {
        fs.add_image({features.data() + i * p * c, p * c}, {masks.data() + i * p, p}, labels.data()[i],
                     anomaly_types[i]);
    }
    fs.validate();
    return fs;
}

std::optional<double> metric(std::optional<double> (*f)(std::span<const double>, std::span<const std::uint8_t>),
                             const F64& scores, const U8& labels) {
    if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
    return f({scores.data(), std::size_t(scores.size())}, {labels.data(), std::size_t(labels.size())});
}

}  // namespace

PYBIND11_MODULE(_deviant, m) {
    m.doc() = "Few-shot anomaly detection on pre-extracted patch features";

    auto base = py::register_exception<Error>(m, "DeviantError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<InvariantError>(m, "InvariantError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());

    m.attr("FEATURE_FILE_VERSION") = kFeatureFileVersion;

    m.def("read_feature_file", [](const std::string& path) { return feature_set_dict(read_feature_file(path)); },
          py::arg("path"), "Load an IDFS file as a dict of numpy arrays.");
    m.def(
        "write_feature_file",
        [](const std::string& path, const F32& features, const U8& masks, const U8& labels,
           const std::vector<std::string>& anomaly_types) {
            write_feature_file(path, feature_set_from(features, masks, labels, anomaly_types));
        },
        py::arg("path"), py::arg("features"), py::arg("masks"), py::arg("labels"), py::arg("anomaly_types"),
        "Write features (images, patches, channels) with patch masks, labels and type tags as IDFS.");
    m.def(
        "downsample_mask",
        [](const U8& pixels, std::size_t grid) {
            if (pixels.ndim() != 2) throw DimensionError("pixel mask must be (height, width)");
            const auto h = std::size_t(pixels.shape(0)), w = std::size_t(pixels.shape(1));
            const auto out = downsample_mask({pixels.data(), h * w}, h, w, grid);
            return to_array(out, {py::ssize_t(grid * grid)});
        },
        py::arg("pixels"), py::arg("grid"), "Max-pool an (H, W) binary mask onto grid x grid patches.");

    m.def(
        "generate_world",
        [](const py::kwargs& kw) {
            SynthWorldSpec s;
            for (const auto& [k, v] : kw) {
                const auto key = k.cast<std::string>();
                if (key == "channels") s.channels = v.cast<std::size_t>();
                else if (key == "grid") s.grid = v.cast<std::size_t>();
                else if (key == "n_normal_images") s.n_normal_images = v.cast<std::size_t>();
                else if (key == "n_abnormal_images") s.n_abnormal_images = v.cast<std::size_t>();
                else if (key == "train_normal_images") s.train_normal_images = v.cast<std::size_t>();
                else if (key == "train_abnormal_images") s.train_abnormal_images = v.cast<std::size_t>();
                else if (key == "nuisance_dim") s.nuisance_dim = v.cast<std::size_t>();
                else if (key == "nuisance_amplitude") s.nuisance_amplitude = v.cast<double>();
                else if (key == "iso_noise") s.iso_noise = v.cast<double>();
                else if (key == "n_dirs") s.n_dirs = v.cast<std::size_t>();
                else if (key == "offset") s.offset = v.cast<double>();
                else if (key == "anomaly_fraction") s.anomaly_fraction = v.cast<double>();
                else if (key == "n_patterns") s.n_patterns = v.cast<std::size_t>();
                else if (key == "seed") s.seed = v.cast<std::uint64_t>();
                else throw ConfigError("unknown synth key '" + key + "'");
            }
            const SynthWorld w = generate_world(s);
            py::dict d;
            d["train"] = feature_set_dict(w.train);
            d["test"] = feature_set_dict(w.test);
            d["directions"] = to_array(w.directions.data, {py::ssize_t(w.directions.shape[0]), py::ssize_t(s.channels)});
            return d;
        },
        "Generate a synthetic feature world; keyword arguments override the world defaults.");

    m.def(
        "read_score_map",
        [](const std::string& path) {
            const ScoreMap sm = read_score_map(path);
            py::dict d;
            d["image_score"] = sm.image_score;
            d["patch_scores"] = to_array(sm.patch_scores, {py::ssize_t(sm.grid), py::ssize_t(sm.grid)});
            d["pixel_map"] = to_array(sm.pixel_map, {py::ssize_t(sm.height), py::ssize_t(sm.width)});
            return d;
        },
        py::arg("path"));
    m.def(
        "image_score", [](const F32& s) { return image_score({s.data(), std::size_t(s.size())}); }, py::arg("patch_scores"),
        "Mean of the top ceil(N/100) patch scores.");

    m.def("auroc", [](const F64& s, const U8& y) { return metric(&auroc, s, y); }, py::arg("scores"), py::arg("labels"));
    m.def("average_precision", [](const F64& s, const U8& y) { return metric(&average_precision, s, y); },
          py::arg("scores"), py::arg("labels"));
    m.def("f1_max", [](const F64& s, const U8& y) { return metric(&f1_max, s, y); }, py::arg("scores"),
          py::arg("labels"));

    m.def(
        "lr_at",
        [](std::size_t step, std::size_t steps_per_epoch, std::size_t total_epochs, std::size_t warmup_epochs,
           double base_lr, double warmup_start_lr, double floor_fraction) {
            LrSchedule s;
            s.steps_per_epoch = steps_per_epoch;
            s.total_epochs = total_epochs;
            s.warmup_epochs = warmup_epochs;
            s.base_lr = base_lr;
            s.warmup_start_lr = warmup_start_lr;
            s.floor_fraction = floor_fraction;
            s.validate();
            return lr_at(step, s);
        },
        py::arg("step"), py::arg("steps_per_epoch") = 1, py::arg("total_epochs") = 20, py::arg("warmup_epochs") = 2,
        py::arg("base_lr") = 1e-3, py::arg("warmup_start_lr") = 1e-5, py::arg("floor_fraction") = 0.01);
}
