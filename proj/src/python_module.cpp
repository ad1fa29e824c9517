// Python bindings: geometry, matching, features, synthetic data, training and inference.

#include "sedt/matching.hpp"
#include "sedt/runner.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>
#include <vector>

namespace py = pybind11;
using namespace pybind11::literals;
using namespace sedt;

namespace {

Boundary boundary_of(const std::pair<double, double>& b) { return {b.first, b.second}; }

py::object parse_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

py::dict annotation_dict(const ClipAnnotation& a) {
    py::list events;
    for (const auto& e : a.events) events.append(py::dict("label"_a = e.label, "onset_s"_a = e.onset_s, "offset_s"_a = e.offset_s));
    return py::dict("clip_id"_a = a.clip_id, "clip_len_s"_a = a.clip_len_s, "events"_a = events,
                    "weak_tags"_a = std::vector<std::string>(a.weak_tags.begin(), a.weak_tags.end()),
                    "supervision"_a = to_string(a.supervision));
}

Waveform waveform_of(const py::array_t<double, py::array::c_style | py::array::forcecast>& samples, int sample_rate) {
    if (samples.ndim() != 1) throw ValidationError("samples must be one-dimensional");
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.assign(samples.data(), samples.data() + samples.size());
    return w;
}

/// A loaded checkpoint ready for inference.
class Detector {
public:
    explicit Detector(const std::filesystem::path& dir) : ck_(Checkpoint::load(dir)), model_(ck_.model()) {}

    std::vector<std::string> classes() const { return ck_.vocab.classes(); }
    std::string stage() const { return to_string(ck_.stage); }
    int epoch() const { return ck_.epoch; }

    py::object predict_spectrogram(const Matrix& log_mel_values, double clip_len_s, const std::string& fusion) const {
        LogMelSpectrogram spec;
        spec.values = log_mel_values;
        spec.hop_s = ck_.config.features.hop_s();
        spec.clip_len_s = clip_len_s;
        const auto pred = model_.predict(normalize(spec, ck_.norm).values);
        DecisionConfig d = ck_.config.decision;
        d.fusion = fusion_from_string(fusion);
        return parse_json(prediction_to_json_line("", postprocess(pred, clip_len_s, d), pred.tag_probs, ck_.vocab));
    }

    py::object predict_wav(const std::filesystem::path& path, const std::string& fusion) const {
        const auto spec = log_mel(read_wav(path), ck_.config.features);
        auto out = predict_spectrogram(spec.values, spec.clip_len_s, fusion);
        out["clip_id"] = path.stem().string();
        return out;
    }

    py::object evaluate_manifest(const std::filesystem::path& manifest, const std::vector<std::string>& fusions) const {
        auto d = load_dataset(manifest, &ck_.vocab, ck_.config.features);
        normalize_dataset(d, ck_.norm);
        std::vector<FusionStrategy> strategies;
        for (const auto& f : fusions) strategies.push_back(fusion_from_string(f));
        return parse_json(report_to_json(evaluate(model_, d, ck_.config.decision, strategies)));
    }

private:
    Checkpoint ck_;
    SedtModel model_;
};

/// Runs one training stage from a flat JSON config and writes best/ and last/ under `out`.
std::filesystem::path train(const std::string& config_json, const std::filesystem::path& out, const std::string& stage_name,
                            const std::optional<std::filesystem::path>& from, const std::filesystem::path& base_dir) {
    auto cfg = TrainConfig::from_json(config_json);
    auto resolve = [&](std::string& p) {
        if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base_dir / p).string();
    };
    resolve(cfg.train_manifest);
    resolve(cfg.valid_manifest);
    if (cfg.train_manifest.empty()) throw ValidationError("config has no train_manifest");
    const Stage stage = stage_from_string(stage_name);
    std::optional<Checkpoint> start;
    if (from) start = Checkpoint::load(*from);
    if (stage == Stage::kFinetune && !start) throw ValidationError("the finetune stage needs a learning checkpoint");

    auto data = load_dataset(cfg.train_manifest, start ? &start->vocab : nullptr, cfg.features);
    const NormStats norm = start ? start->norm : dataset_norm_stats(data);
    normalize_dataset(data, norm);
    std::optional<Dataset> valid;
    if (!cfg.valid_manifest.empty()) {
        valid = load_dataset(cfg.valid_manifest, &data.vocab, cfg.features);
        normalize_dataset(*valid, norm);
    }
    if (!start) start = initial_checkpoint(cfg, data.vocab, norm);
    StageResult result;
    {
        py::gil_scoped_release release;
        result = train_stage(stage, cfg, *start, data, valid ? &*valid : nullptr);
    }
    result.best.save(out / "best");
    result.last.save(out / "last");
    return out / "best";
}

}  // namespace

PYBIND11_MODULE(_sedt, m) {
    m.doc() = "Sound event detection transformer";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

    m.def("interval_iou", [](std::pair<double, double> a, std::pair<double, double> b) {
        return interval_iou(boundary_of(a), boundary_of(b));
    }, "a"_a, "b"_a, "IoU of two (center, duration) intervals.");
    m.def("interval_giou", [](std::pair<double, double> a, std::pair<double, double> b) {
        return interval_giou(boundary_of(a), boundary_of(b));
    }, "a"_a, "b"_a, "Generalized IoU of two (center, duration) intervals.");

    m.def("hungarian", [](const Matrix& cost) {
        const auto a = hungarian(cost);
        return py::make_tuple(a.target_of_pred, a.cost);
    }, "cost"_a, "Minimum-cost assignment; returns (column of each row, total cost).");

    m.def("log_mel", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& samples, int sample_rate,
                        int n_mels) {
        FeatureConfig fc;
        fc.sample_rate = sample_rate;
        fc.n_mels = n_mels;
        return log_mel(waveform_of(samples, sample_rate), fc).values;
    }, "samples"_a, "sample_rate"_a = 16000, "n_mels"_a = 64, "Frames x mel-bins log-mel spectrogram.");

    m.def("generate_scene", [](std::uint64_t seed, std::uint64_t index) {
        const auto r = render_scene(SyntheticSceneSpec::defaults(seed), index);
        py::array_t<double> samples(static_cast<py::ssize_t>(r.waveform.samples.size()));
        std::copy(r.waveform.samples.begin(), r.waveform.samples.end(), samples.mutable_data());
        return py::make_tuple(samples, r.waveform.sample_rate, annotation_dict(r.annotation));
    }, "seed"_a, "index"_a, "Render one clip of the built-in five-class scene spec.");

    m.def("write_synthetic_dataset", [](const std::filesystem::path& out, std::size_t num_clips, std::uint64_t seed,
                                        std::uint64_t first_index, std::size_t weak) {
        const auto spec = SyntheticSceneSpec::defaults(seed);
        FeatureConfig fc;
        fc.sample_rate = spec.sample_rate;
        return write_synthetic_dataset(spec, out, first_index, num_clips, fc, weak);
    }, "out"_a, "num_clips"_a, "seed"_a = 0, "first_index"_a = 0, "weak"_a = 0,
       "Write audio, features and manifest.jsonl; returns the manifest path.");

    m.def("load_manifest", [](const std::filesystem::path& path) {
        py::list out;
        for (const auto& a : load_manifest(path)) out.append(annotation_dict(a));
        return out;
    }, "path"_a);

    m.def("lr_schedule", &lr_schedule, "epoch"_a, "eta0"_a, "epochs_drop"_a);

    m.def("train", &train, "config_json"_a, "out"_a, "stage"_a = "learning", "from_checkpoint"_a = py::none(),
          "base_dir"_a = std::filesystem::path("."),
          "Run one training stage; relative manifests resolve against base_dir. Returns the best checkpoint directory.");

    py::class_<Detector>(m, "Detector")
        .def(py::init<const std::filesystem::path&>(), "checkpoint_dir"_a)
        .def_property_readonly("classes", &Detector::classes)
        .def_property_readonly("stage", &Detector::stage)
        .def_property_readonly("epoch", &Detector::epoch)
        .def("predict_spectrogram", &Detector::predict_spectrogram, "log_mel"_a, "clip_len_s"_a, "fusion"_a = "none")
        .def("predict_wav", &Detector::predict_wav, "path"_a, "fusion"_a = "none")
        .def("evaluate", &Detector::evaluate_manifest, "manifest"_a, "fusions"_a = std::vector<std::string>{"none"});
}
