#include "sedt/runner.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <sstream>

namespace sedt {

using nlohmann::json;

std::string to_string(Stage s) { return s == Stage::kLearning ? "learning" : "finetune"; }

Stage stage_from_string(const std::string& s) {
    if (s == "learning") return Stage::kLearning;
    if (s == "finetune") return Stage::kFinetune;
    throw ValidationError("unknown stage '" + s + "' (expected learning or finetune)");
}

double lr_schedule(int epoch, double eta0, int epochs_drop) {
    if (epochs_drop <= 0) throw ValidationError("epochs_drop must be positive");
    if (epoch < 0) throw ValidationError("epoch must be non-negative");
    return eta0 * std::pow(0.1, epoch / epochs_drop);
}

// ---- configuration ----------------------------------------------------------

ModelConfig TrainConfig::desk_model() {
    ModelConfig m;
    m.backbone = {{16, 2, 2}, {32, 2, 2}, {64, 2, 4}, {64, 1, 4}};
    m.d_model = 128;
    m.n_heads = 8;
    m.ffn_width = 256;
    m.encoder_layers = 3;
    m.decoder_layers = 3;
    m.num_queries = 10;
    m.num_classes = 5;
    m.dropout = 0.0;
    return m;
}

int TrainConfig::stage_epochs_drop(Stage s) const {
    if (epochs_drop > 0) return epochs_drop;
    return std::max(1, stage_epochs(s));
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be positive");
    if (epochs_learning < 0 || epochs_finetune < 0) throw ValidationError("epoch counts must be non-negative");
    if (!(lr_learning > 0.0) || !(lr_finetune > 0.0)) throw ValidationError("learning rates must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw ValidationError("Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ValidationError("adam_eps must be positive");
    if (weight_decay < 0.0) throw ValidationError("weight_decay must be non-negative");
    if (validate_every < 1) throw ValidationError("validate_every must be positive");
    if (std::isnan(finetune.epsilon)) throw ValidationError("epsilon must not be NaN");
    if (finetune.alpha < 0.0) throw ValidationError("alpha must be non-negative");
    loss.validate();
    decision.validate();
    model.validate();
    features.validate();
    if (features.n_mels != model.n_mels) throw ValidationError("feature and model n_mels differ");
}

namespace {

template <typename T>
T take(const json& v, const std::string& key) {
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw ParseError("config key '" + key + "' has the wrong type");
    }
}

json backbone_field(const ModelConfig& m, int which) {
    json a = json::array();
    for (const auto& s : m.backbone) a.push_back(which == 0 ? s.channels : which == 1 ? s.stride_time : s.stride_freq);
    return a;
}

void set_backbone_field(ModelConfig& m, const json& v, const std::string& key, int which) {
    const auto vals = take<std::vector<int>>(v, key);
    if (vals.empty()) throw ValidationError("config key '" + key + "' must not be empty");
    m.backbone.resize(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
        auto& s = m.backbone[i];
        (which == 0 ? s.channels : which == 1 ? s.stride_time : s.stride_freq) = vals[i];
    }
}

}  // namespace

TrainConfig TrainConfig::from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ParseError("config must be a JSON object");

    TrainConfig c;
    using Setter = std::function<void(TrainConfig&, const json&, const std::string&)>;
    const std::map<std::string, Setter> setters = {
        {"batch_size", [](TrainConfig& c, const json& v, const std::string& k) { c.batch_size = take<std::size_t>(v, k); }},
        {"epochs_learning", [](TrainConfig& c, const json& v, const std::string& k) { c.epochs_learning = take<int>(v, k); }},
        {"epochs_finetune", [](TrainConfig& c, const json& v, const std::string& k) { c.epochs_finetune = take<int>(v, k); }},
        {"lr_learning", [](TrainConfig& c, const json& v, const std::string& k) { c.lr_learning = take<double>(v, k); }},
        {"lr_finetune", [](TrainConfig& c, const json& v, const std::string& k) { c.lr_finetune = take<double>(v, k); }},
        {"epochs_drop", [](TrainConfig& c, const json& v, const std::string& k) { c.epochs_drop = take<int>(v, k); }},
        {"adam_beta1", [](TrainConfig& c, const json& v, const std::string& k) { c.adam_beta1 = take<double>(v, k); }},
        {"adam_beta2", [](TrainConfig& c, const json& v, const std::string& k) { c.adam_beta2 = take<double>(v, k); }},
        {"adam_eps", [](TrainConfig& c, const json& v, const std::string& k) { c.adam_eps = take<double>(v, k); }},
        {"weight_decay", [](TrainConfig& c, const json& v, const std::string& k) { c.weight_decay = take<double>(v, k); }},
        {"grad_clip", [](TrainConfig& c, const json& v, const std::string& k) { c.grad_clip = take<double>(v, k); }},
        {"seed", [](TrainConfig& c, const json& v, const std::string& k) { c.seed = take<std::uint64_t>(v, k); }},
        {"validate_every", [](TrainConfig& c, const json& v, const std::string& k) { c.validate_every = take<int>(v, k); }},
        {"lambda_iou", [](TrainConfig& c, const json& v, const std::string& k) { c.loss.lambda_iou = take<double>(v, k); }},
        {"lambda_l1", [](TrainConfig& c, const json& v, const std::string& k) { c.loss.lambda_l1 = take<double>(v, k); }},
        {"lambda_at", [](TrainConfig& c, const json& v, const std::string& k) { c.loss.lambda_at = take<double>(v, k); }},
        {"lambda_at_p", [](TrainConfig& c, const json& v, const std::string& k) { c.loss.lambda_at_p = take<double>(v, k); }},
        {"empty_class_weight",
         [](TrainConfig& c, const json& v, const std::string& k) { c.loss.empty_class_weight = take<double>(v, k); }},
        {"epsilon",
         [](TrainConfig& c, const json& v, const std::string& k) {
             if (v.is_string()) {
                 const auto s = v.get<std::string>();
                 if (s != "-inf" && s != "inf") throw ValidationError("epsilon must be a number, \"-inf\" or \"inf\"");
                 c.finetune.epsilon = (s == "inf" ? 1.0 : -1.0) * std::numeric_limits<double>::infinity();
             } else {
                 c.finetune.epsilon = take<double>(v, k);
             }
         }},
        {"alpha",
         [](TrainConfig& c, const json& v, const std::string& k) {
             if (v.is_string()) {
                 if (v.get<std::string>() != "all") throw ValidationError("alpha must be a number or \"all\"");
                 c.finetune.retain_all = true;
             } else {
                 c.finetune.alpha = take<double>(v, k);
                 c.finetune.retain_all = false;
             }
         }},
        {"tau_cls", [](TrainConfig& c, const json& v, const std::string& k) { c.decision.tau_cls = take<double>(v, k); }},
        {"tau_tag", [](TrainConfig& c, const json& v, const std::string& k) { c.decision.tau_tag = take<double>(v, k); }},
        {"fusion",
         [](TrainConfig& c, const json& v, const std::string& k) {
             c.decision.fusion = fusion_from_string(v.is_number() ? std::to_string(take<int>(v, k)) : take<std::string>(v, k));
         }},
        {"de_overlap", [](TrainConfig& c, const json& v, const std::string& k) { c.decision.de_overlap = take<bool>(v, k); }},
        {"n_mels",
         [](TrainConfig& c, const json& v, const std::string& k) { c.model.n_mels = c.features.n_mels = take<int>(v, k); }},
        {"backbone_channels", [](TrainConfig& c, const json& v, const std::string& k) { set_backbone_field(c.model, v, k, 0); }},
        {"backbone_stride_time",
         [](TrainConfig& c, const json& v, const std::string& k) { set_backbone_field(c.model, v, k, 1); }},
        {"backbone_stride_freq",
         [](TrainConfig& c, const json& v, const std::string& k) { set_backbone_field(c.model, v, k, 2); }},
        {"d_model", [](TrainConfig& c, const json& v, const std::string& k) { c.model.d_model = take<int>(v, k); }},
        {"n_heads", [](TrainConfig& c, const json& v, const std::string& k) { c.model.n_heads = take<int>(v, k); }},
        {"ffn_width", [](TrainConfig& c, const json& v, const std::string& k) { c.model.ffn_width = take<int>(v, k); }},
        {"encoder_layers", [](TrainConfig& c, const json& v, const std::string& k) { c.model.encoder_layers = take<int>(v, k); }},
        {"decoder_layers", [](TrainConfig& c, const json& v, const std::string& k) { c.model.decoder_layers = take<int>(v, k); }},
        {"num_queries", [](TrainConfig& c, const json& v, const std::string& k) { c.model.num_queries = take<int>(v, k); }},
        {"num_classes", [](TrainConfig& c, const json& v, const std::string& k) { c.model.num_classes = take<int>(v, k); }},
        {"dropout", [](TrainConfig& c, const json& v, const std::string& k) { c.model.dropout = take<double>(v, k); }},
        {"boundary_head_layers",
         [](TrainConfig& c, const json& v, const std::string& k) { c.model.boundary_head_layers = take<int>(v, k); }},
        {"sample_rate", [](TrainConfig& c, const json& v, const std::string& k) { c.features.sample_rate = take<int>(v, k); }},
        {"win_len", [](TrainConfig& c, const json& v, const std::string& k) { c.features.win_len = take<int>(v, k); }},
        {"hop", [](TrainConfig& c, const json& v, const std::string& k) { c.features.hop = take<int>(v, k); }},
        {"fmin", [](TrainConfig& c, const json& v, const std::string& k) { c.features.fmin = take<double>(v, k); }},
        {"fmax", [](TrainConfig& c, const json& v, const std::string& k) { c.features.fmax = take<double>(v, k); }},
        {"log_floor", [](TrainConfig& c, const json& v, const std::string& k) { c.features.log_floor = take<double>(v, k); }},
        {"train_manifest",
         [](TrainConfig& c, const json& v, const std::string& k) { c.train_manifest = take<std::string>(v, k); }},
        {"valid_manifest",
         [](TrainConfig& c, const json& v, const std::string& k) { c.valid_manifest = take<std::string>(v, k); }},
    };
    for (const auto& [key, value] : doc.items()) {
        const auto it = setters.find(key);
        if (it == setters.end()) throw ValidationError("unknown config key '" + key + "'");
        it->second(c, value, key);
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("cannot open config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    TrainConfig c = from_json(ss.str());
    const auto base = path.parent_path();
    for (auto* p : {&c.train_manifest, &c.valid_manifest}) {
        if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
    }
    return c;
}

std::string TrainConfig::to_json() const {
    json j;
    j["batch_size"] = batch_size;
    j["epochs_learning"] = epochs_learning;
    j["epochs_finetune"] = epochs_finetune;
    j["lr_learning"] = lr_learning;
    j["lr_finetune"] = lr_finetune;
    j["epochs_drop"] = epochs_drop;
    j["adam_beta1"] = adam_beta1;
    j["adam_beta2"] = adam_beta2;
    j["adam_eps"] = adam_eps;
    j["weight_decay"] = weight_decay;
    j["grad_clip"] = grad_clip;
    j["seed"] = seed;
    j["validate_every"] = validate_every;
    j["lambda_iou"] = loss.lambda_iou;
    j["lambda_l1"] = loss.lambda_l1;
    j["lambda_at"] = loss.lambda_at;
    j["lambda_at_p"] = loss.lambda_at_p;
    j["empty_class_weight"] = loss.empty_class_weight;
    if (std::isinf(finetune.epsilon)) j["epsilon"] = finetune.epsilon > 0.0 ? "inf" : "-inf";
    else j["epsilon"] = finetune.epsilon;
    if (finetune.retain_all) j["alpha"] = "all";
    else j["alpha"] = finetune.alpha;
    j["tau_cls"] = decision.tau_cls;
    j["tau_tag"] = decision.tau_tag;
    j["fusion"] = sedt::to_string(decision.fusion);
    j["de_overlap"] = decision.de_overlap;
    j["n_mels"] = model.n_mels;
    j["backbone_channels"] = backbone_field(model, 0);
    j["backbone_stride_time"] = backbone_field(model, 1);
    j["backbone_stride_freq"] = backbone_field(model, 2);
    j["d_model"] = model.d_model;
    j["n_heads"] = model.n_heads;
    j["ffn_width"] = model.ffn_width;
    j["encoder_layers"] = model.encoder_layers;
    j["decoder_layers"] = model.decoder_layers;
    j["num_queries"] = model.num_queries;
    j["num_classes"] = model.num_classes;
    j["dropout"] = model.dropout;
    j["boundary_head_layers"] = model.boundary_head_layers;
    j["sample_rate"] = features.sample_rate;
    j["win_len"] = features.win_len;
    j["hop"] = features.hop;
    j["fmin"] = features.fmin;
    j["fmax"] = features.fmax;
    j["log_floor"] = features.log_floor;
    j["train_manifest"] = train_manifest;
    j["valid_manifest"] = valid_manifest;
    return j.dump(2);
}

// ---- optimizer --------------------------------------------------------------

AdamW::AdamW(const std::vector<ag::Parameter>& params, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& p : params) {
        m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
}

void AdamW::step(std::vector<ag::Parameter>& params, double lr) {
    if (params.size() != m_.size()) throw ValidationError("optimizer state does not match the parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
        p.value *= 1.0 - lr * wd_;
        p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
    }
}

namespace {

constexpr std::uint32_t kAdamMagic = 0x4d444153u;  // "SADM"

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ParseError("truncated optimizer state");
    return v;
}

}  // namespace

void AdamW::save(std::ostream& os) const {
    put(os, kAdamMagic);
    put(os, t_);
    put(os, static_cast<std::uint32_t>(m_.size()));
    for (std::size_t i = 0; i < m_.size(); ++i) {
        put(os, static_cast<std::uint32_t>(m_[i].rows()));
        put(os, static_cast<std::uint32_t>(m_[i].cols()));
        os.write(reinterpret_cast<const char*>(m_[i].data()), static_cast<std::streamsize>(sizeof(double) * m_[i].size()));
        os.write(reinterpret_cast<const char*>(v_[i].data()), static_cast<std::streamsize>(sizeof(double) * v_[i].size()));
    }
}

void AdamW::load(std::istream& is) {
    if (get<std::uint32_t>(is) != kAdamMagic) throw ParseError("not an optimizer state blob");
    const auto t = get<std::uint64_t>(is);
    const auto n = get<std::uint32_t>(is);
    if (n != m_.size()) throw ParseError("optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < m_.size(); ++i) {
        const auto rows = get<std::uint32_t>(is);
        const auto cols = get<std::uint32_t>(is);
        if (rows != m_[i].rows() || cols != m_[i].cols()) throw ParseError("optimizer state shape mismatch");
        is.read(reinterpret_cast<char*>(m_[i].data()), static_cast<std::streamsize>(sizeof(double) * m_[i].size()));
        is.read(reinterpret_cast<char*>(v_[i].data()), static_cast<std::streamsize>(sizeof(double) * v_[i].size()));
        if (!is) throw ParseError("truncated optimizer state");
    }
    t_ = t;
}

double clip_grad_norm(std::vector<ag::Parameter>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) sq += p.grad.squaredNorm();
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& p : params) p.grad *= s;
    }
    return norm;
}

// ---- data -------------------------------------------------------------------

Dataset Dataset::subset(Supervision s) const {
    Dataset d;
    d.vocab = vocab;
    for (const auto& e : examples) {
        if (e.annotation.supervision == s) d.examples.push_back(e);
    }
    return d;
}

namespace {

LabelVocabulary vocabulary_of(const std::vector<ClipAnnotation>& clips) {
    std::set<std::string> labels;
    for (const auto& c : clips) {
        for (const auto& e : c.events) labels.insert(e.label);
        labels.insert(c.weak_tags.begin(), c.weak_tags.end());
    }
    return LabelVocabulary({labels.begin(), labels.end()});
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_relative() ? base / path : path;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& manifest, const LabelVocabulary* vocab, const FeatureConfig& fc) {
    fc.validate();
    const auto clips = load_manifest(manifest, vocab);
    Dataset d;
    d.vocab = vocab ? *vocab : vocabulary_of(clips);
    const auto base = manifest.parent_path();
    for (const auto& ann : clips) {
        LogMelSpectrogram spec;
        if (ann.features_path && std::filesystem::exists(resolve(base, *ann.features_path))) {
            spec = load_features(resolve(base, *ann.features_path));
        } else if (ann.audio_path) {
            const auto wav = read_wav(resolve(base, *ann.audio_path));
            if (wav.sample_rate != fc.sample_rate) {
                throw ValidationError("clip '" + ann.clip_id + "' has sample rate " + std::to_string(wav.sample_rate) +
                                      ", expected " + std::to_string(fc.sample_rate));
            }
            spec = log_mel(wav, fc);
        } else {
            throw ValidationError("clip '" + ann.clip_id + "' has neither features nor audio");
        }
        if (spec.bins() != fc.n_mels) {
            throw ValidationError("clip '" + ann.clip_id + "' has " + std::to_string(spec.bins()) + " mel bins, expected " +
                                  std::to_string(fc.n_mels));
        }
        spec.clip_len_s = ann.clip_len_s;
        d.examples.push_back({ann, std::move(spec)});
    }
    return d;
}

Dataset synthesize_dataset(const SyntheticSceneSpec& spec, std::uint64_t first, std::size_t count,
                           const FeatureConfig& fc, std::size_t weak_count) {
    spec.validate();
    fc.validate();
    if (spec.sample_rate != fc.sample_rate) throw ValidationError("scene and feature sample rates differ");
    Dataset d;
    d.vocab = spec.vocabulary();
    for (std::size_t k = 0; k < count; ++k) {
        const auto r = render_scene(spec, first + k);
        auto ann = k < weak_count ? weaken(r.annotation) : r.annotation;
        d.examples.push_back({std::move(ann), log_mel(r.waveform, fc)});
    }
    return d;
}

std::filesystem::path write_synthetic_dataset(const SyntheticSceneSpec& spec, const std::filesystem::path& dir,
                                              std::uint64_t first, std::size_t count, const FeatureConfig& fc,
                                              std::size_t weak_count) {
    spec.validate();
    fc.validate();
    if (spec.sample_rate != fc.sample_rate) throw ValidationError("scene and feature sample rates differ");
    std::filesystem::create_directories(dir / "audio");
    std::filesystem::create_directories(dir / "features");
    std::vector<ClipAnnotation> clips;
    for (std::size_t k = 0; k < count; ++k) {
        const auto r = render_scene(spec, first + k);
        auto ann = k < weak_count ? weaken(r.annotation) : r.annotation;
        const std::string audio = "audio/" + ann.clip_id + ".wav";
        const std::string feats = "features/" + ann.clip_id + ".bin";
        write_wav(dir / audio, r.waveform);
        save_features(dir / feats, ann.clip_id, log_mel(r.waveform, fc));
        ann.audio_path = audio;
        ann.features_path = feats;
        clips.push_back(std::move(ann));
    }
    const auto manifest = dir / "manifest.jsonl";
    save_manifest(manifest, clips);
    return manifest;
}

NormStats dataset_norm_stats(const Dataset& d) {
    std::vector<const LogMelSpectrogram*> specs;
    for (const auto& e : d.examples) specs.push_back(&e.features);
    return NormStats::compute(specs);
}

void normalize_dataset(Dataset& d, const NormStats& stats) {
    for (auto& e : d.examples) e.features = normalize(e.features, stats);
}

// ---- checkpoints ------------------------------------------------------------

SedtModel Checkpoint::model() const {
    SedtModel m(config.model, config.seed);
    if (!parameters.empty()) {
        std::istringstream is(parameters);
        m.load_parameters(is);
    }
    return m;
}

void Checkpoint::set_model(const SedtModel& m) {
    std::ostringstream os;
    m.save_parameters(os);
    parameters = os.str();
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot write " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ParseError("failed writing " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

void Checkpoint::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    json meta;
    meta["format"] = 1;
    meta["config"] = json::parse(config.to_json());
    meta["classes"] = vocab.classes();
    meta["norm_mean"] = norm.mean;
    meta["norm_stddev"] = norm.stddev;
    meta["stage"] = to_string(stage);
    meta["epoch"] = epoch;
    meta["step"] = step;
    meta["best_metric"] = best_metric;
    meta["best_epoch"] = best_epoch;
    meta["seed"] = config.seed;
    write_file(dir / "meta.json", meta.dump(2) + "\n");
    write_file(dir / "model.bin", parameters);
    write_file(dir / "optimizer.bin", optimizer);
}

Checkpoint Checkpoint::load(const std::filesystem::path& dir) {
    Checkpoint c;
    json meta;
    try {
        meta = json::parse(read_file(dir / "meta.json"));
        if (meta.at("format").get<int>() != 1) throw ParseError("unsupported checkpoint format");
        c.config = TrainConfig::from_json(meta.at("config").dump());
        c.vocab = LabelVocabulary(meta.at("classes").get<std::vector<std::string>>());
        c.norm.mean = meta.at("norm_mean").get<std::vector<double>>();
        c.norm.stddev = meta.at("norm_stddev").get<std::vector<double>>();
        c.stage = stage_from_string(meta.at("stage").get<std::string>());
        c.epoch = meta.at("epoch").get<int>();
        c.step = meta.at("step").get<std::uint64_t>();
        c.best_metric = meta.at("best_metric").get<double>();
        c.best_epoch = meta.at("best_epoch").get<int>();
    } catch (const json::exception& e) {
        throw ParseError("bad checkpoint metadata in " + dir.string() + ": " + e.what());
    }
    c.parameters = read_file(dir / "model.bin");
    c.optimizer = read_file(dir / "optimizer.bin");
    (void)c.model();
    return c;
}

Checkpoint initial_checkpoint(const TrainConfig& cfg, const LabelVocabulary& vocab, const NormStats& norm) {
    cfg.validate();
    if (static_cast<std::size_t>(cfg.model.num_classes) != vocab.size()) {
        throw ValidationError("num_classes is " + std::to_string(cfg.model.num_classes) + " but the vocabulary has " +
                              std::to_string(vocab.size()) + " classes");
    }
    Checkpoint c;
    c.config = cfg;
    c.vocab = vocab;
    c.norm = norm;
    c.set_model(SedtModel(cfg.model, cfg.seed));
    return c;
}

// ---- training ---------------------------------------------------------------

std::string StepRecord::to_json() const {
    json j = {{"stage", sedt::to_string(stage)}, {"epoch", epoch}, {"step", step},          {"lr", lr},
              {"loss", loss},                    {"loc", loc},     {"cls", cls},            {"tag", tag},
              {"pooled_tag", pooled_tag},        {"grad_norm", grad_norm}, {"extra_matches", extra_matches}};
    return j.dump();
}

namespace {

ClipTargets clip_targets(const ClipAnnotation& ann, const LabelVocabulary& vocab) {
    ClipTargets t;
    t.strong = ann.supervision == Supervision::kStrong;
    if (t.strong) {
        t.events = ann.targets(vocab);
        std::set<std::string> tags = ann.weak_tags;
        for (const auto& e : ann.events) tags.insert(e.label);
        t.weak = tag_vector(tags, vocab);
    } else {
        t.weak = tag_vector(ann.weak_tags, vocab);
    }
    return t;
}

std::string describe_divergence(const StepRecord& r, const Batch& batch) {
    std::ostringstream os;
    os << "training diverged at " << to_string(r.stage) << " epoch " << r.epoch << " step " << r.step << " (lr " << r.lr
       << "): loss=" << r.loss << " loc=" << r.loc << " cls=" << r.cls << " tag=" << r.tag << "; clips:";
    for (const auto& a : batch.annotations) os << " " << a.clip_id;
    return os.str();
}

std::uint64_t stage_id(Stage s) { return s == Stage::kLearning ? 1 : 2; }

double validation_eb(const SedtModel& model, const Dataset& valid, const DecisionConfig& decision) {
    DecisionConfig d = decision;
    d.fusion = FusionStrategy::kNone;
    return evaluate_predictions(infer(model, valid), valid, d).event_based.macro_f1;
}

}  // namespace

StageResult train_stage(Stage stage, const TrainConfig& cfg, const Checkpoint& start, const Dataset& train,
                        const Dataset* valid, const TrainHooks& hooks) {
    cfg.validate();
    if (!(train.vocab == start.vocab)) throw ValidationError("training data vocabulary differs from the checkpoint's");
    if (valid && !(valid->vocab == start.vocab)) {
        throw ValidationError("validation data vocabulary differs from the checkpoint's");
    }
    if (stage == Stage::kLearning && start.stage == Stage::kFinetune) {
        throw ValidationError("cannot run the learning stage from a fine-tuning checkpoint");
    }
    const int total = cfg.stage_epochs(stage);
    const bool resume = start.stage == stage;
    if (resume && start.epoch >= total) return {start, start};
    if (!resume && total == 0) return {start, start};
    if (train.size() == 0) throw ValidationError("training set is empty");

    Checkpoint current = start;
    current.config = cfg;
    current.config.model = start.config.model;
    current.stage = stage;
    if (!resume) {
        current.epoch = 0;
        current.step = 0;
        current.best_metric = -1.0;
        current.best_epoch = -1;
        current.optimizer.clear();
    }
    SedtModel model = current.model();
    auto& params = model.parameters();
    AdamW opt(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
    if (!current.optimizer.empty()) {
        std::istringstream is(current.optimizer);
        opt.load(is);
    }

    const double eta0 = cfg.stage_lr(stage);
    const int drop = cfg.stage_epochs_drop(stage);
    const bool has_valid = valid && valid->size() > 0;
    StageResult result{current, current};

    for (int epoch = current.epoch; epoch < total; ++epoch) {
        const double lr = lr_schedule(epoch, eta0, drop);
        const auto order = batch_indices(train.size(), cfg.batch_size, derive_seed(cfg.seed, {stage_id(stage), 0xE0, static_cast<std::uint64_t>(epoch)}));
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < order.size(); ++b) {
            const Batch batch = collate(train.examples, order[b]);
            std::vector<std::unique_ptr<ag::Tape>> tapes;
            std::vector<ForwardGraph> graphs;
            std::vector<PredictionSet> preds;
            std::vector<ClipTargets> targets;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                std::mt19937_64 rng(derive_seed(cfg.seed, {stage_id(stage), static_cast<std::uint64_t>(epoch), b, i}));
                RunOptions opts;
                opts.training = true;
                opts.rng = &rng;
                tapes.push_back(std::make_unique<ag::Tape>());
                graphs.push_back(model.forward(*tapes.back(), batch.specs[i], batch.pad_masks[i], opts));
                preds.push_back(graphs.back().prediction());
                targets.push_back(clip_targets(batch.annotations[i], train.vocab));
            }
            std::mt19937_64 match_rng(
                derive_seed(cfg.seed, {stage_id(stage), static_cast<std::uint64_t>(epoch), b, 0xF17Eu}));
            OneToManyOptions otm{cfg.finetune, &match_rng};
            std::vector<PredictionGrad> grads;
            std::vector<LossBreakdown> parts;
            const double loss = mixed_batch_loss(preds, targets, cfg.loss, &grads, &parts,
                                                 stage == Stage::kFinetune ? &otm : nullptr);

            StepRecord rec;
            rec.stage = stage;
            rec.epoch = epoch;
            rec.step = current.step + 1;
            rec.lr = lr;
            rec.loss = loss;
            const double inv_b = 1.0 / static_cast<double>(batch.size());
            for (const auto& p : parts) {
                rec.loc += inv_b * p.loc_sum();
                rec.cls += inv_b * p.cls_sum();
                rec.tag += inv_b * p.tag;
                rec.pooled_tag += inv_b * p.pooled_tag;
                rec.extra_matches += p.extra_matches;
            }
            if (!std::isfinite(loss)) throw TrainingDiverged(describe_divergence(rec, batch));

            model.zero_grad();
            for (std::size_t i = 0; i < batch.size(); ++i) {
                const ag::Var l = attach_loss(*tapes[i], graphs[i], inv_b * parts[i].total, grads[i]);
                tapes[i]->backward(l);
            }
            rec.grad_norm = clip_grad_norm(params, cfg.grad_clip);
            if (!std::isfinite(rec.grad_norm)) throw TrainingDiverged(describe_divergence(rec, batch) + " (non-finite gradient)");
            opt.step(params, lr);
            current.step = rec.step;
            loss_sum += loss;
            if (hooks.on_step) hooks.on_step(rec);
        }

        current.epoch = epoch + 1;
        current.set_model(model);
        std::ostringstream os;
        opt.save(os);
        current.optimizer = os.str();

        EpochRecord er;
        er.stage = stage;
        er.epoch = epoch;
        er.mean_loss = loss_sum / static_cast<double>(order.size());
        if (has_valid && (current.epoch % cfg.validate_every == 0 || current.epoch == total)) {
            const double eb = validation_eb(model, *valid, cfg.decision);
            er.valid_eb = eb;
            if (eb > current.best_metric) {
                current.best_metric = eb;
                current.best_epoch = epoch;
                result.best = current;
            }
        } else if (!has_valid) {
            current.best_epoch = epoch;
            result.best = current;
        }
        result.last = current;
        if (hooks.on_epoch) hooks.on_epoch(er);
        if (hooks.on_checkpoint) hooks.on_checkpoint(current);
    }
    result.best.best_metric = current.best_metric;
    result.best.best_epoch = current.best_epoch;
    return result;
}

// ---- evaluation -------------------------------------------------------------

std::vector<PredictionSet> infer(const SedtModel& model, const Dataset& d) {
    std::vector<PredictionSet> out;
    out.reserve(d.size());
    for (const auto& e : d.examples) out.push_back(model.predict(e.features.values));
    return out;
}

namespace {

std::vector<LabeledEvent> to_labeled(const std::vector<EventPrediction>& events, const LabelVocabulary& vocab) {
    std::vector<LabeledEvent> out;
    for (const auto& e : events) out.push_back({vocab.name(e.class_id), e.segment.onset_s, e.segment.offset_s});
    return out;
}

}  // namespace

EvaluationReport evaluate_predictions(const std::vector<PredictionSet>& preds, const Dataset& d,
                                      const DecisionConfig& decision) {
    decision.validate();
    if (preds.size() != d.size()) throw ValidationError("one prediction per clip is required");
    std::vector<ClipEvents> pred_events, ref_events;
    std::vector<RowVector> tags;
    std::vector<std::set<std::string>> ref_tags;
    for (std::size_t k = 0; k < d.size(); ++k) {
        const auto& ann = d.examples[k].annotation;
        if (preds[k].num_classes() != static_cast<int>(d.vocab.size())) {
            throw ValidationError("model classes do not match the dataset vocabulary");
        }
        std::set<std::string> clip_tags = ann.weak_tags;
        if (ann.supervision == Supervision::kStrong) {
            for (const auto& e : ann.events) clip_tags.insert(e.label);
            pred_events.push_back({ann.clip_len_s, to_labeled(postprocess(preds[k], ann.clip_len_s, decision), d.vocab)});
            ref_events.push_back({ann.clip_len_s, ann.events});
        }
        tags.push_back(preds[k].tag_probs);
        ref_tags.push_back(std::move(clip_tags));
    }
    EvaluationReport r;
    r.strategy = to_string(decision.fusion);
    r.event_based = event_based_f1(pred_events, ref_events, d.vocab);
    r.segment_based = segment_based_f1(pred_events, ref_events, d.vocab);
    r.tagging = tagging_macro_f1(tags, ref_tags, d.vocab, decision.tau_tag);
    return r;
}

std::vector<EvaluationReport> evaluate(const SedtModel& model, const Dataset& d, const DecisionConfig& base,
                                       const std::vector<FusionStrategy>& strategies) {
    const auto preds = infer(model, d);
    std::vector<EvaluationReport> out;
    for (auto s : strategies) {
        DecisionConfig cfg = base;
        cfg.fusion = s;
        out.push_back(evaluate_predictions(preds, d, cfg));
    }
    return out;
}

std::string prediction_to_json_line(const std::string& clip_id, const std::vector<EventPrediction>& events,
                                    const RowVector& tag_probs, const LabelVocabulary& vocab) {
    json j;
    j["clip_id"] = clip_id;
    j["events"] = json::array();
    for (const auto& e : events) {
        j["events"].push_back({{"label", vocab.name(e.class_id)},
                               {"onset_s", e.segment.onset_s},
                               {"offset_s", e.segment.offset_s},
                               {"prob", e.prob},
                               {"query", e.query_index}});
    }
    j["tags"] = json::object();
    for (std::size_t c = 0; c < vocab.size(); ++c) j["tags"][vocab.name(static_cast<int>(c))] = tag_probs(static_cast<Eigen::Index>(c));
    return j.dump();
}

// ---- sweep ------------------------------------------------------------------

std::vector<SweepRow> sweep(const Checkpoint& base, const std::vector<double>& epsilons,
                            const std::vector<std::optional<double>>& alphas,
                            const std::vector<FusionStrategy>& strategies, const Dataset& train,
                            const Dataset& eval_set) {
    std::vector<SweepRow> rows;
    for (double eps : epsilons) {
        for (const auto& alpha : alphas) {
            TrainConfig cfg = base.config;
            cfg.finetune.epsilon = eps;
            cfg.finetune.retain_all = !alpha.has_value();
            if (alpha) cfg.finetune.alpha = *alpha;
            const auto tuned = train_stage(Stage::kFinetune, cfg, base, train).last;
            const auto reports = evaluate(tuned.model(), eval_set, cfg.decision, strategies);
            std::ostringstream a;
            if (alpha) a << *alpha;
            else a << "all";
            for (const auto& r : reports) {
                rows.push_back({eps, a.str(), r.strategy, r.event_based.macro_f1, r.segment_based.macro_f1,
                                r.tagging.macro_f1});
            }
        }
    }
    return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "epsilon,alpha,strategy,Eb,Sb,At\n";
    os << std::setprecision(6);
    for (const auto& r : rows) {
        os << r.epsilon << "," << r.alpha << "," << r.strategy << "," << r.eb << "," << r.sb << "," << r.at << "\n";
    }
    return os.str();
}

}  // namespace sedt
