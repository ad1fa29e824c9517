#include "sedt/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace sedt {

using nlohmann::json;

std::string to_string(Supervision s) { return s == Supervision::kStrong ? "strong" : "weak"; }

Supervision supervision_from_string(const std::string& s) {
    if (s == "strong") return Supervision::kStrong;
    if (s == "weak") return Supervision::kWeak;
    throw ValidationError("supervision must be 'strong' or 'weak', got '" + s + "'");
}

void ClipAnnotation::validate() const {
    if (!(clip_len_s > 0.0) || !std::isfinite(clip_len_s)) {
        throw ValidationError("clip '" + clip_id + "': duration must be positive");
    }
    for (const auto& e : events) {
        if (!(e.onset_s >= 0.0) || !(e.offset_s <= clip_len_s)) {
            throw ValidationError("clip '" + clip_id + "': event '" + e.label + "' lies outside the clip");
        }
        if (e.offset_s < e.onset_s) {
            throw ValidationError("clip '" + clip_id + "': event '" + e.label + "' has offset < onset");
        }
        if (!weak_tags.count(e.label)) {
            throw ValidationError("clip '" + clip_id + "': weak tags do not include event class '" + e.label + "'");
        }
    }
}

std::vector<EventInstance> ClipAnnotation::targets(const LabelVocabulary& vocab) const {
    std::vector<EventInstance> out;
    out.reserve(events.size());
    for (const auto& e : events) {
        out.push_back({vocab.index_of(e.label), segment_to_boundary({e.onset_s, e.offset_s}, clip_len_s)});
    }
    return out;
}

ClipAnnotation weaken(const ClipAnnotation& ann) {
    ClipAnnotation out = ann;
    // An already-weak clip keeps its tags, which makes weaken idempotent.
    if (!ann.events.empty()) {
        out.weak_tags.clear();
        for (const auto& e : ann.events) out.weak_tags.insert(e.label);
    }
    out.events.clear();
    out.supervision = Supervision::kWeak;
    return out;
}

// ---- synthetic soundscapes ----------------------------------------------

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    std::uint64_t h = mix(seed);
    for (auto p : path) h = mix(h ^ mix(p + 0x632be59bd9b4e019ULL));
    return h;
}

void SyntheticSceneSpec::validate() const {
    if (event_templates.empty()) throw ValidationError("scene spec needs at least one event template");
    if (min_events < 0 || max_events < min_events) throw ValidationError("events_per_clip range is not well-ordered");
    if (max_snr_db < min_snr_db) throw ValidationError("snr range is not well-ordered");
    if (!(clip_len_s > 0.0) || sample_rate <= 0) throw ValidationError("clip length and sample rate must be positive");
    if (!(background_rms >= 0.0) || fade_s < 0.0) throw ValidationError("background level and fade must be >= 0");
    for (const auto& t : event_templates) {
        if (!(t.min_duration_s > 0.0) || t.max_duration_s < t.min_duration_s) {
            throw ValidationError("template '" + t.label + "': duration range is not well-ordered");
        }
        if (t.min_duration_s > clip_len_s) {
            throw ValidationError("template '" + t.label + "': minimum duration exceeds the clip");
        }
        if (!(t.min_freq_hz > 0.0) || t.max_freq_hz < t.min_freq_hz || t.max_freq_hz >= 0.5 * sample_rate) {
            throw ValidationError("template '" + t.label + "': frequency range must lie in (0, Nyquist)");
        }
    }
    (void)vocabulary();
}

LabelVocabulary SyntheticSceneSpec::vocabulary() const {
    std::vector<std::string> names;
    for (const auto& t : event_templates) {
        if (std::find(names.begin(), names.end(), t.label) == names.end()) names.push_back(t.label);
    }
    return LabelVocabulary(std::move(names));
}

SyntheticSceneSpec SyntheticSceneSpec::defaults(std::uint64_t seed) {
    SyntheticSceneSpec s;
    s.event_templates = {
        {"low_tone", SourceKind::kTone, 0.5, 2.5, 250.0, 450.0, true},
        {"high_tone", SourceKind::kTone, 0.5, 2.5, 2000.0, 3000.0, true},
        {"up_chirp", SourceKind::kChirp, 0.5, 2.5, 600.0, 1800.0, true},
        {"down_chirp", SourceKind::kChirp, 0.5, 2.5, 600.0, 1800.0, false},
        {"noise_burst", SourceKind::kNoiseBurst, 0.5, 2.5, 3500.0, 6000.0, true},
    };
    s.seed = seed;
    return s;
}

namespace {

std::string kind_name(SourceKind k) {
    switch (k) {
        case SourceKind::kTone: return "tone";
        case SourceKind::kChirp: return "chirp";
        case SourceKind::kNoiseBurst: return "noise-burst";
    }
    return "tone";
}

SourceKind kind_from_name(const std::string& s) {
    if (s == "tone") return SourceKind::kTone;
    if (s == "chirp") return SourceKind::kChirp;
    if (s == "noise-burst") return SourceKind::kNoiseBurst;
    throw ValidationError("unknown generator kind '" + s + "'");
}

}  // namespace

SyntheticSceneSpec SyntheticSceneSpec::from_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("cannot open scene spec " + path.string());
    SyntheticSceneSpec s;
    try {
        const json j = json::parse(is);
        for (const auto& t : j.at("event_templates")) {
            EventTemplate e;
            e.label = t.at("label").get<std::string>();
            e.kind = kind_from_name(t.at("kind").get<std::string>());
            e.min_duration_s = t.at("duration_s").at(0).get<double>();
            e.max_duration_s = t.at("duration_s").at(1).get<double>();
            e.min_freq_hz = t.at("freq_hz").at(0).get<double>();
            e.max_freq_hz = t.at("freq_hz").at(1).get<double>();
            e.sweep_up = t.value("sweep_up", true);
            s.event_templates.push_back(e);
        }
        s.min_events = j.at("events_per_clip").at(0).get<int>();
        s.max_events = j.at("events_per_clip").at(1).get<int>();
        s.min_snr_db = j.at("snr_db").at(0).get<double>();
        s.max_snr_db = j.at("snr_db").at(1).get<double>();
        s.clip_len_s = j.value("clip_len_s", 10.0);
        s.sample_rate = j.value("sample_rate", 16000);
        s.background_rms = j.value("background_rms", 0.01);
        s.fade_s = j.value("fade_s", 0.01);
        s.seed = j.value("seed", std::uint64_t{0});
    } catch (const json::exception& e) {
        throw ParseError("bad scene spec " + path.string() + ": " + e.what());
    }
    s.validate();
    return s;
}

std::string SyntheticSceneSpec::to_json() const {
    json j;
    j["event_templates"] = json::array();
    for (const auto& t : event_templates) {
        j["event_templates"].push_back({{"label", t.label},
                                        {"kind", kind_name(t.kind)},
                                        {"duration_s", {t.min_duration_s, t.max_duration_s}},
                                        {"freq_hz", {t.min_freq_hz, t.max_freq_hz}},
                                        {"sweep_up", t.sweep_up}});
    }
    j["events_per_clip"] = {min_events, max_events};
    j["snr_db"] = {min_snr_db, max_snr_db};
    j["clip_len_s"] = clip_len_s;
    j["sample_rate"] = sample_rate;
    j["background_rms"] = background_rms;
    j["fade_s"] = fade_s;
    j["seed"] = seed;
    return j.dump(2);
}

namespace {

// RBJ band-pass biquad (0 dB peak gain).
std::vector<double> bandpass(const std::vector<double>& x, double lo, double hi, int sr) {
    const double fc = std::sqrt(lo * hi);
    const double q = fc / std::max(hi - lo, 1.0);
    const double w0 = 2.0 * std::numbers::pi * fc / sr;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    const double b0 = alpha / a0, b2 = -alpha / a0;
    const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
    std::vector<double> y(x.size());
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (std::size_t n = 0; n < x.size(); ++n) {
        y[n] = b0 * x[n] + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x[n];
        y2 = y1;
        y1 = y[n];
    }
    return y;
}

}  // namespace

RenderedScene render_scene(const SyntheticSceneSpec& spec, std::uint64_t clip_index) {
    spec.validate();
    std::mt19937_64 rng(derive_seed(spec.seed, {clip_index}));
    const int sr = spec.sample_rate;
    const auto n_samples = static_cast<std::size_t>(std::llround(spec.clip_len_s * sr));

    RenderedScene scene;
    scene.waveform.sample_rate = sr;
    scene.waveform.samples.assign(n_samples, 0.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& s : scene.waveform.samples) s = spec.background_rms * gauss(rng);

    std::uniform_int_distribution<int> count_dist(spec.min_events, spec.max_events);
    const int n_events = count_dist(rng);

    struct Placed {
        LabeledEvent event;
        std::vector<double> track;
    };
    std::vector<Placed> placed;
    for (int e = 0; e < n_events; ++e) {
        const auto& tpl = spec.event_templates[std::uniform_int_distribution<std::size_t>(
            0, spec.event_templates.size() - 1)(rng)];
        const double dur_s = std::min(
            std::uniform_real_distribution<double>(tpl.min_duration_s, tpl.max_duration_s)(rng), spec.clip_len_s);
        const auto len = std::max<std::size_t>(1, std::min(n_samples, static_cast<std::size_t>(std::llround(dur_s * sr))));
        const std::size_t start = std::uniform_int_distribution<std::size_t>(0, n_samples - len)(rng);
        const double snr_db = std::uniform_real_distribution<double>(spec.min_snr_db, spec.max_snr_db)(rng);

        std::vector<double> body(len);
        switch (tpl.kind) {
            case SourceKind::kTone: {
                const double f = std::uniform_real_distribution<double>(tpl.min_freq_hz, tpl.max_freq_hz)(rng);
                const double phase = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
                for (std::size_t n = 0; n < len; ++n) {
                    body[n] = std::sin(2.0 * std::numbers::pi * f * static_cast<double>(n) / sr + phase);
                }
                break;
            }
            case SourceKind::kChirp: {
                const double f0 = tpl.sweep_up ? tpl.min_freq_hz : tpl.max_freq_hz;
                const double f1 = tpl.sweep_up ? tpl.max_freq_hz : tpl.min_freq_hz;
                const double d = static_cast<double>(len) / sr;
                for (std::size_t n = 0; n < len; ++n) {
                    const double t = static_cast<double>(n) / sr;
                    body[n] = std::sin(2.0 * std::numbers::pi * (f0 * t + 0.5 * (f1 - f0) * t * t / d));
                }
                break;
            }
            case SourceKind::kNoiseBurst: {
                for (auto& b : body) b = gauss(rng);
                body = bandpass(body, tpl.min_freq_hz, tpl.max_freq_hz, sr);
                break;
            }
        }

        const auto fade = std::min(len / 2, static_cast<std::size_t>(std::llround(spec.fade_s * sr)));
        for (std::size_t n = 0; n < fade; ++n) {
            const double g = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n) / static_cast<double>(fade));
            body[n] *= g;
            body[len - 1 - n] *= g;
        }
        double energy = 0.0;
        for (double b : body) energy += b * b;
        const double rms = std::sqrt(energy / static_cast<double>(len));
        const double target = std::max(spec.background_rms, 1e-3) * std::pow(10.0, snr_db / 20.0);
        const double gain = rms > 0.0 ? target / rms : 0.0;

        Placed p;
        p.event = {tpl.label, static_cast<double>(start) / sr, static_cast<double>(start + len) / sr};
        p.track.assign(n_samples, 0.0);
        for (std::size_t n = 0; n < len; ++n) p.track[start + n] = gain * body[n];
        placed.push_back(std::move(p));
    }
    std::stable_sort(placed.begin(), placed.end(), [](const Placed& a, const Placed& b) {
        return a.event.onset_s < b.event.onset_s;
    });

    std::ostringstream id;
    id << "synth_" << spec.seed << "_" << std::setw(6) << std::setfill('0') << clip_index;
    scene.annotation.clip_id = id.str();
    scene.annotation.clip_len_s = static_cast<double>(n_samples) / sr;
    for (auto& p : placed) {
        for (std::size_t n = 0; n < n_samples; ++n) scene.waveform.samples[n] += p.track[n];
        scene.annotation.events.push_back(p.event);
        scene.annotation.weak_tags.insert(p.event.label);
        scene.sources.push_back(std::move(p.track));
    }
    return scene;
}

// ---- manifests -------------------------------------------------------------

namespace {

std::optional<std::string> optional_string(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
}

}  // namespace

ClipAnnotation annotation_from_json_line(const std::string& line, const LabelVocabulary* vocab) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("record is not a JSON object");

    ClipAnnotation ann;
    try {
        ann.clip_id = j.at("clip_id").get<std::string>();
        ann.clip_len_s = j.at("duration_s").get<double>();
        ann.audio_path = optional_string(j, "audio");
        ann.features_path = optional_string(j, "features");
        if (j.contains("events")) {
            for (const auto& e : j.at("events")) {
                ann.events.push_back(
                    {e.at("label").get<std::string>(), e.at("onset_s").get<double>(), e.at("offset_s").get<double>()});
            }
        }
        const bool has_weak = j.contains("weak") && !j.at("weak").is_null();
        if (has_weak) {
            for (const auto& t : j.at("weak")) ann.weak_tags.insert(t.get<std::string>());
        } else {
            for (const auto& e : ann.events) ann.weak_tags.insert(e.label);
        }
        ann.supervision = supervision_from_string(j.value("supervision", std::string("strong")));
    } catch (const json::exception& e) {
        throw ParseError(std::string("bad record: ") + e.what());
    } catch (const ValidationError& e) {
        throw ParseError(e.what());
    }

    for (const auto& e : ann.events) {
        if (e.offset_s < e.onset_s) {
            throw ParseError("event '" + e.label + "' has offset_s < onset_s");
        }
    }
    if (vocab) {
        for (const auto& e : ann.events) {
            if (!vocab->contains(e.label)) throw ParseError("unknown class name '" + e.label + "'");
        }
        for (const auto& t : ann.weak_tags) {
            if (!vocab->contains(t)) throw ParseError("unknown class name '" + t + "'");
        }
    }
    if (ann.supervision == Supervision::kWeak && !ann.events.empty()) {
        throw ParseError("weak record carries strong events");
    }
    try {
        ann.validate();
    } catch (const ValidationError& e) {
        throw ParseError(e.what());
    }
    return ann;
}

std::string annotation_to_json_line(const ClipAnnotation& ann) {
    json j;
    j["clip_id"] = ann.clip_id;
    j["audio"] = ann.audio_path ? json(*ann.audio_path) : json(nullptr);
    j["features"] = ann.features_path ? json(*ann.features_path) : json(nullptr);
    j["duration_s"] = ann.clip_len_s;
    j["events"] = json::array();
    for (const auto& e : ann.events) {
        j["events"].push_back({{"label", e.label}, {"onset_s", e.onset_s}, {"offset_s", e.offset_s}});
    }
    j["weak"] = json::array();
    for (const auto& t : ann.weak_tags) j["weak"].push_back(t);
    j["supervision"] = to_string(ann.supervision);
    return j.dump();
}

std::vector<ClipAnnotation> load_manifest(const std::filesystem::path& path, const LabelVocabulary* vocab) {
    std::ifstream is(path);
    if (!is) throw ParseError("cannot open manifest " + path.string());
    std::vector<ClipAnnotation> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(annotation_from_json_line(line, vocab));
        } catch (const ParseError& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void save_manifest(const std::filesystem::path& path, const std::vector<ClipAnnotation>& clips) {
    std::ofstream os(path);
    if (!os) throw ParseError("cannot write manifest " + path.string());
    for (const auto& c : clips) os << annotation_to_json_line(c) << "\n";
}

// ---- audio files -----------------------------------------------------------

namespace {

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const std::vector<char>& buf, std::size_t at) {
    if (at + sizeof(T) > buf.size()) throw ParseError("truncated WAV file");
    T v;
    std::memcpy(&v, buf.data() + at, sizeof(T));
    return v;
}

}  // namespace

void write_wav(const std::filesystem::path& path, const Waveform& w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot write " + path.string());
    const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
    os.write("RIFF", 4);
    put<std::uint32_t>(os, 36 + data_bytes);
    os.write("WAVEfmt ", 8);
    put<std::uint32_t>(os, 16);
    put<std::uint16_t>(os, 1);
    put<std::uint16_t>(os, 1);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate) * 2);
    put<std::uint16_t>(os, 2);
    put<std::uint16_t>(os, 16);
    os.write("data", 4);
    put<std::uint32_t>(os, data_bytes);
    for (double s : w.samples) {
        put<std::int16_t>(os, static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 1.0) * 32767.0)));
    }
}

Waveform read_wav(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
        throw ParseError(path.string() + " is not a RIFF/WAVE file");
    }
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    std::size_t at = 12;
    while (at + 8 <= buf.size()) {
        const std::string id(buf.data() + at, 4);
        const auto size = get<std::uint32_t>(buf, at + 4);
        const std::size_t body = at + 8;
        if (id == "fmt ") {
            format = get<std::uint16_t>(buf, body);
            channels = get<std::uint16_t>(buf, body + 2);
            rate = get<std::uint32_t>(buf, body + 4);
            bits = get<std::uint16_t>(buf, body + 14);
        } else if (id == "data") {
            if (channels == 0) throw ParseError(path.string() + ": data chunk before fmt chunk");
            const std::size_t width = bits / 8;
            const std::size_t frames = std::min<std::size_t>(size, buf.size() - body) / (width * channels);
            Waveform w;
            w.sample_rate = static_cast<int>(rate);
            w.samples.resize(frames);
            for (std::size_t f = 0; f < frames; ++f) {
                double acc = 0.0;
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t p = body + (f * channels + c) * width;
                    if (format == 1 && bits == 16) acc += get<std::int16_t>(buf, p) / 32768.0;
                    else if (format == 1 && bits == 32) acc += get<std::int32_t>(buf, p) / 2147483648.0;
                    else if (format == 3 && bits == 32) acc += get<float>(buf, p);
                    else if (format == 3 && bits == 64) acc += get<double>(buf, p);
                    else throw ParseError(path.string() + ": unsupported WAV sample format");
                }
                w.samples[f] = acc / channels;
            }
            return w;
        }
        at = body + size + (size & 1u);
    }
    throw ParseError(path.string() + ": no data chunk");
}

// ---- batching -------------------------------------------------------------

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed,
                                                    bool shuffle) {
    if (batch_size == 0) throw ValidationError("batch size must be >= 1");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (shuffle) {
        std::mt19937_64 rng(derive_seed(shuffle_seed, {0x5eedULL}));
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
            std::swap(order[i - 1], order[j]);
        }
    }
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t at = 0; at < n; at += batch_size) {
        groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                            order.begin() + static_cast<std::ptrdiff_t>(std::min(n, at + batch_size)));
    }
    return groups;
}

Batch collate(const std::vector<Example>& examples, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ValidationError("cannot collate an empty batch");
    Eigen::Index t_max = 0;
    const Eigen::Index bins = examples.at(indices.front()).features.bins();
    for (auto i : indices) {
        const auto& f = examples.at(i).features;
        if (f.bins() != bins) throw ValidationError("examples disagree on feature bins");
        t_max = std::max(t_max, f.frames());
    }
    Batch b;
    for (auto i : indices) {
        const auto& ex = examples[i];
        Matrix m = Matrix::Zero(t_max, bins);
        m.topRows(ex.features.frames()) = ex.features.values;
        std::vector<char> mask(static_cast<std::size_t>(t_max), 0);
        std::fill(mask.begin() + ex.features.frames(), mask.end(), 1);
        b.specs.push_back(std::move(m));
        b.pad_masks.push_back(std::move(mask));
        b.annotations.push_back(ex.annotation);
        b.supervision.push_back(ex.annotation.supervision);
        b.indices.push_back(i);
    }
    return b;
}

std::vector<Batch> make_batches(const std::vector<Example>& examples, std::size_t batch_size,
                                std::uint64_t shuffle_seed) {
    std::vector<Batch> out;
    for (const auto& g : batch_indices(examples.size(), batch_size, shuffle_seed)) {
        out.push_back(collate(examples, g));
    }
    return out;
}

}  // namespace sedt
