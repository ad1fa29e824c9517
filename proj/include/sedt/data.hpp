#pragma once

// Synthetic soundscapes with exact labels, JSON-lines manifests, and padded
// batching.

#include "sedt/core.hpp"
#include "sedt/features.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace sedt {

enum class Supervision { kStrong, kWeak };

std::string to_string(Supervision s);
Supervision supervision_from_string(const std::string& s);

struct LabeledEvent {
    std::string label;
    double onset_s = 0.0;
    double offset_s = 0.0;

    friend bool operator==(const LabeledEvent&, const LabeledEvent&) = default;
};

struct ClipAnnotation {
    std::string clip_id;
    double clip_len_s = 10.0;
    std::vector<LabeledEvent> events;
    std::set<std::string> weak_tags;
    Supervision supervision = Supervision::kStrong;
    std::optional<std::string> audio_path;
    std::optional<std::string> features_path;

    /// Checks event ranges and that weak tags cover every event class.
    void validate() const;
    /// Normalized targets under `vocab`; unknown labels throw ValidationError.
    std::vector<EventInstance> targets(const LabelVocabulary& vocab) const;

    friend bool operator==(const ClipAnnotation&, const ClipAnnotation&) = default;
};

/// Drops the event list and keeps the distinct event classes as weak tags.
ClipAnnotation weaken(const ClipAnnotation& ann);

// ---- synthetic soundscapes ----------------------------------------------

enum class SourceKind { kTone, kChirp, kNoiseBurst };

struct EventTemplate {
    std::string label;
    SourceKind kind = SourceKind::kTone;
    double min_duration_s = 0.5;
    double max_duration_s = 2.5;
    double min_freq_hz = 300.0;
    double max_freq_hz = 500.0;
    bool sweep_up = true;  // chirps only
};

struct SyntheticSceneSpec {
    std::vector<EventTemplate> event_templates;
    int min_events = 1;
    int max_events = 4;
    double min_snr_db = 6.0;
    double max_snr_db = 20.0;
    double clip_len_s = 10.0;
    int sample_rate = 16000;
    double background_rms = 0.01;
    double fade_s = 0.01;
    std::uint64_t seed = 0;

    void validate() const;
    LabelVocabulary vocabulary() const;

    /// Five classes: low tone, high tone, up-chirp, down-chirp, noise burst.
    static SyntheticSceneSpec defaults(std::uint64_t seed = 0);
    static SyntheticSceneSpec from_json_file(const std::filesystem::path& path);
    std::string to_json() const;
};

struct RenderedScene {
    Waveform waveform;
    ClipAnnotation annotation;
    /// Isolated source track per annotated event, full clip length.
    std::vector<std::vector<double>> sources;
};

RenderedScene render_scene(const SyntheticSceneSpec& spec, std::uint64_t clip_index);

inline std::pair<Waveform, ClipAnnotation> generate_scene(const SyntheticSceneSpec& spec, std::uint64_t clip_index) {
    auto r = render_scene(spec, clip_index);
    return {std::move(r.waveform), std::move(r.annotation)};
}

/// Independent 64-bit stream seed for (seed, a, b, ...).
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

// ---- manifests -------------------------------------------------------------

/// Parses one JSON-lines manifest. Throws ParseError naming the offending line.
std::vector<ClipAnnotation> load_manifest(const std::filesystem::path& path,
                                          const LabelVocabulary* vocab = nullptr);
void save_manifest(const std::filesystem::path& path, const std::vector<ClipAnnotation>& clips);

ClipAnnotation annotation_from_json_line(const std::string& line, const LabelVocabulary* vocab);
std::string annotation_to_json_line(const ClipAnnotation& ann);

// ---- audio files -----------------------------------------------------------

/// 16-bit PCM mono.
void write_wav(const std::filesystem::path& path, const Waveform& w);
/// PCM 16/32-bit or IEEE float; channels are averaged.
Waveform read_wav(const std::filesystem::path& path);

// ---- batching -------------------------------------------------------------

struct Example {
    ClipAnnotation annotation;
    LogMelSpectrogram features;
};

struct Batch {
    std::vector<Matrix> specs;                  // each T_max x F0
    std::vector<std::vector<char>> pad_masks;   // each T_max; 1 = padding
    std::vector<ClipAnnotation> annotations;
    std::vector<Supervision> supervision;
    std::vector<std::size_t> indices;           // positions in the source list

    std::size_t size() const { return specs.size(); }
};

/// Shuffled index groups covering [0, n) once; deterministic in `shuffle_seed`.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed,
                                                    bool shuffle = true);

Batch collate(const std::vector<Example>& examples, const std::vector<std::size_t>& indices);

std::vector<Batch> make_batches(const std::vector<Example>& examples, std::size_t batch_size,
                                std::uint64_t shuffle_seed);

}  // namespace sedt
