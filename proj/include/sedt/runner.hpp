#pragma once

// Two-stage training (one-to-one learning, one-to-many fine-tuning),
// checkpoints, evaluation, prediction export and the fine-tuning sweep.

#include "sedt/data.hpp"
#include "sedt/features.hpp"
#include "sedt/losses.hpp"
#include "sedt/metrics.hpp"
#include "sedt/model.hpp"
#include "sedt/postprocess.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedt {

enum class Stage { kLearning, kFinetune };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

/// Step decay: eta0 * 0.1^floor(epoch / epochs_drop).
double lr_schedule(int epoch, double eta0, int epochs_drop);

struct TrainConfig {
    std::size_t batch_size = 16;
    int epochs_learning = 200;
    int epochs_finetune = 50;
    double lr_learning = 1e-4;
    double lr_finetune = 1e-5;
    int epochs_drop = 0;  // <= 0: the stage length, i.e. a constant rate
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 1e-4;
    double grad_clip = 0.1;  // global L2 norm; <= 0 disables
    std::uint64_t seed = 0;
    int validate_every = 1;
    LossWeights loss;
    FineTuneConfig finetune;
    DecisionConfig decision;
    ModelConfig model = desk_model();
    FeatureConfig features;
    std::string train_manifest;
    std::string valid_manifest;

    void validate() const;
    int stage_epochs(Stage s) const { return s == Stage::kLearning ? epochs_learning : epochs_finetune; }
    double stage_lr(Stage s) const { return s == Stage::kLearning ? lr_learning : lr_finetune; }
    int stage_epochs_drop(Stage s) const;

    /// Flat key/value JSON document; unknown keys are rejected.
    static TrainConfig from_json(const std::string& text);
    static TrainConfig from_file(const std::filesystem::path& path);
    std::string to_json() const;

    static ModelConfig desk_model();
};

/// Decoupled-weight-decay Adam over a model's parameter list.
class AdamW {
public:
    AdamW() = default;
    AdamW(const std::vector<ag::Parameter>& params, double beta1, double beta2, double eps, double weight_decay);

    void step(std::vector<ag::Parameter>& params, double lr);
    std::uint64_t steps() const { return t_; }

    void save(std::ostream& os) const;
    void load(std::istream& is);

private:
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
    std::uint64_t t_ = 0;
    std::vector<Matrix> m_, v_;
};

/// Rescales all gradients so their global L2 norm is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(std::vector<ag::Parameter>& params, double max_norm);

/// A training set on disk turned into normalized model inputs.
struct Dataset {
    LabelVocabulary vocab;
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
    Dataset subset(Supervision s) const;
};

/// Reads a manifest and resolves every clip's features: a cached feature file
/// if present, otherwise the audio file. Relative paths are taken from the
/// manifest's directory. Features are not normalized.
Dataset load_dataset(const std::filesystem::path& manifest, const LabelVocabulary* vocab, const FeatureConfig& fc);

/// Renders clips [first, first + count) of a synthetic scene spec in memory.
/// Clips whose index is below `first + weak_count` are weakened.
Dataset synthesize_dataset(const SyntheticSceneSpec& spec, std::uint64_t first, std::size_t count,
                           const FeatureConfig& fc, std::size_t weak_count = 0);

/// Writes audio/<id>.wav, features/<id>.bin and manifest.jsonl under `dir`.
/// Returns the manifest path.
std::filesystem::path write_synthetic_dataset(const SyntheticSceneSpec& spec, const std::filesystem::path& dir,
                                              std::uint64_t first, std::size_t count, const FeatureConfig& fc,
                                              std::size_t weak_count = 0);

/// Normalization statistics over every clip of a dataset.
NormStats dataset_norm_stats(const Dataset& d);
void normalize_dataset(Dataset& d, const NormStats& stats);

struct Checkpoint {
    TrainConfig config;
    LabelVocabulary vocab;
    NormStats norm;
    Stage stage = Stage::kLearning;
    int epoch = 0;             // completed epochs of `stage`
    std::uint64_t step = 0;    // completed optimizer steps of `stage`
    double best_metric = -1.0;
    int best_epoch = -1;
    std::string parameters;    // SedtModel::save_parameters blob
    std::string optimizer;     // AdamW::save blob (empty before the first step)

    SedtModel model() const;
    void set_model(const SedtModel& m);

    /// A directory holding model.bin, optimizer.bin and meta.json.
    void save(const std::filesystem::path& dir) const;
    static Checkpoint load(const std::filesystem::path& dir);
};

/// A freshly initialized checkpoint for a configuration and vocabulary.
Checkpoint initial_checkpoint(const TrainConfig& cfg, const LabelVocabulary& vocab, const NormStats& norm);

struct StepRecord {
    Stage stage = Stage::kLearning;
    int epoch = 0;
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double loc = 0.0;
    double cls = 0.0;
    double tag = 0.0;
    double pooled_tag = 0.0;
    double grad_norm = 0.0;
    std::size_t extra_matches = 0;

    std::string to_json() const;
};

struct EpochRecord {
    Stage stage = Stage::kLearning;
    int epoch = 0;
    double mean_loss = 0.0;
    std::optional<double> valid_eb;
};

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
    /// Called with the checkpoint after every epoch (e.g. to persist it).
    std::function<void(const Checkpoint&)> on_checkpoint;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct StageResult {
    Checkpoint best;  // highest validation Eb, or the last epoch without validation data
    Checkpoint last;
};

/// Runs one stage. `start` is the learning-stage checkpoint for fine-tuning,
/// a same-stage checkpoint to resume from, or an initial checkpoint. The stage
/// runs until cfg.stage_epochs(stage) epochs are complete.
StageResult train_stage(Stage stage, const TrainConfig& cfg, const Checkpoint& start, const Dataset& train,
                        const Dataset* valid = nullptr, const TrainHooks& hooks = {});

/// Final-block predictions for every clip of a dataset.
std::vector<PredictionSet> infer(const SedtModel& model, const Dataset& d);

/// Eb and Sb over the strongly-labeled clips, At over all clips.
EvaluationReport evaluate_predictions(const std::vector<PredictionSet>& preds, const Dataset& d,
                                      const DecisionConfig& decision);
std::vector<EvaluationReport> evaluate(const SedtModel& model, const Dataset& d, const DecisionConfig& base,
                                       const std::vector<FusionStrategy>& strategies);

/// One JSON line per clip: {"clip_id", "events": [...], "tags": {...}}.
std::string prediction_to_json_line(const std::string& clip_id, const std::vector<EventPrediction>& events,
                                    const RowVector& tag_probs, const LabelVocabulary& vocab);

struct SweepRow {
    double epsilon = 0.0;
    std::string alpha;
    std::string strategy;
    double eb = 0.0, sb = 0.0, at = 0.0;
};

/// Fine-tunes a copy of `base` per grid point and evaluates on `eval_set`.
std::vector<SweepRow> sweep(const Checkpoint& base, const std::vector<double>& epsilons,
                            const std::vector<std::optional<double>>& alphas,
                            const std::vector<FusionStrategy>& strategies, const Dataset& train,
                            const Dataset& eval_set);
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

}  // namespace sedt
