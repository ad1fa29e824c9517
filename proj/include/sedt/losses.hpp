#pragma once

// Training objectives over a PredictionSet. Every loss returns its value and,
// when a gradient sink is supplied, adds its gradient with respect to the
// prediction tensors (probabilities and boundaries, i.e. after softmax /
// sigmoid). Back-propagation into the network happens in the model module.

#include "sedt/core.hpp"
#include "sedt/matching.hpp"
#include "sedt/prediction.hpp"

#include <random>
#include <set>
#include <string>
#include <vector>

namespace sedt {

struct LossWeights {
    double lambda_iou = 2.0;
    double lambda_l1 = 5.0;
    double lambda_at = 3.0;
    double lambda_at_p = 0.25;
    double empty_class_weight = 1.0;

    static constexpr double kProbFloor = 1e-12;

    LocationWeights location() const { return {lambda_iou, lambda_l1}; }
    void validate() const;
};

struct BlockLoss {
    double loc = 0.0;
    double cls = 0.0;
};

struct LossBreakdown {
    std::vector<BlockLoss> blocks;
    double tag = 0.0;
    double pooled_tag = 0.0;
    double total = 0.0;
    std::size_t clamped_probs = 0;  // log arguments that hit the floor
    std::size_t extra_matches = 0;  // one-to-many additions across blocks

    double loc_sum() const;
    double cls_sum() const;
};

/// Location loss of one (target, prediction) pair and its gradient w.r.t. the prediction.
double pair_location_loss(const Boundary& target, const Boundary& pred, const LocationWeights& w,
                          double* d_center = nullptr, double* d_duration = nullptr);

/// Sum of pair location losses over (target index, prediction index) pairs.
double location_loss(const Matrix& boundaries, const std::vector<EventInstance>& targets,
                     const std::vector<std::pair<int, int>>& pairs, const LocationWeights& w,
                     Matrix* d_boundaries = nullptr);

/// Cross-entropy over all N slots. `class_of_pred[j]` is the supervising class
/// of prediction j (K for the empty class).
double classification_loss(const Matrix& class_probs, const std::vector<int>& class_of_pred, double empty_class_weight,
                           Matrix* d_class_probs = nullptr, std::size_t* clamped = nullptr);

/// Mean-over-classes binary cross-entropy.
double bce(const RowVector& probs, const RowVector& targets, RowVector* d_probs = nullptr,
           std::size_t* clamped = nullptr);

/// Audio-tagging loss of the audio-slot output.
double tagging_loss(const RowVector& tag_probs, const RowVector& weak_targets, RowVector* d_tag = nullptr);

/// Per-class max over event slots of the non-empty class probabilities.
RowVector pooled_tag_probs(const Matrix& class_probs, std::vector<int>* argmax_slot = nullptr);

/// BCE of the max-pooled class probabilities; the gradient reaches only the argmax slot of each class.
double pooled_tagging_loss(const Matrix& class_probs, const RowVector& weak_targets, Matrix* d_class_probs = nullptr);

/// Multi-hot K-vector of a tag set.
RowVector tag_vector(const std::set<std::string>& tags, const LabelVocabulary& vocab);
RowVector tag_vector(const std::vector<EventInstance>& targets, int num_classes);

/// Which target (or -1 for empty) supervises each prediction slot.
struct SupervisionPlan {
    std::vector<int> target_of_pred;
    std::size_t extra = 0;
};

SupervisionPlan one_to_one_plan(const Assignment& a, int num_targets);
SupervisionPlan one_to_many_plan(const OneToManyAssignment& a);

/// Location + classification loss of one block under a supervision plan.
BlockLoss block_loss(const BlockOutput& block, const std::vector<EventInstance>& targets, const SupervisionPlan& plan,
                     const LossWeights& w, BlockOutput* grad = nullptr, std::size_t* clamped = nullptr);

/// Hungarian matching of one block (Eq. 3 cost, empty slots cost 0).
Assignment match_block(const BlockOutput& block, const std::vector<EventInstance>& targets, const LossWeights& w);

/// Optional fine-tuning relaxation applied to every block's matching.
struct OneToManyOptions {
    FineTuneConfig config;
    std::mt19937_64* rng = nullptr;
};

/// Strongly-labeled clip: sum over blocks of (loc + cls) + lambda_at * tagging.
LossBreakdown strong_loss(const PredictionSet& pred, const std::vector<EventInstance>& targets, const LossWeights& w,
                          PredictionGrad* grad = nullptr, const OneToManyOptions* one_to_many = nullptr);

/// Weakly-labeled clip: lambda_at * tagging + lambda_at_p * pooled tagging.
LossBreakdown weak_loss(const PredictionSet& pred, const RowVector& weak_targets, const LossWeights& w,
                        PredictionGrad* grad = nullptr);

/// Strong loss with an explicit per-block plan (used for the one-to-many loss).
LossBreakdown planned_strong_loss(const PredictionSet& pred, const std::vector<EventInstance>& targets,
                                  const std::vector<SupervisionPlan>& plans, const LossWeights& w,
                                  PredictionGrad* grad = nullptr);

/// One clip of a mixed batch.
struct ClipTargets {
    std::vector<EventInstance> events;
    RowVector weak;
    bool strong = true;
};

/// Mean over clips of strong_loss (strong clips) or weak_loss (weak clips).
/// Gradients, if requested, are per clip and already divided by the batch size.
double mixed_batch_loss(const std::vector<PredictionSet>& preds, const std::vector<ClipTargets>& targets,
                        const LossWeights& w, std::vector<PredictionGrad>* grads = nullptr,
                        std::vector<LossBreakdown>* breakdowns = nullptr, const OneToManyOptions* one_to_many = nullptr);

}  // namespace sedt
