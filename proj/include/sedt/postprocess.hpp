#pragma once

// From a PredictionSet to an event list: tag/event fusion, thresholded
// decoding and same-class de-overlapping.

#include "sedt/core.hpp"
#include "sedt/prediction.hpp"

#include <set>
#include <string>
#include <vector>

namespace sedt {

enum class FusionStrategy { kNone = 0, kDelete = 1, kDeleteAndForce = 2, kForce = 3 };

FusionStrategy fusion_from_string(const std::string& s);
std::string to_string(FusionStrategy f);

struct DecisionConfig {
    double tau_cls = 0.5;
    double tau_tag = 0.5;
    FusionStrategy fusion = FusionStrategy::kNone;
    bool de_overlap = true;

    void validate() const;
};

struct EventPrediction {
    int class_id = 0;
    double prob = 0.0;
    Segment segment;
    int query_index = 0;
};

/// Classes whose tag probability reaches tau_tag.
std::set<int> active_tags(const RowVector& tag_probs, double tau_tag);

/// Applies a fusion strategy to the N x (K+1) class scores of the final block.
Matrix fuse(const Matrix& class_scores, const std::set<int>& tag_active, FusionStrategy strategy, double tau_cls);

/// One event per query whose best non-empty score reaches tau_cls.
std::vector<EventPrediction> decode(const Matrix& class_scores, const Matrix& boundaries, double clip_len_s,
                                    double tau_cls);

/// Per class, greedily keeps events in descending probability and drops any
/// that overlap an already kept event by a positive length.
std::vector<EventPrediction> de_overlap(const std::vector<EventPrediction>& events);

/// Full pipeline on the final block: fuse -> decode -> (optional) de-overlap.
std::vector<EventPrediction> postprocess(const PredictionSet& pred, double clip_len_s, const DecisionConfig& cfg);

/// Set of classes present in an event list.
std::set<int> decoded_classes(const std::vector<EventPrediction>& events);

}  // namespace sedt
