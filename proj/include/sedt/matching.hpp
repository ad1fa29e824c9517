#pragma once

// Set matching between predictions and the empty-padded target set: the
// Hungarian assignment and the one-to-many relaxation used for fine-tuning.

#include "sedt/autograd.hpp"
#include "sedt/core.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <vector>

namespace sedt {

using ag::Matrix;

/// Per-pair location-cost weights (also used by the location loss).
struct LocationWeights {
    double lambda_iou = 2.0;
    double lambda_l1 = 5.0;
};

/// lambda_iou * (1 - GIoU) + lambda_l1 * |b - b_hat|_1.
double location_cost(const Boundary& target, const Boundary& pred, const LocationWeights& w);

/// Matching cost of prediction against a target slot; empty slot costs 0.
/// `class_probs` is one K+1 softmax row.
double match_cost(std::span<const double> class_probs, const Boundary& pred, const std::optional<EventInstance>& target,
                  const LocationWeights& w);

/// Minimum-cost bijection. `target_of_pred[j]` is the column matched to row j.
struct Assignment {
    std::vector<int> target_of_pred;
    double cost = 0.0;

    std::vector<int> pred_of_target() const;
};

/// Kuhn-Munkres with potentials, O(N^3). Throws on non-square or non-finite input.
Assignment hungarian(const Matrix& cost);

/// Builds the N x N cost matrix: rows are predictions, columns are the G
/// targets followed by N - G empty slots. Requires G <= N.
Matrix build_cost_matrix(const Matrix& class_probs, const Matrix& boundaries, const std::vector<EventInstance>& targets,
                         const LocationWeights& w);

struct FineTuneConfig {
    double epsilon = 1.0;
    double alpha = 1.0;
    bool retain_all = false;  // keep every admissible prediction ("alpha = all")
};

/// Base assignment plus, per target, the extra empty-matched predictions
/// that supervise it during fine-tuning.
struct OneToManyAssignment {
    Assignment base;
    int num_targets = 0;
    std::map<int, std::set<int>> extra;  // target index -> prediction indices

    std::size_t extra_count() const;
    /// All predictions supervised by target i (base match first).
    std::vector<int> supervised_by(int target) const;
};

/// Admission step: for each empty-matched prediction j, the nearest target
/// I_j (lowest index on ties) and its location cost D_j; returns the j with D_j < epsilon.
struct AdmissionCandidate {
    int pred = 0;
    int nearest_target = 0;
    double location_cost = 0.0;
};
std::vector<AdmissionCandidate> admissible_predictions(const Assignment& base, const Matrix& boundaries,
                                                       const std::vector<EventInstance>& targets,
                                                       const LocationWeights& w, double epsilon);

OneToManyAssignment one_to_many(const Assignment& base, const Matrix& boundaries,
                                const std::vector<EventInstance>& targets, const FineTuneConfig& cfg,
                                const LocationWeights& w, std::mt19937_64& rng);

}  // namespace sedt
