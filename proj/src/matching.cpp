#include "sedt/matching.hpp"

#include <cmath>
#include <limits>

namespace sedt {

double location_cost(const Boundary& target, const Boundary& pred, const LocationWeights& w) {
    const double giou = interval_giou_grad(target, pred).value;
    const double l1 = std::abs(target.center - pred.center) + std::abs(target.duration - pred.duration);
    return w.lambda_iou * (1.0 - giou) + w.lambda_l1 * l1;
}

double match_cost(std::span<const double> class_probs, const Boundary& pred, const std::optional<EventInstance>& target,
                  const LocationWeights& w) {
    if (!target) return 0.0;
    const auto c = static_cast<std::size_t>(target->class_id);
    if (c >= class_probs.size()) throw ValidationError("target class outside the probability row");
    return -class_probs[c] + location_cost(target->boundary, pred, w);
}

std::vector<int> Assignment::pred_of_target() const {
    std::vector<int> out(target_of_pred.size(), -1);
    for (std::size_t j = 0; j < target_of_pred.size(); ++j) {
        out[static_cast<std::size_t>(target_of_pred[j])] = static_cast<int>(j);
    }
    return out;
}

Assignment hungarian(const Matrix& cost) {
    const auto n = static_cast<int>(cost.rows());
    if (cost.rows() != cost.cols()) throw ValidationError("hungarian needs a square cost matrix");
    if (!cost.allFinite()) throw ValidationError("hungarian cost matrix has non-finite entries");

    Assignment out;
    if (n == 0) return out;

    // 1-based potentials; p[col] is the row matched to col.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    out.target_of_pred.assign(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= n; ++j) {
        out.target_of_pred[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    }
    // Sum the selected entries directly rather than trusting the dual value.
    for (int i = 0; i < n; ++i) out.cost += cost(i, out.target_of_pred[static_cast<std::size_t>(i)]);
    return out;
}

Matrix build_cost_matrix(const Matrix& class_probs, const Matrix& boundaries, const std::vector<EventInstance>& targets,
                         const LocationWeights& w) {
    const Eigen::Index n = class_probs.rows();
    if (boundaries.rows() != n || boundaries.cols() != 2) throw ValidationError("boundary matrix must be N x 2");
    if (static_cast<Eigen::Index>(targets.size()) > n) {
        throw ValidationError("more targets (" + std::to_string(targets.size()) + ") than prediction slots (" +
                              std::to_string(n) + ")");
    }
    Matrix cost = Matrix::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const Boundary pred{boundaries(j, 0), boundaries(j, 1)};
        const std::span<const double> row(class_probs.row(j).data(), static_cast<std::size_t>(class_probs.cols()));
        for (std::size_t i = 0; i < targets.size(); ++i) {
            cost(j, static_cast<Eigen::Index>(i)) = match_cost(row, pred, targets[i], w);
        }
    }
    return cost;
}

std::size_t OneToManyAssignment::extra_count() const {
    std::size_t total = 0;
    for (const auto& [target, preds] : extra) total += preds.size();
    return total;
}

std::vector<int> OneToManyAssignment::supervised_by(int target) const {
    std::vector<int> out;
    const auto inverse = base.pred_of_target();
    out.push_back(inverse.at(static_cast<std::size_t>(target)));
    if (auto it = extra.find(target); it != extra.end()) out.insert(out.end(), it->second.begin(), it->second.end());
    return out;
}

std::vector<AdmissionCandidate> admissible_predictions(const Assignment& base, const Matrix& boundaries,
                                                       const std::vector<EventInstance>& targets,
                                                       const LocationWeights& w, double epsilon) {
    std::vector<AdmissionCandidate> out;
    const int g = static_cast<int>(targets.size());
    if (g == 0) return out;
    for (std::size_t j = 0; j < base.target_of_pred.size(); ++j) {
        if (base.target_of_pred[j] < g) continue;
        const Boundary pred{boundaries(static_cast<Eigen::Index>(j), 0), boundaries(static_cast<Eigen::Index>(j), 1)};
        AdmissionCandidate best{static_cast<int>(j), 0, std::numeric_limits<double>::infinity()};
        for (int i = 0; i < g; ++i) {
            const double c = location_cost(targets[static_cast<std::size_t>(i)].boundary, pred, w);
            if (c < best.location_cost) {
                best.location_cost = c;
                best.nearest_target = i;
            }
        }
        if (best.location_cost < epsilon) out.push_back(best);
    }
    return out;
}

OneToManyAssignment one_to_many(const Assignment& base, const Matrix& boundaries,
                                const std::vector<EventInstance>& targets, const FineTuneConfig& cfg,
                                const LocationWeights& w, std::mt19937_64& rng) {
    if (!(cfg.alpha >= 0.0)) throw ValidationError("alpha must be >= 0");
    OneToManyAssignment out;
    out.base = base;
    out.num_targets = static_cast<int>(targets.size());
    const auto n = static_cast<double>(base.target_of_pred.size());
    const double ratio = cfg.retain_all ? 1.0 : std::min(1.0, cfg.alpha * static_cast<double>(targets.size()) / n);
    if (targets.empty() || ratio <= 0.0) return out;

    std::bernoulli_distribution keep(ratio);
    for (const auto& c : admissible_predictions(base, boundaries, targets, w, cfg.epsilon)) {
        if (ratio >= 1.0 || keep(rng)) out.extra[c.nearest_target].insert(c.pred);
    }
    return out;
}

}  // namespace sedt
