#include "sedt/losses.hpp"

#include <algorithm>
#include <cmath>

namespace sedt {

void LossWeights::validate() const {
    if (lambda_iou < 0 || lambda_l1 < 0 || lambda_at < 0 || lambda_at_p < 0 || empty_class_weight < 0) {
        throw ValidationError("loss weights must be >= 0");
    }
}

double LossBreakdown::loc_sum() const {
    double s = 0.0;
    for (const auto& b : blocks) s += b.loc;
    return s;
}

double LossBreakdown::cls_sum() const {
    double s = 0.0;
    for (const auto& b : blocks) s += b.cls;
    return s;
}

namespace {

double sign(double x) { return (x > 0.0) - (x < 0.0); }

void scale_grad(PredictionGrad& g, double s) {
    for (auto& b : g.blocks) {
        b.class_probs *= s;
        b.boundaries *= s;
    }
    g.tag_probs *= s;
}

}  // namespace

double pair_location_loss(const Boundary& target, const Boundary& pred, const LocationWeights& w, double* d_center,
                          double* d_duration) {
    const auto g = interval_giou_grad(target, pred);
    const double dm = pred.center - target.center;
    const double dl = pred.duration - target.duration;
    if (d_center) *d_center = -w.lambda_iou * g.d_center + w.lambda_l1 * sign(dm);
    if (d_duration) *d_duration = -w.lambda_iou * g.d_duration + w.lambda_l1 * sign(dl);
    return w.lambda_iou * (1.0 - g.value) + w.lambda_l1 * (std::abs(dm) + std::abs(dl));
}

double location_loss(const Matrix& boundaries, const std::vector<EventInstance>& targets,
                     const std::vector<std::pair<int, int>>& pairs, const LocationWeights& w, Matrix* d_boundaries) {
    double total = 0.0;
    for (const auto& [i, j] : pairs) {
        const Boundary pred{boundaries(j, 0), boundaries(j, 1)};
        double dc = 0.0, dd = 0.0;
        total += pair_location_loss(targets.at(static_cast<std::size_t>(i)).boundary, pred, w, &dc, &dd);
        if (d_boundaries) {
            (*d_boundaries)(j, 0) += dc;
            (*d_boundaries)(j, 1) += dd;
        }
    }
    return total;
}

double classification_loss(const Matrix& class_probs, const std::vector<int>& class_of_pred, double empty_class_weight,
                           Matrix* d_class_probs, std::size_t* clamped) {
    if (static_cast<Eigen::Index>(class_of_pred.size()) != class_probs.rows()) {
        throw ValidationError("classification loss needs one class per prediction slot");
    }
    const int empty = static_cast<int>(class_probs.cols()) - 1;
    double total = 0.0;
    for (std::size_t j = 0; j < class_of_pred.size(); ++j) {
        const int c = class_of_pred[j];
        const double weight = c == empty ? empty_class_weight : 1.0;
        if (weight == 0.0) continue;
        const double p = class_probs(static_cast<Eigen::Index>(j), c);
        if (p > LossWeights::kProbFloor) {
            total -= weight * std::log(p);
            if (d_class_probs) (*d_class_probs)(static_cast<Eigen::Index>(j), c) -= weight / p;
        } else {
            total -= weight * std::log(LossWeights::kProbFloor);
            if (clamped) ++*clamped;
        }
    }
    return total;
}

double bce(const RowVector& probs, const RowVector& targets, RowVector* d_probs, std::size_t* clamped) {
    if (probs.size() != targets.size() || probs.size() == 0) throw ValidationError("bce needs matching non-empty vectors");
    const double lo = LossWeights::kProbFloor, hi = 1.0 - LossWeights::kProbFloor;
    const auto k = static_cast<double>(probs.size());
    double total = 0.0;
    for (Eigen::Index c = 0; c < probs.size(); ++c) {
        const double p = probs(c), y = targets(c);
        const double pc = std::clamp(p, lo, hi);
        total -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
        if (pc != p) {
            if (clamped) ++*clamped;
        } else if (d_probs) {
            (*d_probs)(c) += (-y / p + (1.0 - y) / (1.0 - p)) / k;
        }
    }
    return total / k;
}

double tagging_loss(const RowVector& tag_probs, const RowVector& weak_targets, RowVector* d_tag) {
    return bce(tag_probs, weak_targets, d_tag);
}

RowVector pooled_tag_probs(const Matrix& class_probs, std::vector<int>* argmax_slot) {
    const Eigen::Index k = class_probs.cols() - 1;
    RowVector out(k);
    if (argmax_slot) argmax_slot->assign(static_cast<std::size_t>(k), 0);
    for (Eigen::Index c = 0; c < k; ++c) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < class_probs.rows(); ++j) {
            if (class_probs(j, c) > class_probs(best, c)) best = j;
        }
        out(c) = class_probs(best, c);
        if (argmax_slot) (*argmax_slot)[static_cast<std::size_t>(c)] = static_cast<int>(best);
    }
    return out;
}

double pooled_tagging_loss(const Matrix& class_probs, const RowVector& weak_targets, Matrix* d_class_probs) {
    std::vector<int> slot;
    const RowVector pooled = pooled_tag_probs(class_probs, &slot);
    RowVector d = RowVector::Zero(pooled.size());
    const double value = bce(pooled, weak_targets, d_class_probs ? &d : nullptr);
    if (d_class_probs) {
        for (Eigen::Index c = 0; c < pooled.size(); ++c) {
            (*d_class_probs)(slot[static_cast<std::size_t>(c)], c) += d(c);
        }
    }
    return value;
}

RowVector tag_vector(const std::set<std::string>& tags, const LabelVocabulary& vocab) {
    RowVector y = RowVector::Zero(static_cast<Eigen::Index>(vocab.size()));
    for (const auto& t : tags) y(vocab.index_of(t)) = 1.0;
    return y;
}

RowVector tag_vector(const std::vector<EventInstance>& targets, int num_classes) {
    RowVector y = RowVector::Zero(num_classes);
    for (const auto& t : targets) {
        if (t.class_id < 0 || t.class_id >= num_classes) throw ValidationError("target class outside vocabulary");
        y(t.class_id) = 1.0;
    }
    return y;
}

SupervisionPlan one_to_one_plan(const Assignment& a, int num_targets) {
    SupervisionPlan plan;
    plan.target_of_pred.reserve(a.target_of_pred.size());
    for (int t : a.target_of_pred) plan.target_of_pred.push_back(t < num_targets ? t : -1);
    return plan;
}

SupervisionPlan one_to_many_plan(const OneToManyAssignment& a) {
    SupervisionPlan plan = one_to_one_plan(a.base, a.num_targets);
    for (const auto& [target, preds] : a.extra) {
        for (int j : preds) {
            auto& slot = plan.target_of_pred.at(static_cast<std::size_t>(j));
            if (slot != -1) throw ValidationError("one-to-many extra prediction was not empty-matched");
            slot = target;
            ++plan.extra;
        }
    }
    return plan;
}

BlockLoss block_loss(const BlockOutput& block, const std::vector<EventInstance>& targets, const SupervisionPlan& plan,
                     const LossWeights& w, BlockOutput* grad, std::size_t* clamped) {
    const int empty = static_cast<int>(block.class_probs.cols()) - 1;
    std::vector<std::pair<int, int>> pairs;
    std::vector<int> classes(plan.target_of_pred.size(), empty);
    for (std::size_t j = 0; j < plan.target_of_pred.size(); ++j) {
        const int t = plan.target_of_pred[j];
        if (t < 0) continue;
        pairs.emplace_back(t, static_cast<int>(j));
        classes[j] = targets.at(static_cast<std::size_t>(t)).class_id;
    }
    BlockLoss out;
    out.loc = location_loss(block.boundaries, targets, pairs, w.location(), grad ? &grad->boundaries : nullptr);
    out.cls = classification_loss(block.class_probs, classes, w.empty_class_weight,
                                  grad ? &grad->class_probs : nullptr, clamped);
    return out;
}

Assignment match_block(const BlockOutput& block, const std::vector<EventInstance>& targets, const LossWeights& w) {
    return hungarian(build_cost_matrix(block.class_probs, block.boundaries, targets, w.location()));
}

LossBreakdown planned_strong_loss(const PredictionSet& pred, const std::vector<EventInstance>& targets,
                                  const std::vector<SupervisionPlan>& plans, const LossWeights& w,
                                  PredictionGrad* grad) {
    if (plans.size() != pred.blocks.size()) throw ValidationError("one supervision plan per decoder block required");
    LossBreakdown out;
    for (std::size_t m = 0; m < pred.blocks.size(); ++m) {
        out.blocks.push_back(block_loss(pred.blocks[m], targets, plans[m], w, grad ? &grad->blocks[m] : nullptr,
                                        &out.clamped_probs));
        out.extra_matches += plans[m].extra;
    }
    const RowVector y = tag_vector(targets, static_cast<int>(pred.num_classes()));
    RowVector d_tag = RowVector::Zero(y.size());
    out.tag = bce(pred.tag_probs, y, grad ? &d_tag : nullptr, &out.clamped_probs);
    if (grad) grad->tag_probs += w.lambda_at * d_tag;
    out.total = out.loc_sum() + out.cls_sum() + w.lambda_at * out.tag;
    return out;
}

LossBreakdown strong_loss(const PredictionSet& pred, const std::vector<EventInstance>& targets, const LossWeights& w,
                          PredictionGrad* grad, const OneToManyOptions* one_to_many) {
    std::vector<SupervisionPlan> plans;
    const int g = static_cast<int>(targets.size());
    for (const auto& block : pred.blocks) {
        const Assignment a = match_block(block, targets, w);
        if (one_to_many) {
            if (!one_to_many->rng) throw ValidationError("one-to-many matching needs an RNG stream");
            plans.push_back(one_to_many_plan(
                sedt::one_to_many(a, block.boundaries, targets, one_to_many->config, w.location(), *one_to_many->rng)));
        } else {
            plans.push_back(one_to_one_plan(a, g));
        }
    }
    return planned_strong_loss(pred, targets, plans, w, grad);
}

LossBreakdown weak_loss(const PredictionSet& pred, const RowVector& weak_targets, const LossWeights& w,
                        PredictionGrad* grad) {
    LossBreakdown out;
    out.blocks.assign(pred.blocks.size(), BlockLoss{});
    RowVector d_tag = RowVector::Zero(weak_targets.size());
    out.tag = bce(pred.tag_probs, weak_targets, grad ? &d_tag : nullptr, &out.clamped_probs);
    Matrix d_final;
    if (grad) d_final = Matrix::Zero(pred.final_block().class_probs.rows(), pred.final_block().class_probs.cols());
    out.pooled_tag = pooled_tagging_loss(pred.final_block().class_probs, weak_targets, grad ? &d_final : nullptr);
    if (grad) {
        grad->tag_probs += w.lambda_at * d_tag;
        grad->blocks.back().class_probs += w.lambda_at_p * d_final;
    }
    out.total = w.lambda_at * out.tag + w.lambda_at_p * out.pooled_tag;
    return out;
}

double mixed_batch_loss(const std::vector<PredictionSet>& preds, const std::vector<ClipTargets>& targets,
                        const LossWeights& w, std::vector<PredictionGrad>* grads,
                        std::vector<LossBreakdown>* breakdowns, const OneToManyOptions* one_to_many) {
    if (preds.size() != targets.size() || preds.empty()) {
        throw ValidationError("mixed batch loss needs one target per prediction and a non-empty batch");
    }
    const double inv_b = 1.0 / static_cast<double>(preds.size());
    double total = 0.0;
    if (grads) grads->clear();
    if (breakdowns) breakdowns->clear();
    for (std::size_t k = 0; k < preds.size(); ++k) {
        PredictionGrad g = PredictionGrad::zeros_like(preds[k]);
        LossBreakdown b = targets[k].strong ? strong_loss(preds[k], targets[k].events, w, grads ? &g : nullptr, one_to_many)
                                            : weak_loss(preds[k], targets[k].weak, w, grads ? &g : nullptr);
        total += inv_b * b.total;
        if (grads) {
            scale_grad(g, inv_b);
            grads->push_back(std::move(g));
        }
        if (breakdowns) breakdowns->push_back(std::move(b));
    }
    return total;
}

}  // namespace sedt
