#include "sedt/postprocess.hpp"

#include <algorithm>
#include <map>
#include <numeric>

namespace sedt {

FusionStrategy fusion_from_string(const std::string& s) {
    if (s == "none" || s == "0") return FusionStrategy::kNone;
    if (s == "1") return FusionStrategy::kDelete;
    if (s == "2") return FusionStrategy::kDeleteAndForce;
    if (s == "3") return FusionStrategy::kForce;
    throw ValidationError("fusion strategy must be none, 1, 2 or 3; got '" + s + "'");
}

std::string to_string(FusionStrategy f) {
    switch (f) {
        case FusionStrategy::kNone: return "none";
        case FusionStrategy::kDelete: return "1";
        case FusionStrategy::kDeleteAndForce: return "2";
        case FusionStrategy::kForce: return "3";
    }
    return "none";
}

void DecisionConfig::validate() const {
    if (!(tau_cls > 0.0 && tau_cls < 1.0) || !(tau_tag > 0.0 && tau_tag < 1.0)) {
        throw ValidationError("decision thresholds must lie in (0, 1)");
    }
}

std::set<int> active_tags(const RowVector& tag_probs, double tau_tag) {
    std::set<int> out;
    for (Eigen::Index c = 0; c < tag_probs.size(); ++c) {
        if (tag_probs(c) >= tau_tag) out.insert(static_cast<int>(c));
    }
    return out;
}

namespace {

/// Class a query would emit under `scores`, or -1.
int emitted_class(const Matrix& scores, Eigen::Index query, double tau_cls) {
    const Eigen::Index k = scores.cols() - 1;
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < k; ++c) {
        if (scores(query, c) > scores(query, best)) best = c;
    }
    return scores(query, best) >= tau_cls ? static_cast<int>(best) : -1;
}

void force_class(Matrix& scores, int cls, double tau_cls) {
    const Eigen::Index n = scores.rows();
    std::vector<int> emits(static_cast<std::size_t>(n));
    std::map<int, int> emitters;
    for (Eigen::Index q = 0; q < n; ++q) {
        emits[static_cast<std::size_t>(q)] = emitted_class(scores, q, tau_cls);
        if (emits[static_cast<std::size_t>(q)] >= 0) ++emitters[emits[static_cast<std::size_t>(q)]];
    }
    if (emitters.count(cls)) return;

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return scores(a, cls) > scores(b, cls); });

    // Prefer the highest-scoring query for this class, provided raising it
    // does not remove another class from the output: it must either emit
    // nothing or emit a class that some other query also emits.
    for (Eigen::Index q : order) {
        const int current = emits[static_cast<std::size_t>(q)];
        if (current >= 0 && emitters[current] < 2) continue;
        if (current >= 0) scores(q, current) = 0.0;
        scores(q, cls) = tau_cls;
        return;
    }
    // Every query already carries a distinct class; fall back to the best query.
    scores(order.front(), cls) = tau_cls;
}

}  // namespace

Matrix fuse(const Matrix& class_scores, const std::set<int>& tag_active, FusionStrategy strategy, double tau_cls) {
    Matrix scores = class_scores;
    const Eigen::Index k = scores.cols() - 1;
    if (strategy == FusionStrategy::kNone) return scores;

    if (strategy == FusionStrategy::kDelete || strategy == FusionStrategy::kDeleteAndForce) {
        for (Eigen::Index c = 0; c < k; ++c) {
            if (!tag_active.count(static_cast<int>(c))) scores.col(c).setZero();
        }
    }
    if (strategy == FusionStrategy::kDeleteAndForce || strategy == FusionStrategy::kForce) {
        for (int c : tag_active) {
            if (c < 0 || c >= k) throw ValidationError("tag class outside vocabulary");
            force_class(scores, c, tau_cls);  // no-op when some query already emits c
        }
    }
    return scores;
}

std::vector<EventPrediction> decode(const Matrix& class_scores, const Matrix& boundaries, double clip_len_s,
                                    double tau_cls) {
    if (boundaries.rows() != class_scores.rows() || boundaries.cols() != 2) {
        throw ValidationError("decode needs N x 2 boundaries for N score rows");
    }
    std::vector<EventPrediction> out;
    for (Eigen::Index q = 0; q < class_scores.rows(); ++q) {
        const int c = emitted_class(class_scores, q, tau_cls);
        if (c < 0) continue;
        const double m = boundaries(q, 0), l = boundaries(q, 1);
        const double on = std::clamp(m - 0.5 * l, 0.0, 1.0) * clip_len_s;
        const double off = std::clamp(m + 0.5 * l, 0.0, 1.0) * clip_len_s;
        out.push_back({c, std::min(1.0, class_scores(q, c)), {on, off}, static_cast<int>(q)});
    }
    return out;
}

std::vector<EventPrediction> de_overlap(const std::vector<EventPrediction>& events) {
    std::vector<std::size_t> order(events.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (events[a].prob != events[b].prob) return events[a].prob > events[b].prob;
        return events[a].query_index < events[b].query_index;
    });
    std::vector<char> keep(events.size(), 0);
    std::map<int, std::vector<Segment>> kept;
    for (std::size_t i : order) {
        const auto& e = events[i];
        auto& segs = kept[e.class_id];
        const bool clash = std::any_of(segs.begin(), segs.end(), [&](const Segment& s) {
            return std::min(s.offset_s, e.segment.offset_s) - std::max(s.onset_s, e.segment.onset_s) > 0.0;
        });
        if (clash) continue;
        segs.push_back(e.segment);
        keep[i] = 1;
    }
    std::vector<EventPrediction> out;
    for (std::size_t i = 0; i < events.size(); ++i) {
        if (keep[i]) out.push_back(events[i]);
    }
    return out;
}

std::vector<EventPrediction> postprocess(const PredictionSet& pred, double clip_len_s, const DecisionConfig& cfg) {
    cfg.validate();
    const auto& block = pred.final_block();
    const Matrix scores = fuse(block.class_probs, active_tags(pred.tag_probs, cfg.tau_tag), cfg.fusion, cfg.tau_cls);
    auto events = decode(scores, block.boundaries, clip_len_s, cfg.tau_cls);
    return cfg.de_overlap ? de_overlap(events) : events;
}

std::set<int> decoded_classes(const std::vector<EventPrediction>& events) {
    std::set<int> out;
    for (const auto& e : events) out.insert(e.class_id);
    return out;
}

}  // namespace sedt
