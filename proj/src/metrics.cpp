#include "sedt/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

namespace sedt {

namespace {

// Absorbs floating-point noise in collar comparisons (e.g. 0.2 vs 0.20000000000000018).
constexpr double kCollarSlack = 1e-9;

double safe_div(double a, double b) { return b > 0.0 ? a / b : 0.0; }

struct CountTable {
    explicit CountTable(const LabelVocabulary& vocab) : vocab(vocab), counts(vocab.size()) {
        for (std::size_t c = 0; c < vocab.size(); ++c) counts[c].label = vocab.classes()[c];
    }

    MetricsReport finish() const {
        MetricsReport r;
        double sum = 0.0;
        for (const auto& c : counts) {
            if (c.tp + c.fp + c.fn == 0) continue;
            r.classes.push_back(c);
            sum += c.f1();
        }
        r.macro_f1 = safe_div(sum, static_cast<double>(r.classes.size()));
        return r;
    }

    const LabelVocabulary& vocab;
    std::vector<ClassCounts> counts;
};

void check_labels(const std::vector<ClipEvents>& clips, const LabelVocabulary& vocab) {
    for (const auto& clip : clips) {
        for (const auto& e : clip.events) (void)vocab.index_of(e.label);
    }
}

}  // namespace

double ClassCounts::precision() const { return safe_div(static_cast<double>(tp), static_cast<double>(tp + fp)); }
double ClassCounts::recall() const { return safe_div(static_cast<double>(tp), static_cast<double>(tp + fn)); }
double ClassCounts::f1() const {
    const double p = precision(), r = recall();
    return safe_div(2.0 * p * r, p + r);
}

const ClassCounts* MetricsReport::find(const std::string& label) const {
    for (const auto& c : classes) {
        if (c.label == label) return &c;
    }
    return nullptr;
}

bool within_collars(const LabeledEvent& pred, const LabeledEvent& ref, const EventBasedConfig& cfg) {
    const double off_collar = std::max(cfg.offset_collar_s, cfg.offset_collar_frac * (ref.offset_s - ref.onset_s));
    return pred.label == ref.label && std::abs(pred.onset_s - ref.onset_s) <= cfg.onset_collar_s + kCollarSlack &&
           std::abs(pred.offset_s - ref.offset_s) <= off_collar + kCollarSlack;
}

std::size_t max_bipartite_matching(const std::vector<std::vector<int>>& adjacency, std::size_t right_size) {
    std::vector<int> match_right(right_size, -1);
    std::vector<char> seen;
    std::function<bool(int)> augment = [&](int u) {
        for (int v : adjacency[static_cast<std::size_t>(u)]) {
            if (seen[static_cast<std::size_t>(v)]) continue;
            seen[static_cast<std::size_t>(v)] = 1;
            if (match_right[static_cast<std::size_t>(v)] < 0 || augment(match_right[static_cast<std::size_t>(v)])) {
                match_right[static_cast<std::size_t>(v)] = u;
                return true;
            }
        }
        return false;
    };
    std::size_t size = 0;
    for (std::size_t u = 0; u < adjacency.size(); ++u) {
        seen.assign(right_size, 0);
        if (augment(static_cast<int>(u))) ++size;
    }
    return size;
}

MetricsReport event_based_f1(const std::vector<ClipEvents>& preds, const std::vector<ClipEvents>& refs,
                             const LabelVocabulary& vocab, const EventBasedConfig& cfg) {
    if (preds.size() != refs.size()) throw ValidationError("event-based F1 needs one prediction list per reference clip");
    if (!(cfg.onset_collar_s > 0.0) || !(cfg.offset_collar_s > 0.0) || !(cfg.offset_collar_frac > 0.0)) {
        throw ValidationError("collars must be positive");
    }
    check_labels(preds, vocab);
    check_labels(refs, vocab);
    CountTable table(vocab);
    for (std::size_t k = 0; k < refs.size(); ++k) {
        for (std::size_t c = 0; c < vocab.size(); ++c) {
            const auto& label = vocab.classes()[c];
            std::vector<const LabeledEvent*> p, r;
            for (const auto& e : preds[k].events) if (e.label == label) p.push_back(&e);
            for (const auto& e : refs[k].events) if (e.label == label) r.push_back(&e);
            std::vector<std::vector<int>> adj(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) {
                for (std::size_t j = 0; j < r.size(); ++j) {
                    if (within_collars(*p[i], *r[j], cfg)) adj[i].push_back(static_cast<int>(j));
                }
            }
            const auto tp = static_cast<long>(max_bipartite_matching(adj, r.size()));
            table.counts[c].tp += tp;
            table.counts[c].fp += static_cast<long>(p.size()) - tp;
            table.counts[c].fn += static_cast<long>(r.size()) - tp;
        }
    }
    return table.finish();
}

MetricsReport segment_based_f1(const std::vector<ClipEvents>& preds, const std::vector<ClipEvents>& refs,
                               const LabelVocabulary& vocab, double segment_len_s) {
    if (preds.size() != refs.size()) throw ValidationError("segment-based F1 needs one prediction list per reference clip");
    if (!(segment_len_s > 0.0)) throw ValidationError("segment length must be positive");
    check_labels(preds, vocab);
    check_labels(refs, vocab);
    CountTable table(vocab);
    for (std::size_t k = 0; k < refs.size(); ++k) {
        const double len = refs[k].clip_len_s;
        const auto n_seg = static_cast<std::size_t>(std::ceil(len / segment_len_s - 1e-9));
        auto activity = [&](const ClipEvents& clip) {
            std::vector<std::vector<char>> act(vocab.size(), std::vector<char>(n_seg, 0));
            for (const auto& e : clip.events) {
                const auto c = static_cast<std::size_t>(vocab.index_of(e.label));
                for (std::size_t s = 0; s < n_seg; ++s) {
                    const double lo = static_cast<double>(s) * segment_len_s;
                    const double hi = std::min(lo + segment_len_s, len);
                    if (std::min(e.offset_s, hi) - std::max(e.onset_s, lo) > 0.0) act[c][s] = 1;
                }
            }
            return act;
        };
        const auto pa = activity(preds[k]);
        const auto ra = activity(refs[k]);
        for (std::size_t c = 0; c < vocab.size(); ++c) {
            for (std::size_t s = 0; s < n_seg; ++s) {
                if (pa[c][s] && ra[c][s]) ++table.counts[c].tp;
                else if (pa[c][s]) ++table.counts[c].fp;
                else if (ra[c][s]) ++table.counts[c].fn;
            }
        }
    }
    return table.finish();
}

MetricsReport tagging_macro_f1(const std::vector<RowVector>& tag_probs, const std::vector<std::set<std::string>>& refs,
                               const LabelVocabulary& vocab, double tau) {
    if (tag_probs.size() != refs.size()) throw ValidationError("tagging F1 needs one probability vector per clip");
    CountTable table(vocab);
    for (std::size_t k = 0; k < refs.size(); ++k) {
        if (tag_probs[k].size() != static_cast<Eigen::Index>(vocab.size())) {
            throw ValidationError("tag probability vector does not match the vocabulary");
        }
        for (const auto& t : refs[k]) (void)vocab.index_of(t);
        for (std::size_t c = 0; c < vocab.size(); ++c) {
            const bool pred = tag_probs[k](static_cast<Eigen::Index>(c)) >= tau;
            const bool ref = refs[k].count(vocab.classes()[c]) != 0;
            if (pred && ref) ++table.counts[c].tp;
            else if (pred) ++table.counts[c].fp;
            else if (ref) ++table.counts[c].fn;
        }
    }
    return table.finish();
}

namespace {

nlohmann::json metrics_json(const MetricsReport& r) {
    nlohmann::json j;
    j["macro_f1"] = r.macro_f1;
    j["classes"] = nlohmann::json::array();
    for (const auto& c : r.classes) {
        j["classes"].push_back({{"label", c.label},
                                {"tp", c.tp},
                                {"fp", c.fp},
                                {"fn", c.fn},
                                {"precision", c.precision()},
                                {"recall", c.recall()},
                                {"f1", c.f1()}});
    }
    return j;
}

}  // namespace

std::string report_to_json(const std::vector<EvaluationReport>& reports) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : reports) {
        j.push_back({{"fusion", r.strategy},
                     {"event_based", metrics_json(r.event_based)},
                     {"segment_based", metrics_json(r.segment_based)},
                     {"tagging", metrics_json(r.tagging)}});
    }
    return j.dump(2);
}

std::string report_to_table(const std::vector<EvaluationReport>& reports) {
    std::ostringstream os;
    os << std::left << std::setw(10) << "fusion" << std::right << std::setw(8) << "Eb[%]" << std::setw(8) << "Sb[%]"
       << std::setw(8) << "At[%]" << "\n";
    os << std::fixed << std::setprecision(2);
    for (const auto& r : reports) {
        os << std::left << std::setw(10) << r.strategy << std::right << std::setw(8) << 100.0 * r.event_based.macro_f1
           << std::setw(8) << 100.0 * r.segment_based.macro_f1 << std::setw(8) << 100.0 * r.tagging.macro_f1 << "\n";
    }
    return os.str();
}

}  // namespace sedt
