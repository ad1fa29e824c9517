#pragma once

// Event-based (collar) F1, segment-based F1 and clip-level tagging F1, each
// macro-averaged over classes.

#include "sedt/core.hpp"
#include "sedt/data.hpp"
#include "sedt/prediction.hpp"

#include <set>
#include <string>
#include <vector>

namespace sedt {

struct EventBasedConfig {
    double onset_collar_s = 0.2;
    double offset_collar_s = 0.2;
    double offset_collar_frac = 0.2;
};

struct ClassCounts {
    std::string label;
    long tp = 0;
    long fp = 0;
    long fn = 0;

    double precision() const;
    double recall() const;
    double f1() const;
};

struct MetricsReport {
    std::vector<ClassCounts> classes;  // only classes present in references or predictions
    double macro_f1 = 0.0;

    const ClassCounts* find(const std::string& label) const;
};

/// Events of one clip together with its length.
struct ClipEvents {
    double clip_len_s = 10.0;
    std::vector<LabeledEvent> events;
};

/// Whether `pred` may match `ref` under the onset/offset collars.
bool within_collars(const LabeledEvent& pred, const LabeledEvent& ref, const EventBasedConfig& cfg);

/// Size of a maximum matching in a bipartite graph given as adjacency lists (left -> right).
std::size_t max_bipartite_matching(const std::vector<std::vector<int>>& adjacency, std::size_t right_size);

MetricsReport event_based_f1(const std::vector<ClipEvents>& preds, const std::vector<ClipEvents>& refs,
                             const LabelVocabulary& vocab, const EventBasedConfig& cfg = {});

MetricsReport segment_based_f1(const std::vector<ClipEvents>& preds, const std::vector<ClipEvents>& refs,
                               const LabelVocabulary& vocab, double segment_len_s = 1.0);

MetricsReport tagging_macro_f1(const std::vector<RowVector>& tag_probs, const std::vector<std::set<std::string>>& refs,
                               const LabelVocabulary& vocab, double tau = 0.5);

/// Event-based, segment-based and tagging reports, in that order.
struct EvaluationReport {
    std::string strategy;
    MetricsReport event_based;
    MetricsReport segment_based;
    MetricsReport tagging;
};

std::string report_to_json(const std::vector<EvaluationReport>& reports);
/// Plain-text table with Eb[%] Sb[%] At[%] columns, one row per strategy.
std::string report_to_table(const std::vector<EvaluationReport>& reports);

}  // namespace sedt
