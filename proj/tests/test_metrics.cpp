#include <doctest.h>

#include "sedt/metrics.hpp"

#include <algorithm>
#include <random>

using namespace sedt;

namespace {

const LabelVocabulary kVocab({"A", "B", "C"});

ClipEvents clip(std::vector<LabeledEvent> events, double len = 10.0) { return {len, std::move(events)}; }

// Largest matching by exhaustive search over which right node each left node takes.
std::size_t brute_force_matching(const std::vector<std::vector<int>>& adj, std::size_t left, std::vector<bool>& used) {
    if (left == adj.size()) return 0;
    std::size_t best = brute_force_matching(adj, left + 1, used);
    for (int r : adj[left]) {
        if (used[static_cast<std::size_t>(r)]) continue;
        used[static_cast<std::size_t>(r)] = true;
        best = std::max(best, 1 + brute_force_matching(adj, left + 1, used));
        used[static_cast<std::size_t>(r)] = false;
    }
    return best;
}

}  // namespace

TEST_CASE("class counts give precision, recall and f1") {
    ClassCounts c{"A", 1, 1, 1};
    CHECK(c.precision() == 0.5);
    CHECK(c.recall() == 0.5);
    CHECK(c.f1() == 0.5);
    ClassCounts none{"A", 0, 0, 0};
    CHECK(none.f1() == 0.0);
}

TEST_CASE("event-based collar examples") {
    const EventBasedConfig cfg;
    CHECK(within_collars({"A", 1.15, 3.0}, {"A", 1.0, 3.0}, cfg));
    CHECK_FALSE(within_collars({"A", 1.25, 3.0}, {"A", 1.0, 3.0}, cfg));
    CHECK_FALSE(within_collars({"B", 1.0, 3.0}, {"A", 1.0, 3.0}, cfg));
    // A 5 s reference allows a 1 s offset deviation.
    CHECK(within_collars({"A", 1.0, 6.9}, {"A", 1.0, 6.0}, cfg));
    CHECK_FALSE(within_collars({"A", 1.0, 7.1}, {"A", 1.0, 6.0}, cfg));
    // Short references fall back to the 200 ms offset collar.
    CHECK(within_collars({"A", 1.0, 1.7}, {"A", 1.0, 1.5}, cfg));
    CHECK_FALSE(within_collars({"A", 1.0, 1.75}, {"A", 1.0, 1.5}, cfg));

    const std::vector<ClipEvents> refs{clip({{"A", 1.0, 3.0}, {"B", 5.0, 6.0}})};
    CHECK(event_based_f1(refs, refs, kVocab).macro_f1 == 1.0);

    const std::vector<ClipEvents> onset{clip({{"A", 1.15, 3.0}, {"B", 5.0, 6.0}})};
    CHECK(event_based_f1(onset, refs, kVocab).macro_f1 == 1.0);

    const std::vector<ClipEvents> one_each{clip({{"A", 1.0, 3.0}, {"A", 7.0, 8.0}})};
    const std::vector<ClipEvents> ref_two{clip({{"A", 1.0, 3.0}, {"A", 4.0, 5.0}})};
    const auto r = event_based_f1(one_each, ref_two, kVocab);
    const auto* a = r.find("A");
    REQUIRE(a);
    CHECK(a->tp == 1);
    CHECK(a->fp == 1);
    CHECK(a->fn == 1);
    CHECK(r.macro_f1 == 0.5);
    CHECK(r.classes.size() == 1);

    const std::vector<ClipEvents> unknown{clip({{"Z", 1.0, 2.0}})};
    CHECK_THROWS_AS(event_based_f1(unknown, refs, kVocab), ValidationError);
    CHECK_THROWS_AS(event_based_f1(refs, {}, kVocab), ValidationError);
}

TEST_CASE("event matching is maximal, not greedy") {
    // The first prediction fits both references; a greedy scan could strand the second.
    const std::vector<ClipEvents> refs{clip({{"A", 1.0, 2.0}, {"A", 1.3, 2.3}})};
    const std::vector<ClipEvents> preds{clip({{"A", 1.15, 2.15}, {"A", 0.95, 1.95}})};
    CHECK(event_based_f1(preds, refs, kVocab).find("A")->tp == 2);
}

TEST_CASE("maximum bipartite matching equals brute force") {
    std::mt19937_64 rng(51);
    std::bernoulli_distribution edge(0.35);
    std::uniform_int_distribution<int> size(0, 6);
    for (int trial = 0; trial < 500; ++trial) {
        const int left = size(rng), right = size(rng);
        std::vector<std::vector<int>> adj(static_cast<std::size_t>(left));
        for (auto& row : adj) {
            for (int r = 0; r < right; ++r) {
                if (edge(rng)) row.push_back(r);
            }
        }
        std::vector<bool> used(static_cast<std::size_t>(right), false);
        CHECK(max_bipartite_matching(adj, static_cast<std::size_t>(right)) == brute_force_matching(adj, 0, used));
    }
}

TEST_CASE("event-based counts match brute force on random clips") {
    std::mt19937_64 rng(52);
    std::uniform_real_distribution<double> on(0.0, 8.0), len(0.1, 2.0), jitter(-0.3, 0.3);
    std::uniform_int_distribution<int> count(0, 6);
    const EventBasedConfig cfg;
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<LabeledEvent> ref, pred;
        for (int i = count(rng); i > 0; --i) {
            const double o = on(rng);
            ref.push_back({"A", o, o + len(rng)});
        }
        for (int i = count(rng); i > 0; --i) {
            if (!ref.empty() && i % 2 == 0) {
                const auto& r = ref[static_cast<std::size_t>(i) % ref.size()];
                pred.push_back({"A", std::max(0.0, r.onset_s + jitter(rng)), r.offset_s + jitter(rng)});
            } else {
                const double o = on(rng);
                pred.push_back({"A", o, o + len(rng)});
            }
        }
        std::vector<std::vector<int>> adj(pred.size());
        for (std::size_t p = 0; p < pred.size(); ++p) {
            for (std::size_t r = 0; r < ref.size(); ++r) {
                if (within_collars(pred[p], ref[r], cfg)) adj[p].push_back(static_cast<int>(r));
            }
        }
        std::vector<bool> used(ref.size(), false);
        const auto tp = static_cast<long>(brute_force_matching(adj, 0, used));
        const auto report = event_based_f1({clip(pred)}, {clip(ref)}, kVocab, cfg);
        const auto* a = report.find("A");
        if (ref.empty() && pred.empty()) {
            CHECK(a == nullptr);
            continue;
        }
        REQUIRE(a);
        CHECK(a->tp == tp);
        CHECK(a->fp == static_cast<long>(pred.size()) - tp);
        CHECK(a->fn == static_cast<long>(ref.size()) - tp);

        // Permuting events leaves the counts unchanged.
        std::shuffle(pred.begin(), pred.end(), rng);
        std::shuffle(ref.begin(), ref.end(), rng);
        CHECK(event_based_f1({clip(pred)}, {clip(ref)}, kVocab, cfg).find("A")->tp == tp);
    }
}

TEST_CASE("adding a copy of a matched prediction adds one false positive") {
    const std::vector<ClipEvents> refs{clip({{"A", 1.0, 3.0}})};
    std::vector<ClipEvents> preds{clip({{"A", 1.0, 3.0}})};
    const auto before = *event_based_f1(preds, refs, kVocab).find("A");
    preds[0].events.push_back(preds[0].events[0]);
    const auto after = *event_based_f1(preds, refs, kVocab).find("A");
    CHECK(after.tp == before.tp);
    CHECK(after.fp == before.fp + 1);
}

TEST_CASE("segment-based examples") {
    const std::vector<ClipEvents> refs{clip({{"A", 0.0, 1.5}})};
    CHECK(segment_based_f1(refs, refs, kVocab).macro_f1 == 1.0);

    const std::vector<ClipEvents> preds{clip({{"A", 0.0, 1.0}})};
    const auto r = segment_based_f1(preds, refs, kVocab);
    const auto* a = r.find("A");
    REQUIRE(a);
    CHECK(a->tp == 1);
    CHECK(a->fn == 1);
    CHECK(a->fp == 0);
    CHECK(a->precision() == 1.0);
    CHECK(a->recall() == 0.5);

    const std::vector<ClipEvents> empty{clip({})};
    CHECK(segment_based_f1(empty, refs, kVocab).macro_f1 == 0.0);

    // A 10.5 s clip has a short final segment.
    const std::vector<ClipEvents> tail{clip({{"B", 10.2, 10.4}}, 10.5)};
    const auto t = segment_based_f1(tail, tail, kVocab);
    CHECK(t.find("B")->tp == 1);
}

TEST_CASE("tagging macro f1 examples") {
    RowVector exact(3), zeros = RowVector::Zero(3);
    exact << 1, 0, 1;
    const std::vector<std::set<std::string>> truth{{"A", "C"}};
    CHECK(tagging_macro_f1({exact}, truth, kVocab).macro_f1 == 1.0);
    CHECK(tagging_macro_f1({zeros}, truth, kVocab).macro_f1 == 0.0);

    RowVector p1(3), p2(3);
    p1 << 0.6, 0, 0;
    p2 << 0.4, 0, 0;
    const auto r = tagging_macro_f1({p1, p2}, {{"A"}, {"A"}}, kVocab);
    CHECK(r.find("A")->precision() == 1.0);
    CHECK(r.find("A")->recall() == 0.5);
    CHECK(r.macro_f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("report formats list Eb, Sb and At in order") {
    EvaluationReport rep;
    rep.strategy = "none";
    rep.event_based.macro_f1 = 0.5;
    rep.segment_based.macro_f1 = 0.75;
    rep.tagging.macro_f1 = 1.0;
    const auto table = report_to_table({rep});
    const auto eb = table.find("Eb"), sb = table.find("Sb"), at = table.find("At");
    REQUIRE(eb != std::string::npos);
    CHECK(eb < sb);
    CHECK(sb < at);
    CHECK(table.find("50.00") != std::string::npos);
    CHECK(table.find("75.00") != std::string::npos);
    CHECK(report_to_json({rep}).find("\"fusion\"") != std::string::npos);
}
