#include <doctest.h>

#include "sedt/core.hpp"

#include <algorithm>
#include <random>

using namespace sedt;

namespace {

// Endpoint arithmetic on [start, end] intervals, independent of the library.
struct Interval {
    double lo, hi;
};

Interval endpoints(double m, double l) { return {m - l / 2.0, m + l / 2.0}; }

double oracle_iou(Interval a, Interval b) {
    const double inter = std::max(0.0, std::min(a.hi, b.hi) - std::max(a.lo, b.lo));
    const double uni = (a.hi - a.lo) + (b.hi - b.lo) - inter;
    return inter / uni;
}

double oracle_giou(Interval a, Interval b) {
    const double inter = std::max(0.0, std::min(a.hi, b.hi) - std::max(a.lo, b.lo));
    const double uni = (a.hi - a.lo) + (b.hi - b.lo) - inter;
    const double enc = std::max(a.hi, b.hi) - std::min(a.lo, b.lo);
    return inter / uni - (enc - uni) / enc;
}

Boundary random_boundary(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double l = 0.01 + 0.99 * u(rng);
    return {u(rng), l};
}

}  // namespace

TEST_CASE("vocabulary indexes classes and reserves the empty slot") {
    LabelVocabulary v({"dog", "siren", "car"});
    CHECK(v.size() == 3);
    CHECK(v.empty_index() == 3);
    CHECK(v.index_of("siren") == 1);
    CHECK(v.name(2) == "car");
    CHECK(v.contains("dog"));
    CHECK_FALSE(v.contains("cat"));
    CHECK_THROWS_AS((void)v.index_of("cat"), ValidationError);
    CHECK_THROWS_AS(LabelVocabulary({"a", "a"}), ValidationError);
    CHECK_THROWS_AS(LabelVocabulary(std::vector<std::string>{}), ValidationError);
}

TEST_CASE("boundary to segment") {
    auto s = boundary_to_segment({0.5, 1.0}, 10.0);
    CHECK(s.onset_s == doctest::Approx(0.0));
    CHECK(s.offset_s == doctest::Approx(10.0));

    s = boundary_to_segment({0.5, 0.2}, 10.0);
    CHECK(s.onset_s == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(s.offset_s == doctest::Approx(6.0).epsilon(1e-12));

    s = boundary_to_segment({0.05, 0.2}, 10.0);
    CHECK(s.onset_s == 0.0);
    CHECK(s.offset_s == doctest::Approx(1.5).epsilon(1e-12));

    CHECK_THROWS_AS(boundary_to_segment({0.5, 0.0}, 10.0), ValidationError);
    CHECK_THROWS_AS(boundary_to_segment({1.2, 0.1}, 10.0), ValidationError);
    CHECK_THROWS_AS(boundary_to_segment({0.5, 0.2}, 0.0), ValidationError);
}

TEST_CASE("segment to boundary") {
    auto b = segment_to_boundary({4.0, 6.0}, 10.0);
    CHECK(b.center == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(b.duration == doctest::Approx(0.2).epsilon(1e-12));

    b = segment_to_boundary({0.0, 10.0}, 10.0);
    CHECK(b.center == doctest::Approx(0.5));
    CHECK(b.duration == doctest::Approx(1.0));

    CHECK_THROWS_AS(segment_to_boundary({2.0, 2.0}, 10.0), ValidationError);
    CHECK_THROWS_AS(segment_to_boundary({-1.0, 2.0}, 10.0), ValidationError);
    CHECK_THROWS_AS(segment_to_boundary({9.0, 11.0}, 10.0), ValidationError);
}

TEST_CASE("iou and giou worked examples match endpoint arithmetic") {
    CHECK(interval_iou({0.5, 0.2}, {0.5, 0.2}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(interval_giou({0.5, 0.2}, {0.5, 0.2}) == doctest::Approx(1.0).epsilon(1e-12));

    const Boundary a{0.2, 0.2}, b{0.7, 0.2};
    CHECK(std::abs(interval_iou(a, b)) <= 1e-12);
    CHECK(std::abs(interval_giou(a, b) - (-0.3 / 0.7)) <= 1e-12);
    CHECK(std::abs(interval_giou(a, b) - (-0.428571)) <= 1e-6);

    const Boundary c{0.2, 0.4}, d{0.4, 0.4};
    CHECK(std::abs(interval_iou(c, d) - 1.0 / 3.0) <= 1e-12);
    CHECK(std::abs(interval_giou(c, d) - 1.0 / 3.0) <= 1e-12);

    CHECK_THROWS_AS(interval_iou({0.5, 0.0}, {0.5, 0.1}), ValidationError);
    CHECK_THROWS_AS(interval_giou({0.5, 0.1}, {0.5, 0.0}), ValidationError);
}

TEST_CASE("iou properties on random intervals") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 2000; ++trial) {
        const Boundary a = random_boundary(rng), b = random_boundary(rng);
        const double iou = interval_iou(a, b), giou = interval_giou(a, b);
        CHECK(iou == interval_iou(b, a));
        CHECK(giou == doctest::Approx(interval_giou(b, a)).epsilon(1e-12));
        CHECK(std::abs(iou - oracle_iou(endpoints(a.center, a.duration), endpoints(b.center, b.duration))) <= 1e-12);
        CHECK(std::abs(giou - oracle_giou(endpoints(a.center, a.duration), endpoints(b.center, b.duration))) <= 1e-12);
        CHECK(giou <= iou + 1e-15);
        CHECK(giou > -1.0);
        if (std::min(a.end(), b.end()) >= std::max(a.start(), b.start())) CHECK(giou == doctest::Approx(iou).epsilon(1e-12));
    }
}

TEST_CASE("iou is translation invariant") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    int checked = 0;
    while (checked < 500) {
        const Boundary a = random_boundary(rng), b = random_boundary(rng);
        const double delta = u(rng);
        const Boundary a2{a.center + delta, a.duration}, b2{b.center + delta, b.duration};
        if (a2.center < 0 || a2.center > 1 || b2.center < 0 || b2.center > 1) continue;
        CHECK(interval_iou(a, b) == doctest::Approx(interval_iou(a2, b2)).epsilon(1e-9));
        CHECK(interval_giou(a, b) == doctest::Approx(interval_giou(a2, b2)).epsilon(1e-9));
        ++checked;
    }
}

TEST_CASE("segment/boundary round trip for unclamped boundaries") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
        const double lo = u(rng), hi = u(rng);
        if (hi - lo < 1e-3) continue;
        const Boundary b{(lo + hi) / 2.0, hi - lo};
        const Boundary r = segment_to_boundary(boundary_to_segment(b, 10.0), 10.0);
        CHECK(r.center == doctest::Approx(b.center).epsilon(1e-12));
        CHECK(r.duration == doctest::Approx(b.duration).epsilon(1e-12));
    }
}

TEST_CASE("giou gradient agrees with central differences") {
    std::mt19937_64 rng(14);
    const double h = 1e-7;
    for (int i = 0; i < 300; ++i) {
        const Boundary t = random_boundary(rng), p = random_boundary(rng);
        const auto g = interval_giou_grad(t, p);
        CHECK(g.value == doctest::Approx(interval_giou(t, p)).epsilon(1e-12));
        // Skip points within h of a kink (coinciding endpoints).
        const double ends[] = {t.start(), t.end()};
        bool near_kink = false;
        for (double e : ends) near_kink |= std::abs(e - p.start()) < 1e-4 || std::abs(e - p.end()) < 1e-4;
        if (near_kink) continue;
        const double fc = (interval_giou_grad(t, {p.center + h, p.duration}).value -
                           interval_giou_grad(t, {p.center - h, p.duration}).value) / (2 * h);
        const double fl = (interval_giou_grad(t, {p.center, p.duration + h}).value -
                           interval_giou_grad(t, {p.center, p.duration - h}).value) / (2 * h);
        CHECK(g.d_center == doctest::Approx(fc).epsilon(1e-5).scale(1.0));
        CHECK(g.d_duration == doctest::Approx(fl).epsilon(1e-5).scale(1.0));
    }
}
