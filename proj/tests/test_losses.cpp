#include <doctest.h>

#include "sedt/losses.hpp"

#include <cmath>
#include <functional>
#include <random>

using namespace sedt;

namespace {

Matrix random_probs(int rows, int cols, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    Matrix p(rows, cols);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
    for (Eigen::Index r = 0; r < rows; ++r) p.row(r) /= p.row(r).sum();
    return p;
}

Matrix random_bounds(int rows, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.1, 0.9), l(0.05, 0.4);
    Matrix b(rows, 2);
    for (int j = 0; j < rows; ++j) b.row(j) << u(rng), l(rng);
    return b;
}

PredictionSet random_prediction(int blocks, int n, int k, std::mt19937_64& rng) {
    PredictionSet p;
    for (int m = 0; m < blocks; ++m) p.blocks.push_back({random_probs(n, k + 1, rng), random_bounds(n, rng)});
    std::uniform_real_distribution<double> u(0.05, 0.95);
    p.tag_probs = RowVector(k);
    for (int c = 0; c < k; ++c) p.tag_probs(c) = u(rng);
    return p;
}

// Central differences of f over every entry of a prediction set, compared with the analytic gradient.
double max_gradient_error(PredictionSet p, const PredictionGrad& g, const std::function<double(const PredictionSet&)>& f) {
    const double h = 1e-6;
    double worst = 0.0;
    auto probe = [&](double& x, double analytic) {
        const double keep = x;
        x = keep + h;
        const double up = f(p);
        x = keep - h;
        const double down = f(p);
        x = keep;
        const double numeric = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(numeric - analytic) / std::max(1.0, std::abs(numeric) + std::abs(analytic)));
    };
    for (std::size_t m = 0; m < p.blocks.size(); ++m) {
        auto& b = p.blocks[m];
        for (Eigen::Index i = 0; i < b.class_probs.size(); ++i) probe(b.class_probs.data()[i], g.blocks[m].class_probs.data()[i]);
        for (Eigen::Index i = 0; i < b.boundaries.size(); ++i) probe(b.boundaries.data()[i], g.blocks[m].boundaries.data()[i]);
    }
    for (Eigen::Index c = 0; c < p.tag_probs.size(); ++c) probe(p.tag_probs(c), g.tag_probs(c));
    return worst;
}

}  // namespace

TEST_CASE("location loss examples") {
    const LocationWeights w{2.0, 5.0};
    CHECK(pair_location_loss({0.4, 0.2}, {0.4, 0.2}, w) == 0.0);
    // [0.0, 0.4] against [0.2, 0.6]: GIoU = 1/3, L1 = 0.2 + 0.
    CHECK(pair_location_loss({0.2, 0.4}, {0.4, 0.4}, w) == doctest::Approx(7.0 / 3.0).epsilon(1e-12));

    Matrix bounds(2, 2);
    bounds << 0.4, 0.4, 0.9, 0.1;
    const std::vector<EventInstance> targets{{0, {0.2, 0.4}}};
    CHECK(location_loss(bounds, targets, {{0, 0}}, w) == doctest::Approx(7.0 / 3.0).epsilon(1e-12));
    CHECK(location_loss(bounds, targets, {}, w) == 0.0);
}

TEST_CASE("classification loss examples") {
    Matrix p(3, 3);
    p << 1.0, 0.0, 0.0, 0.5, 0.25, 0.25, 0.0, 0.0, 1.0;
    CHECK(classification_loss(p, {0, 2, 2}, 1.0) == doctest::Approx(-std::log(0.25)));
    CHECK(classification_loss(p, {0, 0, 2}, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(classification_loss(p, {0, 2, 2}, 0.0) == 0.0);

    std::size_t clamped = 0;
    const double v = classification_loss(p, {1, 0, 2}, 1.0, nullptr, &clamped);
    CHECK(clamped == 1);
    CHECK(v == doctest::Approx(-std::log(1e-12) + std::log(2.0)));
    CHECK_THROWS_AS(classification_loss(p, {0, 0}, 1.0), ValidationError);
}

TEST_CASE("tagging losses") {
    RowVector y(3), l(3);
    y << 1, 0, 1;
    l = y;
    CHECK(tagging_loss(l, y) <= 1e-10);

    RowVector p(1), one(1);
    p << 0.25;
    one << 1.0;
    CHECK(tagging_loss(p, one) == doctest::Approx(1.386294).epsilon(1e-6));

    Matrix cls(2, 3);
    cls << 0.7, 0.1, 0.2, 0.05, 0.9, 0.05;
    const RowVector pooled = pooled_tag_probs(cls);
    CHECK(pooled(0) == 0.7);
    CHECK(pooled(1) == 0.9);

    RowVector yt(2);
    yt << 1, 0;
    const double expected = (-std::log(0.7) - std::log(0.1)) / 2.0;
    CHECK(pooled_tagging_loss(cls, yt) == doctest::Approx(expected).epsilon(1e-12));

    // The max-pooled gradient reaches only the argmax slot of each class.
    Matrix d = Matrix::Zero(2, 3);
    (void)pooled_tagging_loss(cls, yt, &d);
    CHECK(d(1, 0) == 0.0);
    CHECK(d(0, 1) == 0.0);
    CHECK(d.col(2).cwiseAbs().sum() == 0.0);
    CHECK(d(0, 0) == doctest::Approx(-1.0 / 0.7 / 2.0));
    CHECK(d(1, 1) == doctest::Approx(1.0 / 0.1 / 2.0));
}

TEST_CASE("strong loss hand computation") {
    // One block, N = 2, K = 2, one target.
    PredictionSet p;
    Matrix probs(2, 3), bounds(2, 2);
    probs << 0.6, 0.3, 0.1, 0.2, 0.2, 0.6;
    bounds << 0.4, 0.4, 0.8, 0.1;
    p.blocks.push_back({probs, bounds});
    p.tag_probs = RowVector(2);
    p.tag_probs << 0.8, 0.3;
    const std::vector<EventInstance> targets{{0, {0.2, 0.4}}};
    LossWeights w;
    w.lambda_at = 3.0;
    const auto out = strong_loss(p, targets, w);
    const double loc = 7.0 / 3.0;
    const double cls = -std::log(0.6) - std::log(0.6);
    const double tag = (-std::log(0.8) - std::log(0.7)) / 2.0;
    CHECK(out.blocks.size() == 1);
    CHECK(std::abs(out.blocks[0].loc - loc) <= 1e-9);
    CHECK(std::abs(out.blocks[0].cls - cls) <= 1e-9);
    CHECK(std::abs(out.tag - tag) <= 1e-9);
    CHECK(std::abs(out.total - (loc + cls + 3.0 * tag)) <= 1e-9);

    w.lambda_at = 0.0;
    CHECK(std::abs(strong_loss(p, targets, w).total - (loc + cls)) <= 1e-12);

    PredictionSet doubled = p;
    doubled.blocks.push_back(p.blocks[0]);
    const auto two = strong_loss(doubled, targets, w);
    CHECK(two.loc_sum() + two.cls_sum() == doctest::Approx(2.0 * (loc + cls)).epsilon(1e-12));
}

TEST_CASE("one-to-one loss is invariant to prediction order") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = random_prediction(2, 6, 3, rng);
        const std::vector<EventInstance> targets{{0, {0.3, 0.2}}, {2, {0.7, 0.1}}};
        std::vector<int> perm{5, 3, 1, 0, 2, 4};
        PredictionSet q = p;
        for (std::size_t m = 0; m < p.blocks.size(); ++m) {
            for (int j = 0; j < 6; ++j) {
                q.blocks[m].class_probs.row(j) = p.blocks[m].class_probs.row(perm[static_cast<std::size_t>(j)]);
                q.blocks[m].boundaries.row(j) = p.blocks[m].boundaries.row(perm[static_cast<std::size_t>(j)]);
            }
        }
        const LossWeights w;
        CHECK(strong_loss(q, targets, w).total == doctest::Approx(strong_loss(p, targets, w).total).epsilon(1e-12));
    }
}

TEST_CASE("weak loss examples") {
    std::mt19937_64 rng(32);
    const auto p = random_prediction(2, 4, 3, rng);
    RowVector y(3);
    y << 1, 0, 0;
    LossWeights w;
    w.lambda_at = 0.0;
    w.lambda_at_p = 0.0;
    CHECK(weak_loss(p, y, w).total == 0.0);

    w.lambda_at = w.lambda_at_p = 0.25;
    const auto out = weak_loss(p, y, w);
    CHECK(out.loc_sum() == 0.0);
    CHECK(out.cls_sum() == 0.0);
    CHECK(out.total == doctest::Approx(0.25 * out.tag + 0.25 * out.pooled_tag).epsilon(1e-12));

    // Boundaries receive no gradient from a weak clip.
    PredictionGrad g = PredictionGrad::zeros_like(p);
    (void)weak_loss(p, y, w, &g);
    for (const auto& b : g.blocks) CHECK(b.boundaries.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.blocks[0].class_probs.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mixed batch routes strong and weak clips") {
    std::mt19937_64 rng(33);
    const LossWeights w;
    const auto a = random_prediction(2, 4, 3, rng), b = random_prediction(2, 4, 3, rng);
    ClipTargets strong{{{1, {0.5, 0.2}}}, RowVector::Zero(3), true};
    RowVector y(3);
    y << 0, 1, 1;
    ClipTargets weak{{}, y, false};

    const double s = strong_loss(a, strong.events, w).total;
    const double wk = weak_loss(b, y, w).total;
    CHECK(mixed_batch_loss({a}, {strong}, w) == doctest::Approx(s).epsilon(1e-12));
    CHECK(mixed_batch_loss({b}, {weak}, w) == doctest::Approx(wk).epsilon(1e-12));
    const double pure_strong = mixed_batch_loss({a, a}, {strong, strong}, w);
    const double pure_weak = mixed_batch_loss({b, b}, {weak, weak}, w);
    CHECK(mixed_batch_loss({a, b}, {strong, weak}, w) == doctest::Approx((pure_strong + pure_weak) / 2.0).epsilon(1e-12));
    CHECK_THROWS_AS(mixed_batch_loss({a}, {}, w), ValidationError);
}

TEST_CASE("one-to-many loss adds exactly the extra pair losses") {
    PredictionSet p;
    Matrix probs(3, 3), bounds(3, 2);
    probs << 0.8, 0.1, 0.1, 0.5, 0.2, 0.3, 0.1, 0.1, 0.8;
    bounds << 0.2, 0.4, 0.4, 0.4, 0.9, 0.1;
    p.blocks.push_back({probs, bounds});
    p.tag_probs = RowVector::Constant(2, 0.5);
    const std::vector<EventInstance> targets{{0, {0.2, 0.4}}};
    const LossWeights w;

    Assignment base;
    base.target_of_pred = {0, 1, 2};
    OneToManyAssignment otm;
    otm.base = base;
    otm.num_targets = 1;
    const auto one = planned_strong_loss(p, targets, {one_to_many_plan(otm)}, w);
    CHECK(one.total == doctest::Approx(planned_strong_loss(p, targets, {one_to_one_plan(base, 1)}, w).total));

    otm.extra[0] = {1};
    const auto many = planned_strong_loss(p, targets, {one_to_many_plan(otm)}, w);
    CHECK(many.extra_matches == 1);
    // Prediction 1 swaps its empty-class term for a full pair loss against target 0.
    const double added = 7.0 / 3.0 - std::log(0.5) + std::log(0.3);
    CHECK(std::abs(many.total - one.total - added) <= 1e-12);

    // A perfect duplicate has zero pair loss; only its (clamped) empty-class term goes away.
    Matrix perfect_probs = probs;
    perfect_probs.row(1) << 1.0, 0.0, 0.0;
    Matrix perfect_bounds = bounds;
    perfect_bounds.row(1) << 0.2, 0.4;
    PredictionSet q = p;
    q.blocks[0] = {perfect_probs, perfect_bounds};
    w.validate();
    const auto with = planned_strong_loss(q, targets, {one_to_many_plan(otm)}, w);
    otm.extra.clear();
    const auto without = planned_strong_loss(q, targets, {one_to_many_plan(otm)}, w);
    CHECK(std::abs(with.total - (without.total + std::log(1e-12))) <= 1e-9);
}

TEST_CASE("extreme one-to-many settings give the one-to-one loss bit-identically") {
    std::mt19937_64 rng(34);
    const LossWeights w;
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = random_prediction(2, 6, 3, rng);
        const std::vector<EventInstance> targets{{0, {0.3, 0.2}}, {1, {0.6, 0.3}}};
        const double base = strong_loss(p, targets, w).total;
        std::mt19937_64 r(static_cast<std::uint64_t>(trial));
        OneToManyOptions neg{{-std::numeric_limits<double>::infinity(), 1.0, false}, &r};
        CHECK(strong_loss(p, targets, w, nullptr, &neg).total == base);
        OneToManyOptions zero{{100.0, 0.0, false}, &r};
        CHECK(strong_loss(p, targets, w, nullptr, &zero).total == base);
    }
}

TEST_CASE("loss gradients agree with central differences") {
    std::mt19937_64 rng(35);
    LossWeights w;
    w.empty_class_weight = 0.3;
    w.lambda_at_p = 0.25;
    const std::vector<EventInstance> targets{{0, {0.3, 0.2}}, {2, {0.7, 0.15}}};
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = random_prediction(2, 5, 3, rng);

        // Matching is piecewise constant, so freeze it at the unperturbed point.
        std::vector<SupervisionPlan> plans;
        for (const auto& b : p.blocks) plans.push_back(one_to_one_plan(match_block(b, targets, w), 2));
        PredictionGrad g = PredictionGrad::zeros_like(p);
        (void)planned_strong_loss(p, targets, plans, w, &g);
        CHECK(max_gradient_error(p, g, [&](const PredictionSet& x) { return planned_strong_loss(x, targets, plans, w).total; }) <
              1e-6);

        RowVector y(3);
        y << 1, 0, 1;
        PredictionGrad gw = PredictionGrad::zeros_like(p);
        (void)weak_loss(p, y, w, &gw);
        CHECK(max_gradient_error(p, gw, [&](const PredictionSet& x) { return weak_loss(x, y, w).total; }) < 1e-6);

        std::vector<PredictionGrad> grads;
        const std::vector<PredictionSet> batch{p, p};
        const std::vector<ClipTargets> ct{{targets, RowVector::Zero(3), true}, {{}, y, false}};
        (void)mixed_batch_loss(batch, ct, w, &grads);
        PredictionGrad sum = grads[0];
        for (std::size_t m = 0; m < sum.blocks.size(); ++m) {
            sum.blocks[m].class_probs += grads[1].blocks[m].class_probs;
            sum.blocks[m].boundaries += grads[1].blocks[m].boundaries;
        }
        sum.tag_probs += grads[1].tag_probs;
        CHECK(max_gradient_error(p, sum, [&](const PredictionSet& x) {
                  return 0.5 * planned_strong_loss(x, targets, plans, w).total + 0.5 * weak_loss(x, y, w).total;
              }) < 1e-6);
    }
}
