#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include "sedt/losses.hpp"
#include "sedt/model.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace sedt::testing {

/// d = 32, E = M = 1, N = 3 on a 16-bin input.
inline ModelConfig micro_config() {
    ModelConfig c;
    c.n_mels = 16;
    c.backbone = {{4, 2, 2}, {8, 2, 2}};
    c.d_model = 32;
    c.n_heads = 4;
    c.ffn_width = 32;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.num_queries = 3;
    c.num_classes = 3;
    c.dropout = 0.0;
    return c;
}

struct ToyClip {
    Matrix spec;
    std::vector<char> mask;
    ClipTargets targets;
};

/// One strong clip with two events and one padded weak clip.
inline std::vector<ToyClip> toy_batch(int n_mels, int num_classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::vector<ToyClip> clips(2);
    for (auto& c : clips) {
        c.spec = Matrix(24, n_mels);
        for (Eigen::Index i = 0; i < c.spec.size(); ++i) c.spec.data()[i] = g(rng);
        c.mask.assign(24, 0);
    }
    clips[0].targets = {{{1 % num_classes, {0.3, 0.2}}, {0, {0.7, 0.3}}}, RowVector::Zero(num_classes), true};
    for (int t = 20; t < 24; ++t) {
        clips[1].mask[static_cast<std::size_t>(t)] = 1;
        clips[1].spec.row(t).setZero();
    }
    RowVector weak = RowVector::Zero(num_classes);
    weak(num_classes - 1) = 1.0;
    clips[1].targets = {{}, weak, false};
    return clips;
}

/// Mean mixed-batch loss; when `with_grad`, parameter gradients are left in the model.
inline double batch_loss(SedtModel& model, const std::vector<ToyClip>& clips, const LossWeights& w, bool with_grad) {
    std::vector<std::unique_ptr<ag::Tape>> tapes;
    std::vector<ForwardGraph> graphs;
    std::vector<PredictionSet> preds;
    std::vector<ClipTargets> targets;
    for (const auto& c : clips) {
        tapes.push_back(std::make_unique<ag::Tape>());
        RunOptions opts;
        opts.track_grad = with_grad;
        graphs.push_back(model.forward(*tapes.back(), c.spec, c.mask, opts));
        preds.push_back(graphs.back().prediction());
        targets.push_back(c.targets);
    }
    std::vector<PredictionGrad> grads;
    std::vector<LossBreakdown> parts;
    const double loss = mixed_batch_loss(preds, targets, w, with_grad ? &grads : nullptr, &parts);
    if (with_grad) {
        model.zero_grad();
        for (std::size_t i = 0; i < clips.size(); ++i) {
            const auto l = attach_loss(*tapes[i], graphs[i], parts[i].total / static_cast<double>(clips.size()), grads[i]);
            tapes[i]->backward(l);
        }
    }
    return loss;
}

struct GradCheckResult {
    double worst = 0.0;
    std::string worst_entry;
    std::size_t probes = 0;
};

/// Central differences on up to `per_param` entries of every parameter tensor.
/// Relative error is |fd - an| / max(|fd| + |an|, floor); the floor sits above
/// the round-off level of a difference quotient at step h.
inline GradCheckResult model_gradient_check(SedtModel& model, const std::vector<ToyClip>& clips, const LossWeights& w,
                                            int per_param, double h = 1e-6, double floor = 1e-5) {
    (void)batch_loss(model, clips, w, true);
    std::vector<Matrix> analytic;
    for (const auto& p : model.parameters()) analytic.push_back(p.grad);
    GradCheckResult out;
    for (std::size_t k = 0; k < model.parameters().size(); ++k) {
        auto& p = model.parameters()[k];
        const auto size = p.value.size();
        const auto probes = std::min<Eigen::Index>(size, per_param);
        for (Eigen::Index s = 0; s < probes; ++s) {
            const Eigen::Index idx = (s * 7919 + static_cast<Eigen::Index>(k)) % size;
            const double keep = p.value.data()[idx];
            p.value.data()[idx] = keep + h;
            const double up = batch_loss(model, clips, w, false);
            p.value.data()[idx] = keep - h;
            const double down = batch_loss(model, clips, w, false);
            p.value.data()[idx] = keep;
            const double fd = (up - down) / (2 * h);
            const double an = analytic[k].data()[idx];
            const double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), floor);
            ++out.probes;
            if (rel > out.worst) {
                out.worst = rel;
                out.worst_entry = p.name + "[" + std::to_string(idx) + "]";
            }
        }
    }
    return out;
}

}  // namespace sedt::testing
