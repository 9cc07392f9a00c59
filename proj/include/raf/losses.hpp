#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "raf/autodiff.hpp"
#include "raf/model.hpp"

namespace raf {

struct LossCoeffs {
    double alpha = 1.0;    // distillation weight
    double gamma = 0.01;   // l2 coefficient
    double mu_prox = 0.0;  // proximal coefficient; 0 disables the term

    void validate() const {
        if (!std::isfinite(alpha) || !std::isfinite(gamma) || !std::isfinite(mu_prox) ||
            alpha < 0.0 || gamma < 0.0 || mu_prox < 0.0)
            throw std::invalid_argument("loss coefficients must be finite and non-negative");
    }
};

/// (1/n) sum_j ||pred_j - target_j||^2 at the native heatmap grid.
inline NodeId task_loss(Tape& t, const std::vector<NodeId>& preds, const std::vector<NodeId>& targets) {
    if (preds.empty() || preds.size() != targets.size())
        throw std::invalid_argument("task_loss: need one target per prediction");
    std::vector<NodeId> terms;
    terms.reserve(preds.size());
    for (std::size_t j = 0; j < preds.size(); ++j) terms.push_back(t.sse(preds[j], targets[j]));
    return t.scale(t.sum(terms), 1.0 / static_cast<double>(preds.size()));
}

/// Multi-resolution distillation across adjacent levels: the level-(i-1)
/// output teaches the upsampled level-i output, with the teacher branch
/// detached. preds_per_level[0] is the native level; ops[i-1] lifts the
/// level-i heatmap grid onto the level-(i-1) grid. A single-level client
/// contributes a constant zero (no distillation gradient at the lowest
/// resolution).
inline NodeId mrkd_loss(Tape& t, const std::vector<std::vector<NodeId>>& preds_per_level,
                        const std::vector<std::shared_ptr<const UpsampleOp>>& ops) {
    if (preds_per_level.empty()) throw std::invalid_argument("mrkd_loss: no levels");
    const std::size_t levels = preds_per_level.size();
    if (levels == 1) return t.constant(Tensor::scalar(0.0));
    if (ops.size() != levels - 1)
        throw std::invalid_argument("mrkd_loss: need one upsampling operator per adjacent level pair");

    const std::size_t n = preds_per_level[0].size();
    std::vector<NodeId> level_terms;
    for (std::size_t i = 1; i < levels; ++i) {
        if (preds_per_level[i].size() != n)
            throw std::invalid_argument("mrkd_loss: level sample counts differ");
        if (!ops[i - 1]) throw std::invalid_argument("mrkd_loss: missing operator for level pair");
        std::vector<NodeId> terms;
        terms.reserve(n);
        for (std::size_t j = 0; j < n; ++j) {
            NodeId teacher = t.stop_gradient(preds_per_level[i - 1][j]);
            NodeId student = t.upsample(preds_per_level[i][j], ops[i - 1]);
            terms.push_back(t.sse(teacher, student));
        }
        level_terms.push_back(t.scale(t.sum(terms), 1.0 / static_cast<double>(n)));
    }
    return level_terms.size() == 1 ? level_terms[0] : t.sum(level_terms);
}

struct TotalLossNodes {
    NodeId total;
    NodeId reg;   // (1/2)||w||^2 before the gamma factor
    NodeId prox;  // -1 when the proximal term is disabled
};

/// task + alpha*kd + gamma*(1/2)||w||^2 (+ (mu/2)||w - w_global||^2).
/// The l2 term uses the gamma/2 form of the linearized objective.
inline TotalLossNodes total_loss(Tape& t, NodeId task, NodeId kd, const TapedParams& params,
                                 const LossCoeffs& c, const ModelParams* global) {
    c.validate();
    if (c.mu_prox > 0.0 && global == nullptr)
        throw std::invalid_argument("total_loss: proximal term requires global parameters");

    std::vector<NodeId> sq;
    sq.reserve(params.ids.size());
    for (NodeId p : params.ids) sq.push_back(t.sse(p, t.constant(Tensor(t.value(p).shape()))));
    NodeId reg = t.scale(t.sum(sq), 0.5);

    std::vector<NodeId> parts{task, t.scale(kd, c.alpha), t.scale(reg, c.gamma)};
    NodeId prox = -1;
    if (c.mu_prox > 0.0) {
        if (params.ids.size() != global->tensors.size())
            throw std::invalid_argument("total_loss: global parameter layout mismatch");
        std::vector<NodeId> dist;
        dist.reserve(params.ids.size());
        for (std::size_t i = 0; i < params.ids.size(); ++i)
            dist.push_back(t.sse(params.ids[i], t.constant(global->tensors[i].second)));
        prox = t.scale(t.sum(dist), 0.5);
        parts.push_back(t.scale(prox, c.mu_prox));
    }
    return TotalLossNodes{t.sum(parts), reg, prox};
}

}  // namespace raf
