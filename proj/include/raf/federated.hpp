#pragma once

#include <algorithm>
#include <atomic>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <vector>

#include "raf/data.hpp"
#include "raf/losses.hpp"
#include "raf/model.hpp"
#include "raf/rng.hpp"

namespace raf {

/// Raised when a run produces non-finite values; the CLI maps this to its
/// numeric-failure exit code.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Optimizer { sgd, adamw };

struct ClientSpec {
    int client_id = 0;
    int native_h = 0, native_w = 0;
    // level 0 first, strictly decreasing; a single entry means no distillation
    std::vector<std::pair<int, int>> resolutions;
    std::vector<SyntheticSample> shard;  // canonical-resolution scenes
    LossCoeffs coeffs;
    int epochs = 1;
    int batch = 8;
    double lr = 0.1;
    Optimizer opt = Optimizer::sgd;  // adamw mirrors the reference training recipe
};

struct PreparedSample {
    std::vector<Tensor> level_images;  // one per resolution level
    Tensor target;                     // native-grid heatmaps
};

/// Client data fixed for a whole run: native views, downsampled pyramids, and
/// the shared grid-level upsampling operators for adjacent level pairs.
struct ClientState {
    ClientSpec spec;
    std::vector<PreparedSample> samples;
    std::vector<std::shared_ptr<const UpsampleOp>> kd_ops;

    static ClientState prepare(ClientSpec spec, const ModelHyper& h, const DataConfig& dcfg = {}) {
        if (spec.resolutions.empty()) throw std::invalid_argument("client: empty resolution list");
        if (spec.resolutions[0] != std::pair{spec.native_h, spec.native_w})
            throw std::invalid_argument("client: level 0 must be the native resolution");
        if (spec.shard.empty()) throw std::invalid_argument("client: empty shard");

        ClientState st;
        st.spec = std::move(spec);
        DataConfig cfg = dcfg;
        cfg.patch = h.patch;

        for (const auto& s : st.spec.shard) {
            SyntheticSample native = at_resolution(s, st.spec.native_h, st.spec.native_w, cfg);
            Pyramid pyr = build_pyramid(native.image, st.spec.resolutions, h.patch);
            PreparedSample ps;
            ps.level_images = std::move(pyr.levels);
            ps.target = std::move(native.target);
            st.samples.push_back(std::move(ps));
        }
        for (std::size_t i = 1; i < st.spec.resolutions.size(); ++i) {
            const auto [sh, sw] = st.spec.resolutions[i];
            const auto [dh, dw] = st.spec.resolutions[i - 1];
            st.kd_ops.push_back(std::make_shared<const UpsampleOp>(
                build_upsample_op(sh / h.patch, sw / h.patch, dh / h.patch, dw / h.patch)));
        }
        return st;
    }
};

struct LocalTrainResult {
    ModelParams params;
    double task = 0, kd = 0, reg = 0, prox = 0;  // last-batch loss components
    double grad_norm = 0;                        // last-batch gradient l2 norm
};

/// E epochs of minibatch SGD on the combined local objective: every batch
/// forwards all resolution levels, takes the task loss at level 0, distills
/// across adjacent levels with detached teachers, and steps with fixed lr.
/// When alpha is 0 the extra levels are skipped; a single-level client never
/// produces a distillation gradient. `coeffs.mu_prox > 0` anchors the
/// iterate to the broadcast global parameters.
inline LocalTrainResult local_train(const ClientState& st, const ModelHyper& h,
                                    const ModelParams& global, std::uint64_t seed,
                                    const LossCoeffs* coeffs_override = nullptr) {
    const ClientSpec& spec = st.spec;
    if (spec.epochs < 1) throw std::invalid_argument("local_train: need at least one epoch");
    if (spec.batch < 1) throw std::invalid_argument("local_train: need positive batch size");
    if (st.samples.empty()) throw std::invalid_argument("local_train: empty shard");
    const LossCoeffs coeffs = coeffs_override ? *coeffs_override : spec.coeffs;
    coeffs.validate();

    const std::size_t levels = coeffs.alpha > 0.0 ? spec.resolutions.size() : 1;

    LocalTrainResult out;
    out.params = global;
    auto rng = make_rng(seed);

    // adamw moments, fresh per local phase (clients keep no state between rounds)
    std::vector<Tensor> m1, m2;
    long step = 0;
    if (spec.opt == Optimizer::adamw) {
        for (const auto& [name, tensor] : global.tensors) {
            m1.emplace_back(tensor.shape());
            m2.emplace_back(tensor.shape());
        }
    }

    std::vector<std::size_t> order(st.samples.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(spec.batch)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(spec.batch));

            Tape t;
            TapedParams tp = TapedParams::as_params(t, out.params);

            std::vector<std::vector<NodeId>> preds(levels);
            std::vector<NodeId> targets;
            for (std::size_t b = start; b < stop; ++b) {
                const PreparedSample& ps = st.samples[order[b]];
                for (std::size_t lvl = 0; lvl < levels; ++lvl) {
                    NodeId img = t.constant(ps.level_images[lvl]);
                    preds[lvl].push_back(forward_heatmap(t, h, tp, img).heatmap);
                }
                targets.push_back(t.constant(ps.target));
            }

            NodeId task = task_loss(t, preds[0], targets);
            NodeId kd = mrkd_loss(t, preds,
                                  {st.kd_ops.begin(), st.kd_ops.begin() + static_cast<std::ptrdiff_t>(levels - 1)});
            auto nodes = total_loss(t, task, kd, tp, coeffs,
                                    coeffs.mu_prox > 0.0 ? &global : nullptr);
            t.backward(nodes.total);

            double gsq = 0.0;
            ++step;
            for (std::size_t i = 0; i < tp.ids.size(); ++i) {
                Tensor g = t.grad(tp.ids[i]);
                gsq += g.sqnorm();
                if (spec.opt == Optimizer::sgd) {
                    out.params.tensors[i].second.add_scaled(g, -spec.lr);
                } else {
                    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                    Tensor& p = out.params.tensors[i].second;
                    Tensor& m = m1[i];
                    Tensor& v = m2[i];
                    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
                    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
                    for (std::int64_t j = 0; j < g.size(); ++j) {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        p[j] -= spec.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
                    }
                }
            }

            out.task = t.value(task)[0];
            out.kd = t.value(kd)[0];
            out.reg = t.value(nodes.reg)[0];
            out.prox = nodes.prox >= 0 ? t.value(nodes.prox)[0] : 0.0;
            out.grad_norm = std::sqrt(gsq);
        }
    }
    return out;
}

/// Unweighted elementwise mean (equal shard sizes make this the
/// sample-weighted average as well). Computed as first + mean of differences
/// so that averaging identical parameter sets reproduces them exactly;
/// accumulation runs in list order.
inline ModelParams aggregate_fedavg(const std::vector<ModelParams>& client_params) {
    if (client_params.empty()) throw std::invalid_argument("aggregate: no clients");
    ModelParams out = client_params[0];
    if (client_params.size() == 1) return out;
    ModelParams acc = ModelParams::zeros_like(out);
    for (std::size_t k = 1; k < client_params.size(); ++k) {
        if (!acc.same_layout(client_params[k])) throw std::invalid_argument("aggregate: layout mismatch");
        for (std::size_t i = 0; i < acc.tensors.size(); ++i) {
            Tensor& a = acc.tensors[i].second;
            const Tensor& p = client_params[k].tensors[i].second;
            const Tensor& base = out.tensors[i].second;
            for (std::int64_t j = 0; j < a.size(); ++j) a[j] += p[j] - base[j];
        }
    }
    out.add_scaled(acc, 1.0 / static_cast<double>(client_params.size()));
    return out;
}

enum class Aggregator { fedavg, fedprox };

struct RoundLog {
    int round = 0;
    int client_id = 0;
    double loss_task = 0, loss_kd = 0, loss_reg = 0, loss_prox = 0;
    double grad_norm = 0;
};

struct RunResult {
    ModelParams global;
    std::vector<RoundLog> logs;  // one entry per round per client, id order
};

/// The round driver: broadcast the global weights, train all clients (in
/// parallel when workers > 1), aggregate in client-id order. Per-client seeds
/// derive from (seed, client_id, round), so results do not depend on worker
/// scheduling. The fedprox aggregator keeps each client's mu_prox; fedavg
/// forces it to zero.
inline RunResult run_rounds(const std::vector<ClientState>& clients, const ModelHyper& h, int rounds,
                            std::uint64_t seed, Aggregator agg, int workers = 1) {
    if (clients.empty()) throw std::invalid_argument("run_rounds: no clients");
    if (rounds < 1) throw std::invalid_argument("run_rounds: need at least one round");

    RunResult res;
    res.global = ModelParams::init(h, seed);

    const std::size_t n = clients.size();
    for (int t = 0; t < rounds; ++t) {
        std::vector<LocalTrainResult> results(n);
        auto train_one = [&](std::size_t k) {
            const ClientState& st = clients[k];
            LossCoeffs eff = st.spec.coeffs;
            if (agg == Aggregator::fedavg) eff.mu_prox = 0.0;
            const std::uint64_t client_seed =
                mix_seed(seed, static_cast<std::uint64_t>(st.spec.client_id) + 1,
                         static_cast<std::uint64_t>(t) + 1);
            results[k] = local_train(st, h, res.global, client_seed, &eff);
        };

        const int nw = std::max(1, std::min<int>(workers, static_cast<int>(n)));
        if (nw == 1) {
            for (std::size_t k = 0; k < n; ++k) train_one(k);
        } else {
            std::atomic<std::size_t> next{0};
            std::vector<std::thread> pool;
            pool.reserve(static_cast<std::size_t>(nw));
            for (int wi = 0; wi < nw; ++wi)
                pool.emplace_back([&] {
                    for (std::size_t k = next.fetch_add(1); k < n; k = next.fetch_add(1)) train_one(k);
                });
            for (auto& th : pool) th.join();
        }

        std::vector<ModelParams> updated;
        updated.reserve(n);
        for (std::size_t k = 0; k < n; ++k) {
            const auto& r = results[k];
            if (!r.params.finite() || !std::isfinite(r.task) || !std::isfinite(r.kd))
                throw numeric_error("run_rounds: non-finite values at round " + std::to_string(t));
            res.logs.push_back(RoundLog{t, clients[k].spec.client_id, r.task, r.kd, r.reg, r.prox,
                                        r.grad_norm});
            updated.push_back(std::move(results[k].params));
        }
        res.global = aggregate_fedavg(updated);
    }
    if (!res.global.finite()) throw numeric_error("run_rounds: non-finite global model");
    return res;
}

}  // namespace raf
