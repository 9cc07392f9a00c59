#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <utility>
#include <vector>

#include "raf/data.hpp"
#include "raf/model.hpp"

namespace raf {

/// Frozen-feature linear view of the heatmap model: the conv encoder (a fixed
/// random instance) supplies features, and only the last layer's weight
/// vector w remains free. Heatmaps are flat channel-major vectors, so the
/// per-channel grid operators expand block-diagonally.
struct LinearClient {
    // psi_t[j][i]: the m_i x d matrix mapping w to the level-i heatmap
    std::vector<std::vector<Eigen::MatrixXd>> psi_t;
    std::vector<Eigen::VectorXd> targets;  // [j]: level-0 heatmap, length m_0
    std::vector<Eigen::MatrixXd> U;        // [i-1]: m_{i-1} x m_i, channel-expanded
    std::vector<int> grid_cells;           // per level

    int samples() const { return static_cast<int>(psi_t.size()); }
    int levels() const { return psi_t.empty() ? 0 : static_cast<int>(psi_t[0].size()); }
};

struct LinearModel {
    int dim = 0;       // d = width * keypoints
    int keypoints = 0;
    double M_phi = 0;  // feature-norm bound enforced at build time
    double max_U_norm = 0;
    double max_target_norm = 0;
    std::vector<LinearClient> clients;
    Eigen::VectorXd w;  // last-layer weights, channel-major blocks
};

namespace detail {

inline double spectral_norm(const Eigen::MatrixXd& m) {
    return m.size() == 0 ? 0.0 : Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

// z: cells x D feature matrix -> the m x d map psi^T with heatmaps laid out
// channel-major: heat[(c, cell)] = sum_d z[cell, d] * w[(c, d)].
inline Eigen::MatrixXd expand_features(const Eigen::MatrixXd& z, int keypoints) {
    const int cells = static_cast<int>(z.rows());
    const int width = static_cast<int>(z.cols());
    Eigen::MatrixXd psi_t = Eigen::MatrixXd::Zero(cells * keypoints, width * keypoints);
    for (int c = 0; c < keypoints; ++c)
        psi_t.block(c * cells, c * width, cells, width) = z;
    return psi_t;
}

inline Eigen::MatrixXd expand_operator(const UpsampleOp& op, int keypoints) {
    const int rows = static_cast<int>(op.rows()), cols = static_cast<int>(op.cols());
    auto dense = op.to_dense();
    Eigen::MatrixXd grid(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) grid(r, c) = dense[static_cast<std::size_t>(r) * cols + c];
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(rows * keypoints, cols * keypoints);
    for (int c = 0; c < keypoints; ++c) out.block(c * rows, c * cols, rows, cols) = grid;
    return out;
}

}  // namespace detail

/// Build the frozen-feature linear model: run a fixed random conv encoder on
/// every (client, sample, level), flatten the pre-head features, and rescale
/// all feature maps by one global factor so the largest spectral norm equals
/// M_phi exactly.
inline LinearModel build_linear_model(
    const std::vector<std::vector<SyntheticSample>>& shards, std::uint64_t seed, double M_phi,
    const std::vector<std::vector<std::pair<int, int>>>& resolutions_per_client,
    const ModelHyper& hyper, const DataConfig& dcfg = {}) {
    if (shards.empty() || shards.size() != resolutions_per_client.size())
        throw std::invalid_argument("build_linear_model: need one resolution list per shard");
    if (!(M_phi > 0.0)) throw std::invalid_argument("build_linear_model: M_phi must be positive");

    ModelParams frozen = ModelParams::init(hyper, mix_seed(seed, 0x74686572ULL));
    DataConfig cfg = dcfg;
    cfg.patch = hyper.patch;

    LinearModel lm;
    lm.keypoints = hyper.keypoints;
    lm.dim = hyper.width * hyper.keypoints;
    lm.M_phi = M_phi;
    lm.w = Eigen::VectorXd::Zero(lm.dim);

    double max_norm = 0.0;
    for (std::size_t k = 0; k < shards.size(); ++k) {
        if (shards[k].empty()) throw std::invalid_argument("build_linear_model: empty shard");
        const auto& res = resolutions_per_client[k];
        if (res.empty()) throw std::invalid_argument("build_linear_model: empty resolution list");

        LinearClient client;
        for (auto [h, w] : res)
            client.grid_cells.push_back((h / hyper.patch) * (w / hyper.patch));

        for (const auto& s : shards[k]) {
            std::vector<Eigen::MatrixXd> per_level;
            for (std::size_t i = 0; i < res.size(); ++i) {
                SyntheticSample view = at_resolution(s, res[i].first, res[i].second, cfg);
                Tensor feat = forward_features_value(frozen, view.image);
                const int cells = feat.extent(0) * feat.extent(1);
                Eigen::MatrixXd z(cells, hyper.width);
                for (int cell = 0; cell < cells; ++cell)
                    for (int d = 0; d < hyper.width; ++d) z(cell, d) = feat[cell * hyper.width + d];
                max_norm = std::max(max_norm, detail::spectral_norm(z));
                per_level.push_back(detail::expand_features(z, hyper.keypoints));

                if (i == 0) {
                    // channel-major level-0 target
                    Eigen::VectorXd t(cells * hyper.keypoints);
                    for (int c = 0; c < hyper.keypoints; ++c)
                        for (int cell = 0; cell < cells; ++cell)
                            t(c * cells + cell) = view.target[cell * hyper.keypoints + c];
                    client.targets.push_back(std::move(t));
                    lm.max_target_norm = std::max(lm.max_target_norm, client.targets.back().norm());
                }
            }
            client.psi_t.push_back(std::move(per_level));
        }

        for (std::size_t i = 1; i < res.size(); ++i) {
            UpsampleOp op = build_upsample_op(res[i].first / hyper.patch, res[i].second / hyper.patch,
                                              res[i - 1].first / hyper.patch,
                                              res[i - 1].second / hyper.patch);
            auto dense = op.to_dense();
            Eigen::MatrixXd grid(op.rows(), op.cols());
            for (int r = 0; r < op.rows(); ++r)
                for (int c = 0; c < op.cols(); ++c)
                    grid(r, c) = dense[static_cast<std::size_t>(r) * op.cols() + c];
            lm.max_U_norm = std::max(lm.max_U_norm, detail::spectral_norm(grid));
            client.U.push_back(detail::expand_operator(op, hyper.keypoints));
        }
        lm.clients.push_back(std::move(client));
    }

    if (max_norm <= 0.0) throw std::runtime_error("build_linear_model: degenerate features");
    const double factor = M_phi / max_norm;
    for (auto& client : lm.clients)
        for (auto& per_level : client.psi_t)
            for (auto& psi : per_level) psi *= factor;
    return lm;
}

/// Heatmap of sample j at level i for client k: the exact transpose product
/// psi^T w with the model's current last-layer weights.
inline Eigen::VectorXd linear_forward(const LinearModel& lm, int k, int j, int i) {
    if (k < 0 || k >= static_cast<int>(lm.clients.size()))
        throw std::out_of_range("linear_forward: client index");
    const LinearClient& c = lm.clients[static_cast<std::size_t>(k)];
    if (j < 0 || j >= c.samples()) throw std::out_of_range("linear_forward: sample index");
    if (i < 0 || i >= c.levels()) throw std::out_of_range("linear_forward: level index");
    return c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] * lm.w;
}

}  // namespace raf
