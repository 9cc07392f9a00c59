#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "raf/data.hpp"
#include "raf/model.hpp"
#include "raf/tensor.hpp"

namespace raf {

struct EvalResult {
    int h = 0, w = 0;          // inference resolution
    double pck = 0.0;          // fraction in [0, 1]
    double mean_px_err = 0.0;  // native-pixel units
    int n_samples = 0;
};

/// Per-channel argmax in grid coordinates; ties resolve to the smallest row,
/// then the smallest column.
inline std::vector<std::pair<int, int>> decode(const Tensor& heat) {
    if (heat.rank() != 3 || heat.size() == 0) throw std::invalid_argument("decode: expected h x w x K");
    const int gh = heat.extent(0), gw = heat.extent(1), K = heat.extent(2);
    std::vector<std::pair<int, int>> out(static_cast<std::size_t>(K), {0, 0});
    for (int k = 0; k < K; ++k) {
        double best = heat.at3(0, 0, k);
        int by = 0, bx = 0;
        for (int y = 0; y < gh; ++y)
            for (int x = 0; x < gw; ++x)
                if (heat.at3(y, x, k) > best) {
                    best = heat.at3(y, x, k);
                    by = y;
                    bx = x;
                }
        out[static_cast<std::size_t>(k)] = {by, bx};
    }
    return out;
}

/// Decoded grid cells mapped back to the native pixel frame through the
/// heatmap stride and the inference resize factor (half-pixel centers).
inline std::vector<std::pair<double, double>> decode_to_native(const Tensor& heat, int infer_h,
                                                               int infer_w, int native_h,
                                                               int native_w, int patch) {
    auto cells = decode(heat);
    const double fy = static_cast<double>(native_h) / infer_h;
    const double fx = static_cast<double>(native_w) / infer_w;
    std::vector<std::pair<double, double>> out;
    out.reserve(cells.size());
    for (auto [gy, gx] : cells)
        out.emplace_back((gy + 0.5) * patch * fy - 0.5, (gx + 0.5) * patch * fx - 0.5);
    return out;
}

/// Fraction of keypoints whose Euclidean error is within tau * diag, where
/// diag is the native image diagonal (resolution-independent threshold).
inline double pck(const std::vector<std::pair<double, double>>& pred,
                  const std::vector<std::pair<double, double>>& gt, double tau, double diag) {
    if (pred.size() != gt.size()) throw std::invalid_argument("pck: keypoint count mismatch");
    if (pred.empty()) throw std::invalid_argument("pck: no keypoints");
    if (!(tau > 0.0)) throw std::invalid_argument("pck: tau must be positive");
    const double thresh = tau * diag;
    int hits = 0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        const double d = std::hypot(pred[k].first - gt[k].first, pred[k].second - gt[k].second);
        if (d <= thresh) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Evaluation core with an injectable heatmap provider, so targets themselves
/// (an oracle-perfect "model") can be scored by the same code path.
template <typename HeatmapFn>
EvalResult evaluate_with(HeatmapFn&& heatmap_of, const std::vector<SyntheticSample>& eval_set,
                         int h, int w, Interp method, double tau, int patch) {
    if (eval_set.empty()) throw std::invalid_argument("evaluate: empty eval set");
    const int native_h = eval_set[0].image.extent(0);
    const int native_w = eval_set[0].image.extent(1);
    const double diag = std::hypot(static_cast<double>(native_h), static_cast<double>(native_w));

    EvalResult res;
    res.h = h;
    res.w = w;
    res.n_samples = static_cast<int>(eval_set.size());
    double err_sum = 0.0;
    std::int64_t err_n = 0;
    double pck_sum = 0.0;
    for (const auto& s : eval_set) {
        Tensor img = resize(s.image, h, w, method);
        Tensor heat = heatmap_of(img, s);
        auto pred = decode_to_native(heat, h, w, native_h, native_w, patch);
        pck_sum += pck(pred, s.keypoints, tau, diag);
        for (std::size_t k = 0; k < pred.size(); ++k) {
            err_sum += std::hypot(pred[k].first - s.keypoints[k].first,
                                  pred[k].second - s.keypoints[k].second);
            ++err_n;
        }
    }
    res.pck = pck_sum / res.n_samples;
    res.mean_px_err = err_sum / static_cast<double>(err_n);
    return res;
}

inline EvalResult evaluate_at(const ModelParams& mp, const std::vector<SyntheticSample>& eval_set,
                              int h, int w, Interp method, double tau) {
    return evaluate_with(
        [&mp](const Tensor& img, const SyntheticSample&) { return forward_heatmap_value(mp, img); },
        eval_set, h, w, method, tau, mp.hyper.patch);
}

/// Score the model at each inference resolution: resize, forward, decode,
/// map back to the native frame.
inline std::vector<EvalResult> eval_sweep(const ModelParams& mp,
                                          const std::vector<SyntheticSample>& eval_set,
                                          const std::vector<std::pair<int, int>>& resolutions,
                                          Interp method, double tau) {
    std::vector<EvalResult> out;
    out.reserve(resolutions.size());
    for (auto [h, w] : resolutions) {
        if (h % mp.hyper.patch != 0 || w % mp.hyper.patch != 0)
            throw std::invalid_argument("eval_sweep: resolution not divisible by patch");
        out.push_back(evaluate_at(mp, eval_set, h, w, method, tau));
    }
    return out;
}

}  // namespace raf
