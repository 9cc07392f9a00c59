#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "raf/model.hpp"
#include "raf/rng.hpp"
#include "raf/tensor.hpp"

namespace raf {

/// One scene: rendered grayscale image, K keypoints in native pixel
/// coordinates (row, col), and the stride-P Gaussian target heatmaps.
struct SyntheticSample {
    int id = 0;
    Tensor image;                                      // h x w x 1
    std::vector<std::pair<double, double>> keypoints;  // (row, col), continuous
    Tensor target;                                     // (h/P) x (w/P) x K
};

/// Progressively downsampled copies of one native image. Level 0 is the
/// native image; extents strictly decrease with the level index.
struct Pyramid {
    std::vector<Tensor> levels;
};

struct DataConfig {
    int patch = 4;
    double target_sigma = 1.0;  // grid cells
    double blob_sigma = 1.4;    // native pixels, base size of keypoint blobs
    double texture_amp = 0.06;  // background texture amplitude
    double min_sep_frac = 0.18; // pairwise keypoint separation, fraction of min extent
};

namespace detail {

// Each keypoint index renders a distinct sign pattern centered on the
// keypoint. Identity comes from the pattern's local sign structure (not from
// amplitude levels or absolute size), so channels stay tellable-apart when
// the scene is viewed at another resolution.
inline double blob_value(int k, double dy, double dx, double sigma) {
    const double r2 = dy * dy + dx * dx;
    const double g = std::exp(-r2 / (2.0 * sigma * sigma));
    switch (k % 5) {
        case 0: return g;   // bright spot
        case 1: return -g;  // dark spot
        case 2: {           // vertical dipole
            const double d = 0.9 * sigma;
            return std::exp(-((dy - d) * (dy - d) + dx * dx) / (2.0 * sigma * sigma)) -
                   std::exp(-((dy + d) * (dy + d) + dx * dx) / (2.0 * sigma * sigma));
        }
        case 3: {  // horizontal dipole
            const double d = 0.9 * sigma;
            return std::exp(-(dy * dy + (dx - d) * (dx - d)) / (2.0 * sigma * sigma)) -
                   std::exp(-(dy * dy + (dx + d) * (dx + d)) / (2.0 * sigma * sigma));
        }
        default:  // center-surround (mexican hat)
            return (1.0 - r2 / (2.0 * sigma * sigma)) * g * 1.3;
    }
}

}  // namespace detail

/// Peak-normalized Gaussian heatmaps at the stride-P grid; each channel's
/// maximum is exactly 1.0 at the keypoint's grid cell.
inline Tensor make_target(const std::vector<std::pair<double, double>>& keypoints, int h, int w,
                          int patch, double sigma) {
    const int gh = h / patch, gw = w / patch;
    const int K = static_cast<int>(keypoints.size());
    Tensor target({gh, gw, K});
    for (int k = 0; k < K; ++k) {
        const int cy = detail::clampi(static_cast<int>(std::floor(keypoints[k].first / patch)), 0, gh - 1);
        const int cx = detail::clampi(static_cast<int>(std::floor(keypoints[k].second / patch)), 0, gw - 1);
        for (int y = 0; y < gh; ++y)
            for (int x = 0; x < gw; ++x) {
                const double d2 = static_cast<double>((y - cy) * (y - cy) + (x - cx) * (x - cx));
                target.at3(y, x, k) = std::exp(-d2 / (2.0 * sigma * sigma));
            }
    }
    return target;
}

/// Deterministic synthetic keypoint scenes: anti-aliased blobs with
/// per-keypoint signatures over a mild low-frequency background texture.
/// Keypoints are uniform over the interior with a 2-pixel margin and a
/// minimum pairwise separation.
inline std::vector<SyntheticSample> gen_dataset(int n, int h, int w, int k_keypoints,
                                                std::uint64_t seed, const DataConfig& cfg = {}) {
    if (n < 1) throw std::invalid_argument("gen_dataset: need n >= 1");
    if (h < 1 || w < 1 || h % cfg.patch != 0 || w % cfg.patch != 0)
        throw std::invalid_argument("gen_dataset: extents must be positive and divisible by patch");
    if (k_keypoints < 1) throw std::invalid_argument("gen_dataset: need at least one keypoint");
    if (h <= 4 || w <= 4) throw std::invalid_argument("gen_dataset: image too small for margins");

    const double min_sep = cfg.min_sep_frac * std::min(h, w);
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<std::size_t>(n));

    for (int j = 0; j < n; ++j) {
        auto rng = make_rng(mix_seed(seed, 0x64617461ULL, static_cast<std::uint64_t>(j)));
        SyntheticSample s;
        s.id = j;

        // keypoints: 2-pixel margin, rejection for separation (bounded retries)
        for (int k = 0; k < k_keypoints; ++k) {
            double r = 0.0, c = 0.0;
            for (int attempt = 0; attempt < 100; ++attempt) {
                r = uniform(rng, 2.0, static_cast<double>(h) - 2.0);
                c = uniform(rng, 2.0, static_cast<double>(w) - 2.0);
                bool ok = true;
                for (const auto& [pr, pc] : s.keypoints) {
                    const double d = std::hypot(r - pr, c - pc);
                    if (d < min_sep) {
                        ok = false;
                        break;
                    }
                }
                if (ok) break;
            }
            s.keypoints.emplace_back(r, c);
        }

        // background texture: three low-frequency cosine waves
        s.image = Tensor({h, w, 1});
        double fx[3], fy[3], ph[3], amp[3];
        for (int t = 0; t < 3; ++t) {
            fx[t] = uniform(rng, 0.5, 2.0);
            fy[t] = uniform(rng, 0.5, 2.0);
            ph[t] = uniform(rng, 0.0, 6.283185307179586);
            amp[t] = uniform(rng, 0.5, 1.0) * cfg.texture_amp;
        }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double v = 0.0;
                for (int t = 0; t < 3; ++t)
                    v += amp[t] * std::cos(6.283185307179586 *
                                               (fx[t] * x / static_cast<double>(w) +
                                                fy[t] * y / static_cast<double>(h)) +
                                           ph[t]);
                s.image.at3(y, x, 0) = v;
            }

        // keypoint patterns, anti-aliased splats with mild per-sample size jitter
        for (int k = 0; k < k_keypoints; ++k) {
            const double sigma_k = cfg.blob_sigma * uniform(rng, 0.85, 1.2);
            const auto [r, c] = s.keypoints[static_cast<std::size_t>(k)];
            const double reach = 4.0 * sigma_k;
            const int lo_y = std::max(0, static_cast<int>(std::floor(r - reach)));
            const int hi_y = std::min(h - 1, static_cast<int>(std::ceil(r + reach)));
            const int lo_x = std::max(0, static_cast<int>(std::floor(c - reach)));
            const int hi_x = std::min(w - 1, static_cast<int>(std::ceil(c + reach)));
            for (int y = lo_y; y <= hi_y; ++y)
                for (int x = lo_x; x <= hi_x; ++x)
                    s.image.at3(y, x, 0) += detail::blob_value(k, y - r, x - c, sigma_k);
        }

        s.target = make_target(s.keypoints, h, w, cfg.patch, cfg.target_sigma);
        out.push_back(std::move(s));
    }
    return out;
}

/// The same scene viewed at another resolution: image resampled from the
/// native render, keypoints mapped with half-pixel alignment, targets rebuilt
/// at the new stride-P grid.
inline SyntheticSample at_resolution(const SyntheticSample& s, int h, int w,
                                     const DataConfig& cfg = {}) {
    if (h % cfg.patch != 0 || w % cfg.patch != 0)
        throw std::invalid_argument("at_resolution: extents must divide by patch");
    SyntheticSample out;
    out.id = s.id;
    out.image = resize(s.image, h, w, Interp::bilinear);
    const double sy = static_cast<double>(h) / s.image.extent(0);
    const double sx = static_cast<double>(w) / s.image.extent(1);
    out.keypoints.reserve(s.keypoints.size());
    for (const auto& [r, c] : s.keypoints)
        out.keypoints.emplace_back((r + 0.5) * sy - 0.5, (c + 0.5) * sx - 0.5);
    out.target = make_target(out.keypoints, h, w, cfg.patch, cfg.target_sigma);
    return out;
}

/// Downsampled copies of one native image, every level interpolated from the
/// native image directly (never chained).
inline Pyramid build_pyramid(const Tensor& img, const std::vector<std::pair<int, int>>& resolutions,
                             int patch) {
    if (img.rank() != 3) throw std::invalid_argument("build_pyramid: expected H x W x C image");
    if (resolutions.empty()) throw std::invalid_argument("build_pyramid: empty resolution list");
    if (resolutions[0].first != img.extent(0) || resolutions[0].second != img.extent(1))
        throw std::invalid_argument("build_pyramid: level 0 must be the native resolution");
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
        const auto [h, w] = resolutions[i];
        if (h % patch != 0 || w % patch != 0)
            throw std::invalid_argument("build_pyramid: extents must divide by patch");
        if (i > 0 && (h >= resolutions[i - 1].first || w >= resolutions[i - 1].second))
            throw std::invalid_argument("build_pyramid: resolutions must strictly decrease");
    }
    Pyramid p;
    p.levels.push_back(img);
    for (std::size_t i = 1; i < resolutions.size(); ++i)
        p.levels.push_back(resize(img, resolutions[i].first, resolutions[i].second, Interp::bilinear));
    return p;
}

/// Split one pool into equally sized shards with pairwise-disjoint sample ids.
inline std::vector<std::vector<SyntheticSample>> shard_dataset(std::vector<SyntheticSample> pool,
                                                               int n_clients) {
    if (n_clients < 1) throw std::invalid_argument("shard_dataset: need at least one client");
    if (pool.size() % static_cast<std::size_t>(n_clients) != 0)
        throw std::invalid_argument("shard_dataset: pool size must divide evenly");
    const std::size_t per = pool.size() / static_cast<std::size_t>(n_clients);
    std::vector<std::vector<SyntheticSample>> shards(static_cast<std::size_t>(n_clients));
    for (std::size_t i = 0; i < pool.size(); ++i)
        shards[i / per].push_back(std::move(pool[i]));
    return shards;
}

/// Dataset dump: JSON index plus raw little-endian float64 buffers, same
/// convention as model checkpoints.
inline void dump_dataset(const std::filesystem::path& dir,
                         const std::vector<SyntheticSample>& samples) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "buffers");
    nlohmann::json index;
    index["samples"] = nlohmann::json::array();
    for (const auto& s : samples) {
        nlohmann::json entry;
        entry["id"] = s.id;
        entry["image_shape"] = s.image.shape();
        entry["target_shape"] = s.target.shape();
        entry["keypoints"] = nlohmann::json::array();
        for (const auto& [r, c] : s.keypoints) entry["keypoints"].push_back({r, c});
        index["samples"].push_back(entry);

        std::ofstream fi(dir / "buffers" / ("sample_" + std::to_string(s.id) + "_image.bin"),
                         std::ios::binary);
        detail::write_f64_le(fi, s.image.buffer());
        std::ofstream ft(dir / "buffers" / ("sample_" + std::to_string(s.id) + "_target.bin"),
                         std::ios::binary);
        detail::write_f64_le(ft, s.target.buffer());
    }
    std::ofstream f(dir / "index.json");
    f << index.dump(2) << "\n";
}

}  // namespace raf
