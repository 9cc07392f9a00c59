#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "raf/autodiff.hpp"
#include "raf/rng.hpp"
#include "raf/tensor.hpp"

namespace raf {

struct ModelHyper {
    int patch = 4;      // patch size P; heatmaps come out at 1/P of the input
    int width = 16;     // hidden channels D
    int blocks = 2;     // depthwise+pointwise residual blocks
    int keypoints = 5;  // output channels K
    int channels = 1;   // input channels C

    bool operator==(const ModelHyper&) const = default;
};

/// Flat, ordered collection of named parameter tensors; the unit of
/// client/server exchange. Names and shapes are identical across all clients
/// and the server within a run.
struct ModelParams {
    ModelHyper hyper;
    std::vector<std::pair<std::string, Tensor>> tensors;

    static ModelParams init(const ModelHyper& h, std::uint64_t seed) {
        ModelParams mp;
        mp.hyper = h;
        auto rng = make_rng(mix_seed(seed, 0x6d6f64656cULL));
        auto uni = [&](std::vector<int> shape, int fan_in) {
            const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
            Tensor t(std::move(shape));
            for (std::int64_t i = 0; i < t.size(); ++i) t[i] = uniform(rng, -s, s);
            return t;
        };
        mp.tensors.emplace_back("patch_embed",
                                uni({h.patch, h.patch, h.channels, h.width}, h.patch * h.patch * h.channels));
        mp.tensors.emplace_back("gpe", uni({3, 3, h.width}, 9));
        for (int b = 0; b < h.blocks; ++b) {
            mp.tensors.emplace_back("block" + std::to_string(b) + ".dw", uni({3, 3, h.width}, 9));
            mp.tensors.emplace_back("block" + std::to_string(b) + ".pw", uni({h.width, h.width}, h.width));
        }
        mp.tensors.emplace_back("head", uni({h.width, h.keypoints}, h.width));
        return mp;
    }

    static ModelParams zeros_like(const ModelParams& o) {
        ModelParams mp;
        mp.hyper = o.hyper;
        for (const auto& [name, t] : o.tensors) mp.tensors.emplace_back(name, Tensor(t.shape()));
        return mp;
    }

    std::size_t count() const { return tensors.size(); }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : tensors) n += t.size();
        return n;
    }

    const Tensor& find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw std::invalid_argument("model: no parameter named " + name);
    }

    bool same_layout(const ModelParams& o) const {
        if (tensors.size() != o.tensors.size()) return false;
        for (std::size_t i = 0; i < tensors.size(); ++i)
            if (tensors[i].first != o.tensors[i].first ||
                !tensors[i].second.same_shape(o.tensors[i].second))
                return false;
        return true;
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(scalar_count()));
        for (const auto& [name, t] : tensors)
            out.insert(out.end(), t.buffer().begin(), t.buffer().end());
        return out;
    }

    void assign_flat(const std::vector<double>& flat) {
        if (static_cast<std::int64_t>(flat.size()) != scalar_count())
            throw std::invalid_argument("model: flat vector length mismatch");
        std::size_t off = 0;
        for (auto& [name, t] : tensors) {
            std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                      flat.begin() + static_cast<std::ptrdiff_t>(off + t.buffer().size()),
                      t.buffer().begin());
            off += t.buffer().size();
        }
    }

    // this += s * other, tensor by tensor
    void add_scaled(const ModelParams& o, double s) {
        if (!same_layout(o)) throw std::invalid_argument("model: layout mismatch");
        for (std::size_t i = 0; i < tensors.size(); ++i)
            tensors[i].second.add_scaled(o.tensors[i].second, s);
    }

    void scale_inplace(double s) {
        for (auto& [name, t] : tensors) t.scale_inplace(s);
    }

    double sqnorm() const {
        double acc = 0.0;
        for (const auto& [name, t] : tensors) acc += t.sqnorm();
        return acc;
    }

    bool finite() const {
        for (const auto& [name, t] : tensors)
            if (!t.finite()) return false;
        return true;
    }
};

/// Tape-registered copy of the parameters plus the ids needed to train them.
struct TapedParams {
    std::vector<NodeId> ids;

    static TapedParams as_params(Tape& t, const ModelParams& mp) {
        TapedParams tp;
        for (const auto& [name, tensor] : mp.tensors) tp.ids.push_back(t.param(tensor));
        return tp;
    }

    static TapedParams as_constants(Tape& t, const ModelParams& mp) {
        TapedParams tp;
        for (const auto& [name, tensor] : mp.tensors) tp.ids.push_back(t.constant(tensor));
        return tp;
    }
};

struct ForwardNodes {
    NodeId heatmap;   // (H/P) x (W/P) x K
    NodeId features;  // pre-head features, (H/P) x (W/P) x D
};

/// Resolution-agnostic conv encoder-decoder: strided patch embedding, a 3x3
/// depthwise positional stage, depthwise+pointwise residual blocks, and a 1x1
/// head at the patch grid. One parameter set accepts any input whose extents
/// divide by the patch size.
inline ForwardNodes forward_heatmap(Tape& t, const ModelHyper& h, const TapedParams& p, NodeId img) {
    const Tensor& x = t.value(img);
    if (x.rank() != 3 || x.extent(2) != h.channels)
        throw std::invalid_argument("forward_heatmap: expected H x W x C image");
    if (x.extent(0) % h.patch != 0 || x.extent(1) % h.patch != 0)
        throw std::invalid_argument("forward_heatmap: extents not divisible by patch size");

    std::size_t i = 0;
    const NodeId patch_k = p.ids[i++];
    const NodeId gpe_k = p.ids[i++];

    NodeId z = t.conv2d(img, patch_k, h.patch, 0);
    z = t.add(z, t.depthwise3x3(z, gpe_k));  // conv positional stage
    for (int b = 0; b < h.blocks; ++b) {
        const NodeId dw_k = p.ids[i++];
        const NodeId pw_k = p.ids[i++];
        NodeId r = t.relu(z);
        r = t.depthwise3x3(r, dw_k);
        r = t.pointwise(r, pw_k);
        z = t.add(z, r);
    }
    const NodeId head_k = p.ids[i++];
    return ForwardNodes{t.pointwise(z, head_k), z};
}

/// Convenience value-only forward (builds and discards a scratch tape).
inline Tensor forward_heatmap_value(const ModelParams& mp, const Tensor& img) {
    Tape t;
    TapedParams tp = TapedParams::as_constants(t, mp);
    return t.value(forward_heatmap(t, mp.hyper, tp, t.constant(img)).heatmap);
}

inline Tensor forward_features_value(const ModelParams& mp, const Tensor& img) {
    Tape t;
    TapedParams tp = TapedParams::as_constants(t, mp);
    return t.value(forward_heatmap(t, mp.hyper, tp, t.constant(img)).features);
}

// ---- checkpoint format: JSON manifest + one raw little-endian f64 buffer per tensor ----

namespace detail {

inline void write_f64_le(std::ofstream& f, const std::vector<double>& xs) {
    for (double x : xs) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        if constexpr (std::endian::native == std::endian::big) {
            std::uint64_t s = 0;
            for (int b = 0; b < 8; ++b) s |= ((bits >> (8 * (7 - b))) & 0xffULL) << (8 * b);
            bits = s;
        }
        char buf[8];
        std::memcpy(buf, &bits, 8);
        f.write(buf, 8);
    }
}

inline std::vector<double> read_f64_le(std::ifstream& f, std::int64_t n) {
    std::vector<double> xs(static_cast<std::size_t>(n));
    for (auto& x : xs) {
        char buf[8];
        if (!f.read(buf, 8)) throw std::runtime_error("checkpoint: truncated tensor buffer");
        std::uint64_t bits;
        std::memcpy(&bits, buf, 8);
        if constexpr (std::endian::native == std::endian::big) {
            std::uint64_t s = 0;
            for (int b = 0; b < 8; ++b) s |= ((bits >> (8 * (7 - b))) & 0xffULL) << (8 * b);
            bits = s;
        }
        std::memcpy(&x, &bits, 8);
    }
    return xs;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const ModelParams& mp,
                            std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "tensors");
    nlohmann::json manifest;
    manifest["seed"] = seed;
    manifest["hyper"] = {{"patch", mp.hyper.patch},
                         {"width", mp.hyper.width},
                         {"blocks", mp.hyper.blocks},
                         {"keypoints", mp.hyper.keypoints},
                         {"channels", mp.hyper.channels}};
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : mp.tensors) {
        manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
        std::ofstream f(dir / "tensors" / (name + ".bin"), std::ios::binary);
        if (!f) throw std::runtime_error("checkpoint: cannot write tensor " + name);
        detail::write_f64_le(f, t.buffer());
    }
    std::ofstream f(dir / "manifest.json");
    if (!f) throw std::runtime_error("checkpoint: cannot write manifest");
    f << manifest.dump(2) << "\n";
}

inline ModelParams load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("checkpoint: missing manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(mf);

    ModelParams mp;
    mp.hyper.patch = manifest["hyper"]["patch"];
    mp.hyper.width = manifest["hyper"]["width"];
    mp.hyper.blocks = manifest["hyper"]["blocks"];
    mp.hyper.keypoints = manifest["hyper"]["keypoints"];
    mp.hyper.channels = manifest["hyper"]["channels"];
    for (const auto& entry : manifest["tensors"]) {
        const std::string name = entry["name"];
        std::vector<int> shape = entry["shape"].get<std::vector<int>>();
        Tensor t(shape);
        std::ifstream f(dir / "tensors" / (name + ".bin"), std::ios::binary);
        if (!f) throw std::runtime_error("checkpoint: missing tensor " + name);
        t.buffer() = detail::read_f64_le(f, t.size());
        mp.tensors.emplace_back(name, std::move(t));
    }
    return mp;
}

/// One pooled pre-head feature row per (sample id, resolution).
struct EmbeddingRow {
    int h, w;
    int sample_id;
    std::vector<double> feature;  // mean-pooled over the grid, length D
};

template <typename SampleRange>
std::vector<EmbeddingRow> export_embeddings(const ModelParams& mp, const SampleRange& samples,
                                            const std::vector<std::pair<int, int>>& resolutions) {
    std::vector<EmbeddingRow> rows;
    for (const auto& s : samples) {
        for (auto [h, w] : resolutions) {
            Tensor img = resize(s.image, h, w, Interp::bilinear);
            Tensor feat = forward_features_value(mp, img);
            const int cells = feat.extent(0) * feat.extent(1);
            const int d = feat.extent(2);
            EmbeddingRow row{h, w, s.id, std::vector<double>(static_cast<std::size_t>(d), 0.0)};
            for (int cell = 0; cell < cells; ++cell)
                for (int c = 0; c < d; ++c) row.feature[static_cast<std::size_t>(c)] += feat[cell * d + c];
            for (double& v : row.feature) v /= cells;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

}  // namespace raf
