#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace raf {

/// Dense n-dimensional array of doubles, row-major. The universal numeric
/// carrier: images are H x W x C, heatmaps H x W x K, kernels 4-d.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(checked_size(shape_), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != checked_size(shape_))
            throw std::invalid_argument("tensor: data length does not match shape");
    }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    const std::vector<int>& shape() const { return shape_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& buffer() { return data_; }
    const std::vector<double>& buffer() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // 3-d accessor (row, col, channel) for H x W x C layouts.
    double& at3(int r, int c, int ch) {
        return data_[static_cast<std::size_t>((static_cast<std::int64_t>(r) * shape_[1] + c) * shape_[2] + ch)];
    }
    double at3(int r, int c, int ch) const {
        return data_[static_cast<std::size_t>((static_cast<std::int64_t>(r) * shape_[1] + c) * shape_[2] + ch)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    void scale_inplace(double s) {
        for (double& x : data_) x *= s;
    }

    // this += s * other
    void add_scaled(const Tensor& other, double s) {
        if (!same_shape(other)) throw std::invalid_argument("tensor: shape mismatch in add_scaled");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
    }

    double sqnorm() const {
        double s = 0.0;
        for (double x : data_) s += x * x;
        return s;
    }

    bool finite() const {
        for (double x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

private:
    static std::int64_t checked_size(const std::vector<int>& shape) {
        if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
        std::int64_t n = 1;
        for (int e : shape) {
            if (e <= 0) throw std::invalid_argument("tensor: non-positive extent");
            n *= e;
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

enum class Interp { nearest, bilinear, bicubic, area };

inline Interp interp_from_string(const std::string& s) {
    if (s == "nearest") return Interp::nearest;
    if (s == "bilinear") return Interp::bilinear;
    if (s == "bicubic") return Interp::bicubic;
    if (s == "area") return Interp::area;
    throw std::invalid_argument("unknown interpolation method: " + s);
}

inline const char* interp_name(Interp m) {
    switch (m) {
        case Interp::nearest: return "nearest";
        case Interp::bilinear: return "bilinear";
        case Interp::bicubic: return "bicubic";
        case Interp::area: return "area";
    }
    return "?";
}

namespace detail {

inline int clampi(int x, int lo, int hi) { return x < lo ? lo : (x > hi ? hi : x); }

// Half-pixel-center source coordinate (align-corners = false).
inline double src_coord(int dst, std::int64_t dst_n, std::int64_t src_n) {
    return (dst + 0.5) * (static_cast<double>(src_n) / static_cast<double>(dst_n)) - 0.5;
}

// Catmull-Rom kernel (a = -0.5).
inline double cubic_weight(double t) {
    constexpr double a = -0.5;
    t = std::fabs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return a * (((t - 5.0) * t + 8.0) * t - 4.0);
    return 0.0;
}

struct BilinearTap {
    int col;
    double w;
};

// The 2x2 bilinear stencil for one destination pixel, duplicates merged
// (edge-clamped taps collapse onto one source pixel). Shared by resize and
// build_upsample_op so the two routes stay element-exact.
inline void bilinear_row(int y, int x, int dst_h, int dst_w, int src_h, int src_w,
                         BilinearTap row[4]) {
    const double sy = src_coord(y, dst_h, src_h);
    const int y0 = static_cast<int>(std::floor(sy));
    const double fy = sy - y0;
    const int ya = clampi(y0, 0, src_h - 1);
    const int yb = clampi(y0 + 1, 0, src_h - 1);
    const double sx = src_coord(x, dst_w, src_w);
    const int x0 = static_cast<int>(std::floor(sx));
    const double fx = sx - x0;
    const int xa = clampi(x0, 0, src_w - 1);
    const int xb = clampi(x0 + 1, 0, src_w - 1);

    const int cols[4] = {ya * src_w + xa, ya * src_w + xb, yb * src_w + xa, yb * src_w + xb};
    const double ws[4] = {(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx};

    for (int t = 0; t < 4; ++t) row[t] = BilinearTap{0, 0.0};
    int used = 0;
    for (int t = 0; t < 4; ++t) {
        int found = -1;
        for (int u = 0; u < used; ++u)
            if (row[u].col == cols[t]) found = u;
        if (found >= 0)
            row[found].w += ws[t];
        else
            row[used++] = BilinearTap{cols[t], ws[t]};
    }
}

// Per-axis taps for box (area) resampling: source pixels overlapped by the
// destination pixel's footprint, weighted by fractional coverage.
inline void area_taps(int dst, int dst_n, int src_n, std::vector<std::pair<int, double>>& taps) {
    taps.clear();
    const double scale = static_cast<double>(src_n) / dst_n;
    const double lo = dst * scale;
    const double hi = (dst + 1) * scale;
    const int first = static_cast<int>(std::floor(lo));
    const int last = static_cast<int>(std::ceil(hi)) - 1;
    for (int i = first; i <= last; ++i) {
        const double cover = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
        if (cover <= 0.0) continue;
        taps.emplace_back(clampi(i, 0, src_n - 1), cover / (hi - lo));
    }
}

}  // namespace detail

/// Resample an H x W x C image to dst_h x dst_w. Half-pixel centers, edge
/// clamp. bilinear with dst == src reproduces the input exactly.
inline Tensor resize(const Tensor& img, int dst_h, int dst_w, Interp method) {
    if (img.rank() != 3) throw std::invalid_argument("resize: expected H x W x C tensor");
    const int src_h = img.extent(0), src_w = img.extent(1), ch = img.extent(2);
    if (src_h < 1 || src_w < 1 || dst_h < 1 || dst_w < 1)
        throw std::invalid_argument("resize: zero extent");

    Tensor out({dst_h, dst_w, ch});
    const double* in = img.data();
    double* o = out.data();
    auto in_at = [&](int r, int c, int k) {
        r = detail::clampi(r, 0, src_h - 1);
        c = detail::clampi(c, 0, src_w - 1);
        return in[(static_cast<std::int64_t>(r) * src_w + c) * ch + k];
    };

    switch (method) {
        case Interp::nearest: {
            for (int y = 0; y < dst_h; ++y) {
                const int sy = detail::clampi(
                    static_cast<int>(std::floor(detail::src_coord(y, dst_h, src_h) + 0.5)), 0, src_h - 1);
                for (int x = 0; x < dst_w; ++x) {
                    const int sx = detail::clampi(
                        static_cast<int>(std::floor(detail::src_coord(x, dst_w, src_w) + 0.5)), 0, src_w - 1);
                    for (int k = 0; k < ch; ++k) *o++ = in_at(sy, sx, k);
                }
            }
            break;
        }
        case Interp::bilinear: {
            detail::BilinearTap row[4];
            for (int y = 0; y < dst_h; ++y) {
                for (int x = 0; x < dst_w; ++x) {
                    detail::bilinear_row(y, x, dst_h, dst_w, src_h, src_w, row);
                    for (int k = 0; k < ch; ++k) {
                        double acc = 0.0;
                        for (int t = 0; t < 4; ++t)
                            acc += row[t].w * in[static_cast<std::int64_t>(row[t].col) * ch + k];
                        *o++ = acc;
                    }
                }
            }
            break;
        }
        case Interp::bicubic: {
            for (int y = 0; y < dst_h; ++y) {
                const double sy = detail::src_coord(y, dst_h, src_h);
                const int y0 = static_cast<int>(std::floor(sy));
                double wy[4];
                for (int t = 0; t < 4; ++t) wy[t] = detail::cubic_weight(sy - (y0 - 1 + t));
                for (int x = 0; x < dst_w; ++x) {
                    const double sx = detail::src_coord(x, dst_w, src_w);
                    const int x0 = static_cast<int>(std::floor(sx));
                    double wx[4];
                    for (int t = 0; t < 4; ++t) wx[t] = detail::cubic_weight(sx - (x0 - 1 + t));
                    for (int k = 0; k < ch; ++k) {
                        double acc = 0.0;
                        for (int ty = 0; ty < 4; ++ty)
                            for (int tx = 0; tx < 4; ++tx)
                                acc += wy[ty] * wx[tx] * in_at(y0 - 1 + ty, x0 - 1 + tx, k);
                        *o++ = acc;
                    }
                }
            }
            break;
        }
        case Interp::area: {
            std::vector<std::pair<int, double>> ty, tx;
            for (int y = 0; y < dst_h; ++y) {
                detail::area_taps(y, dst_h, src_h, ty);
                for (int x = 0; x < dst_w; ++x) {
                    detail::area_taps(x, dst_w, src_w, tx);
                    for (int k = 0; k < ch; ++k) {
                        double acc = 0.0;
                        for (const auto& [iy, wyv] : ty)
                            for (const auto& [ix, wxv] : tx) acc += wyv * wxv * in_at(iy, ix, k);
                        *o++ = acc;
                    }
                }
            }
            break;
        }
    }
    return out;
}

/// Fixed (non-learnable) linear upsampling operator between two pixel grids,
/// stored as sparse rows of bilinear weights: at most 4 entries per row, all
/// non-negative, each row summing to 1. Application to a flattened image
/// agrees element-exact with resize(..., bilinear).
struct UpsampleOp {
    int src_h = 0, src_w = 0;
    int dst_h = 0, dst_w = 0;

    struct Entry {
        int col;
        double w;
    };
    // 4 slots per row; unused slots carry weight 0.
    std::vector<Entry> entries;  // size dst_h*dst_w*4, row-major

    std::int64_t rows() const { return static_cast<std::int64_t>(dst_h) * dst_w; }
    std::int64_t cols() const { return static_cast<std::int64_t>(src_h) * src_w; }

    // Dense row-major (dst_h*dst_w) x (src_h*src_w) form, for matrix-norm use.
    std::vector<double> to_dense() const {
        std::vector<double> m(static_cast<std::size_t>(rows() * cols()), 0.0);
        for (std::int64_t r = 0; r < rows(); ++r)
            for (int s = 0; s < 4; ++s) {
                const Entry& e = entries[static_cast<std::size_t>(r * 4 + s)];
                m[static_cast<std::size_t>(r * cols() + e.col)] += e.w;
            }
        return m;
    }
};

/// Build the bilinear upsampling operator from src grid to dst grid.
/// Downscaling requests are rejected: the operator only lifts resolutions.
inline UpsampleOp build_upsample_op(int src_h, int src_w, int dst_h, int dst_w) {
    if (src_h < 1 || src_w < 1 || dst_h < 1 || dst_w < 1)
        throw std::invalid_argument("build_upsample_op: zero extent");
    if (dst_h < src_h || dst_w < src_w)
        throw std::invalid_argument("build_upsample_op: operator only upsamples (dst >= src)");

    UpsampleOp op;
    op.src_h = src_h;
    op.src_w = src_w;
    op.dst_h = dst_h;
    op.dst_w = dst_w;
    op.entries.resize(static_cast<std::size_t>(op.rows()) * 4, UpsampleOp::Entry{0, 0.0});

    detail::BilinearTap row[4];
    for (int y = 0; y < dst_h; ++y) {
        for (int x = 0; x < dst_w; ++x) {
            detail::bilinear_row(y, x, dst_h, dst_w, src_h, src_w, row);
            UpsampleOp::Entry* e = &op.entries[(static_cast<std::size_t>(y) * dst_w + x) * 4];
            for (int t = 0; t < 4; ++t) e[t] = UpsampleOp::Entry{row[t].col, row[t].w};
        }
    }
    return op;
}

/// Apply the operator to a flattened multi-channel map. Accepts either
/// (src_h*src_w) x C or src_h x src_w x C; the output keeps the same layout
/// style at the destination grid.
inline Tensor apply_upsample(const UpsampleOp& op, const Tensor& flat) {
    int ch = 0;
    bool spatial = false;
    if (flat.rank() == 2 && flat.extent(0) == op.cols()) {
        ch = flat.extent(1);
    } else if (flat.rank() == 3 && flat.extent(0) == op.src_h && flat.extent(1) == op.src_w) {
        ch = flat.extent(2);
        spatial = true;
    } else {
        throw std::invalid_argument("apply_upsample: shape does not match operator source grid");
    }

    Tensor out = spatial ? Tensor({op.dst_h, op.dst_w, ch})
                         : Tensor({static_cast<int>(op.rows()), ch});
    const double* in = flat.data();
    double* o = out.data();
    for (std::int64_t r = 0; r < op.rows(); ++r) {
        const UpsampleOp::Entry* row = &op.entries[static_cast<std::size_t>(r) * 4];
        for (int k = 0; k < ch; ++k) {
            double acc = 0.0;
            for (int s = 0; s < 4; ++s) acc += row[s].w * in[static_cast<std::int64_t>(row[s].col) * ch + k];
            o[r * ch + k] = acc;
        }
    }
    return out;
}

/// Adjoint application (U^T), used by reverse-mode differentiation of the
/// student branch.
inline Tensor apply_upsample_transpose(const UpsampleOp& op, const Tensor& flat) {
    int ch = 0;
    bool spatial = false;
    if (flat.rank() == 2 && flat.extent(0) == op.rows()) {
        ch = flat.extent(1);
    } else if (flat.rank() == 3 && flat.extent(0) == op.dst_h && flat.extent(1) == op.dst_w) {
        ch = flat.extent(2);
        spatial = true;
    } else {
        throw std::invalid_argument("apply_upsample_transpose: shape does not match operator dest grid");
    }

    Tensor out = spatial ? Tensor({op.src_h, op.src_w, ch})
                         : Tensor({static_cast<int>(op.cols()), ch});
    const double* in = flat.data();
    double* o = out.data();
    for (std::int64_t r = 0; r < op.rows(); ++r) {
        const UpsampleOp::Entry* row = &op.entries[static_cast<std::size_t>(r) * 4];
        for (int s = 0; s < 4; ++s) {
            if (row[s].w == 0.0) continue;
            for (int k = 0; k < ch; ++k)
                o[static_cast<std::int64_t>(row[s].col) * ch + k] += row[s].w * in[r * ch + k];
        }
    }
    return out;
}

}  // namespace raf
