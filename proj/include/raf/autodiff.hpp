#pragma once

#include <memory>
#include <stdexcept>
#include <vector>

#include "raf/tensor.hpp"

namespace raf {

using NodeId = int;

/// Reverse-mode tape over a fixed op set: the convolutions, relu, fixed
/// bilinear upsampling, and sum-of-squares reductions needed by the heatmap
/// model and its losses. Tapes are built per batch and discarded; they are
/// confined to the worker that created them.
class Tape {
    enum class Op {
        leaf,
        conv2d,
        dwconv3x3,
        pwconv,
        add,
        relu,
        upsample,
        sse,
        scale,
        sum,
        stop_gradient,
    };

    struct Node {
        Op op;
        std::vector<NodeId> in;
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        // op attributes
        int stride = 0, pad = 0;
        double factor = 0.0;
        std::shared_ptr<const UpsampleOp> up;
    };

public:
    NodeId constant(Tensor v) { return push(Op::leaf, {}, std::move(v)); }

    NodeId param(Tensor v) {
        NodeId id = push(Op::leaf, {}, std::move(v));
        param_ids_.push_back(id);
        return id;
    }

    const std::vector<NodeId>& params() const { return param_ids_; }

    std::size_t node_count() const { return nodes_.size(); }

    const Tensor& value(NodeId id) const { return at(id).value; }

    // Zero tensor if the node was never reached by backward.
    Tensor grad(NodeId id) const {
        const Node& n = at(id);
        return n.has_grad ? n.grad : Tensor(n.value.shape());
    }

    /// input H x W x Cin, kernel kh x kw x Cin x Cout. Output extents must
    /// divide exactly: (H + 2*pad - kh) % stride == 0.
    NodeId conv2d(NodeId x, NodeId k, int stride, int pad) {
        const Tensor& xv = at(x).value;
        const Tensor& kv = at(k).value;
        if (xv.rank() != 3 || kv.rank() != 4) throw std::invalid_argument("conv2d: rank mismatch");
        if (kv.extent(2) != xv.extent(2)) throw std::invalid_argument("conv2d: channel mismatch");
        if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
        const int span_h = xv.extent(0) + 2 * pad - kv.extent(0);
        const int span_w = xv.extent(1) + 2 * pad - kv.extent(1);
        if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0)
            throw std::invalid_argument("conv2d: extents not divisible by stride");

        const int oh = span_h / stride + 1, ow = span_w / stride + 1;
        const int kh = kv.extent(0), kw = kv.extent(1), ci = kv.extent(2), co = kv.extent(3);
        const int H = xv.extent(0), W = xv.extent(1);
        Tensor out({oh, ow, co});
        const double* xp = xv.data();
        const double* kp = kv.data();
        double* op_ = out.data();
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double* orow = op_ + (static_cast<std::int64_t>(oy) * ow + ox) * co;
                for (int ky = 0; ky < kh; ++ky) {
                    const int y = oy * stride + ky - pad;
                    if (y < 0 || y >= H) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int xcol = ox * stride + kx - pad;
                        if (xcol < 0 || xcol >= W) continue;
                        const double* xrow = xp + (static_cast<std::int64_t>(y) * W + xcol) * ci;
                        const double* kbase = kp + (static_cast<std::int64_t>(ky) * kw + kx) * ci * co;
                        for (int a = 0; a < ci; ++a) {
                            const double xa = xrow[a];
                            const double* krow = kbase + static_cast<std::int64_t>(a) * co;
                            for (int c = 0; c < co; ++c) orow[c] += xa * krow[c];
                        }
                    }
                }
            }
        NodeId id = push(Op::conv2d, {x, k}, std::move(out));
        nodes_.back().stride = stride;
        nodes_.back().pad = pad;
        return id;
    }

    /// input H x W x C, kernel 3 x 3 x C; stride 1, zero pad 1 (same size).
    NodeId depthwise3x3(NodeId x, NodeId k) {
        const Tensor& xv = at(x).value;
        const Tensor& kv = at(k).value;
        if (xv.rank() != 3 || kv.rank() != 3 || kv.extent(0) != 3 || kv.extent(1) != 3 ||
            kv.extent(2) != xv.extent(2))
            throw std::invalid_argument("depthwise3x3: shape mismatch");
        const int H = xv.extent(0), W = xv.extent(1), C = xv.extent(2);
        Tensor out({H, W, C});
        const double* xp = xv.data();
        const double* kp = kv.data();
        double* op_ = out.data();
        for (int y = 0; y < H; ++y)
            for (int x2 = 0; x2 < W; ++x2)
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        const int yy = y + dy;
                        if (yy < 0 || yy >= H) continue;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int xx = x2 + dx;
                            if (xx < 0 || xx >= W) continue;
                            acc += xp[(static_cast<std::int64_t>(yy) * W + xx) * C + c] *
                                   kp[((dy + 1) * 3 + (dx + 1)) * C + c];
                        }
                    }
                    op_[(static_cast<std::int64_t>(y) * W + x2) * C + c] = acc;
                }
        return push(Op::dwconv3x3, {x, k}, std::move(out));
    }

    /// 1x1 convolution; kernel Cin x Cout.
    NodeId pointwise(NodeId x, NodeId k) {
        const Tensor& xv = at(x).value;
        const Tensor& kv = at(k).value;
        if (xv.rank() != 3 || kv.rank() != 2 || kv.extent(0) != xv.extent(2))
            throw std::invalid_argument("pointwise: shape mismatch");
        const int H = xv.extent(0), W = xv.extent(1), ci = xv.extent(2), co = kv.extent(1);
        Tensor out({H, W, co});
        const double* xp = xv.data();
        const double* kp = kv.data();
        double* op_ = out.data();
        for (std::int64_t cell = 0; cell < static_cast<std::int64_t>(H) * W; ++cell) {
            const double* xr = xp + cell * ci;
            double* orow = op_ + cell * co;
            for (int a = 0; a < ci; ++a) {
                const double xa = xr[a];
                const double* krow = kp + static_cast<std::int64_t>(a) * co;
                for (int c = 0; c < co; ++c) orow[c] += xa * krow[c];
            }
        }
        return push(Op::pwconv, {x, k}, std::move(out));
    }

    NodeId add(NodeId a, NodeId b) {
        const Tensor& av = at(a).value;
        const Tensor& bv = at(b).value;
        if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
        Tensor out(av.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
        return push(Op::add, {a, b}, std::move(out));
    }

    NodeId relu(NodeId x) {
        const Tensor& xv = at(x).value;
        Tensor out(xv.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
        return push(Op::relu, {x}, std::move(out));
    }

    /// Fixed linear upsampling through a prebuilt operator; the op only sees
    /// gradients on the student side (its adjoint), never alters weights.
    NodeId upsample(NodeId x, std::shared_ptr<const UpsampleOp> op) {
        if (!op) throw std::invalid_argument("upsample: null operator");
        Tensor out = apply_upsample(*op, at(x).value);
        NodeId id = push(Op::upsample, {x}, std::move(out));
        nodes_.back().up = std::move(op);
        return id;
    }

    /// Sum of squared differences, reduced to a scalar.
    NodeId sse(NodeId a, NodeId b) {
        const Tensor& av = at(a).value;
        const Tensor& bv = at(b).value;
        if (!av.same_shape(bv)) throw std::invalid_argument("sse: shape mismatch");
        double acc = 0.0;
        for (std::int64_t i = 0; i < av.size(); ++i) {
            const double d = av[i] - bv[i];
            acc += d * d;
        }
        return push(Op::sse, {a, b}, Tensor::scalar(acc));
    }

    NodeId scale(NodeId x, double c) {
        const Tensor& xv = at(x).value;
        Tensor out(xv.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
        NodeId id = push(Op::scale, {x}, std::move(out));
        nodes_.back().factor = c;
        return id;
    }

    /// Elementwise sum of one or more same-shape nodes.
    NodeId sum(const std::vector<NodeId>& xs) {
        if (xs.empty()) throw std::invalid_argument("sum: no inputs");
        Tensor out = at(xs[0]).value;
        for (std::size_t i = 1; i < xs.size(); ++i) {
            const Tensor& v = at(xs[i]).value;
            if (!v.same_shape(out)) throw std::invalid_argument("sum: shape mismatch");
            for (std::int64_t j = 0; j < out.size(); ++j) out[j] += v[j];
        }
        return push(Op::sum, xs, std::move(out));
    }

    /// Forward identity whose backward pass contributes exactly zero gradient
    /// to every ancestor.
    NodeId stop_gradient(NodeId x) { return push(Op::stop_gradient, {x}, at(x).value); }

    /// Reverse sweep from a scalar loss. Visits nodes in reverse creation
    /// order (reverse topological by construction); gradient fan-in
    /// accumulates in fixed node-id order, so results are bit-reproducible.
    void backward(NodeId loss) {
        Node& ln = at(loss);
        if (ln.value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
        for (Node& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor();
        }
        ensure_grad(loss)[0] = 1.0;

        for (NodeId id = loss; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.has_grad) continue;
            switch (n.op) {
                case Op::leaf:
                case Op::stop_gradient:
                    break;  // stop_gradient: nothing flows upstream
                case Op::conv2d:
                    backward_conv2d(n);
                    break;
                case Op::dwconv3x3:
                    backward_dwconv(n);
                    break;
                case Op::pwconv:
                    backward_pwconv(n);
                    break;
                case Op::add: {
                    accumulate(n.in[0], n.grad);
                    accumulate(n.in[1], n.grad);
                    break;
                }
                case Op::relu: {
                    const Tensor& xv = at(n.in[0]).value;
                    Tensor& dst = ensure_grad(n.in[0]);
                    for (std::int64_t i = 0; i < dst.size(); ++i)
                        if (xv[i] > 0.0) dst[i] += n.grad[i];
                    break;
                }
                case Op::upsample: {
                    accumulate(n.in[0], apply_upsample_transpose(*n.up, n.grad));
                    break;
                }
                case Op::sse: {
                    const double g = n.grad[0];
                    {
                        const Tensor& av = at(n.in[0]).value;
                        const Tensor& bv = at(n.in[1]).value;
                        Tensor& da = ensure_grad(n.in[0]);
                        for (std::int64_t i = 0; i < da.size(); ++i)
                            da[i] += 2.0 * g * (av[i] - bv[i]);
                    }
                    {
                        const Tensor& av = at(n.in[0]).value;
                        const Tensor& bv = at(n.in[1]).value;
                        Tensor& db = ensure_grad(n.in[1]);
                        for (std::int64_t i = 0; i < db.size(); ++i)
                            db[i] -= 2.0 * g * (av[i] - bv[i]);
                    }
                    break;
                }
                case Op::scale: {
                    Tensor& dst = ensure_grad(n.in[0]);
                    for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += n.factor * n.grad[i];
                    break;
                }
                case Op::sum: {
                    for (NodeId in : n.in) accumulate(in, n.grad);
                    break;
                }
            }
        }
    }

    std::vector<Tensor> param_grads() const {
        std::vector<Tensor> out;
        out.reserve(param_ids_.size());
        for (NodeId id : param_ids_) out.push_back(grad(id));
        return out;
    }

private:
    Node& at(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)); }
    const Node& at(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }

    NodeId push(Op op, std::vector<NodeId> in, Tensor value) {
        for (NodeId i : in)
            if (i < 0 || i >= static_cast<NodeId>(nodes_.size()))
                throw std::invalid_argument("tape: input node does not exist");
        Node n;
        n.op = op;
        n.in = std::move(in);
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size()) - 1;
    }

    Tensor& ensure_grad(NodeId id) {
        Node& n = at(id);
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    void accumulate(NodeId id, const Tensor& g) {
        Tensor& dst = ensure_grad(id);
        for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }

    void backward_conv2d(Node& n) {
        const Tensor& xv = at(n.in[0]).value;
        const Tensor& kv = at(n.in[1]).value;
        const int H = xv.extent(0), W = xv.extent(1);
        const int kh = kv.extent(0), kw = kv.extent(1), ci = kv.extent(2), co = kv.extent(3);
        const int oh = n.value.extent(0), ow = n.value.extent(1);
        double* dxp = ensure_grad(n.in[0]).data();
        double* dkp = ensure_grad(n.in[1]).data();
        const double* xp = xv.data();
        const double* kp = kv.data();
        const double* gp = n.grad.data();
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const double* grow = gp + (static_cast<std::int64_t>(oy) * ow + ox) * co;
                for (int ky = 0; ky < kh; ++ky) {
                    const int y = oy * n.stride + ky - n.pad;
                    if (y < 0 || y >= H) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int x = ox * n.stride + kx - n.pad;
                        if (x < 0 || x >= W) continue;
                        const std::int64_t xoff = (static_cast<std::int64_t>(y) * W + x) * ci;
                        const std::int64_t koff = (static_cast<std::int64_t>(ky) * kw + kx) * ci * co;
                        for (int a = 0; a < ci; ++a) {
                            const double xa = xp[xoff + a];
                            const double* krow = kp + koff + static_cast<std::int64_t>(a) * co;
                            double* dkrow = dkp + koff + static_cast<std::int64_t>(a) * co;
                            double acc = 0.0;
                            for (int c = 0; c < co; ++c) {
                                acc += krow[c] * grow[c];
                                dkrow[c] += xa * grow[c];
                            }
                            dxp[xoff + a] += acc;
                        }
                    }
                }
            }
    }

    void backward_dwconv(Node& n) {
        const Tensor& xv = at(n.in[0]).value;
        const Tensor& kv = at(n.in[1]).value;
        const int H = xv.extent(0), W = xv.extent(1), C = xv.extent(2);
        double* dxp = ensure_grad(n.in[0]).data();
        double* dkp = ensure_grad(n.in[1]).data();
        const double* xp = xv.data();
        const double* kp = kv.data();
        const double* gp = n.grad.data();
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::int64_t go = (static_cast<std::int64_t>(y) * W + x) * C;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int yy = y + dy;
                    if (yy < 0 || yy >= H) continue;
                    for (int dx2 = -1; dx2 <= 1; ++dx2) {
                        const int xx = x + dx2;
                        if (xx < 0 || xx >= W) continue;
                        const std::int64_t xo = (static_cast<std::int64_t>(yy) * W + xx) * C;
                        const std::int64_t ko = static_cast<std::int64_t>((dy + 1) * 3 + (dx2 + 1)) * C;
                        for (int c = 0; c < C; ++c) {
                            const double g = gp[go + c];
                            dxp[xo + c] += kp[ko + c] * g;
                            dkp[ko + c] += xp[xo + c] * g;
                        }
                    }
                }
            }
    }

    void backward_pwconv(Node& n) {
        const Tensor& xv = at(n.in[0]).value;
        const Tensor& kv = at(n.in[1]).value;
        const int ci = kv.extent(0), co = kv.extent(1);
        const std::int64_t cells = static_cast<std::int64_t>(xv.extent(0)) * xv.extent(1);
        double* dxp = ensure_grad(n.in[0]).data();
        double* dkp = ensure_grad(n.in[1]).data();
        const double* xp = xv.data();
        const double* kp = kv.data();
        const double* gp = n.grad.data();
        for (std::int64_t cell = 0; cell < cells; ++cell) {
            const double* xr = xp + cell * ci;
            const double* gr = gp + cell * co;
            double* dxr = dxp + cell * ci;
            for (int a = 0; a < ci; ++a) {
                const double xa = xr[a];
                const double* krow = kp + static_cast<std::int64_t>(a) * co;
                double* dkrow = dkp + static_cast<std::int64_t>(a) * co;
                double acc = 0.0;
                for (int c = 0; c < co; ++c) {
                    acc += krow[c] * gr[c];
                    dkrow[c] += xa * gr[c];
                }
                dxr[a] += acc;
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<NodeId> param_ids_;
};

}  // namespace raf
