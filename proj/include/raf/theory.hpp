#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "raf/linear_model.hpp"
#include "raf/losses.hpp"
#include "raf/rng.hpp"

namespace raf::theory {

// ---------------------------------------------------------------------------
// Loss terms over the frozen-feature linear model. The task and regularizer
// pieces are shared verbatim between the linearized loss and its surrogate,
// so the two coincide exactly when alpha = 0.
// ---------------------------------------------------------------------------

inline double task_value(const LinearClient& c, const Eigen::VectorXd& w) {
    double acc = 0.0;
    for (int j = 0; j < c.samples(); ++j)
        acc += (c.psi_t[static_cast<std::size_t>(j)][0] * w - c.targets[static_cast<std::size_t>(j)])
                   .squaredNorm();
    return acc / c.samples();
}

inline Eigen::VectorXd task_grad(const LinearClient& c, const Eigen::VectorXd& w) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(w.size());
    for (int j = 0; j < c.samples(); ++j) {
        const auto& psi_t = c.psi_t[static_cast<std::size_t>(j)][0];
        g += 2.0 * psi_t.transpose() * (psi_t * w - c.targets[static_cast<std::size_t>(j)]);
    }
    return g / c.samples();
}

// Distillation term of the linearized loss: teacher heatmaps evaluated at the
// frozen broadcast iterate w_t.
inline double kd_value_linear(const LinearClient& c, const Eigen::VectorXd& w,
                              const Eigen::VectorXd& w_t) {
    double acc = 0.0;
    for (int i = 1; i < c.levels(); ++i) {
        const auto& U = c.U[static_cast<std::size_t>(i - 1)];
        double level = 0.0;
        for (int j = 0; j < c.samples(); ++j) {
            const auto& teacher = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i - 1)];
            const auto& student = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
            level += (teacher * w_t - U * (student * w)).squaredNorm();
        }
        acc += level / c.samples();
    }
    return acc;
}

inline Eigen::VectorXd kd_grad_linear(const LinearClient& c, const Eigen::VectorXd& w,
                                      const Eigen::VectorXd& w_t) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(w.size());
    for (int i = 1; i < c.levels(); ++i) {
        const auto& U = c.U[static_cast<std::size_t>(i - 1)];
        Eigen::VectorXd level = Eigen::VectorXd::Zero(w.size());
        for (int j = 0; j < c.samples(); ++j) {
            const auto& teacher = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i - 1)];
            const auto& student = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
            const Eigen::MatrixXd A = U * student;  // m_{i-1} x d
            level += 2.0 * A.transpose() * (A * w - teacher * w_t);
        }
        g += level / c.samples();
    }
    return g;
}

// Distillation term of the surrogate: the bilinear form w^T A^T (B - A) w.
inline double kd_value_surrogate(const LinearClient& c, const Eigen::VectorXd& w) {
    double acc = 0.0;
    for (int i = 1; i < c.levels(); ++i) {
        const auto& U = c.U[static_cast<std::size_t>(i - 1)];
        double level = 0.0;
        for (int j = 0; j < c.samples(); ++j) {
            const auto& teacher = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i - 1)];
            const auto& student = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
            const Eigen::VectorXd Aw = U * (student * w);
            level += Aw.dot(teacher * w - Aw);
        }
        acc += level / c.samples();
    }
    return acc;
}

// Gradient of the non-symmetric quadratic via (M + M^T) w.
inline Eigen::VectorXd kd_grad_surrogate(const LinearClient& c, const Eigen::VectorXd& w) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(w.size());
    for (int i = 1; i < c.levels(); ++i) {
        const auto& U = c.U[static_cast<std::size_t>(i - 1)];
        Eigen::VectorXd level = Eigen::VectorXd::Zero(w.size());
        for (int j = 0; j < c.samples(); ++j) {
            const auto& teacher = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i - 1)];
            const auto& student = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
            const Eigen::MatrixXd A = U * student;
            const Eigen::VectorXd Aw = A * w;
            // M = A^T (B - A); (M + M^T) w
            level += A.transpose() * (teacher * w - Aw) + (teacher.transpose() * Aw - A.transpose() * Aw);
        }
        g += level / c.samples();
    }
    return g;
}

/// Linearized local loss with the teacher frozen at w_t.
inline double loss_linear(const LinearClient& c, const Eigen::VectorXd& w,
                          const Eigen::VectorXd& w_t, const LossCoeffs& coeffs) {
    return task_value(c, w) + coeffs.alpha * kd_value_linear(c, w, w_t) +
           0.5 * coeffs.gamma * w.squaredNorm();
}

/// Quadratic surrogate loss (the object the convergence analysis runs on).
inline double loss_surrogate(const LinearClient& c, const Eigen::VectorXd& w,
                             const LossCoeffs& coeffs) {
    return task_value(c, w) + coeffs.alpha * kd_value_surrogate(c, w) +
           0.5 * coeffs.gamma * w.squaredNorm();
}

inline Eigen::VectorXd grad_surrogate(const LinearClient& c, const Eigen::VectorXd& w,
                                      const LossCoeffs& coeffs) {
    return task_grad(c, w) + coeffs.alpha * kd_grad_surrogate(c, w) + coeffs.gamma * w;
}

inline Eigen::VectorXd grad_linear(const LinearClient& c, const Eigen::VectorXd& w,
                                   const Eigen::VectorXd& w_t, const LossCoeffs& coeffs) {
    return task_grad(c, w) + coeffs.alpha * kd_grad_linear(c, w, w_t) + coeffs.gamma * w;
}

/// Residuals |L - Lbar| and ||grad L - grad Lbar|| at w = w_t. Both are
/// reported, never asserted zero: the distillation terms of the two
/// formulations need not coincide in general, and alpha = 0 removes them
/// identically.
struct EquivalenceResidual {
    double value = 0;
    double grad = 0;
};

inline EquivalenceResidual check_local_equivalence(const LinearClient& c,
                                                   const Eigen::VectorXd& w_t,
                                                   const LossCoeffs& coeffs) {
    EquivalenceResidual r;
    r.value = std::fabs(loss_linear(c, w_t, w_t, coeffs) - loss_surrogate(c, w_t, coeffs));
    r.grad = (grad_linear(c, w_t, w_t, coeffs) - grad_surrogate(c, w_t, coeffs)).norm();
    return r;
}

// ---------------------------------------------------------------------------
// Constants and bounds
// ---------------------------------------------------------------------------

struct TheoryConstants {
    double M_phi = 0, M_U = 0, M_T = 0;
    double R = 0;
    double alpha = 0, gamma = 0;
    int r = 1;  // resolution-level count
    double L = 0;
    double C = 0;
};

/// Smoothness and gradient-norm constants from the closed forms:
///   L = 2 (1 + alpha (r-1)(M_U+1)^2) M_phi^2 + gamma
///   C = 2 M_phi (M_phi R + M_T) + 2 alpha (r-1) M_phi^2 (M_U+1)^2 R + gamma R
inline TheoryConstants compute_constants(const LinearModel& lm, const LossCoeffs& coeffs, double R) {
    TheoryConstants k;
    k.M_phi = lm.M_phi;
    k.M_U = lm.max_U_norm;
    k.M_T = lm.max_target_norm;
    k.R = R;
    k.alpha = coeffs.alpha;
    k.gamma = coeffs.gamma;
    for (const auto& c : lm.clients) k.r = std::max(k.r, c.levels());
    const double mu1 = (k.M_U + 1.0) * (k.M_U + 1.0);
    k.L = 2.0 * (1.0 + k.alpha * (k.r - 1) * mu1) * k.M_phi * k.M_phi + k.gamma;
    k.C = 2.0 * k.M_phi * (k.M_phi * R + k.M_T) +
          2.0 * k.alpha * (k.r - 1) * k.M_phi * k.M_phi * mu1 * R + k.gamma * R;
    return k;
}

// Dense quadratic form of one client's surrogate: L = w^T P w + b^T w + cst.
struct QuadLoss {
    Eigen::MatrixXd P;  // includes the non-symmetric distillation part
    Eigen::VectorXd b;
    double cst = 0;

    double value(const Eigen::VectorXd& w) const { return w.dot(P * w) + b.dot(w) + cst; }
    Eigen::VectorXd grad(const Eigen::VectorXd& w) const { return (P + P.transpose()) * w + b; }
    Eigen::MatrixXd hessian() const { return P + P.transpose(); }
};

inline QuadLoss surrogate_quadratic(const LinearClient& c, const LossCoeffs& coeffs, int dim) {
    QuadLoss q;
    q.P = Eigen::MatrixXd::Zero(dim, dim);
    q.b = Eigen::VectorXd::Zero(dim);
    const double inv_n = 1.0 / c.samples();
    for (int j = 0; j < c.samples(); ++j) {
        const auto& psi0 = c.psi_t[static_cast<std::size_t>(j)][0];
        q.P += inv_n * psi0.transpose() * psi0;
        q.b -= 2.0 * inv_n * psi0.transpose() * c.targets[static_cast<std::size_t>(j)];
        q.cst += inv_n * c.targets[static_cast<std::size_t>(j)].squaredNorm();
        for (int i = 1; i < c.levels(); ++i) {
            const auto& U = c.U[static_cast<std::size_t>(i - 1)];
            const Eigen::MatrixXd A = U * c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
            const auto& B = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i - 1)];
            q.P += coeffs.alpha * inv_n * A.transpose() * (B - A);
        }
    }
    q.P += 0.5 * coeffs.gamma * Eigen::MatrixXd::Identity(dim, dim);
    return q;
}

// Per-sample quadratic (single-summand stochastic draw; the regularizer rides
// along with every sample so the draw stays unbiased).
inline QuadLoss sample_quadratic(const LinearClient& c, int j, const LossCoeffs& coeffs, int dim) {
    QuadLoss q;
    q.P = Eigen::MatrixXd::Zero(dim, dim);
    q.b = Eigen::VectorXd::Zero(dim);
    const auto& psi0 = c.psi_t[static_cast<std::size_t>(j)][0];
    q.P += psi0.transpose() * psi0;
    q.b -= 2.0 * psi0.transpose() * c.targets[static_cast<std::size_t>(j)];
    q.cst += c.targets[static_cast<std::size_t>(j)].squaredNorm();
    for (int i = 1; i < c.levels(); ++i) {
        const auto& U = c.U[static_cast<std::size_t>(i - 1)];
        const Eigen::MatrixXd A = U * c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
        const auto& B = c.psi_t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i - 1)];
        q.P += coeffs.alpha * A.transpose() * (B - A);
    }
    q.P += 0.5 * coeffs.gamma * Eigen::MatrixXd::Identity(dim, dim);
    return q;
}

inline Eigen::VectorXd random_ball_point(std::mt19937_64& rng, int dim, double R) {
    Eigen::VectorXd v(dim);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int i = 0; i < dim; ++i) v(i) = gauss(rng);
    v.normalize();
    const double radius = R * std::pow(uniform(rng, 0.0, 1.0), 1.0 / dim);
    return radius * v;
}

struct BoundCheck {
    double estimate = 0;
    double bound = 0;
    bool pass = false;
};

struct BoundsReport {
    BoundCheck lipschitz;          // max ||grad(u)-grad(v)|| / ||u-v|| vs L
    BoundCheck strong_convexity;   // min eigenvalue of the symmetrized Hessian vs gamma
    BoundCheck grad_norm;          // max ||grad(w)||, ||w|| <= R, vs C
    BoundCheck sample_deviation;   // mean ||grad_xi - grad|| vs 2C (Jensen bound)
};

/// Empirical verification of Propositions 1-3 on one built instance.
inline BoundsReport verify_bounds(const LinearModel& lm, const TheoryConstants& k,
                                  const LossCoeffs& coeffs, int trials, std::uint64_t seed) {
    if (trials < 100) throw std::invalid_argument("verify_bounds: need at least 100 trials");
    BoundsReport rep;
    auto rng = make_rng(mix_seed(seed, 0x626f756eULL));

    std::vector<QuadLoss> quads;
    quads.reserve(lm.clients.size());
    for (const auto& c : lm.clients) quads.push_back(surrogate_quadratic(c, coeffs, lm.dim));

    double lip = 0.0;
    for (int t = 0; t < trials; ++t) {
        const auto& c = lm.clients[static_cast<std::size_t>(t) % lm.clients.size()];
        Eigen::VectorXd u = random_ball_point(rng, lm.dim, k.R);
        Eigen::VectorXd v = random_ball_point(rng, lm.dim, k.R);
        const double dist = (u - v).norm();
        if (dist < 1e-12) continue;
        lip = std::max(lip, (grad_surrogate(c, u, coeffs) - grad_surrogate(c, v, coeffs)).norm() / dist);
    }
    rep.lipschitz = {lip, k.L, lip <= k.L};

    double min_eig = std::numeric_limits<double>::infinity();
    for (const auto& q : quads) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (q.hessian() + q.hessian().transpose()));
        min_eig = std::min(min_eig, es.eigenvalues().minCoeff());
    }
    rep.strong_convexity = {min_eig, k.gamma, min_eig >= k.gamma - 1e-9};

    double max_grad = 0.0;
    for (int t = 0; t < trials; ++t) {
        const auto& c = lm.clients[static_cast<std::size_t>(t) % lm.clients.size()];
        Eigen::VectorXd w = random_ball_point(rng, lm.dim, k.R);
        max_grad = std::max(max_grad, grad_surrogate(c, w, coeffs).norm());
    }
    rep.grad_norm = {max_grad, k.C, max_grad <= k.C};

    double max_dev = 0.0;
    for (int t = 0; t < std::min(trials, 50); ++t) {
        const std::size_t ci = static_cast<std::size_t>(t) % lm.clients.size();
        const auto& c = lm.clients[ci];
        Eigen::VectorXd w = random_ball_point(rng, lm.dim, k.R);
        const Eigen::VectorXd full = quads[ci].grad(w);
        double dev = 0.0;
        for (int j = 0; j < c.samples(); ++j)
            dev += (sample_quadratic(c, j, coeffs, lm.dim).grad(w) - full).norm();
        max_dev = std::max(max_dev, dev / c.samples());
    }
    rep.sample_deviation = {max_dev, 2.0 * k.C, max_dev <= 2.0 * k.C};
    return rep;
}

// ---------------------------------------------------------------------------
// Convergence experiment
// ---------------------------------------------------------------------------

struct GapCurve {
    std::vector<double> gap;  // gap[t] after round t+1, averaged over repeats
    std::vector<double> eta;
    Eigen::VectorXd w_star;
    double gap_at_min = 0;  // value of the global surrogate at w_star
    double fit_c = 0;       // least-squares coefficient of c/t over the window
    double r2 = 0;
    double ratio_500_50 = 0;
    double mk_z = 0;  // Mann-Kendall z statistic of gap(t)*t over the window
};

/// The theorem's step-size rule with unit constant:
/// eta_t = 1 / (gamma (E + alpha r M_U^2 M_phi^2 / gamma + t)).
inline double theorem_stepsize(const TheoryConstants& k, int E, int t) {
    const double shift =
        E + k.alpha * k.r * k.M_U * k.M_U * k.M_phi * k.M_phi / k.gamma + static_cast<double>(t);
    return 1.0 / (k.gamma * shift);
}

// Mann-Kendall z statistic (positive = upward trend).
inline double mann_kendall_z(const std::vector<double>& x) {
    const std::int64_t n = static_cast<std::int64_t>(x.size());
    std::int64_t s = 0;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = i + 1; j < n; ++j)
            s += x[static_cast<std::size_t>(j)] > x[static_cast<std::size_t>(i)]
                     ? 1
                     : (x[static_cast<std::size_t>(j)] < x[static_cast<std::size_t>(i)] ? -1 : 0);
    const double var = static_cast<double>(n) * (n - 1) * (2 * n + 5) / 18.0;
    if (s > 0) return (s - 1) / std::sqrt(var);
    if (s < 0) return (s + 1) / std::sqrt(var);
    return 0.0;
}

/// FedAvg on the surrogate objectives with the theorem's schedule. The unique
/// minimizer comes from a direct solve of the global quadratic's normal
/// equations; gap(t) is the global surrogate value minus that optimum,
/// averaged over `repeats` independent stochastic runs (single-sample draws
/// exercise the unbiased-gradient assumption; repeats estimate the expected
/// gap). fit window: rounds [50, 500] when T >= 500, else [T/10, T].
inline GapCurve convergence_experiment(const LinearModel& lm, const TheoryConstants& k,
                                       const LossCoeffs& coeffs, int T, int E, int repeats,
                                       bool stochastic, std::uint64_t seed,
                                       const Eigen::VectorXd* start = nullptr) {
    if (T < 1 || E < 1 || repeats < 1) throw std::invalid_argument("convergence_experiment: bad sizes");
    const int dim = lm.dim;
    const std::size_t N = lm.clients.size();

    std::vector<QuadLoss> quads;
    quads.reserve(N);
    for (const auto& c : lm.clients) quads.push_back(surrogate_quadratic(c, coeffs, dim));

    QuadLoss global;
    global.P = Eigen::MatrixXd::Zero(dim, dim);
    global.b = Eigen::VectorXd::Zero(dim);
    for (const auto& q : quads) {
        global.P += q.P / static_cast<double>(N);
        global.b += q.b / static_cast<double>(N);
        global.cst += q.cst / static_cast<double>(N);
    }

    const Eigen::MatrixXd H = global.hessian();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (H + H.transpose()));
    if (es.eigenvalues().minCoeff() <= 0.0)
        throw std::runtime_error("convergence_experiment: global surrogate is not strictly convex");

    GapCurve out;
    out.w_star = H.ldlt().solve(-global.b);
    out.gap_at_min = global.value(out.w_star);
    out.gap.assign(static_cast<std::size_t>(T), 0.0);
    out.eta.resize(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) out.eta[static_cast<std::size_t>(t)] = theorem_stepsize(k, E, t);

    for (int rep = 0; rep < repeats; ++rep) {
        auto init_rng = make_rng(mix_seed(seed, 0x696e6974ULL, static_cast<std::uint64_t>(rep)));
        Eigen::VectorXd w = start ? *start : random_ball_point(init_rng, dim, 0.5 * k.R);

        for (int t = 0; t < T; ++t) {
            const double eta = out.eta[static_cast<std::size_t>(t)];
            Eigen::VectorXd mean_w = Eigen::VectorXd::Zero(dim);
            for (std::size_t kk = 0; kk < N; ++kk) {
                Eigen::VectorXd wk = w;
                auto rng = make_rng(mix_seed(seed, (static_cast<std::uint64_t>(rep) << 32) | kk,
                                             static_cast<std::uint64_t>(t)));
                for (int e = 0; e < E; ++e) {
                    Eigen::VectorXd g;
                    if (stochastic) {
                        const int j = uniform_int(rng, 0, lm.clients[kk].samples() - 1);
                        g = sample_quadratic(lm.clients[kk], j, coeffs, dim).grad(wk);
                    } else {
                        g = quads[kk].grad(wk);
                    }
                    wk -= eta * g;
                }
                mean_w += wk / static_cast<double>(N);
            }
            w = mean_w;
            out.gap[static_cast<std::size_t>(t)] += (global.value(w) - out.gap_at_min) / repeats;
        }
    }

    const int lo = T >= 500 ? 50 : std::max(1, T / 10);
    const int hi = std::min(T, 500);
    double sxy = 0, sxx = 0;
    for (int t = lo; t <= hi; ++t) {
        const double g = out.gap[static_cast<std::size_t>(t - 1)];
        sxy += g / t;
        sxx += 1.0 / (static_cast<double>(t) * t);
    }
    out.fit_c = sxy / sxx;
    double ss_res = 0, ss_tot = 0, mean = 0;
    for (int t = lo; t <= hi; ++t) mean += out.gap[static_cast<std::size_t>(t - 1)];
    mean /= (hi - lo + 1);
    std::vector<double> gap_times_t;
    for (int t = lo; t <= hi; ++t) {
        const double g = out.gap[static_cast<std::size_t>(t - 1)];
        ss_res += (g - out.fit_c / t) * (g - out.fit_c / t);
        ss_tot += (g - mean) * (g - mean);
        gap_times_t.push_back(g * t);
    }
    out.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
    out.ratio_500_50 = out.gap[static_cast<std::size_t>(hi - 1)] / out.gap[static_cast<std::size_t>(lo - 1)];
    out.mk_z = mann_kendall_z(gap_times_t);
    return out;
}

}  // namespace raf::theory
