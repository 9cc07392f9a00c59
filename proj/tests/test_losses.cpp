#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>

#include "raf/losses.hpp"
#include "raf/rng.hpp"

using raf::LossCoeffs;
using raf::NodeId;
using raf::Tape;
using raf::TapedParams;
using raf::Tensor;

namespace {

Tensor rand_tensor(std::mt19937_64& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = raf::uniform(rng, lo, hi);
    return t;
}

}  // namespace

TEST_CASE("task loss: equal prediction and target give zero") {
    Tape t;
    auto rng = raf::make_rng(1);
    Tensor a = rand_tensor(rng, {4, 3, 2});
    NodeId p = t.constant(a), q = t.constant(a);
    CHECK(t.value(raf::task_loss(t, {p}, {q}))[0] == 0.0);
}

TEST_CASE("task loss: constant offset 1 over m elements averages to m") {
    Tape t;
    auto rng = raf::make_rng(2);
    const int n = 3;
    std::vector<NodeId> preds, targets;
    for (int j = 0; j < n; ++j) {
        Tensor base = rand_tensor(rng, {4, 3, 2});  // m = 24
        Tensor off = base;
        for (std::int64_t i = 0; i < off.size(); ++i) off[i] += 1.0;
        targets.push_back(t.constant(base));
        preds.push_back(t.constant(off));
    }
    CHECK(t.value(raf::task_loss(t, preds, targets))[0] == Catch::Approx(24.0).margin(1e-12));
}

TEST_CASE("task loss matches the scalar-loop oracle") {
    Tape t;
    auto rng = raf::make_rng(3);
    const int n = 4;
    std::vector<NodeId> preds, targets;
    double expect = 0.0;
    std::vector<Tensor> ps, ts;
    for (int j = 0; j < n; ++j) {
        ps.push_back(rand_tensor(rng, {3, 3, 2}));
        ts.push_back(rand_tensor(rng, {3, 3, 2}));
    }
    for (int j = 0; j < n; ++j) {
        double sq = 0.0;
        for (std::int64_t i = 0; i < ps[j].size(); ++i) {
            const double d = ps[j][i] - ts[j][i];
            sq += d * d;
        }
        expect += sq;
        preds.push_back(t.constant(ps[j]));
        targets.push_back(t.constant(ts[j]));
    }
    expect /= n;
    CHECK(t.value(raf::task_loss(t, preds, targets))[0] == Catch::Approx(expect).margin(1e-12));
    CHECK_THROWS_AS(raf::task_loss(t, preds, {targets[0]}), std::invalid_argument);
}

TEST_CASE("mrkd loss: exact teacher/student agreement gives zero") {
    Tape t;
    auto rng = raf::make_rng(4);
    auto op = std::make_shared<raf::UpsampleOp>(raf::build_upsample_op(2, 2, 4, 4));
    Tensor student = rand_tensor(rng, {2, 2, 3});
    Tensor teacher = raf::apply_upsample(*op, student);
    NodeId s = t.constant(student), te = t.constant(teacher);
    NodeId loss = raf::mrkd_loss(t, {{te}, {s}}, {op});
    CHECK(t.value(loss)[0] == 0.0);
}

TEST_CASE("mrkd loss: a single level contributes zero and no gradient") {
    Tape t;
    auto rng = raf::make_rng(5);
    NodeId w = t.param(rand_tensor(rng, {4, 4, 2}));
    NodeId pred = t.relu(w);
    NodeId kd = raf::mrkd_loss(t, {{pred}}, {});
    CHECK(t.value(kd)[0] == 0.0);
    t.backward(kd);
    Tensor g = t.grad(w);
    for (std::int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("mrkd loss: missing operator rejected") {
    Tape t;
    NodeId a = t.constant(Tensor({4, 4, 1}));
    NodeId b = t.constant(Tensor({2, 2, 1}));
    CHECK_THROWS_AS(raf::mrkd_loss(t, {{a}, {b}}, {}), std::invalid_argument);
}

TEST_CASE("mrkd gradient equals the frozen-teacher finite-difference oracle") {
    auto rng = raf::make_rng(6);
    auto op = std::make_shared<raf::UpsampleOp>(raf::build_upsample_op(2, 2, 4, 4));
    for (int trial = 0; trial < 5; ++trial) {
        // teacher: relu of one param at the fine grid; student: another param.
        Tensor tw = rand_tensor(rng, {4, 4, 1}, 0.1, 1.0);
        Tensor sw = rand_tensor(rng, {2, 2, 1}, 0.1, 1.0);

        Tape t;
        NodeId twid = t.param(tw);
        NodeId swid = t.param(sw);
        NodeId kd = raf::mrkd_loss(t, {{t.relu(twid)}, {t.relu(swid)}}, {op});
        t.backward(kd);
        Tensor g_teacher = t.grad(twid);
        Tensor g_student = t.grad(swid);

        // teacher branch is detached: exactly zero
        for (std::int64_t i = 0; i < g_teacher.size(); ++i) REQUIRE(g_teacher[i] == 0.0);

        // student gradient vs central differences with the teacher frozen
        Tensor teacher_value;
        {
            Tape tt;
            teacher_value = tt.value(tt.relu(tt.constant(tw)));
        }
        auto eval = [&](const Tensor& s) {
            Tape tt;
            NodeId sv = tt.constant(s);
            NodeId up = tt.upsample(tt.relu(sv), op);
            return tt.value(tt.sse(tt.constant(teacher_value), up))[0];
        };
        const double h = 1e-5;
        for (std::int64_t i = 0; i < sw.size(); ++i) {
            Tensor up = sw, dn = sw;
            up[i] += h;
            dn[i] -= h;
            const double fd = (eval(up) - eval(dn)) / (2.0 * h);
            const double err =
                std::fabs(g_student[i] - fd) / std::max({1e-5, std::fabs(g_student[i]), std::fabs(fd)});
            REQUIRE(err <= 1e-4);
        }
    }
}

TEST_CASE("total loss: alpha=0, gamma=0, mu=0 equals the task loss") {
    Tape t;
    auto rng = raf::make_rng(7);
    TapedParams params;
    params.ids.push_back(t.param(rand_tensor(rng, {3, 3, 1})));
    NodeId task = t.constant(Tensor::scalar(1.75));
    NodeId kd = t.constant(Tensor::scalar(0.6));
    auto nodes = raf::total_loss(t, task, kd, params, LossCoeffs{0.0, 0.0, 0.0}, nullptr);
    CHECK(t.value(nodes.total)[0] == 1.75);
}

TEST_CASE("total loss: zero params with gamma=1 and zero task/kd give zero") {
    Tape t;
    TapedParams params;
    params.ids.push_back(t.param(Tensor({4, 4, 1})));
    NodeId zero = t.constant(Tensor::scalar(0.0));
    auto nodes = raf::total_loss(t, zero, zero, params, LossCoeffs{0.0, 1.0, 0.0}, nullptr);
    CHECK(t.value(nodes.total)[0] == 0.0);
}

TEST_CASE("total loss at the run setting matches the component-sum oracle") {
    // alpha=1, gamma=0.01
    Tape t;
    auto rng = raf::make_rng(8);
    Tensor p0 = rand_tensor(rng, {3, 3, 2});
    Tensor p1 = rand_tensor(rng, {2, 4});
    TapedParams params;
    params.ids.push_back(t.param(p0));
    params.ids.push_back(t.param(p1));
    const double task_v = 0.37, kd_v = 1.21;
    NodeId task = t.constant(Tensor::scalar(task_v));
    NodeId kd = t.constant(Tensor::scalar(kd_v));
    auto nodes = raf::total_loss(t, task, kd, params, LossCoeffs{1.0, 0.01, 0.0}, nullptr);
    const double expect = task_v + 1.0 * kd_v + 0.01 * 0.5 * (p0.sqnorm() + p1.sqnorm());
    CHECK(t.value(nodes.total)[0] == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("total loss is additive in alpha") {
    auto rng = raf::make_rng(9);
    Tensor p0 = rand_tensor(rng, {3, 3, 1});
    const double task_v = 0.9, kd_v = 0.31;
    auto total_at = [&](double alpha) {
        Tape t;
        TapedParams params;
        params.ids.push_back(t.param(p0));
        auto nodes = raf::total_loss(t, t.constant(Tensor::scalar(task_v)),
                                     t.constant(Tensor::scalar(kd_v)), params,
                                     LossCoeffs{alpha, 0.01, 0.0}, nullptr);
        return t.value(nodes.total)[0];
    };
    const double t0 = total_at(0.0), t1 = total_at(1.0), t2 = total_at(2.0);
    CHECK(t1 - t0 == Catch::Approx(kd_v).margin(1e-12));
    CHECK(t2 - t1 == Catch::Approx(kd_v).margin(1e-12));
}

TEST_CASE("proximal term requires global params and pulls toward the anchor") {
    Tape t;
    auto rng = raf::make_rng(10);
    raf::ModelHyper h;
    h.blocks = 1;
    raf::ModelParams global = raf::ModelParams::init(h, 4);
    raf::ModelParams local = global;
    local.tensors[0].second[0] += 2.0;

    TapedParams params;
    for (const auto& [name, tensor] : local.tensors) params.ids.push_back(t.param(tensor));
    NodeId zero = t.constant(Tensor::scalar(0.0));

    CHECK_THROWS_AS(raf::total_loss(t, zero, zero, params, LossCoeffs{0, 0, 0.5}, nullptr),
                    std::invalid_argument);

    auto nodes = raf::total_loss(t, zero, zero, params, LossCoeffs{0.0, 0.0, 0.5}, &global);
    // (mu/2)*||w - w_global||^2 = 0.25 * 4 = 1
    CHECK(t.value(nodes.total)[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(nodes.prox >= 0);
    CHECK(t.value(nodes.prox)[0] == Catch::Approx(2.0).margin(1e-12));

    // all loss values non-negative
    CHECK(t.value(nodes.total)[0] >= 0.0);
}

TEST_CASE("loss coefficients validate") {
    LossCoeffs bad{-1.0, 0.0, 0.0};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    LossCoeffs nan_c{std::nan(""), 0.0, 0.0};
    CHECK_THROWS_AS(nan_c.validate(), std::invalid_argument);
}
