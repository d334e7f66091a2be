#include <aomisreg/fit.hpp>
#include <aomisreg/loop.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace aomisreg;

namespace {

AoSystem& small_system() {
    static AoSystem sys(12, 0.14, 0.2, 8);
    return sys;
}

// Straightforward actuator-space loop, one frame at a time.
Eigen::MatrixXd naive_loop(const LoopConfig& cfg, const CommandMatrix& cm, const Eigen::MatrixXd& D,
                           const Eigen::VectorXd& static_slopes, double sigma, RngStream rng, int n_frames,
                           const Eigen::MatrixXd* D_after = nullptr, int switch_at = -1) {
    const int n_act = static_cast<int>(cm.Kc.rows()), d = cfg.delay_frames;
    std::vector<Eigen::VectorXd> c(d, Eigen::VectorXd::Zero(n_act));  // c[0] oldest
    Eigen::MatrixXd out(n_act, n_frames);
    const Eigen::MatrixXd M = cm.Kc * cm.R;
    for (int k = 0; k < n_frames; ++k) {
        const Eigen::MatrixXd& P = (D_after && k >= switch_at) ? *D_after : D;
        Eigen::VectorXd m = static_slopes;
        for (int i = 0; i < m.size(); ++i) m(i) += sigma > 0 ? sigma * rng.normal() : 0.0;
        m -= P * c[0];
        Eigen::VectorXd next = (1 - cfg.g_leak) * c[d - 1] + cfg.g_int * (M * m);
        next = next.cwiseMax(-cfg.clip).cwiseMin(cfg.clip);
        c.erase(c.begin());
        c.push_back(next);
        out.col(k) = next;
    }
    return out;
}

SlopeSource constant(const Eigen::VectorXd& s) {
    return [s](long, Eigen::Ref<Eigen::VectorXd> out) { out = s; };
}

double rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(1e-300, b.cwiseAbs().maxCoeff());
}

}  // namespace

TEST(Pinv, MatchesNormalEquations) {
    RngStream rng(1, 1);
    Eigen::MatrixXd A(30, 6);
    for (int i = 0; i < A.size(); ++i) A.data()[i] = rng.normal();
    int rank = 0;
    const Eigen::MatrixXd P = pinv(A, 1e-7, &rank);
    EXPECT_EQ(rank, 6);
    const Eigen::MatrixXd ref = (A.transpose() * A).inverse() * A.transpose();
    EXPECT_LE(rel(P, ref), 1e-10);
    // duplicated column: rank drops, Moore-Penrose conditions still hold
    A.col(5) = A.col(4);
    const Eigen::MatrixXd Q = pinv(A, 1e-7, &rank);
    EXPECT_EQ(rank, 5);
    EXPECT_LE(rel(A * Q * A, A), 1e-10);
    EXPECT_LE(rel(Q * A * Q, Q), 1e-10);
}

TEST(CommandMatrixTest, LeftInverseOnControlledModes) {
    AoSystem& sys = small_system();
    const int n_mod = 60;
    const CommandMatrix& cm = sys.command_matrix(n_mod);
    const Eigen::MatrixXd ref = zonal_response(sys.dm, sys.grid, sys.reference_sampling);
    EXPECT_EQ(cm.rank, n_mod);
    const Eigen::MatrixXd Mcmd = cm.full();
    for (int m = 1; m <= n_mod; ++m) {
        const Eigen::VectorXd k = sys.kl().modes.col(m);
        EXPECT_LE((Mcmd * (ref * k) - k).norm(), 1e-6) << "mode " << m + 1;
    }
    // first uncontrolled mode: the correction has no component along it
    const Eigen::VectorXd ku = sys.kl().modes.col(n_mod + 1);
    EXPECT_LE(std::abs(ku.dot(Mcmd * (ref * ku))), 1e-10);
    EXPECT_THROW(sys.command_matrix(sys.dm.n_act()), ConfigError);
}

TEST(CommandMatrixTest, ControlRadius) {
    EXPECT_NEAR(control_radius(500, 1353, 41), 14.06, 0.005);
    EXPECT_NEAR(control_radius(1353, 1353, 41), 41 / std::sqrt(pi), 1e-12);
}

TEST(ClosedLoopTest, ZeroInputGivesZeroTelemetry) {
    AoSystem& sys = small_system();
    LoopConfig cfg;
    cfg.n_mod = 40;
    const TelemetryCube t = run_closed_loop(cfg, sys, {}, nullptr, 0.0, 64, RngStream(1, 1), 10);
    EXPECT_EQ(t.n_frames(), 64);
    EXPECT_EQ(t.d_act, 13);
    EXPECT_EQ(t.frames.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_THROW(run_closed_loop(cfg, sys, {}, nullptr, 0.0, 1, RngStream(1, 1)), ConfigError);
}

TEST(ClosedLoopTest, StaticAberrationDecaysGeometrically) {
    AoSystem& sys = small_system();
    const CommandMatrix& cm = sys.command_matrix(40);
    const Eigen::MatrixXd ref = zonal_response(sys.dm, sys.grid, sys.reference_sampling);
    Eigen::VectorXd a0 = Eigen::VectorXd::Zero(40);
    a0(0) = 0.02, a0(5) = -0.01, a0(17) = 0.015;
    const Eigen::VectorXd s = ref * cm.Kc * a0;
    for (int delay : {1, 2}) {
        LoopConfig cfg;
        cfg.n_mod = 40;
        cfg.g_int = 0.4;
        cfg.delay_frames = delay;
        ClosedLoop loop(cfg, cm, ref, 0.0, constant(s), RngStream());
        const Eigen::MatrixXd c = loop.run(30);
        // scalar recurrence on the modal coefficient
        std::vector<double> x(32, 0.0);
        for (int k = 0; k < 30; ++k) {
            const double seen = k - delay + 1 >= 0 ? x[k - delay + 1] : 0.0;
            x[k + 1] = x[k] + cfg.g_int * (1.0 - seen);
        }
        for (int k = 0; k < 30; ++k) {
            const Eigen::VectorXd a = cm.Kc.transpose() * c.col(k);
            EXPECT_LE((a - x[k + 1] * a0).norm(), 1e-10) << "delay " << delay << " frame " << k;
        }
        if (delay == 1) {
            for (int k = 0; k < 30; ++k) EXPECT_NEAR(1 - x[k + 1], std::pow(1 - cfg.g_int, k + 1), 1e-12);
        }
    }
}

TEST(ClosedLoopTest, MatchesNaiveSimulation) {
    AoSystem& sys = small_system();
    LoopConfig cfg;
    cfg.n_mod = 50;
    cfg.g_leak = 0.01;
    const CommandMatrix& cm = sys.command_matrix(cfg.n_mod);
    const Eigen::MatrixXd D = sys.plant(MisRegistration::shift(0.1, -0.05));
    RngStream noise(9, 9);
    Eigen::VectorXd s(D.rows());
    for (int i = 0; i < s.size(); ++i) s(i) = 2e-6 * noise.normal();
    const double sigma = 3e-7;
    // modal path throughout
    {
        ClosedLoop loop(cfg, cm, D, sigma, constant(s), RngStream(3, 4));
        const Eigen::MatrixXd got = loop.run(700);
        const Eigen::MatrixXd want = naive_loop(cfg, cm, D, s, sigma, RngStream(3, 4), 700);
        EXPECT_FALSE(loop.saturated());
        EXPECT_LE(rel(got, want), 1e-9);
    }
    // a tight clip forces the actuator path part way through a chunk
    {
        LoopConfig tight = cfg;
        tight.clip = 0.6 * naive_loop(cfg, cm, D, s, sigma, RngStream(3, 4), 700).cwiseAbs().maxCoeff();
        ClosedLoop loop(tight, cm, D, sigma, constant(s), RngStream(3, 4));
        const Eigen::MatrixXd got = loop.run(700);
        const Eigen::MatrixXd want = naive_loop(tight, cm, D, s, sigma, RngStream(3, 4), 700);
        EXPECT_TRUE(loop.saturated());
        EXPECT_LE(got.cwiseAbs().maxCoeff(), tight.clip);
        EXPECT_LE(rel(got, want), 1e-9);
    }
}

TEST(ClosedLoopTest, SetPlantKeepsHistory) {
    AoSystem& sys = small_system();
    LoopConfig cfg;
    cfg.n_mod = 50;
    const CommandMatrix& cm = sys.command_matrix(cfg.n_mod);
    const Eigen::MatrixXd D0 = sys.plant(MisRegistration::shift(0.2, 0.0)), D1 = sys.plant({});
    const Eigen::VectorXd s = Eigen::VectorXd::Zero(D0.rows());
    ClosedLoop loop(cfg, cm, D0, 4e-7, constant(s), RngStream(5, 5));
    Eigen::MatrixXd got(cm.Kc.rows(), 600);
    got.leftCols(250) = loop.run(250);
    loop.set_plant(D1);
    got.rightCols(350) = loop.run(350);
    const Eigen::MatrixXd want = naive_loop(cfg, cm, D0, s, 4e-7, RngStream(5, 5), 600, &D1, 250);
    EXPECT_LE(rel(got, want), 1e-9);
    EXPECT_THROW(loop.set_plant(Eigen::MatrixXd::Zero(3, 3)), ConfigError);
}

TEST(ClosedLoopTest, ClipsLargeShift) {
    // far beyond the stable range the commands hit the clip
    AoSystem& sys = small_system();
    LoopConfig cfg;
    cfg.n_mod = 100;
    const TelemetryCube t =
        run_closed_loop(cfg, sys, MisRegistration::shift(0.9, 0.0), nullptr, 100, 500, RngStream(2, 2), 500);
    EXPECT_NEAR(t.frames.cwiseAbs().maxCoeff(), cfg.clip, 1e-12);
}

TEST(ClosedLoopTest, SteadyStateReproducesControlledProjection) {
    AoSystem& sys = small_system();
    LoopConfig cfg;
    cfg.n_mod = 40;
    const CommandMatrix& cm = sys.command_matrix(cfg.n_mod);
    const Eigen::MatrixXd D = sys.plant({});
    // static turbulence-like slopes, small enough not to clip
    LayerSet ls = single_layer(0.5, 0.0, 0.0);
    ls.realize(256, 0.2 / 8, RngStream(8, 8));
    Eigen::VectorXd s(D.rows());
    frozen_flow_source(std::make_shared<LayerSet>(ls), sys.grid, 8, 1e-3)(0, s);
    ClosedLoop loop(cfg, cm, D, 0.0, constant(s), RngStream());
    const Eigen::MatrixXd c = loop.run(200);
    ASSERT_FALSE(loop.saturated());
    const Eigen::VectorXd a = cm.Kc.transpose() * c.col(199), target = cm.R * s;
    EXPECT_LE((a - target).norm(), 0.01 * target.norm());
}

TEST(ClosedLoopTest, Deterministic) {
    AoSystem& sys = small_system();
    LoopConfig cfg;
    cfg.n_mod = 40;
    auto layers = std::make_shared<LayerSet>(single_layer(0.12, 10.0, 30.0));
    layers->realize(12 * 12 * 8, 0.2 / 8, RngStream(1, 7));
    const MisRegistration m = MisRegistration::shift(0.05, 0.02);
    const TelemetryCube a = run_closed_loop(cfg, sys, m, layers, 100, 80, RngStream(4, 4), 5);
    const TelemetryCube b = run_closed_loop(cfg, sys, m, layers, 100, 80, RngStream(4, 4), 5);
    EXPECT_TRUE(a.frames == b.frames);
    // inactive corners of the actuator grid stay zero
    for (int node : {0, 12, 13 * 12, 13 * 13 - 1}) EXPECT_EQ(a.frames.row(node).cwiseAbs().maxCoeff(), 0.0);
    ASSERT_TRUE(a.true_misreg.has_value());
    EXPECT_EQ(a.true_misreg->shift_x, 0.05);
}

TEST(PushPull, CleanEqualsSynthetic) {
    AoSystem& sys = small_system();
    const auto modes = mode_range(4, 20);
    const MisRegistration m{0.4, -0.3, 2.0, 1.0, 1.0};
    RngStream rng(1, 1);
    const ModalIM pp = measure_modal_im_pushpull(sys.dm, sys.grid, m, sys.kl(), modes, 4.0, nullptr, 8, 0.0, rng);
    const ModalIM syn = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, m, 4.0), sys.kl(), modes);
    EXPECT_LE(rel(pp.data, syn.data), 1e-10);
    EXPECT_EQ(pp.items, modes);
    const ModalIM pp2 = measure_modal_im_pushpull(sys.dm, sys.grid, m, sys.kl(), modes, 8.0, nullptr, 8, 0.0, rng);
    EXPECT_LE(rel(pp2.data / 8.0, pp.data / 4.0), 1e-12);
}

TEST(PushPull, TurbulenceCancelsToFirstOrder) {
    AoSystem& sys = small_system();
    const std::vector<int> modes = {5};
    const ModalIM clean = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, {}, 4.0), sys.kl(), modes);
    std::vector<double> err;
    double turb_rms = 0;
    for (double v0 : {5.0, 10.0}) {
        auto layers = std::make_shared<LayerSet>(single_layer(0.12, v0, 0.0));
        layers->realize(12 * 12 * 8, 0.2 / 8, RngStream(3, 3));
        RngStream rng(1, 1);
        const ModalIM pp = measure_modal_im_pushpull(sys.dm, sys.grid, {}, sys.kl(), modes, 4.0, layers, 8, 0.0, rng);
        err.push_back((pp.data - clean.data).norm());
        Eigen::VectorXd s(2 * sys.grid.n_wfs());
        frozen_flow_source(layers, sys.grid, 8, 1e-3)(0, s);
        turb_rms = s.norm();
    }
    // one frame apart, both offsets inside the same screen pixel: the
    // leftover is exactly linear in the displacement
    EXPECT_NEAR(err[1] / err[0], 2.0, 1e-6);
    EXPECT_LT(err[1], 0.5 * turb_rms);
}

TEST(Corrective, Step) {
    MisRegistration m{0.3, -0.2, 1.5, 1.01, 0.99};
    const MisRegistration same = corrective_loop_step(m, Vec2::Zero(), 0.5);
    EXPECT_EQ(same.shift_x, 0.3);
    EXPECT_EQ(same.shift_y, -0.2);
    const MisRegistration done = corrective_loop_step(m, Vec2(0.3, -0.2), 1.0);
    EXPECT_NEAR(done.shift_x, 0.0, 1e-15);
    EXPECT_NEAR(done.shift_y, 0.0, 1e-15);
    EXPECT_EQ(done.clocking_deg, 1.5);
    EXPECT_EQ(done.mag_x, 1.01);
    // relative estimator of sensitivity 0.7 with gain 0.5
    MisRegistration r = MisRegistration::shift(0.5, 0.0);
    for (int i = 0; i < 5; ++i) {
        const double before = r.shift_x;
        r = corrective_loop_step(r, Vec2(0.7 * r.shift_x, 0), 0.5);
        EXPECT_NEAR(r.shift_x / before, 1 - 0.35, 1e-12);
    }
}

TEST(Fit, RecoversExponential) {
    std::vector<double> s;
    for (int i = 0; i < 40; ++i) s.push_back(0.2 * (1 - std::exp(-0.3 * i)));
    const ExpFit f = fit_convergence_exponential(s);
    EXPECT_TRUE(f.converged);
    EXPECT_NEAR(f.asymptote, 0.2, 1e-4);
    EXPECT_NEAR(f.rate, 0.3, 1e-4);
    EXPECT_NEAR(f.offset, 0.0, 1e-4);
}

TEST(Fit, ConstantSeries) {
    const ExpFit f = fit_convergence_exponential(std::vector<double>(20, 0.07));
    EXPECT_NEAR(f.asymptote, 0.07, 1e-4);
    EXPECT_GT(f.rate, 1.0);
    EXPECT_THROW(fit_convergence_exponential(std::vector<double>(7, 1.0)), ConfigError);
}

TEST(Fit, PureNoise) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        RngStream rng(seed, 0);
        std::vector<double> s;
        for (int i = 0; i < 40; ++i) s.push_back(rng.normal());
        EXPECT_LT(std::abs(fit_convergence_exponential(s).asymptote), 1.0) << seed;
    }
}

TEST(Fit, SimplexRosenbrock) {
    auto f = [](const Eigen::VectorXd& x) {
        return 100 * std::pow(x(1) - x(0) * x(0), 2) + std::pow(1 - x(0), 2);
    };
    const SimplexResult r = nelder_mead(f, Eigen::Vector2d(-1.2, 1.0), Eigen::Vector2d(0.1, 0.1), 5000, 1e-16);
    EXPECT_NEAR(r.x(0), 1.0, 1e-4);
    EXPECT_NEAR(r.x(1), 1.0, 1e-4);
}
