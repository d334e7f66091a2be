#include <aomisreg/optics.hpp>
#include <aomisreg/turbulence.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace aomisreg;

namespace {

const DmModel& dm41() {
    static const DmModel dm = DmModel::make(41, 0.2);
    return dm;
}

const KlBasis& kl41() {
    static const KlBasis kl = build_kl_basis(dm41());
    return kl;
}

double rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(1e-300, b.cwiseAbs().maxCoeff());
}

}  // namespace

TEST(InfluenceFunction, MedianProfile) {
    // 9 exp(-0.87) at one pitch
    EXPECT_NEAR(influence_function(1.0, 9.0, 0.87, 1.31), 3.7706, 1e-4);
    EXPECT_DOUBLE_EQ(influence_function(0.0, 9.0, 0.87, 1.31), 9.0);
    const DmModel& dm = dm41();
    const int a = 100;
    EXPECT_DOUBLE_EQ(dm.surface_um(a, dm.positions[a]), 9.0);
    EXPECT_NEAR(dm.surface_um(a, dm.positions[a] + Vec2(0, 1)), 9.0 * std::exp(-0.87), 1e-12);
    EXPECT_NEAR(dm.surface_um(a, dm.positions[a] + Vec2(1.5, 2.0)),
                influence_function(2.5, 9.0, 0.87, 1.31), 1e-12);
    EXPECT_EQ(dm.surface_um(a, dm.positions[a] + Vec2(12.5, 0)), 0.0);
}

TEST(Dm, FriedGeometry) {
    const DmModel& dm = dm41();
    EXPECT_EQ(dm.n_act(), 1353);
    // nodes sit on subaperture corners: integers in a frame where the 40
    // subaperture centres are half-integers
    for (const auto& p : dm.nominal) {
        EXPECT_EQ(p.x(), std::round(p.x()));
        EXPECT_EQ(p.y(), std::round(p.y()));
        EXPECT_LE(p.norm(), 20.75);
    }
    EXPECT_THROW(DmModel::make(41, 0.2, {9.0, -1.0, 1.31}), ConfigError);
}

TEST(Dm, IdentityRegistrationIsBitExact) {
    const DmModel moved = dm41().with_misreg({});
    for (int a = 0; a < moved.n_act(); ++a) {
        ASSERT_EQ(moved.positions[a].x(), dm41().nominal[a].x());
        ASSERT_EQ(moved.positions[a].y(), dm41().nominal[a].y());
    }
    MisRegistration bad;
    bad.mag_x = 0;
    EXPECT_THROW(dm41().with_misreg(bad), ConfigError);
}

TEST(Dm, MagnificationStretchesProfile) {
    MisRegistration m;
    m.mag_x = 1.1;
    const DmModel d = DmModel::make(9, 0.2).with_misreg(m);
    const int a = 0;
    EXPECT_NEAR(d.surface_um(a, d.positions[a] + Vec2(1.1, 0)), 9.0 * std::exp(-0.87), 1e-12);
}

TEST(Dm, ActuatorParameterFile) {
    DmModel dm = DmModel::make(5, 0.2);
    const auto path = std::filesystem::temp_directory_path() / "aomisreg_act.txt";
    {
        std::ofstream f(path);
        f << "# amp alpha beta\n";
        for (int a = 0; a < dm.n_act(); ++a) f << 8.0 + 0.01 * a << " 0.9 1.3\n";
    }
    dm.load_actuator_params(path.string());
    EXPECT_DOUBLE_EQ(dm.amp[3], 8.03);
    EXPECT_DOUBLE_EQ(dm.alpha[0], 0.9);
    {
        std::ofstream f(path);
        f << "8 0.9 1.3\n";
    }
    EXPECT_THROW(dm.load_actuator_params(path.string()), ConfigError);
    std::filesystem::remove(path);
}

TEST(Sh, TiltPlaneIsExactForBothModels) {
    const SubapertureGrid g = SubapertureGrid::make(16, 0.2, 0.14);
    const double ax = 3e-6, ay = -1.7e-6;  // rad
    auto plane = [&](const Vec2& x) { return (ax * x.x() + ay * x.y()) * g.pitch_m; };
    for (ShSampling s : {ShSampling{SlopeModel::EdgeDifference, 8}, ShSampling{SlopeModel::PixelFD, 32}}) {
        const SlopeField f = sh_slopes_analytic(plane, g, s);
        for (int i = 0; i < g.mask_wfs.size(); ++i)
            if (g.mask_wfs.data()[i]) {
                ASSERT_NEAR(f.x.data()[i], ax, 1e-12 * std::abs(ax));
                ASSERT_NEAR(f.y.data()[i], ay, 1e-12 * std::abs(ax));
            }
    }
    // pixel model on a sampled plane
    const int n = 8, N = 16 * n;
    Grid opd(N, N);
    for (int y = 0; y < N; ++y)
        for (int x = 0; x < N; ++x) opd(y, x) = (ax * x + ay * y) * g.pitch_m / n;
    const SlopeField p = sh_slopes_opd(opd, g);
    for (int i = 0; i < g.mask_wfs.size(); ++i)
        if (g.mask_wfs.data()[i]) {
            ASSERT_NEAR(p.x.data()[i], ax, 1e-12);
            ASSERT_NEAR(p.y.data()[i], ay, 1e-12);
        }
}

TEST(Sh, SinusoidMatchesAveragedGradient) {
    // period of four subapertures; the mean gradient over a cell is the edge
    // difference divided by the cell width
    const SubapertureGrid g = SubapertureGrid::make(16, 0.2, 0.0);
    const double A = 1e-7, P = 4.0;
    auto opd = [&](const Vec2& x) { return A * std::sin(2 * pi * x.x() / P); };
    const SlopeField f = sh_slopes_analytic(opd, g, {SlopeModel::EdgeDifference, 8});
    for (int iy = 0; iy < 16; ++iy)
        for (int ix = 0; ix < 16; ++ix) {
            if (!g.mask_wfs(iy, ix)) continue;
            const double xc = g.centre(iy, ix).x();
            const double expect = 2 * A * std::cos(2 * pi * xc / P) * std::sin(pi / P) / g.pitch_m;
            ASSERT_NEAR(f.x(iy, ix), expect, 1e-12 * A / g.pitch_m);
            ASSERT_NEAR(f.y(iy, ix), 0.0, 1e-15);
        }
}

TEST(Sh, Linearity) {
    const SubapertureGrid g = SubapertureGrid::make(10, 0.2, 0.14);
    RngStream rng(2, 2);
    Grid p1(80, 80), p2(80, 80);
    for (int i = 0; i < p1.size(); ++i) p1.data()[i] = rng.normal(), p2.data()[i] = rng.normal();
    const double a = 0.37, b = -2.1;
    const SlopeField s1 = sh_slopes(p1, g, 750e-9), s2 = sh_slopes(p2, g, 750e-9);
    const SlopeField s = sh_slopes(a * p1 + b * p2, g, 750e-9);
    const double scale = std::max(s1.x.abs().maxCoeff(), s2.x.abs().maxCoeff());
    EXPECT_LE((s.x - (a * s1.x + b * s2.x)).abs().maxCoeff(), 1e-12 * scale);
    EXPECT_LE((s.y - (a * s1.y + b * s2.y)).abs().maxCoeff(), 1e-12 * scale);
    EXPECT_THROW(sh_slopes(Grid::Zero(81, 81), g, 750e-9), ConfigError);
}

TEST(Noise, PhotonSigma) {
    const double r0 = scale_r0(0.12, 500e-9, 750e-9);
    EXPECT_NEAR(photon_noise_sigma(10, r0, 750e-9) / mas, 88.6, 0.1);
    EXPECT_NEAR(photon_noise_sigma(1000, r0, 750e-9) / mas, 8.86, 0.01);
    EXPECT_NEAR(photon_noise_sigma(100, r0, 750e-9) / photon_noise_sigma(1, r0, 750e-9), 0.1, 1e-15);
    EXPECT_THROW(photon_noise_sigma(0, r0, 750e-9), ConfigError);
    // 0.25 px at 800 mas/px
    EXPECT_NEAR(pixel_noise_sigma(0.25) / mas, 200.0, 1e-9);
}

TEST(Noise, OnlyModelledSlopes) {
    const SubapertureGrid g = SubapertureGrid::make(16, 0.2, 0.14);
    InteractionMatrix im = expand_compact(Eigen::MatrixXd::Zero(2 * g.n_wfs(), 40), g);
    RngStream rng(4, 4);
    add_slope_noise(im, 2.0, rng);
    double q = 0;
    int n = 0;
    for (int j = 0; j < im.n_items(); ++j)
        for (int i = 0; i < 2 * 256; ++i) {
            const double v = im.data(i, j);
            if (!g.mask_wfs.data()[i % 256]) {
                ASSERT_EQ(v, 0.0);
            } else {
                q += v * v;
                ++n;
            }
        }
    EXPECT_NEAR(std::sqrt(q / n), 2.0, 0.05);
}

TEST(Kl, Orthonormal) {
    const KlBasis& kl = kl41();
    ASSERT_EQ(kl.modes.rows(), 1353);
    ASSERT_EQ(kl.modes.cols(), 1353);
    const Eigen::MatrixXd G = kl.modes.transpose() * kl.modes;
    EXPECT_LE((G - Eigen::MatrixXd::Identity(1353, 1353)).cwiseAbs().maxCoeff(), 1e-8);
    // piston first, variance decreasing afterwards
    EXPECT_NEAR(kl.modes.col(0).maxCoeff(), kl.modes.col(0).minCoeff(), 1e-15);
    for (int i = 2; i < 1353; ++i) ASSERT_LE(kl.eigenvalues(i), kl.eigenvalues(i - 1));
}

TEST(Kl, TipTiltComeFirst) {
    const KlBasis& kl = kl41();
    const DmModel& dm = dm41();
    const int n = dm.n_act();
    Eigen::VectorXd tx(n), ty(n);
    for (int a = 0; a < n; ++a) tx(a) = dm.nominal[a].x(), ty(a) = dm.nominal[a].y();
    for (Eigen::VectorXd* t : {&tx, &ty}) {
        t->array() -= t->mean();
        t->normalize();
        const Eigen::MatrixXd span = kl.modes.middleCols(1, 2);
        EXPECT_GT((span.transpose() * *t).norm(), 0.95);
    }
}

TEST(Kl, DiagonalisesCovariance) {
    const DmModel dm = DmModel::make(21, 0.2);
    const KlBasis kl = build_kl_basis(dm, 3.0);
    const int n = dm.n_act();
    // double-centred -D/2 written out directly
    Eigen::MatrixXd B(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            B(i, j) = -0.5 * 6.88 * std::pow((dm.nominal[i] - dm.nominal[j]).norm() / 3.0, 5.0 / 3.0);
    const Eigen::MatrixXd J = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / n);
    const Eigen::MatrixXd C = J * B * J;
    const Eigen::MatrixXd V = kl.modes.rightCols(n - 1);
    Eigen::MatrixXd L = V.transpose() * C * V;
    const double top = L.diagonal().cwiseAbs().maxCoeff();
    L.diagonal().setZero();
    EXPECT_LE(L.cwiseAbs().maxCoeff(), 1e-6 * top);
    EXPECT_NEAR(top, kl.eigenvalues(1), 1e-9 * top);
}

TEST(Im, ModalProjectionMatchesDirectSynthesis) {
    const SubapertureGrid g = SubapertureGrid::make(10, 0.2, 0.14);
    const DmModel dm = DmModel::make(11, 0.2);
    const KlBasis kl = build_kl_basis(dm);
    const MisRegistration m{0.37, -0.21, 3.0, 1.01, 0.99};
    const double poke = 4.0;
    const ModalIM modal = project_zonal_to_modal(synth_zonal_im(dm, g, m, poke), kl, {2, 5, 9});
    const DmModel moved = dm.with_misreg(m);
    for (int i = 0; i < 3; ++i) {
        const int mode = modal.items[i];
        // surface of the whole mode command evaluated point by point
        auto opd = [&](const Vec2& x) {
            double s = 0;
            for (int a = 0; a < moved.n_act(); ++a)
                s += kl.modes(a, mode - 1) * poke / moved.amp[a] * moved.surface_um(a, x);
            return 1e-6 * s;
        };
        const SlopeField f = sh_slopes_analytic(opd, g);
        for (int axis = 0; axis < 2; ++axis) {
            const Grid p = modal.plane(i, axis), d = axis ? f.y : f.x;
            EXPECT_LE((p - d).abs().maxCoeff(), 1e-10 * d.abs().maxCoeff()) << "mode " << mode;
        }
    }
}

TEST(Im, LinearityAndZero) {
    const SubapertureGrid g = SubapertureGrid::make(10, 0.2, 0.14);
    const DmModel dm = DmModel::make(11, 0.2);
    const KlBasis kl = build_kl_basis(dm);
    const ZonalIM z = synth_zonal_im(dm, g, MisRegistration::shift(0.2, 0.1), 1.0);
    ZonalIM zero = z;
    zero.data.setZero();
    EXPECT_EQ(project_zonal_to_modal(zero, kl, {2, 3, 4}).data.cwiseAbs().maxCoeff(), 0.0);
    // mode i + mode j
    KlBasis mix = kl;
    mix.modes.col(0) = kl.modes.col(3) + kl.modes.col(6);
    const ModalIM both = project_zonal_to_modal(z, mix, {1});
    const ModalIM parts = project_zonal_to_modal(z, kl, {4, 7});
    EXPECT_LE(rel(both.data.col(0), parts.data.col(0) + parts.data.col(1)), 1e-12);
    // poke amplitude scales the response
    const ZonalIM z2 = synth_zonal_im(dm, g, MisRegistration::shift(0.2, 0.1), 2.0);
    EXPECT_LE(rel(z2.data, 2.0 * z.data), 1e-14);
    EXPECT_THROW(project_zonal_to_modal(z, kl, {0}), ConfigError);
    EXPECT_THROW(project_zonal_to_modal(z, kl, {int(kl.modes.cols()) + 1}), ConfigError);
    EXPECT_THROW(project_zonal_to_modal(z, kl, {}), ConfigError);
}

TEST(Im, MirrorSymmetry) {
    // flipping x maps the DM onto itself and negates x slopes
    const SubapertureGrid g = SubapertureGrid::make(12, 0.2, 0.14);
    const DmModel dm = DmModel::make(13, 0.2);
    const ZonalIM a = synth_zonal_im(dm, g, MisRegistration::shift(0.3, 0.2), 1.0);
    const ZonalIM b = synth_zonal_im(dm, g, MisRegistration::shift(-0.3, 0.2), 1.0);
    std::vector<int> mirror(dm.n_act(), -1);
    for (int i = 0; i < dm.n_act(); ++i)
        for (int j = 0; j < dm.n_act(); ++j)
            if (dm.nominal[j].x() == -dm.nominal[i].x() && dm.nominal[j].y() == dm.nominal[i].y()) mirror[i] = j;
    const double scale = a.data.cwiseAbs().maxCoeff();
    for (int i = 0; i < dm.n_act(); ++i) {
        ASSERT_GE(mirror[i], 0);
        const Grid ax = a.plane(i, 0), ay = a.plane(i, 1);
        const Grid bx = b.plane(mirror[i], 0), by = b.plane(mirror[i], 1);
        EXPECT_LE((ax + bx.rowwise().reverse()).abs().maxCoeff(), 1e-12 * scale);
        EXPECT_LE((ay - by.rowwise().reverse()).abs().maxCoeff(), 1e-12 * scale);
    }
}

TEST(Im, CompactRoundTrip) {
    const SubapertureGrid g = SubapertureGrid::make(10, 0.2, 0.14);
    const DmModel dm = DmModel::make(11, 0.2);
    const Eigen::MatrixXd D = zonal_response(dm, g);
    const InteractionMatrix im = expand_compact(D, g);
    EXPECT_EQ(im.compact(), D);
    EXPECT_EQ(im.d_sub, 10);
}
