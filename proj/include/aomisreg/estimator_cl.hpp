#pragma once

#include "core.hpp"
#include "fft.hpp"
#include "loop.hpp"

#include <array>
#include <cmath>
#include <complex>
#include <optional>
#include <vector>

namespace aomisreg {

// ---------------------------------------------------------------- transfer functions

struct TransferValues {
    cplx S, C, A, mu;
};

inline TransferValues transfer_functions(const LoopConfig& c, double f) {
    if (!(f > 0)) throw ConfigError("transfer functions need f > 0");
    const cplx i(0, 1);
    auto hold = [&](double tau) { return (1.0 - std::exp(-2 * pi * i * tau * f)) / (2 * pi * i * tau * f); };
    TransferValues t;
    t.S = hold(c.tau_wfs);
    t.A = hold(c.tau_dm);
    t.C = c.g_int * std::exp(-2 * pi * i * c.tau_lat * f) /
          (1.0 - (1.0 - c.g_leak) * std::exp(-2 * pi * i * c.tau_rtc * f));
    t.mu = t.A * t.C * t.S;
    return t;
}

// Open-loop gain of the sampled loop simulated by ClosedLoop:
// g z^-d / (1 - (1 - g_leak) z^-1), z = exp(2 i pi f tau_rtc).
inline cplx discrete_mu(const LoopConfig& c, double f) {
    const cplx zi = std::exp(cplx(0, -2 * pi * f * c.tau_rtc));
    return c.g_int * std::pow(zi, c.delay_frames) / (1.0 - (1.0 - c.g_leak) * zi);
}

inline double eta0_from_mu(cplx mu) {
    const cplx m = std::conj(mu);
    return 2.0 * std::imag(m / (1.0 + m));
}

enum class Eta0Model { Continuous, Discrete };

struct Eta0Curve {
    Eigen::VectorXd eta0;
    std::vector<std::uint8_t> pole;  // 1 where 1 + mu vanishes; excluded from fits
};

inline Eta0Curve eta0_curve(const LoopConfig& c, const Eigen::VectorXd& f,
                            Eta0Model model = Eta0Model::Continuous) {
    Eta0Curve out{Eigen::VectorXd::Zero(f.size()), std::vector<std::uint8_t>(f.size(), 0)};
    for (int j = 0; j < f.size(); ++j) {
        const cplx mu = model == Eta0Model::Continuous ? transfer_functions(c, f(j)).mu
                                                       : discrete_mu(c, f(j));
        if (std::abs(1.0 + mu) < 1e-9) {
            out.pole[j] = 1;
            continue;
        }
        out.eta0(j) = eta0_from_mu(mu);
    }
    return out;
}

// ---------------------------------------------------------------- Fourier split

using KIndex = std::array<int, 2>;  // (kx, ky) in cycles per d_act grid

struct FourierTelemetry {
    int d_act = 0;
    int n_t = 0;
    double dt = 0;
    std::vector<KIndex> k;   // half-plane kx > 0, or kx = 0 and ky > 0
    Eigen::MatrixXcd c1, c2; // n_k x n_t, every temporal bin
    Eigen::VectorXd f;       // positive bins j = 1 .. (n_t - 1) / 2
    std::vector<cplx> spectrum;  // full 3D DFT [t][iy][ix], kept on request

    int n_pos() const { return static_cast<int>(f.size()); }

    cplx full(int kx, int ky, int j) const {
        const int d = d_act;
        return spectrum[(std::size_t(j) * d + (ky + d) % d) * d + (kx + d) % d];
    }
};

inline std::vector<KIndex> half_plane(int d) {
    const int h = (d - 1) / 2;
    std::vector<KIndex> k;
    for (int ky = -h; ky <= h; ++ky)
        for (int kx = 0; kx <= h; ++kx)
            if (kx > 0 || ky > 0) k.push_back({kx, ky});
    return k;
}

// 3D DFT (forward, exp(-2 i pi ...)) of the mean-removed cube, then
// c1 = (c(k) + c(-k)) / 2 and c2 = i (c(k) - c(-k)) / 2 on the half plane.
inline FourierTelemetry split_telemetry(const TelemetryCube& cube, bool keep_spectrum = false) {
    if (!cube.frames.allFinite()) throw NumericalError("non-finite telemetry");
    const int d = cube.d_act, n_t = cube.n_frames(), d2 = d * d;
    if (n_t < 2) throw ConfigError("need at least 2 frames");
    std::vector<cplx> s(std::size_t(n_t) * d2);
    for (int node = 0; node < d2; ++node) {
        const double mean = cube.frames.row(node).mean();
        for (int t = 0; t < n_t; ++t) s[std::size_t(t) * d2 + node] = cube.frames(node, t) - mean;
    }
    fft_nd(s.data(), {n_t, d, d}, Direction::Forward);
    FourierTelemetry ft;
    ft.d_act = d;
    ft.n_t = n_t;
    ft.dt = cube.dt;
    ft.k = half_plane(d);
    const int nk = static_cast<int>(ft.k.size());
    ft.c1.resize(nk, n_t);
    ft.c2.resize(nk, n_t);
    auto at = [&](int kx, int ky, int j) { return s[(std::size_t(j) * d + (ky + d) % d) * d + (kx + d) % d]; };
    const cplx i(0, 1);
    for (int q = 0; q < nk; ++q) {
        const auto [kx, ky] = ft.k[q];
        for (int j = 0; j < n_t; ++j) {
            const cplx p = at(kx, ky, j), m = at(-kx, -ky, j);
            ft.c1(q, j) = 0.5 * (p + m);
            ft.c2(q, j) = 0.5 * i * (p - m);
        }
    }
    const int n_pos = (n_t - 1) / 2;
    ft.f.resize(n_pos);
    for (int j = 1; j <= n_pos; ++j) ft.f(j - 1) = j / (n_t * cube.dt);
    if (keep_spectrum) ft.spectrum = std::move(s);
    return ft;
}

// ---------------------------------------------------------------- correlation

struct CorrelationSpectrum {
    int d_act = 0;
    std::vector<KIndex> k;
    Eigen::VectorXd f;
    Eigen::MatrixXd eta_cl;  // n_k x n_pos
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> valid;
};

inline double eta_of(cplx c1, cplx c2, bool* ok = nullptr) {
    const double a = std::abs(c1), b = std::abs(c2);
    if (a < 1e-300 || b < 1e-300) {
        if (ok) *ok = false;
        return 0.0;
    }
    if (ok) *ok = true;
    return std::imag(c1 * std::conj(c2)) / (a * b);
}

// eta at any temporal bin j in [0, n_t) of half-plane entry q
inline double eta_at(const FourierTelemetry& ft, int q, int j) { return eta_of(ft.c1(q, j), ft.c2(q, j)); }

inline CorrelationSpectrum empirical_correlation(const FourierTelemetry& ft) {
    CorrelationSpectrum cs;
    cs.d_act = ft.d_act;
    cs.k = ft.k;
    cs.f = ft.f;
    const int nk = static_cast<int>(ft.k.size()), nf = ft.n_pos();
    cs.eta_cl.resize(nk, nf);
    cs.valid.resize(nk, nf);
    for (int q = 0; q < nk; ++q)
        for (int j = 0; j < nf; ++j) {
            bool ok;
            cs.eta_cl(q, j) = eta_of(ft.c1(q, j + 1), ft.c2(q, j + 1), &ok);
            cs.valid(q, j) = ok;
        }
    return cs;
}

// Half-plane disk |k| <= d_act sqrt(n_mod / (pi n_act)) in cycles per pupil.
inline std::vector<std::uint8_t> control_space_mask(int n_mod, int n_act, int d_act,
                                                     const std::vector<KIndex>& k) {
    if (n_mod > n_act) throw ConfigError("n_mod exceeds n_act");
    const double kmax = control_radius(n_mod, n_act, d_act);
    std::vector<std::uint8_t> m(k.size());
    for (std::size_t q = 0; q < k.size(); ++q)
        m[q] = std::hypot(double(k[q][0]), double(k[q][1])) <= kmax + 1e-12;
    return m;
}

inline std::vector<std::uint8_t> control_space_mask(int n_mod, int n_act, int d_act) {
    return control_space_mask(n_mod, n_act, d_act, half_plane(d_act));
}

// With c1, c2 defined as above, a DM displaced by +delta relative to the
// sensor couples the two quadratures with theta = -2 pi k.delta, so the
// small-shift model is eta_cl = -2 pi eta0 k.delta.
inline constexpr double coupling_sign = -1.0;

// Least squares of eta_cl(k, f) against -2 pi eta0(f) k.delta over the
// controlled half plane and f > 0. Wave numbers are k / d_act cycles per
// pitch (the exact DFT frequency of the d_act-node grid), so delta is in
// pitch units. Optional per-frequency weights scale rows.
inline Vec2 estimate_shift_cl(const CorrelationSpectrum& cs, const Eta0Curve& eta0,
                              const std::vector<std::uint8_t>& k_ctrl,
                              const Eigen::VectorXd* weights = nullptr) {
    const int nf = static_cast<int>(cs.f.size());
    if (eta0.eta0.size() != nf) throw ConfigError("eta0 grid does not match telemetry");
    Eigen::Matrix2d HtH = Eigen::Matrix2d::Zero();
    Eigen::Vector2d Hte = Eigen::Vector2d::Zero();
    for (std::size_t q = 0; q < cs.k.size(); ++q) {
        if (!k_ctrl[q]) continue;
        const Eigen::Vector2d kv(double(cs.k[q][0]) / cs.d_act, double(cs.k[q][1]) / cs.d_act);
        for (int j = 0; j < nf; ++j) {
            if (!cs.valid(q, j) || eta0.pole[j]) continue;
            const double w = weights ? (*weights)(j) : 1.0;
            const Eigen::Vector2d h = w * coupling_sign * 2 * pi * eta0.eta0(j) * kv;
            HtH += h * h.transpose();
            Hte += h * (w * cs.eta_cl(q, j));
        }
    }
    const double tr = HtH.trace();
    if (!(tr > 0) || HtH.determinant() <= 1e-12 * tr * tr)
        throw NumericalError("closed-loop fit is rank deficient");
    return HtH.ldlt().solve(Hte);
}

// eta_t(f) = sum_k eta_cl (k.delta) / sum_k -2 pi (k.delta)^2; empty if delta = 0.
// Compares directly with eta0(f) when delta is the true shift.
inline std::optional<Eigen::VectorXd> fit_eta_t(const CorrelationSpectrum& cs, const Vec2& delta,
                                                const std::vector<std::uint8_t>& k_ctrl) {
    const int nf = static_cast<int>(cs.f.size());
    Eigen::VectorXd num = Eigen::VectorXd::Zero(nf);
    double den = 0;
    for (std::size_t q = 0; q < cs.k.size(); ++q) {
        if (!k_ctrl[q]) continue;
        const double kd = (cs.k[q][0] * delta.x() + cs.k[q][1] * delta.y()) / cs.d_act;
        for (int j = 0; j < nf; ++j)
            if (cs.valid(q, j)) num(j) += cs.eta_cl(q, j) * kd;
        den += coupling_sign * 2 * pi * kd * kd;
    }
    if (den == 0) return std::nullopt;
    return num / den;
}

// eta_2d(k) = sum_f eta_cl eta0 / sum_f eta0^2 for every half-plane k.
inline Eigen::VectorXd fit_eta_2d(const CorrelationSpectrum& cs, const Eta0Curve& eta0) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(cs.k.size());
    double den = 0;
    for (int j = 0; j < cs.f.size(); ++j)
        if (!eta0.pole[j]) den += eta0.eta0(j) * eta0.eta0(j);
    if (!(den > 0)) return out;
    for (std::size_t q = 0; q < cs.k.size(); ++q) {
        double num = 0;
        for (int j = 0; j < cs.f.size(); ++j)
            if (cs.valid(q, j) && !eta0.pole[j]) num += cs.eta_cl(q, j) * eta0.eta0(j);
        out(q) = num / den;
    }
    return out;
}

// ---------------------------------------------------------------- self-tests

// Two-mode coupling under a phase theta = 2 pi k.delta.
inline double coupled_correlation(cplx mu, double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    const cplx a = 1.0 + mu * c;
    return 2 * s * std::imag(a * std::conj(mu)) / (std::norm(a) + std::norm(mu * s));
}

struct IdentityResidual {
    double inverse = 0;     // M(theta) (M(-theta) / Delta) - I
    double product = 0;     // M(-theta) R(theta) against its closed form
    double covariance = 0;  // noise covariance against its closed forms
    double max() const { return std::max({inverse, product, covariance}); }
};

// Relative residuals of the 2x2 algebra behind the noise-propagation
// correlation for one (theta, f).
inline IdentityResidual matrix_identity_check(double theta, double f, const LoopConfig& cfg) {
    using M2 = Eigen::Matrix2cd;
    const cplx mu = transfer_functions(cfg, f).mu;
    const double c = std::cos(theta), s = std::sin(theta);
    const cplx delta = 1.0 + 2.0 * mu * c + mu * mu;
    if (std::abs(delta) <= 1e-12) throw NumericalError("singular coupling determinant");
    auto M = [&](double t) {
        M2 m;
        m << 1.0 + mu * std::cos(t), mu * std::sin(t), -mu * std::sin(t), 1.0 + mu * std::cos(t);
        return m;
    };
    M2 R;
    R << c, s, -s, c;
    M2 P;
    P << mu + c, s, -s, mu + c;
    auto rel = [](const M2& a, const M2& b) { return (a - b).norm() / std::max(1.0, b.norm()); };
    IdentityResidual r;
    r.inverse = rel(M(theta) * (M(-theta) / delta), M2::Identity());
    r.product = rel(M(-theta) * R, P);
    const M2 T = M2::Identity() - (mu / delta) * P;
    const M2 cov = T * T.adjoint();
    M2 expect;
    const double diag = std::norm((1.0 + mu * c) / delta) + std::norm(mu / delta * s);
    const cplx off = cplx(0, 2) * std::imag((1.0 + mu * c) / std::norm(delta) * std::conj(mu) * s);
    expect << diag, off, std::conj(off), diag;
    r.covariance = rel(cov, expect);
    return r;
}

}  // namespace aomisreg
