#pragma once

#include "core.hpp"
#include "fft.hpp"
#include "optics.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace aomisreg {

// alpha over integer lags -(d-1) .. d-1 in both axes; array index = lag + d - 1.
struct AlphaMap {
    int d = 0;
    Grid num, den, alpha;
    Mask valid;
    int m_up = 1;
    Grid up;        // upsampled alpha, index j <-> lag j / m_up - (d - 1)
    Grid up_den;    // upsampled denominator
    Mask up_valid;

    int n() const { return 2 * d - 1; }
    double up_lag(int j) const { return double(j) / m_up - (d - 1); }
};

namespace detail {
inline int fft_size_at_least(int n) {
    auto smooth = [](int m) {
        for (int p : {2, 3, 5, 7})
            while (m % p == 0) m /= p;
        return m == 1;
    };
    while (!smooth(n)) ++n;
    return n;
}
}  // namespace detail

// alpha(delta) = sum_m [w_valid IM~_m (*) w_wfs IM_m](delta) / sum_m [w_valid (*) w_wfs IM_m^2](delta)
// with (*) the linear cross-correlation sum_x a(x) b(x - delta); x and y slope
// planes of every mode enter both sums. Zero padding avoids wraparound.
inline AlphaMap masked_modal_correlation(const ModalIM& measured, const ModalIM& reference,
                                         const Mask& mask_valid, const Mask& mask_wfs) {
    const int d = reference.d_sub;
    if (measured.d_sub != d || measured.n_items() != reference.n_items())
        throw ConfigError("measured and reference IMs differ in shape");
    if (reference.n_items() == 0) throw ConfigError("empty mode list");
    if (mask_valid.rows() != d || mask_wfs.rows() != d) throw ConfigError("mask shape mismatch");
    if (mask_valid.cast<int>().sum() == 0 || mask_wfs.cast<int>().sum() == 0)
        throw ConfigError("all-invalid masks");
    const int P = detail::fft_size_at_least(2 * d - 1), d2 = d * d;
    Fft2Plan fwd(P, P, Direction::Forward), inv(P, P, Direction::Backward);
    CGrid num_f = CGrid::Zero(P, P);
    Grid sq = Grid::Zero(d, d);
    auto transform = [&](auto&& fill) {
        fwd.buf.setZero();
        fill(fwd.buf);
        fwd.run();
        return CGrid(fwd.buf);
    };
    for (int m = 0; m < reference.n_items(); ++m)
        for (int axis = 0; axis < 2; ++axis) {
            const CGrid fa = transform([&](CGrid& b) {
                for (int i = 0; i < d2; ++i)
                    if (mask_valid.data()[i])
                        b(i / d, i % d) = measured.data(axis * d2 + i, m);
            });
            const CGrid fb = transform([&](CGrid& b) {
                for (int i = 0; i < d2; ++i)
                    if (mask_wfs.data()[i]) {
                        const double v = reference.data(axis * d2 + i, m);
                        b(i / d, i % d) = v;
                        sq.data()[i] += v * v;
                    }
            });
            num_f += fa * fb.conjugate();
        }
    const CGrid fv = transform([&](CGrid& b) {
        for (int i = 0; i < d2; ++i)
            if (mask_valid.data()[i]) b(i / d, i % d) = 1.0;
    });
    const CGrid fs = transform([&](CGrid& b) {
        for (int i = 0; i < d2; ++i)
            if (mask_wfs.data()[i]) b(i / d, i % d) = sq.data()[i];
    });
    auto lag_map = [&](const CGrid& spec) {
        inv.buf = spec;
        inv.run();
        Grid out(2 * d - 1, 2 * d - 1);
        for (int ly = -(d - 1); ly <= d - 1; ++ly)
            for (int lx = -(d - 1); lx <= d - 1; ++lx)
                out(ly + d - 1, lx + d - 1) =
                    inv.buf((ly + P) % P, (lx + P) % P).real() / (double(P) * P);
        return out;
    };
    AlphaMap map;
    map.d = d;
    map.num = lag_map(num_f);
    map.den = lag_map(fv * fs.conjugate());
    const double floor = 1e-6 * map.den.maxCoeff();
    map.valid = (map.den > floor).cast<std::uint8_t>();
    map.alpha = Grid::Zero(map.n(), map.n());
    for (int i = 0; i < map.alpha.size(); ++i)
        if (map.valid.data()[i]) map.alpha.data()[i] = map.num.data()[i] / map.den.data()[i];
    map.m_up = 1;
    map.up = map.alpha;
    map.up_den = map.den;
    map.up_valid = map.valid;
    return map;
}

namespace detail {
// Spectrum of an odd-sized lag map.
inline CGrid lag_spectrum(const Grid& g) {
    CGrid f = g.cast<cplx>();
    fft2(f, Direction::Forward);
    return f;
}

// Trigonometric interpolant of the map at fractional node coordinates.
inline Grid eval_interpolant(const CGrid& spec, const std::vector<double>& uy,
                             const std::vector<double>& ux) {
    const int N = static_cast<int>(spec.rows()), h = (N - 1) / 2;
    auto basis = [&](const std::vector<double>& u) {
        Eigen::MatrixXcd E(u.size(), N);
        for (std::size_t r = 0; r < u.size(); ++r)
            for (int k = -h; k <= h; ++k)
                E(r, (k + N) % N) = std::polar(1.0, 2 * pi * k * u[r] / N);
        return E;
    };
    const Eigen::MatrixXcd Ey = basis(uy), Ex = basis(ux);
    const Eigen::MatrixXcd F = spec.matrix();
    const Eigen::MatrixXcd v = Ey * F * Ex.transpose();
    return v.real().array() / (double(N) * N);
}

// Symmetric zero padding of the spectrum: exact at the original nodes.
inline Grid zero_pad_upsample(const Grid& g, int m_up) {
    const int N = static_cast<int>(g.rows()), M = N * m_up, h = (N - 1) / 2;
    const CGrid f = lag_spectrum(g);
    CGrid u = CGrid::Zero(M, M);
    for (int ky = -h; ky <= h; ++ky)
        for (int kx = -h; kx <= h; ++kx) u((ky + M) % M, (kx + M) % M) = f((ky + N) % N, (kx + N) % N);
    fft2(u, Direction::Backward);
    return u.real() / (double(N) * N);
}

// An interpolated point is valid only if every surrounding node is valid.
inline bool dilated_valid(const Mask& valid, double uy, double ux) {
    const int N = static_cast<int>(valid.rows());
    const int y0 = int(std::floor(uy + 1e-12)), x0 = int(std::floor(ux + 1e-12));
    const int y1 = int(std::ceil(uy - 1e-12)), x1 = int(std::ceil(ux - 1e-12));
    if (y0 < 0 || x0 < 0 || y1 >= N || x1 >= N) return false;
    return valid(y0, x0) && valid(y0, x1) && valid(y1, x0) && valid(y1, x1);
}

}  // namespace detail

// Numerator and denominator are sinc-interpolated separately and divided
// afterwards: both are plain cross-correlations that vanish at the edge of
// the lag domain, whereas the ratio is ragged where the overlap is small.
inline AlphaMap upsample_alpha(const AlphaMap& map, int m_up) {
    if (m_up < 1) throw ConfigError("m_up must be at least 1");
    AlphaMap out = map;
    out.m_up = m_up;
    if (m_up == 1) {
        out.up = map.alpha;
        out.up_den = map.den;
        out.up_valid = map.valid;
        return out;
    }
    const int M = map.n() * m_up;
    const Grid num = detail::zero_pad_upsample(map.num, m_up), den = detail::zero_pad_upsample(map.den, m_up);
    const double floor = 1e-6 * map.den.maxCoeff();
    out.up = Grid::Zero(M, M);
    out.up_den = den;
    out.up_valid = Mask::Zero(M, M);
    for (int jy = 0; jy < M; ++jy)
        for (int jx = 0; jx < M; ++jx) {
            const bool ok = detail::dilated_valid(map.valid, double(jy) / m_up, double(jx) / m_up) &&
                            den(jy, jx) > floor;
            out.up_valid(jy, jx) = ok;
            if (ok) out.up(jy, jx) = num(jy, jx) / den(jy, jx);
        }
    return out;
}

struct ModalEstimate {
    Vec2 shift = Vec2::Zero();
    double amplitude_um = 0;
    double alpha_peak = 0;
    AlphaMap map;  // upsampled at min(m_up, 8)
};

namespace detail {
struct Candidate {
    double v, x, y;
};

// Largest value; ties go to the smallest |delta|, then the smallest angle.
inline Candidate pick_max(const std::vector<Candidate>& c) {
    if (c.empty()) throw NumericalError("no valid lag");
    double vmax = -std::numeric_limits<double>::infinity();
    for (const auto& e : c) vmax = std::max(vmax, e.v);
    const double tol = 1e-12 * std::max(1.0, std::abs(vmax));
    auto angle = [](const Candidate& e) {
        double a = std::atan2(e.y, e.x);
        return a < 0 ? a + 2 * pi : a;
    };
    const Candidate* best = nullptr;
    for (const auto& e : c) {
        if (e.v < vmax - tol) continue;
        if (!best) {
            best = &e;
            continue;
        }
        const double r = std::hypot(e.x, e.y), rb = std::hypot(best->x, best->y);
        if (r < rb - 1e-12 || (std::abs(r - rb) <= 1e-12 && angle(e) < angle(*best))) best = &e;
    }
    return *best;
}
}  // namespace detail

// Lags whose denominator is below this fraction of its maximum are valid but
// never win the argmax: a handful of overlapping cells gives a ratio whose
// noise easily beats the true peak.
inline constexpr double modal_support_floor = 1e-2;

// Argmax of the upsampled alpha map. Factors above 8 are resolved by a
// coarse pass at 8 followed by direct evaluation of the same interpolant on
// the fine lattice within one coarse cell of the coarse peak.
inline ModalEstimate estimate_shift_modal(const ModalIM& measured, const ModalIM& reference,
                                          const Mask& mask_valid, const Mask& mask_wfs, int m_up = 8,
                                          double support_floor = modal_support_floor) {
    ModalEstimate est;
    const AlphaMap base = masked_modal_correlation(measured, reference, mask_valid, mask_wfs);
    const int coarse = std::min(m_up, 8);
    est.map = upsample_alpha(base, coarse);
    const auto& up = est.map.up;
    const double support = support_floor * base.den.maxCoeff();
    std::vector<detail::Candidate> cand;
    for (int jy = 0; jy < up.rows(); ++jy)
        for (int jx = 0; jx < up.cols(); ++jx)
            if (est.map.up_valid(jy, jx) && est.map.up_den(jy, jx) >= support)
                cand.push_back({up(jy, jx), est.map.up_lag(jx), est.map.up_lag(jy)});
    detail::Candidate best = detail::pick_max(cand);
    if (m_up > coarse) {
        const double off = base.d - 1;
        auto lattice = [&](double c) {
            std::vector<double> u;
            const int j0 = int(std::ceil((c - 1.0 / coarse) * m_up - 1e-9));
            const int j1 = int(std::floor((c + 1.0 / coarse) * m_up + 1e-9));
            for (int j = j0; j <= j1; ++j) u.push_back(double(j) / m_up + off);
            return u;
        };
        const auto uy = lattice(best.y), ux = lattice(best.x);
        const Grid num = detail::eval_interpolant(detail::lag_spectrum(base.num), uy, ux);
        const Grid den = detail::eval_interpolant(detail::lag_spectrum(base.den), uy, ux);
        const double floor = std::max(1e-6 * base.den.maxCoeff(), support);
        cand.clear();
        for (std::size_t a = 0; a < uy.size(); ++a)
            for (std::size_t b = 0; b < ux.size(); ++b)
                if (detail::dilated_valid(base.valid, uy[a], ux[b]) && den(a, b) >= floor)
                    cand.push_back({num(a, b) / den(a, b), ux[b] - off, uy[a] - off});
        best = detail::pick_max(cand);
    }
    est.shift = {best.x, best.y};
    est.alpha_peak = best.v;
    est.amplitude_um = best.v * reference.amplitude_um;
    return est;
}

}  // namespace aomisreg
