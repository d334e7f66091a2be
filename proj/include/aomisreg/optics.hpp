#pragma once

#include "core.hpp"
#include "parallel.hpp"
#include "rng.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace aomisreg {

// ---------------------------------------------------------------- DM model

struct IfParams {
    double amp_um = 9.0;
    double alpha = 0.87;
    double beta = 1.31;
};

inline double influence_function(double r, double A, double alpha, double beta) {
    return A * std::exp(-alpha * std::pow(r, beta));
}

struct DmModel {
    int d_act = 41;
    double pitch_m = 0.2;
    // influence functions are zero beyond this radius (pitch units); at 12
    // pitches the median profile is below 2e-10 of its peak
    double cutoff = 12.0;
    Points nominal;                   // Fried nodes, pupil centred, pitch units
    std::vector<int> node;            // iy * d_act + ix of each actuator
    MisRegistration misreg;
    Points positions;                 // nominal after misreg
    Eigen::Matrix2d to_local = Eigen::Matrix2d::Identity();
    std::vector<double> amp, alpha, beta;

    int n_act() const { return static_cast<int>(nominal.size()); }

    // Active actuators are the grid nodes within (d_act - 1)/2 + 0.75 pitches of
    // the centre; for d_act = 41 this yields the 1353-actuator footprint.
    static DmModel make(int d_act = 41, double pitch_m = 0.2, IfParams p = {},
                        double footprint = -1.0) {
        if (d_act < 3) throw ConfigError("d_act too small");
        if (!(p.amp_um > 0 && p.alpha > 0 && p.beta > 0))
            throw ConfigError("influence function parameters must be positive");
        if (footprint < 0) footprint = 0.5 * (d_act - 1) + 0.75;
        DmModel dm;
        dm.d_act = d_act;
        dm.pitch_m = pitch_m;
        for (int iy = 0; iy < d_act; ++iy)
            for (int ix = 0; ix < d_act; ++ix) {
                const Vec2 q(cell_centre(ix, d_act), cell_centre(iy, d_act));
                if (q.norm() > footprint) continue;
                dm.nominal.push_back(q);
                dm.node.push_back(iy * d_act + ix);
            }
        const auto n = dm.nominal.size();
        dm.amp.assign(n, p.amp_um);
        dm.alpha.assign(n, p.alpha);
        dm.beta.assign(n, p.beta);
        dm.positions = dm.nominal;
        return dm;
    }

    DmModel with_misreg(const MisRegistration& m) const {
        m.validate();
        DmModel out = *this;
        out.misreg = m;
        out.positions = apply_misreg(nominal, m);
        out.to_local = m.linear().inverse();
        if (m.is_identity()) out.to_local.setIdentity();
        return out;
    }

    // Largest WFS-plane distance at which an influence function is non-zero.
    double reach() const { return cutoff * std::max({misreg.mag_x, misreg.mag_y, 1.0}); }

    // Surface in um of actuator a at unit command, x in WFS pitch units. The
    // whole DM is transformed, so magnification also stretches the profile.
    double surface_um(int a, const Vec2& x) const {
        const Vec2 u = to_local * (x - positions[a]);
        const double r2 = u.squaredNorm();
        if (r2 >= cutoff * cutoff) return 0.0;
        if (r2 == 0.0) return amp[a];
        return amp[a] * std::exp(-alpha[a] * std::exp(0.5 * beta[a] * std::log(r2)));
    }

    // Per-actuator "amp alpha beta" rows, whitespace separated, '#' comments.
    void load_actuator_params(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open actuator parameter file '" + path + "'");
        std::vector<double> a, al, be;
        std::string line;
        while (std::getline(in, line)) {
            if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
            std::istringstream ls(line);
            double x, y, z;
            if (!(ls >> x)) continue;
            if (!(ls >> y >> z) || !(x > 0 && y > 0 && z > 0))
                throw ConfigError("bad actuator parameter row in '" + path + "'");
            a.push_back(x);
            al.push_back(y);
            be.push_back(z);
        }
        if (static_cast<int>(a.size()) != n_act())
            throw ConfigError("actuator parameter file has wrong row count");
        amp = a;
        alpha = al;
        beta = be;
    }
};

// ---------------------------------------------------------------- KL basis

struct KlBasis {
    Eigen::MatrixXd modes;        // n_act x n_act, column 0 is piston
    Eigen::VectorXd eigenvalues;  // per column; piston variance is unbounded
};

// Kolmogorov covariance C_ij = -D(|p_i - p_j|)/2 between nominal actuator
// positions, double centred so that piston is its null direction. r0_ratio is
// r0 in pitch units and only scales the eigenvalues.
inline KlBasis build_kl_basis(const DmModel& dm, double r0_ratio = 1.0) {
    const int n = dm.n_act();
    if (n < 3) throw ConfigError("too few actuators for a KL basis");
    Eigen::MatrixXd C(n, n);
    for (int i = 0; i < n; ++i) {
        C(i, i) = 0.0;
        for (int j = 0; j < i; ++j) {
            const double r = (dm.nominal[i] - dm.nominal[j]).norm();
            if (r < 1e-9) throw NumericalError("duplicate actuator positions: singular covariance");
            C(i, j) = C(j, i) = -0.5 * 6.88 * std::pow(r / r0_ratio, 5.0 / 3.0);
        }
    }
    const Eigen::VectorXd rm = C.rowwise().mean();
    const double gm = rm.mean();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) C(i, j) += gm - rm(i) - rm(j);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    if (es.info() != Eigen::Success) throw NumericalError("KL eigen-decomposition failed");
    const Eigen::VectorXd& ev = es.eigenvalues();
    const Eigen::MatrixXd& V = es.eigenvectors();

    // drop the eigenvector closest to piston, keep the rest by decreasing variance
    const Eigen::VectorXd one = Eigen::VectorXd::Constant(n, 1.0 / std::sqrt(double(n)));
    int piston = 0;
    (V.transpose() * one).cwiseAbs().maxCoeff(&piston);
    KlBasis kl;
    kl.modes.resize(n, n);
    kl.eigenvalues.resize(n);
    kl.modes.col(0) = one;
    kl.eigenvalues(0) = std::numeric_limits<double>::infinity();
    int c = 1;
    for (int k = n - 1; k >= 0; --k) {
        if (k == piston) continue;
        if (!(ev(k) > 0)) throw NumericalError("singular covariance: non-positive KL eigenvalue");
        kl.modes.col(c) = V.col(k);
        kl.eigenvalues(c) = ev(k);
        ++c;
    }
    return kl;
}

// ---------------------------------------------------------------- SH model

enum class SlopeModel { EdgeDifference, PixelFD };

// Edge difference: phase difference across opposite subaperture edges sampled
// at n midpoints. PixelFD: averaged finite-difference gradient over n x n
// pixel centres, which telescopes to the first/last pixel difference.
struct ShSampling {
    SlopeModel model = SlopeModel::EdgeDifference;
    int n = 8;

    double inset() const { return model == SlopeModel::PixelFD ? 0.5 / n : 0.0; }
    double span() const { return 1.0 - 2.0 * inset(); }
};

struct SlopeField {
    Grid x, y;  // radians of wavefront tilt
};

// Averaged finite-difference slopes of an OPD map (m) with n x n pixels per
// subaperture.
inline SlopeField sh_slopes_opd(const Grid& opd, const SubapertureGrid& g) {
    const int d = g.d_sub;
    if (opd.rows() != opd.cols() || opd.rows() % d != 0)
        throw ConfigError("phase grid not divisible into subapertures");
    const int n = static_cast<int>(opd.rows()) / d;
    if (n < 2) throw ConfigError("need at least 2 pixels per subaperture");
    const double h = g.pitch_m / n;
    SlopeField s{Grid::Zero(d, d), Grid::Zero(d, d)};
    for (int iy = 0; iy < d; ++iy)
        for (int ix = 0; ix < d; ++ix) {
            if (!g.mask_wfs(iy, ix)) continue;
            const auto cell = opd.block(iy * n, ix * n, n, n);
            s.x(iy, ix) = (cell.col(n - 1) - cell.col(0)).mean() / ((n - 1) * h);
            s.y(iy, ix) = (cell.row(n - 1) - cell.row(0)).mean() / ((n - 1) * h);
        }
    return s;
}

// Phase in radians at lambda_wfs.
inline SlopeField sh_slopes(const Grid& phase, const SubapertureGrid& g, double lambda_wfs) {
    return sh_slopes_opd(phase * (lambda_wfs / (2 * pi)), g);
}

// Same model written into a compact vector: x slopes of all wfs cells, then y.
inline void sh_slopes_opd_compact(const Grid& opd, const SubapertureGrid& g,
                                  const std::vector<int>& cells, double* out) {
    const int d = g.d_sub;
    const int n = static_cast<int>(opd.rows()) / d;
    const double h = g.pitch_m / n;
    const std::size_t m = cells.size();
    for (std::size_t c = 0; c < m; ++c) {
        const int iy = cells[c] / d, ix = cells[c] % d;
        const auto cell = opd.block(iy * n, ix * n, n, n);
        out[c] = (cell.col(n - 1) - cell.col(0)).mean() / ((n - 1) * h);
        out[m + c] = (cell.row(n - 1) - cell.row(0)).mean() / ((n - 1) * h);
    }
}

// Slopes of an analytic OPD function (m, argument in pitch units) for one cell.
template <class F>
Vec2 cell_slope(const F& opd, const Vec2& centre, double pitch_m, ShSampling s) {
    const double a = 0.5 - s.inset();
    double sx = 0, sy = 0;
    for (int j = 0; j < s.n; ++j) {
        const double t = -0.5 + (j + 0.5) / s.n;
        sx += opd({centre.x() + a, centre.y() + t}) - opd({centre.x() - a, centre.y() + t});
        sy += opd({centre.x() + t, centre.y() + a}) - opd({centre.x() + t, centre.y() - a});
    }
    const double k = 1.0 / (s.n * s.span() * pitch_m);
    return {sx * k, sy * k};
}

template <class F>
SlopeField sh_slopes_analytic(const F& opd, const SubapertureGrid& g, ShSampling s = {}) {
    const int d = g.d_sub;
    SlopeField out{Grid::Zero(d, d), Grid::Zero(d, d)};
    for (int iy = 0; iy < d; ++iy)
        for (int ix = 0; ix < d; ++ix) {
            if (!g.mask_wfs(iy, ix)) continue;
            const Vec2 v = cell_slope(opd, g.centre(iy, ix), g.pitch_m, s);
            out.x(iy, ix) = v.x();
            out.y(iy, ix) = v.y();
        }
    return out;
}

// ---------------------------------------------------------------- noise

inline double photon_noise_sigma(double n_ph, double r0_at_lambda, double lambda) {
    if (!(n_ph > 0)) throw ConfigError("photon count must be positive");
    return lambda / (2.0 * r0_at_lambda) / std::sqrt(2.0 * n_ph);
}

// Slope noise given in detector pixels; 800 mas per pixel by default.
inline double pixel_noise_sigma(double px, double plate_scale_mas = 800.0) {
    return px * plate_scale_mas * mas;
}

// ---------------------------------------------------------------- IMs

// Slope maps per item, stored as one column of 2 d^2 values (x plane then y
// plane, row-major). Values are the response to a poke of amplitude_um.
struct InteractionMatrix {
    int d_sub = 0;
    double amplitude_um = 0;
    Eigen::MatrixXd data;
    Mask mask_wfs, mask_valid;
    std::vector<int> items;  // actuator indices or 1-based KL mode numbers

    int n_items() const { return static_cast<int>(data.cols()); }

    Grid plane(int item, int axis) const {
        Grid out(d_sub, d_sub);
        const int d2 = d_sub * d_sub;
        for (int i = 0; i < d2; ++i) out.data()[i] = data(axis * d2 + i, item);
        return out;
    }

    // rows restricted to mask_wfs, x then y
    Eigen::MatrixXd compact() const {
        std::vector<int> cells;
        for (int i = 0; i < d_sub * d_sub; ++i)
            if (mask_wfs.data()[i]) cells.push_back(i);
        const int m = static_cast<int>(cells.size()), d2 = d_sub * d_sub;
        Eigen::MatrixXd out(2 * m, data.cols());
        for (int c = 0; c < m; ++c) {
            out.row(c) = data.row(cells[c]);
            out.row(m + c) = data.row(d2 + cells[c]);
        }
        return out;
    }
};

using ZonalIM = InteractionMatrix;
using ModalIM = InteractionMatrix;

// Slopes per unit command for every actuator, compact rows (x then y over
// the wfs cells). Column a is the response to the surface of actuator a.
inline Eigen::MatrixXd zonal_response(const DmModel& dm, const SubapertureGrid& g,
                                      ShSampling s = {}) {
    const auto cells = g.wfs_cells();
    const int m = static_cast<int>(cells.size()), d = g.d_sub;
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(2 * m, dm.n_act());
    std::vector<int> cell_at(d * d, -1);
    for (int c = 0; c < m; ++c) cell_at[cells[c]] = c;
    const double reach = dm.reach() + 1.0;
    parallel_for(dm.n_act(), [&](std::size_t ai) {
        const int a = static_cast<int>(ai);
        const Vec2 p = dm.positions[a];
        auto opd = [&](const Vec2& x) { return 1e-6 * dm.surface_um(a, x); };
        const int x0 = std::max(0, int(std::floor(p.x() - reach + 0.5 * (d - 1))));
        const int x1 = std::min(d - 1, int(std::ceil(p.x() + reach + 0.5 * (d - 1))));
        const int y0 = std::max(0, int(std::floor(p.y() - reach + 0.5 * (d - 1))));
        const int y1 = std::min(d - 1, int(std::ceil(p.y() + reach + 0.5 * (d - 1))));
        for (int iy = y0; iy <= y1; ++iy)
            for (int ix = x0; ix <= x1; ++ix) {
                const int c = cell_at[iy * d + ix];
                if (c < 0) continue;
                const Vec2 v = cell_slope(opd, g.centre(iy, ix), g.pitch_m, s);
                D(c, a) = v.x();
                D(m + c, a) = v.y();
            }
    });
    return D;
}

inline InteractionMatrix expand_compact(const Eigen::MatrixXd& compact, const SubapertureGrid& g) {
    const auto cells = g.wfs_cells();
    const int m = static_cast<int>(cells.size()), d2 = g.d_sub * g.d_sub;
    InteractionMatrix im;
    im.d_sub = g.d_sub;
    im.mask_wfs = g.mask_wfs;
    im.mask_valid = g.mask_valid;
    im.data = Eigen::MatrixXd::Zero(2 * d2, compact.cols());
    for (int c = 0; c < m; ++c) {
        im.data.row(cells[c]) = compact.row(c);
        im.data.row(d2 + cells[c]) = compact.row(m + c);
    }
    return im;
}

// Each actuator poked to a peak of `amplitude_um`, edge-difference SH model.
inline ZonalIM synth_zonal_im(const DmModel& dm, const SubapertureGrid& g,
                              const MisRegistration& misreg, double amplitude_um,
                              ShSampling s = {}) {
    const DmModel moved = dm.with_misreg(misreg);
    Eigen::MatrixXd D = zonal_response(moved, g, s);
    for (int a = 0; a < moved.n_act(); ++a) D.col(a) *= amplitude_um / moved.amp[a];
    ZonalIM im = expand_compact(D, g);
    im.amplitude_um = amplitude_um;
    im.items.resize(moved.n_act());
    for (int a = 0; a < moved.n_act(); ++a) im.items[a] = a;
    return im;
}

// modes are 1-based KL mode numbers (1 = piston)
inline ModalIM project_zonal_to_modal(const ZonalIM& zonal, const KlBasis& kl,
                                      const std::vector<int>& modes) {
    if (modes.empty()) throw ConfigError("empty mode list");
    Eigen::MatrixXd K(kl.modes.rows(), modes.size());
    for (std::size_t i = 0; i < modes.size(); ++i) {
        if (modes[i] < 1 || modes[i] > kl.modes.cols())
            throw ConfigError("KL mode index out of range");
        K.col(i) = kl.modes.col(modes[i] - 1);
    }
    if (K.rows() != zonal.data.cols()) throw ConfigError("zonal IM does not match KL basis");
    ModalIM out;
    out.d_sub = zonal.d_sub;
    out.amplitude_um = zonal.amplitude_um;
    out.mask_wfs = zonal.mask_wfs;
    out.mask_valid = zonal.mask_valid;
    out.items = modes;
    out.data.noalias() = zonal.data * K;
    return out;
}

inline std::vector<int> mode_range(int first, int last) {
    std::vector<int> v;
    for (int m = first; m <= last; ++m) v.push_back(m);
    return v;
}

// Gaussian noise of std sigma (rad) on every modelled slope.
inline void add_slope_noise(InteractionMatrix& im, double sigma, RngStream& rng) {
    const int d2 = im.d_sub * im.d_sub;
    for (int j = 0; j < im.data.cols(); ++j)
        for (int axis = 0; axis < 2; ++axis)
            for (int i = 0; i < d2; ++i)
                if (im.mask_wfs.data()[i]) im.data(axis * d2 + i, j) += sigma * rng.normal();
}

}  // namespace aomisreg
