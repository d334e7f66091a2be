#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aomisreg {

// row-major so (iy, ix) storage matches the binary file layouts and FFTW
using Grid = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec2 = Eigen::Vector2d;
using Points = std::vector<Vec2>;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double pi = std::numbers::pi;
inline constexpr double deg = pi / 180.0;
inline constexpr double mas = pi / 180.0 / 3600.0 / 1000.0;

// Geometry of the DM as seen by the WFS. Lateral shifts are in subaperture
// pitches; the transform is rotate, then scale, then translate.
struct MisRegistration {
    double shift_x = 0.0;
    double shift_y = 0.0;
    double clocking_deg = 0.0;
    double mag_x = 1.0;
    double mag_y = 1.0;

    static MisRegistration shift(double x, double y) { return {x, y, 0.0, 1.0, 1.0}; }

    bool is_identity() const {
        return shift_x == 0.0 && shift_y == 0.0 && clocking_deg == 0.0 && mag_x == 1.0 &&
               mag_y == 1.0;
    }

    void validate() const {
        if (!(mag_x > 0.0) || !(mag_y > 0.0))
            throw ConfigError("magnification must be positive");
    }

    Eigen::Matrix2d linear() const {
        const double c = std::cos(clocking_deg * deg), s = std::sin(clocking_deg * deg);
        Eigen::Matrix2d r;
        r << c, -s, s, c;
        return Eigen::Vector2d(mag_x, mag_y).asDiagonal() * r;
    }

    Vec2 translation() const { return {shift_x, shift_y}; }
};

inline Vec2 apply_misreg(const Vec2& p, const MisRegistration& m) {
    if (m.is_identity()) return p;
    const double c = std::cos(m.clocking_deg * deg), s = std::sin(m.clocking_deg * deg);
    const double rx = c * p.x() - s * p.y();
    const double ry = s * p.x() + c * p.y();
    return {m.mag_x * rx + m.shift_x, m.mag_y * ry + m.shift_y};
}

inline Vec2 apply_inverse_misreg(const Vec2& p, const MisRegistration& m) {
    if (m.is_identity()) return p;
    const double c = std::cos(m.clocking_deg * deg), s = std::sin(m.clocking_deg * deg);
    const double sx = (p.x() - m.shift_x) / m.mag_x;
    const double sy = (p.y() - m.shift_y) / m.mag_y;
    return {c * sx + s * sy, -s * sx + c * sy};
}

inline Points apply_misreg(const Points& pts, const MisRegistration& m) {
    Points out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(apply_misreg(p, m));
    return out;
}

inline Points apply_inverse_misreg(const Points& pts, const MisRegistration& m) {
    Points out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(apply_inverse_misreg(p, m));
    return out;
}

// Centre of cell i on a grid of n cells of unit pitch centred on the pupil.
inline double cell_centre(int i, int n) { return i - 0.5 * (n - 1); }

// Masks over a d_sub x d_sub subaperture grid. A subaperture is modelled when
// its centre lies in the annulus. The valid mask drops the outer ring (any
// 8-neighbour outside the pupil or off the grid) and the corners of the inner
// ring (cells touching the central hole only diagonally).
inline std::pair<Mask, Mask> make_annulus_masks(int d_sub, double obscuration) {
    if (d_sub < 4) throw ConfigError("d_sub must be at least 4");
    if (!(obscuration >= 0.0 && obscuration < 1.0))
        throw ConfigError("obscuration must lie in [0, 1)");
    const double R = 0.5 * d_sub, r_in = obscuration * R;
    enum Cell : int { Inside, Outer, Hole };
    auto classify = [&](int iy, int ix) {
        if (iy < 0 || ix < 0 || iy >= d_sub || ix >= d_sub) return Outer;
        const double x = cell_centre(ix, d_sub), y = cell_centre(iy, d_sub);
        const double r = std::hypot(x, y);
        if (r > R) return Outer;
        if (r < r_in) return Hole;
        return Inside;
    };
    Mask wfs = Mask::Zero(d_sub, d_sub), valid = Mask::Zero(d_sub, d_sub);
    for (int iy = 0; iy < d_sub; ++iy)
        for (int ix = 0; ix < d_sub; ++ix) {
            if (classify(iy, ix) != Inside) continue;
            wfs(iy, ix) = 1;
            bool keep = true, hole_edge = false, hole_diag = false;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dx && !dy) continue;
                    const Cell c = classify(iy + dy, ix + dx);
                    if (c == Outer) keep = false;
                    if (c == Hole) (dx && dy ? hole_diag : hole_edge) = true;
                }
            if (hole_diag && !hole_edge) keep = false;
            valid(iy, ix) = keep ? 1 : 0;
        }
    return {wfs, valid};
}

struct SubapertureGrid {
    int d_sub = 40;
    double pitch_m = 0.2;
    double obscuration = 0.14;
    Mask mask_wfs;
    Mask mask_valid;

    static SubapertureGrid make(int d_sub, double pitch_m, double obscuration) {
        if (!(pitch_m > 0.0)) throw ConfigError("pitch must be positive");
        SubapertureGrid g;
        g.d_sub = d_sub;
        g.pitch_m = pitch_m;
        g.obscuration = obscuration;
        std::tie(g.mask_wfs, g.mask_valid) = make_annulus_masks(d_sub, obscuration);
        return g;
    }

    Vec2 centre(int iy, int ix) const { return {cell_centre(ix, d_sub), cell_centre(iy, d_sub)}; }

    // flat indices (iy * d_sub + ix) of modelled subapertures, row-major
    std::vector<int> wfs_cells() const {
        std::vector<int> out;
        for (int i = 0; i < d_sub * d_sub; ++i)
            if (mask_wfs.data()[i]) out.push_back(i);
        return out;
    }

    int n_wfs() const { return static_cast<int>(mask_wfs.cast<int>().sum()); }
};

struct LoopConfig {
    double tau_wfs = 1e-3;
    double tau_lat = 1e-3;
    double tau_dm = 1e-3;
    double tau_rtc = 1e-3;
    double g_int = 0.5;
    double g_leak = 0.0;
    int n_mod = 500;
    double clip = 1.0;
    // frames between the exposure that produces a measurement and the first
    // exposure that sees the resulting command
    int delay_frames = 2;

    void validate(int n_act) const {
        if (!(tau_wfs > 0 && tau_lat > 0 && tau_dm > 0 && tau_rtc > 0))
            throw ConfigError("characteristic times must be positive");
        if (!(g_int > 0.0 && g_int <= 1.0)) throw ConfigError("g_int must lie in (0, 1]");
        if (!(g_leak >= 0.0 && g_leak < 1.0)) throw ConfigError("g_leak must lie in [0, 1)");
        if (n_mod < 1 || (n_act > 0 && n_mod > n_act)) throw ConfigError("n_mod out of range");
        if (!(clip > 0.0)) throw ConfigError("clip must be positive");
        if (delay_frames < 1) throw ConfigError("delay_frames must be at least 1");
    }
};

}  // namespace aomisreg
