#pragma once

#include "core.hpp"
#include "fft.hpp"
#include "rng.hpp"

#include <cmath>
#include <vector>

namespace aomisreg {

struct PhaseScreen {
    Grid phase;               // radians at lambda0
    double sample_pitch = 0;  // m / pixel
    double r0 = 0;            // m at lambda0
    double lambda0 = 500e-9;
    bool periodic = true;

    int size() const { return static_cast<int>(phase.rows()); }
};

inline double scale_r0(double r0_at_lambda0, double lambda0, double lambda) {
    if (!(lambda0 > 0 && lambda > 0)) throw ConfigError("wavelengths must be positive");
    return r0_at_lambda0 * std::pow(lambda / lambda0, 1.2);
}

// FFT screen with a Kolmogorov phase PSD 0.023 r0^-5/3 f^-11/3 (f in cycles/m).
// No subharmonics: the screen is periodic and lacks power beyond its own size.
inline PhaseScreen generate_screen(int n_pix, double sample_pitch, double r0, double lambda0,
                                   RngStream& rng) {
    if (!(r0 > 0)) throw ConfigError("r0 must be positive");
    if (n_pix < 64) throw ConfigError("screen must be at least 64 pixels");
    if (!(sample_pitch > 0)) throw ConfigError("sample pitch must be positive");
    const double L = n_pix * sample_pitch, df = 1.0 / L;
    const double amp0 = std::sqrt(0.023) * std::pow(r0, -5.0 / 6.0) * df;
    CGrid spec(n_pix, n_pix);
    for (int iy = 0; iy < n_pix; ++iy) {
        const double fy = (iy <= n_pix / 2 ? iy : iy - n_pix) * df;
        for (int ix = 0; ix < n_pix; ++ix) {
            const double fx = (ix <= n_pix / 2 ? ix : ix - n_pix) * df;
            const double re = rng.normal(), im = rng.normal();
            const double f2 = fx * fx + fy * fy;
            const double a = f2 > 0 ? amp0 * std::pow(f2, -11.0 / 12.0) : 0.0;
            spec(iy, ix) = cplx(re * a, im * a);
        }
    }
    fft2(spec, Direction::Backward);
    PhaseScreen s;
    s.phase = spec.real();
    s.sample_pitch = sample_pitch;
    s.r0 = r0;
    s.lambda0 = lambda0;
    return s;
}

// Square window of the screen, origin at pixel (origin_y, origin_x).
struct Aperture {
    int n_pix = 0;
    int origin_x = 0;
    int origin_y = 0;
};

namespace detail {
// Offsets within 1e-9 px of an integer are snapped so that whole periods
// return bit-identical windows.
inline double wrap_offset(double o, int n) {
    double w = std::fmod(o, double(n));
    if (w < 0) w += n;
    const double r = std::round(w);
    if (std::abs(w - r) < 1e-9) w = r;
    if (w >= n) w -= n;
    return w;
}
}  // namespace detail

// Frozen flow: the turbulence moves by v0 t along theta0, so the pupil sees
// the screen at x - v0 t. Bilinear interpolation with periodic wraparound.
inline Grid sample_frozen_flow(const PhaseScreen& screen, double t, double v0, double theta0_deg,
                               const Aperture& ap) {
    const int n = screen.size();
    const double ox = detail::wrap_offset(
        ap.origin_x - v0 * t * std::cos(theta0_deg * deg) / screen.sample_pitch, n);
    const double oy = detail::wrap_offset(
        ap.origin_y - v0 * t * std::sin(theta0_deg * deg) / screen.sample_pitch, n);
    const int ix0 = static_cast<int>(ox), iy0 = static_cast<int>(oy);
    const double fx = ox - ix0, fy = oy - iy0;
    Grid out(ap.n_pix, ap.n_pix);
    const auto& p = screen.phase;
    if (fx == 0.0 && fy == 0.0) {
        for (int y = 0; y < ap.n_pix; ++y)
            for (int x = 0; x < ap.n_pix; ++x) out(y, x) = p((iy0 + y) % n, (ix0 + x) % n);
        return out;
    }
    for (int y = 0; y < ap.n_pix; ++y) {
        const int y0 = (iy0 + y) % n, y1 = (y0 + 1) % n;
        for (int x = 0; x < ap.n_pix; ++x) {
            const int x0 = (ix0 + x) % n, x1 = (x0 + 1) % n;
            out(y, x) = (1 - fy) * ((1 - fx) * p(y0, x0) + fx * p(y0, x1)) +
                        fy * ((1 - fx) * p(y1, x0) + fx * p(y1, x1));
        }
    }
    return out;
}

struct Layer {
    double cn2 = 1.0;
    double v0 = 0.0;
    double theta0_deg = 0.0;
    PhaseScreen screen;
};

struct LayerSet {
    double r0 = 0.1;  // total, at lambda0
    double lambda0 = 500e-9;
    std::vector<Layer> layers;

    void validate() const {
        double s = 0;
        for (const auto& l : layers) s += l.cn2;
        if (std::abs(s - 1.0) > 1e-9) throw ConfigError("Cn2 weights must sum to 1");
    }

    double layer_r0(std::size_t i) const { return r0 * std::pow(layers[i].cn2, -0.6); }

    // Fill every layer with an independent screen.
    void realize(int n_pix, double sample_pitch, const RngStream& base) {
        validate();
        for (std::size_t i = 0; i < layers.size(); ++i) {
            RngStream rng = base.substream(i);
            layers[i].screen = generate_screen(n_pix, sample_pitch, layer_r0(i), lambda0, rng);
        }
    }

    Grid sample(double t, const Aperture& ap) const {
        Grid out = Grid::Zero(ap.n_pix, ap.n_pix);
        for (const auto& l : layers) out += sample_frozen_flow(l.screen, t, l.v0, l.theta0_deg, ap);
        return out;
    }
};

inline LayerSet single_layer(double r0, double v0, double theta0_deg, double lambda0 = 500e-9) {
    LayerSet s;
    s.r0 = r0;
    s.lambda0 = lambda0;
    s.layers.push_back({1.0, v0, theta0_deg, {}});
    return s;
}

// Five-layer profile with r0 = 10 cm at 500 nm.
inline LayerSet gpao_profile() {
    LayerSet s;
    s.r0 = 0.10;
    s.lambda0 = 500e-9;
    const double cn2[] = {0.67, 0.07, 0.1, 0.1, 0.06};
    const double v0[] = {12.2, 8.3, 30.3, 56.0, 32.5};
    const double th[] = {150.1, 79.6, -70.0, -7.7, -82.6};
    for (int i = 0; i < 5; ++i) s.layers.push_back({cn2[i], v0[i], th[i], {}});
    return s;
}

}  // namespace aomisreg
