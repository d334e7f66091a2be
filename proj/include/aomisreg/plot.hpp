#pragma once

#include "core.hpp"
#include "io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

// Bare raster output (binary PPM). No text: axes ranges go to the CSV.
namespace aomisreg::plot {

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
    int w = 0, h = 0;
    std::vector<Rgb> px;

    Image(int w_, int h_, Rgb bg = {255, 255, 255}) : w(w_), h(h_), px(std::size_t(w_) * h_, bg) {}

    void set(int x, int y, Rgb c) {
        if (x >= 0 && y >= 0 && x < w && y < h) px[std::size_t(y) * w + x] = c;
    }

    void line(double x0, double y0, double x1, double y1, Rgb c) {
        const int n = int(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
        for (int i = 0; i <= n; ++i) {
            const double t = double(i) / n;
            set(int(std::lround(x0 + t * (x1 - x0))), int(std::lround(y0 + t * (y1 - y0))), c);
        }
    }

    void save(const std::filesystem::path& p) const {
        auto os = detail::open_out(p);
        os << "P6\n" << w << " " << h << "\n255\n";
        for (const auto& c : px) os.write(reinterpret_cast<const char*>(c.data()), 3);
        if (!os) throw IoError("write failed: " + p.string());
    }
};

inline Rgb palette(std::size_t i) {
    static const Rgb p[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40},
                            {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}};
    return p[i % 8];
}

struct Series {
    std::vector<double> x, y;
};

inline void line_plot(const std::filesystem::path& p, const std::vector<Series>& series, int w = 640,
                      int h = 480) {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
        }
    if (!(x1 >= x0)) x0 = 0, x1 = 1;
    if (!(y1 >= y0)) y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const int m = 30;
    Image img(w, h);
    auto X = [&](double v) { return m + (v - x0) / (x1 - x0) * (w - 2 * m); };
    auto Y = [&](double v) { return h - m - (v - y0) / (y1 - y0) * (h - 2 * m); };
    const Rgb axis{0, 0, 0}, grid{220, 220, 220};
    if (y0 < 0 && y1 > 0) img.line(m, Y(0), w - m, Y(0), grid);
    img.line(m, h - m, w - m, h - m, axis);
    img.line(m, m, m, h - m, axis);
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        for (std::size_t i = 1; i < s.x.size(); ++i)
            if (std::isfinite(s.y[i - 1]) && std::isfinite(s.y[i]))
                img.line(X(s.x[i - 1]), Y(s.y[i - 1]), X(s.x[i]), Y(s.y[i]), palette(k));
    }
    img.save(p);
}

// Blue-white-red map, symmetric about zero when the data change sign.
inline void heatmap(const std::filesystem::path& p, const Grid& g, int scale = 8) {
    double lo = g.minCoeff(), hi = g.maxCoeff();
    const bool diverging = lo < 0 && hi > 0;
    if (diverging) hi = std::max(-lo, hi), lo = -hi;
    if (hi == lo) hi = lo + 1;
    Image img(int(g.cols()) * scale, int(g.rows()) * scale);
    for (int r = 0; r < g.rows(); ++r)
        for (int c = 0; c < g.cols(); ++c) {
            const double t = std::clamp((g(r, c) - lo) / (hi - lo), 0.0, 1.0);
            Rgb col;
            if (diverging) {
                const double u = 2 * t - 1;
                const auto a = std::uint8_t(255 * (1 - std::abs(u)));
                col = u < 0 ? Rgb{a, a, 255} : Rgb{255, a, a};
            } else {
                const auto a = std::uint8_t(255 * t);
                col = {a, a, a};
            }
            // row 0 at the bottom
            for (int dy = 0; dy < scale; ++dy)
                for (int dx = 0; dx < scale; ++dx)
                    img.set(c * scale + dx, (int(g.rows()) - 1 - r) * scale + dy, col);
        }
    img.save(p);
}

}  // namespace aomisreg::plot
