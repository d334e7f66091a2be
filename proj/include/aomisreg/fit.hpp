#pragma once

#include "core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

namespace aomisreg {

struct SimplexResult {
    Eigen::VectorXd x;
    double f = 0;
    int iterations = 0;
    bool converged = false;
};

// Nelder-Mead with the standard coefficients (reflection 1, expansion 2,
// contraction 1/2, shrink 1/2). Stops when the spread of objective values
// falls below ftol relative to the best value (plus a tiny absolute floor).
inline SimplexResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& x0, const Eigen::VectorXd& step,
                                 int max_iter = 2000, double ftol = 1e-14) {
    const int n = static_cast<int>(x0.size());
    std::vector<Eigen::VectorXd> pts(n + 1, x0);
    std::vector<double> fv(n + 1);
    for (int i = 0; i < n; ++i) pts[i + 1](i) += step(i);
    for (int i = 0; i <= n; ++i) fv[i] = f(pts[i]);
    std::vector<int> order(n + 1);
    SimplexResult r;
    for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) { return fv[a] < fv[b]; });
        const int best = order.front(), worst = order.back(), second = order[n - 1];
        if (std::abs(fv[worst] - fv[best]) <= ftol * std::abs(fv[best]) + 1e-13) {
            r.converged = true;
            break;
        }
        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (int i = 0; i < n; ++i) centroid += pts[order[i]];
        centroid /= n;
        const Eigen::VectorXd xr = centroid + (centroid - pts[worst]);
        const double fr = f(xr);
        if (fr < fv[best]) {
            const Eigen::VectorXd xe = centroid + 2.0 * (centroid - pts[worst]);
            const double fe = f(xe);
            if (fe < fr) pts[worst] = xe, fv[worst] = fe;
            else pts[worst] = xr, fv[worst] = fr;
        } else if (fr < fv[second]) {
            pts[worst] = xr, fv[worst] = fr;
        } else {
            const bool outside = fr < fv[worst];
            const Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                                               : Eigen::VectorXd(centroid + 0.5 * (pts[worst] - centroid));
            const double fc = f(xc);
            if (fc < (outside ? fr : fv[worst])) {
                pts[worst] = xc, fv[worst] = fc;
            } else {
                for (int i = 0; i <= n; ++i) {
                    if (i == best) continue;
                    pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
                    fv[i] = f(pts[i]);
                }
            }
        }
    }
    const int best = int(std::min_element(fv.begin(), fv.end()) - fv.begin());
    r.x = pts[best];
    r.f = fv[best];
    return r;
}

struct ExpFit {
    double asymptote = 0;  // the converged value
    double rate = 0;
    double offset = 0;
    double rms = 0;
    bool converged = false;
};

// Fits s_i ~ A (1 - exp(-rate (i - i0))) for i = 0, 1, ... with 1/rate < 25,
// enforced by rate = 1/25 + exp(q). Restarted once from the first optimum.
inline ExpFit fit_convergence_exponential(const std::vector<double>& s) {
    if (s.size() < 8) throw ConfigError("exponential fit needs at least 8 iterations");
    const int n = static_cast<int>(s.size());
    constexpr double min_rate = 1.0 / 25.0;
    auto model = [&](const Eigen::VectorXd& p, int i) {
        const double rate = min_rate + std::exp(p(1));
        return p(0) * (1.0 - std::exp(-rate * (i - p(2))));
    };
    auto cost = [&](const Eigen::VectorXd& p) {
        double e = 0;
        for (int i = 0; i < n; ++i) {
            const double r = s[i] - model(p, i);
            e += r * r;
        }
        return std::sqrt(e / n);
    };
    double tail = 0;
    const int q = std::max(1, n / 4);
    for (int i = n - q; i < n; ++i) tail += s[i];
    tail /= q;
    const double scale = std::max(1e-3, std::abs(tail));
    Eigen::VectorXd p0(3), step(3);
    p0 << tail, std::log(0.3 - min_rate), 0.0;
    step << 0.2 * scale, 0.5, 0.5;
    SimplexResult r = nelder_mead(cost, p0, step, 2000);
    int used = r.iterations;
    if (used < 2000) {
        const SimplexResult r2 = nelder_mead(cost, r.x, step * 0.1, 2000 - used);
        used += r2.iterations;
        if (r2.f <= r.f) r = r2;
        else r.converged = r2.converged;
    }
    ExpFit fit;
    fit.asymptote = r.x(0);
    fit.rate = min_rate + std::exp(r.x(1));
    fit.offset = r.x(2);
    fit.rms = r.f;
    fit.converged = r.converged;
    return fit;
}

}  // namespace aomisreg
