#pragma once

#include "config.hpp"
#include "core.hpp"
#include "estimator_cl.hpp"
#include "estimator_modal.hpp"
#include "fit.hpp"
#include "io.hpp"
#include "loop.hpp"
#include "parallel.hpp"
#include "plot.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace aomisreg {

inline const std::vector<std::string>& experiment_ids() {
    static const std::vector<std::string> ids = {"sensitivity", "wind-bias",  "gpao",        "modal-noise",
                                                 "crosstalk",   "batch-size", "preset-align"};
    return ids;
}

// Shifts are in subaperture pitches throughout; tables report percent.
struct ExperimentSpec {
    std::string id;
    RunConfig run;
    std::vector<double> amplitudes;
    std::vector<double> angles_deg;
    std::vector<int> n_mods;
    std::vector<double> n_ph;
    std::vector<double> v0;
    std::vector<double> theta0_deg;
    std::vector<int> batch_sizes;
    std::vector<int> mode_counts;
    std::vector<double> sigmas_px;
    std::vector<double> stretches, clockings_deg;        // modal cross-talk
    std::vector<double> cl_stretches, cl_clockings_deg;  // closed-loop cross-talk
    int repetitions = 1;
    int iterations = 1;
    int cl_iterations = 10;
    int frames = 500;
    int burn_in = 100;
    double gain = 0.5;
    Vec2 initial = Vec2::Zero();
    double clocking_deg = 0;
    double r0 = 0.12;  // m at 500 nm
    double poke_um = 4.0;
    int m_up = 8;
    int first_mode = 4;
    int n_px = 8;
    int screen_factor = 12;
    std::filesystem::path out = "results";
    bool plots = true;

    std::uint64_t seed() const { return run.seed; }
};

inline std::vector<double> linspace_step(double a, double b, double step) {
    std::vector<double> v;
    for (int i = 0; a + i * step <= b + 1e-9 * step; ++i) v.push_back(a + i * step);
    return v;
}

// Desk-scale grids by default; `full` restores the original grids.
inline ExperimentSpec default_spec(const std::string& id, bool full = false) {
    ExperimentSpec s;
    s.id = id;
    if (id == "sensitivity") {
        s.amplitudes = linspace_step(0, 0.70, 0.05);
        s.angles_deg = linspace_step(0, 355, full ? 5 : 45);
        s.n_mods = {250, 500, 800, 1200};
        s.n_ph = {100};
        s.repetitions = full ? 20 : 5;
    } else if (id == "batch-size") {
        s.amplitudes = {0.10};
        s.n_mods = {500};
        s.n_ph = {100};
        s.batch_sizes = {50, 100, 200, 500, 1000, 2000, 5000};
        s.repetitions = 100;
    } else if (id == "wind-bias") {
        s.n_mods = {500};
        s.n_ph = full ? std::vector<double>{10, 100, 1000} : std::vector<double>{100};
        s.v0 = full ? std::vector<double>{1, 5, 10, 15, 20, 25, 30, 37.5, 45, 60, 80}
                    : std::vector<double>{10, 20, 37.5};
        s.theta0_deg = full ? linspace_step(0, 90, 7.5) : std::vector<double>{0, 45, 90};
        s.iterations = 40;
        s.gain = 0.5;
    } else if (id == "gpao") {
        s.n_mods = {500};
        s.n_ph = {10, 100, 1000};
        s.iterations = 40;
        s.gain = 0.5;
        s.initial = 0.70 * Vec2(std::cos(35 * deg), std::sin(35 * deg));
        s.r0 = 0.10;
    } else if (id == "modal-noise") {
        s.sigmas_px = {0.0, 0.1, 0.25, 0.5};
        s.mode_counts = {10, 20, 50, 100};
        s.repetitions = full ? 1000 : 200;
        s.initial = {4.18, 4.18};
        s.m_up = 100;
    } else if (id == "crosstalk") {
        s.stretches = {0.8, 0.9, 0.95, 1.05, 1.1, 1.2};
        s.clockings_deg = {0, 2.5, 5, 10, 15, 20};
        s.cl_stretches = {0.98, 0.99, 1.01, 1.02, 1.05};
        s.cl_clockings_deg = {0, 0.75, 1.5, 3};
        s.iterations = 4;
        s.cl_iterations = full ? 20 : 10;
        s.sigmas_px = {0.25};
        s.n_mods = {500};
        s.n_ph = {100};
    } else if (id == "preset-align") {
        s.iterations = 5;
        s.gain = 0.8;
        s.initial = {-9.085, -3.774};
        s.clocking_deg = 35;
        s.n_ph = {100};
        s.v0 = {8.4};
        s.theta0_deg = {0};
        s.r0 = 0.14;
        s.sigmas_px = {};
    } else {
        throw ConfigError("unknown experiment " + id);
    }
    return s;
}

namespace detail {

inline std::uint64_t id_hash(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ull;
    return h;
}

// One stream per grid point, independent of scheduling.
inline RngStream stream_for(const ExperimentSpec& s, std::initializer_list<std::uint64_t> idx) {
    std::uint64_t k = id_hash(s.id);
    for (auto i : idx) k = stream_key({k, i});
    return RngStream(s.seed(), k);
}

struct Stats {
    double mean = 0, std = 0;
    int n = 0;
};

inline Stats stats(const std::vector<double>& v) {
    Stats s;
    s.n = static_cast<int>(v.size());
    if (!s.n) return s;
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / s.n;
    double q = 0;
    for (double x : v) q += (x - s.mean) * (x - s.mean);
    s.std = s.n > 1 ? std::sqrt(q / (s.n - 1)) : 0.0;
    return s;
}

inline Vec2 rotate(const Vec2& v, double angle_deg) {
    const double c = std::cos(angle_deg * deg), s = std::sin(angle_deg * deg);
    return {c * v.x() - s * v.y(), s * v.x() + c * v.y()};
}

inline AoSystem make_system(const ExperimentSpec& s) {
    return AoSystem(s.run.d_sub, s.run.obscuration, s.run.pitch_m, s.n_px);
}

inline LoopConfig loop_for(const ExperimentSpec& s, int n_mod) {
    LoopConfig c = s.run.loop();
    c.n_mod = n_mod;
    return c;
}

inline Vec2 cl_estimate(const AoSystem& sys, const Eigen::MatrixXd& cmds, const LoopConfig& cfg) {
    const TelemetryCube cube = sys.to_cube(cmds, cfg);
    const CorrelationSpectrum cs = empirical_correlation(split_telemetry(cube));
    const auto mask = control_space_mask(cfg.n_mod, sys.dm.n_act(), cube.d_act, cs.k);
    return estimate_shift_cl(cs, eta0_curve(cfg, cs.f), mask);
}

inline int screen_pixels(const ExperimentSpec& s) { return s.screen_factor * s.run.d_sub * s.n_px; }

inline std::shared_ptr<LayerSet> realize_layers(LayerSet ls, const ExperimentSpec& s, const RngStream& rng) {
    auto p = std::make_shared<LayerSet>(std::move(ls));
    p->realize(screen_pixels(s), s.run.pitch_m / s.n_px, rng);
    return p;
}

}  // namespace detail

// ---------------------------------------------------------------- sensitivity

// Noise-only batches at known shifts. Estimates are de-rotated by the true
// angle, so "par" is along the injected shift.
inline ResultTable exp_sensitivity(const ExperimentSpec& s) {
    AoSystem sys = detail::make_system(s);
    std::vector<const CommandMatrix*> cms;
    for (int n : s.n_mods) cms.push_back(&sys.command_matrix(n));
    const double sigma = sys.photon_sigma(s.n_ph.at(0), s.r0);
    const Eigen::MatrixXd nominal = sys.plant({});

    struct Job {
        int ia, it;
    };
    std::vector<Job> jobs;
    for (int ia = 0; ia < int(s.amplitudes.size()); ++ia)
        for (int it = 0; it < int(s.angles_deg.size()); ++it) jobs.push_back({ia, it});
    const int nm = static_cast<int>(s.n_mods.size());
    // [job][n_mod] -> de-rotated estimates
    std::vector<std::vector<std::vector<Vec2>>> est(jobs.size(), std::vector<std::vector<Vec2>>(nm));
    std::vector<std::vector<std::uint8_t>> sat(jobs.size(), std::vector<std::uint8_t>(nm, 0));
    parallel_for(jobs.size(), [&](std::size_t j) {
        const double amp = s.amplitudes[jobs[j].ia], ang = s.angles_deg[jobs[j].it];
        const Vec2 shift = amp * Vec2(std::cos(ang * deg), std::sin(ang * deg));
        const Eigen::MatrixXd D = amp == 0 ? nominal : sys.plant(MisRegistration::shift(shift.x(), shift.y()));
        for (int m = 0; m < nm; ++m) {
            const LoopConfig cfg = detail::loop_for(s, s.n_mods[m]);
            ClosedLoop loop(cfg, *cms[m], D, sigma, {},
                            detail::stream_for(s, {std::uint64_t(jobs[j].ia), std::uint64_t(jobs[j].it),
                                                   std::uint64_t(m)}));
            loop.run(s.burn_in);
            for (int r = 0; r < s.repetitions; ++r)
                est[j][m].push_back(detail::rotate(detail::cl_estimate(sys, loop.run(s.frames), cfg), -ang));
            sat[j][m] = loop.saturated();
        }
    });
    ResultTable t;
    t.columns = {"n_mod", "amplitude_pct", "mean_par_pct", "std_par_pct", "mean_perp_pct", "std_perp_pct", "n",
                 "saturated_frac"};
    for (int m = 0; m < nm; ++m)
        for (int ia = 0; ia < int(s.amplitudes.size()); ++ia) {
            std::vector<double> par, perp;
            int n_sat = 0, n_loops = 0;
            for (std::size_t j = 0; j < jobs.size(); ++j) {
                if (jobs[j].ia != ia) continue;
                for (const auto& e : est[j][m]) par.push_back(100 * e.x()), perp.push_back(100 * e.y());
                n_sat += sat[j][m];
                ++n_loops;
            }
            const auto a = detail::stats(par), b = detail::stats(perp);
            t.add(s.n_mods[m], 100 * s.amplitudes[ia], a.mean, a.std, b.mean, b.std, a.n,
                  double(n_sat) / std::max(1, n_loops));
        }
    return t;
}

struct LineFit {
    double slope = 0, intercept = 0, r2 = 0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    const int n = static_cast<int>(x.size());
    if (n < 2) throw ConfigError("line fit needs two points");
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    LineFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = syy > 0 ? sxy * sxy / (sxx * syy) : 1.0;
    return f;
}

// Mean estimate against amplitude for one n_mod, up to max_pct.
inline LineFit sensitivity_fit(const ResultTable& t, int n_mod, double max_pct) {
    std::vector<double> x, y;
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        if (int(t.num(r, "n_mod")) == n_mod && t.num(r, "amplitude_pct") <= max_pct + 1e-9) {
            x.push_back(t.num(r, "amplitude_pct"));
            y.push_back(t.num(r, "mean_par_pct"));
        }
    return fit_line(x, y);
}

// ---------------------------------------------------------------- batch size

inline ResultTable exp_batch_size(const ExperimentSpec& s) {
    AoSystem sys = detail::make_system(s);
    const int n_mod = s.n_mods.at(0);
    const CommandMatrix& cm = sys.command_matrix(n_mod);
    const LoopConfig cfg = detail::loop_for(s, n_mod);
    const Eigen::MatrixXd D = sys.plant(MisRegistration::shift(s.amplitudes.at(0), 0));
    const double sigma = sys.photon_sigma(s.n_ph.at(0), s.r0);
    const int nb = static_cast<int>(s.batch_sizes.size());
    std::vector<std::vector<Vec2>> est(nb);
    parallel_for(nb, [&](std::size_t b) {
        ClosedLoop loop(cfg, cm, D, sigma, {}, detail::stream_for(s, {b}));
        loop.run(s.burn_in);
        for (int r = 0; r < s.repetitions; ++r)
            est[b].push_back(detail::cl_estimate(sys, loop.run(s.batch_sizes[b]), cfg));
    });
    ResultTable t;
    t.columns = {"n_frames", "mean_x_pct", "std_x_pct", "mean_y_pct", "std_y_pct", "n"};
    for (int b = 0; b < nb; ++b) {
        std::vector<double> x, y;
        for (const auto& e : est[b]) x.push_back(100 * e.x()), y.push_back(100 * e.y());
        const auto a = detail::stats(x), c = detail::stats(y);
        t.add(s.batch_sizes[b], a.mean, a.std, c.mean, c.std, a.n);
    }
    return t;
}

// Exponent of std (both axes pooled) against batch length, log-log fit.
inline double batch_std_exponent(const ResultTable& t) {
    std::vector<double> x, y;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const double sx = t.num(r, "std_x_pct"), sy = t.num(r, "std_y_pct");
        x.push_back(std::log(t.num(r, "n_frames")));
        y.push_back(std::log(std::sqrt(0.5 * (sx * sx + sy * sy))));
    }
    return fit_line(x, y).slope;
}

// ---------------------------------------------------------------- corrective loops under turbulence

struct CorrectiveRun {
    std::vector<Vec2> delta;  // delta_0 .. delta_n
    std::vector<Vec2> estimate;
    bool saturated = false;
};

// Closed loop kept running while the DM is moved after every batch.
inline CorrectiveRun closed_loop_corrective(const AoSystem& sys, const CommandMatrix& cm, const LoopConfig& cfg,
                                            MisRegistration truth, std::shared_ptr<const LayerSet> layers,
                                            double sigma, int iterations, int frames, int burn_in, double gain,
                                            RngStream rng) {
    CorrectiveRun out;
    SlopeSource src;
    if (layers) src = frozen_flow_source(layers, sys.grid, sys.n_px, cfg.tau_rtc);
    ClosedLoop loop(cfg, cm, sys.plant(truth), sigma, src, rng);
    loop.run(burn_in);
    out.delta.push_back(truth.translation());
    for (int i = 0; i < iterations; ++i) {
        const Vec2 e = detail::cl_estimate(sys, loop.run(frames), cfg);
        out.estimate.push_back(e);
        truth = corrective_loop_step(truth, e, gain);
        out.delta.push_back(truth.translation());
        if (i + 1 < iterations) loop.set_plant(sys.plant(truth));
    }
    out.saturated = loop.saturated();
    return out;
}

inline ResultTable exp_wind_bias(const ExperimentSpec& s) {
    AoSystem sys = detail::make_system(s);
    const int n_mod = s.n_mods.at(0);
    const CommandMatrix& cm = sys.command_matrix(n_mod);
    const LoopConfig cfg = detail::loop_for(s, n_mod);
    struct Job {
        int ip, iv, it;
    };
    std::vector<Job> jobs;
    for (int ip = 0; ip < int(s.n_ph.size()); ++ip)
        for (int iv = 0; iv < int(s.v0.size()); ++iv)
            for (int it = 0; it < int(s.theta0_deg.size()); ++it) jobs.push_back({ip, iv, it});
    std::vector<CorrectiveRun> runs(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t j) {
        const auto [ip, iv, it] = jobs[j];
        const RngStream rng = detail::stream_for(s, {std::uint64_t(ip), std::uint64_t(iv), std::uint64_t(it)});
        auto layers = detail::realize_layers(single_layer(s.r0, s.v0[iv], s.theta0_deg[it]), s, rng.substream(1));
        const int n_it = s.n_ph[ip] >= 1000 && s.iterations == 40 ? 60 : s.iterations;
        runs[j] = closed_loop_corrective(sys, cm, cfg, MisRegistration::shift(s.initial.x(), s.initial.y()), layers,
                                         sys.photon_sigma(s.n_ph[ip], s.r0), n_it, s.frames, s.burn_in, s.gain,
                                         rng.substream(2));
    });
    ResultTable t;
    t.columns = {"n_ph",         "v0",           "theta0_deg",        "bias_par_pct", "bias_perp_pct",
                 "tail_mean_par_pct", "tail_std_par_pct", "tail_std_perp_pct", "rate_par", "converged"};
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        const auto [ip, iv, it] = jobs[j];
        std::vector<double> par, perp;
        for (const auto& d : runs[j].delta) {
            const Vec2 w = detail::rotate(d, -s.theta0_deg[it]);
            par.push_back(100 * w.x());
            perp.push_back(100 * w.y());
        }
        const ExpFit fp = fit_convergence_exponential(par), fq = fit_convergence_exponential(perp);
        const int half = static_cast<int>(par.size()) / 2;
        const auto tp = detail::stats({par.begin() + half, par.end()});
        const auto tq = detail::stats({perp.begin() + half, perp.end()});
        t.add(s.n_ph[ip], s.v0[iv], s.theta0_deg[it], fp.asymptote, fq.asymptote, tp.mean, tp.std, tq.std, fp.rate,
              int(fp.converged && fq.converged));
    }
    return t;
}

inline ResultTable exp_gpao_convergence(const ExperimentSpec& s) {
    AoSystem sys = detail::make_system(s);
    const int n_mod = s.n_mods.at(0);
    const CommandMatrix& cm = sys.command_matrix(n_mod);
    const LoopConfig cfg = detail::loop_for(s, n_mod);
    LayerSet profile = gpao_profile();
    profile.r0 = s.r0;
    // same atmosphere for every noise level
    const auto layers = detail::realize_layers(profile, s, detail::stream_for(s, {1000}));
    std::vector<CorrectiveRun> runs(s.n_ph.size());
    parallel_for(s.n_ph.size(), [&](std::size_t ip) {
        const RngStream rng = detail::stream_for(s, {ip});
        runs[ip] = closed_loop_corrective(sys, cm, cfg, MisRegistration::shift(s.initial.x(), s.initial.y()), layers,
                                          sys.photon_sigma(s.n_ph[ip], s.r0), s.iterations, s.frames, s.burn_in,
                                          s.gain, rng);
    });
    ResultTable t;
    t.columns = {"n_ph", "iteration", "delta_x_pct", "delta_y_pct", "abs_pct", "saturated"};
    for (std::size_t ip = 0; ip < s.n_ph.size(); ++ip)
        for (std::size_t i = 0; i < runs[ip].delta.size(); ++i) {
            const Vec2 d = 100 * runs[ip].delta[i];
            t.add(s.n_ph[ip], int(i), d.x(), d.y(), d.norm(), int(runs[ip].saturated));
        }
    return t;
}

// Mean |delta| over the last `tail` iterations for one noise level.
inline double converged_abs(const ResultTable& t, double n_ph, int tail = 10) {
    std::vector<double> v;
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        if (t.num(r, "n_ph") == n_ph) v.push_back(t.num(r, "abs_pct"));
    if (v.empty()) throw ConfigError("no rows for that photon count");
    tail = std::min<int>(tail, int(v.size()));
    return std::accumulate(v.end() - tail, v.end(), 0.0) / tail;
}

// ---------------------------------------------------------------- modal estimator

struct ModalBench {
    ModalIM reference, measured;  // modes first_mode .. max mode count
};

inline ModalBench modal_bench(const AoSystem& sys, const KlBasis& kl, const MisRegistration& truth, int first,
                              int last, double poke_um, const MisRegistration& model = {}) {
    const auto modes = mode_range(first, last);
    ModalBench b;
    b.reference = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, model, poke_um), kl, modes);
    b.measured = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, truth, poke_um), kl, modes);
    return b;
}

inline ModalIM first_items(const ModalIM& im, int n) {
    ModalIM out = im;
    out.data = im.data.leftCols(n);
    out.items.resize(n);
    return out;
}

inline ResultTable exp_modal_noise_sweep(const ExperimentSpec& s) {
    AoSystem sys = detail::make_system(s);
    const KlBasis& kl = sys.kl();
    const int max_modes = *std::max_element(s.mode_counts.begin(), s.mode_counts.end());
    const ModalBench bench =
        modal_bench(sys, kl, MisRegistration::shift(s.initial.x(), s.initial.y()), s.first_mode, max_modes, s.poke_um);
    struct Job {
        int is, im, r;
    };
    std::vector<Job> jobs;
    for (int is = 0; is < int(s.sigmas_px.size()); ++is)
        for (int im = 0; im < int(s.mode_counts.size()); ++im)
            for (int r = 0; r < s.repetitions; ++r) jobs.push_back({is, im, r});
    std::vector<Vec2> est(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t j) {
        const auto [is, im, r] = jobs[j];
        const int n = s.mode_counts[im] - s.first_mode + 1;
        ModalIM meas = first_items(bench.measured, n);
        RngStream rng = detail::stream_for(s, {std::uint64_t(is), std::uint64_t(im), std::uint64_t(r)});
        if (s.sigmas_px[is] > 0) add_slope_noise(meas, pixel_noise_sigma(s.sigmas_px[is]), rng);
        est[j] = estimate_shift_modal(meas, first_items(bench.reference, n), sys.grid.mask_valid, sys.grid.mask_wfs,
                                      s.m_up)
                     .shift;
    });
    ResultTable t;
    t.columns = {"sigma_px", "m_max", "bias_x_pct", "bias_y_pct", "std_x_pct", "std_y_pct", "n"};
    for (int is = 0; is < int(s.sigmas_px.size()); ++is)
        for (int im = 0; im < int(s.mode_counts.size()); ++im) {
            std::vector<double> x, y;
            for (std::size_t j = 0; j < jobs.size(); ++j)
                if (jobs[j].is == is && jobs[j].im == im) {
                    x.push_back(100 * (est[j].x() - s.initial.x()));
                    y.push_back(100 * (est[j].y() - s.initial.y()));
                }
            const auto a = detail::stats(x), b = detail::stats(y);
            t.add(s.sigmas_px[is], s.mode_counts[im], a.mean, b.mean, a.std, b.std, a.n);
        }
    return t;
}

// ---------------------------------------------------------------- cross-talk

inline ResultTable exp_crosstalk(const ExperimentSpec& s) {
    AoSystem sys = detail::make_system(s);
    const KlBasis& kl = sys.kl();
    const int n_mod = s.n_mods.at(0);
    const CommandMatrix& cm = sys.command_matrix(n_mod);
    const LoopConfig cfg = detail::loop_for(s, n_mod);
    const auto modes = mode_range(s.first_mode, 50);
    const ModalIM reference = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, {}, s.poke_um), kl, modes);
    const double sigma_px = s.sigmas_px.empty() ? 0.25 : s.sigmas_px[0];

    struct Job {
        bool modal;
        bool stretch;
        double value;
    };
    std::vector<Job> jobs;
    for (double v : s.stretches) jobs.push_back({true, true, v});
    for (double v : s.clockings_deg) jobs.push_back({true, false, v});
    for (double v : s.cl_stretches) jobs.push_back({false, true, v});
    for (double v : s.cl_clockings_deg) jobs.push_back({false, false, v});
    std::vector<std::vector<Vec2>> series(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t j) {
        const Job& jb = jobs[j];
        MisRegistration truth;
        if (jb.stretch) truth.mag_x = truth.mag_y = jb.value;
        else truth.clocking_deg = jb.value;
        RngStream rng = detail::stream_for(s, {j});
        if (jb.modal) {
            truth.shift_x = 4.18, truth.shift_y = 3.73;
            series[j].push_back(truth.translation());
            for (int i = 0; i < s.iterations; ++i) {
                ModalIM meas = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, truth, s.poke_um), kl, modes);
                add_slope_noise(meas, pixel_noise_sigma(sigma_px), rng);
                const Vec2 e =
                    estimate_shift_modal(meas, reference, sys.grid.mask_valid, sys.grid.mask_wfs, s.m_up).shift;
                truth = corrective_loop_step(truth, e, 1.0);
                series[j].push_back(truth.translation());
            }
        } else {
            truth.shift_x = 0.25;
            series[j] = closed_loop_corrective(sys, cm, cfg, truth, nullptr, sys.photon_sigma(s.n_ph.at(0), s.r0),
                                               s.cl_iterations, s.frames, s.burn_in, 0.5, rng)
                            .delta;
        }
    });
    ResultTable t;
    t.columns = {"estimator", "kind", "value", "iteration", "delta_x_pct", "delta_y_pct", "abs_pct"};
    for (std::size_t j = 0; j < jobs.size(); ++j)
        for (std::size_t i = 0; i < series[j].size(); ++i) {
            const Vec2 d = 100 * series[j][i];
            t.add(std::string(jobs[j].modal ? "modal" : "closed-loop"),
                  std::string(jobs[j].stretch ? "stretch" : "clocking"), jobs[j].value, int(i), d.x(), d.y(),
                  d.norm());
        }
    return t;
}

// ---------------------------------------------------------------- preset alignment

// Open-loop push-pull modal IMs under frozen flow; the DM clocking is known
// to the model, only the shift is corrected.
inline ResultTable exp_preset_align(const ExperimentSpec& s) {
    AoSystem sys = detail::make_system(s);
    const KlBasis& kl = sys.kl();
    const auto modes = mode_range(s.first_mode, 50);
    MisRegistration model;
    model.clocking_deg = s.clocking_deg;
    const ModalIM reference = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, model, s.poke_um), kl, modes);
    std::shared_ptr<LayerSet> layers;
    if (!s.v0.empty())
        layers = detail::realize_layers(single_layer(s.r0, s.v0[0], s.theta0_deg.empty() ? 0 : s.theta0_deg[0]), s,
                                        detail::stream_for(s, {0}));
    const double sigma = s.n_ph.empty() ? 0.0 : sys.photon_sigma(s.n_ph[0], s.r0);
    RngStream rng = detail::stream_for(s, {1});
    MisRegistration truth = model;
    truth.shift_x = s.initial.x(), truth.shift_y = s.initial.y();
    ResultTable t;
    t.columns = {"iteration", "delta_x_pct", "delta_y_pct", "abs_pct", "est_x_pct", "est_y_pct"};
    const double period = 1.0;  // s between IM acquisitions
    for (int i = 0; i <= s.iterations; ++i) {
        Vec2 e = Vec2::Zero();
        if (i < s.iterations) {
            const ModalIM meas = measure_modal_im_pushpull(sys.dm, sys.grid, truth, kl, modes, s.poke_um, layers,
                                                           s.n_px, sigma, rng, s.run.tau_s, i * period);
            e = estimate_shift_modal(meas, reference, sys.grid.mask_valid, sys.grid.mask_wfs, s.m_up).shift;
        }
        const Vec2 d = 100 * truth.translation();
        t.add(i, d.x(), d.y(), d.norm(), 100 * e.x(), 100 * e.y());
        truth = corrective_loop_step(truth, e, s.gain);
    }
    return t;
}

// ---------------------------------------------------------------- dispatch and output

inline ResultTable run_experiment(const ExperimentSpec& s) {
    if (s.id == "sensitivity") return exp_sensitivity(s);
    if (s.id == "batch-size") return exp_batch_size(s);
    if (s.id == "wind-bias") return exp_wind_bias(s);
    if (s.id == "gpao") return exp_gpao_convergence(s);
    if (s.id == "modal-noise") return exp_modal_noise_sweep(s);
    if (s.id == "crosstalk") return exp_crosstalk(s);
    if (s.id == "preset-align") return exp_preset_align(s);
    throw ConfigError("unknown experiment " + s.id);
}

struct PlotSpec {
    std::string x, y;
    std::vector<std::string> group;
};

inline PlotSpec plot_spec(const std::string& id) {
    static const std::map<std::string, PlotSpec> m = {
        {"sensitivity", {"amplitude_pct", "mean_par_pct", {"n_mod"}}},
        {"batch-size", {"n_frames", "std_x_pct", {}}},
        {"wind-bias", {"v0", "bias_par_pct", {"n_ph", "theta0_deg"}}},
        {"gpao", {"iteration", "abs_pct", {"n_ph"}}},
        {"modal-noise", {"m_max", "std_x_pct", {"sigma_px"}}},
        {"crosstalk", {"iteration", "abs_pct", {"estimator", "kind", "value"}}},
        {"preset-align", {"iteration", "abs_pct", {}}},
    };
    return m.at(id);
}

// CSV always, one PPM line plot per experiment unless disabled.
inline std::vector<std::filesystem::path> emit_outputs(const ResultTable& t, const std::filesystem::path& dir,
                                                       const std::string& id, bool plots) {
    std::vector<std::filesystem::path> written;
    const auto csv = dir / (id + ".csv");
    save_csv(csv, t);
    written.push_back(csv);
    if (!plots) return written;
    const PlotSpec ps = plot_spec(id);
    std::map<std::string, plot::Series> groups;
    std::vector<std::string> order;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        std::string key;
        for (const auto& g : ps.group) key += t.rows[r][t.col(g)] + "|";
        if (!groups.count(key)) order.push_back(key);
        groups[key].x.push_back(t.num(r, ps.x));
        groups[key].y.push_back(t.num(r, ps.y));
    }
    std::vector<plot::Series> series;
    for (const auto& k : order) series.push_back(groups[k]);
    const auto img = dir / (id + ".ppm");
    plot::line_plot(img, series);
    written.push_back(img);
    return written;
}

}  // namespace aomisreg
