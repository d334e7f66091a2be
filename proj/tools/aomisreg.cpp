#include <aomisreg/config.hpp>
#include <aomisreg/estimator_cl.hpp>
#include <aomisreg/estimator_modal.hpp>
#include <aomisreg/experiments.hpp>
#include <aomisreg/io.hpp>
#include <aomisreg/loop.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

using namespace aomisreg;

namespace {

constexpr int exit_ok = 0, exit_config = 2, exit_numerical = 3;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "results";
    bool full = false;
    bool no_plots = false;

    RunConfig load() const {
        RunConfig c = config.empty() ? RunConfig{} : load_config(config);
        if (seed) c.seed = *seed;
        return c;
    }
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "key = value configuration file");
    app->add_option("--seed", c.seed, "override the configured seed");
    app->add_option("--out", c.out, "output directory");
    app->add_flag("--full", c.full, "paper-scale grids instead of desk-scale");
    app->add_flag("--no-plots", c.no_plots, "skip raster plots");
}

// "4:50" -> 4..50
std::pair<int, int> parse_range(const std::string& s) {
    const auto colon = s.find(':');
    try {
        if (colon == std::string::npos) {
            const int v = std::stoi(s);
            return {v, v};
        }
        const int a = std::stoi(s.substr(0, colon)), b = std::stoi(s.substr(colon + 1));
        if (a < 1 || b < a) throw ConfigError("bad mode range " + s);
        return {a, b};
    } catch (const std::logic_error&) {
        throw ConfigError("bad mode range " + s);
    }
}

struct SimulateArgs {
    double shift_x = 0, shift_y = 0;  // percent of a pitch
    double clocking = 0;
    double n_ph = 100;
    int frames = 500;
    int burn_in = 100;
    double v0 = 0, theta0 = 0, r0 = 0.12;
    bool gpao = false;
    std::string record;
    std::string im, reference_im;
    std::string modes = "4:50";
    double poke_um = 4.0;
    double noise_px = 0.0;
};

int run_simulate(const Common& common, const SimulateArgs& a) {
    const RunConfig rc = common.load();
    AoSystem sys(rc.d_sub, rc.obscuration, rc.pitch_m);
    MisRegistration truth = MisRegistration::shift(a.shift_x / 100, a.shift_y / 100);
    truth.clocking_deg = a.clocking;
    const LoopConfig cfg = rc.loop();
    RngStream rng(rc.seed, stream_key({0x51u}));

    if (!a.im.empty() || !a.reference_im.empty()) {
        const auto [m0, m1] = parse_range(a.modes);
        const auto modes = mode_range(m0, m1);
        const KlBasis& kl = sys.kl();
        if (!a.im.empty()) {
            ModalIM im = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, truth, a.poke_um), kl, modes);
            if (a.noise_px > 0) add_slope_noise(im, pixel_noise_sigma(a.noise_px), rng);
            save_im(a.im, im);
            std::cout << "wrote " << a.im << "\n";
        }
        if (!a.reference_im.empty()) {
            save_im(a.reference_im, project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, {}, a.poke_um), kl, modes));
            std::cout << "wrote " << a.reference_im << "\n";
        }
        if (a.record.empty()) return exit_ok;
    }

    std::shared_ptr<LayerSet> layers;
    if (a.gpao || a.v0 > 0) {
        LayerSet ls = a.gpao ? gpao_profile() : single_layer(a.r0, a.v0, a.theta0);
        if (!a.gpao) ls.r0 = a.r0;
        layers = std::make_shared<LayerSet>(std::move(ls));
        layers->realize(12 * rc.d_sub * sys.n_px, rc.pitch_m / sys.n_px, rng.substream(1));
    }
    const TelemetryCube cube =
        run_closed_loop(cfg, sys, truth, layers, a.n_ph, a.frames, rng.substream(2), a.burn_in);
    if (!a.record.empty()) {
        save_telemetry(a.record, cube);
        std::cout << "wrote " << a.record << "\n";
    }
    const auto cs = empirical_correlation(split_telemetry(cube));
    const Vec2 d = estimate_shift_cl(cs, eta0_curve(cfg, cs.f),
                                     control_space_mask(cfg.n_mod, sys.dm.n_act(), cube.d_act, cs.k));
    std::printf("closed-loop estimate: dx = %.3f %%, dy = %.3f %% (true %.3f, %.3f)\n", 100 * d.x(), 100 * d.y(),
                a.shift_x, a.shift_y);
    return exit_ok;
}

int run_estimate_modal(const std::string& measured, const std::string& reference, int m_up,
                       const std::string& modes, const std::string& alpha_out) {
    ModalIM meas = load_im(measured), ref = load_im(reference);
    if (!modes.empty()) {
        const auto [m0, m1] = parse_range(modes);
        if (m1 - m0 + 1 != ref.n_items()) throw ConfigError("--modes does not match the stored IM width");
        ref.items = meas.items = mode_range(m0, m1);
    }
    const ModalEstimate e = estimate_shift_modal(meas, ref, ref.mask_valid, ref.mask_wfs, m_up);
    std::printf("shift: dx = %.4f, dy = %.4f pitches\namplitude: %.4f (x reference poke)\n", e.shift.x(),
                e.shift.y(), e.alpha_peak);
    if (!alpha_out.empty()) {
        save_array(alpha_out, to_array(e.map.up));
        std::cout << "wrote " << alpha_out << "\n";
    }
    return exit_ok;
}

int run_estimate_cl(const Common& common, const std::string& telemetry, const std::string& diag) {
    const RunConfig rc = common.load();
    TelemetryCube cube = load_telemetry(telemetry);
    LoopConfig cfg = rc.loop();
    cfg.tau_wfs = cfg.tau_lat = cfg.tau_dm = cfg.tau_rtc = cube.dt;
    const int n_act = DmModel::make(cube.d_act, rc.pitch_m).n_act();
    const auto cs = empirical_correlation(split_telemetry(cube));
    const auto mask = control_space_mask(cfg.n_mod, n_act, cube.d_act, cs.k);
    const Eta0Curve eta0 = eta0_curve(cfg, cs.f);
    const Vec2 d = estimate_shift_cl(cs, eta0, mask);
    std::printf("dx = %.3f %%, dy = %.3f %%\n", 100 * d.x(), 100 * d.y());
    if (!diag.empty()) {
        save_array(diag + "_eta_cl.aosc", to_array(cs.eta_cl));
        if (auto et = fit_eta_t(cs, d, mask)) save_array(diag + "_eta_t.aosc", to_array(Eigen::MatrixXd(*et)));
        save_array(diag + "_eta_2d.aosc", to_array(Eigen::MatrixXd(fit_eta_2d(cs, eta0))));
        save_array(diag + "_eta0.aosc", to_array(Eigen::MatrixXd(eta0.eta0)));
        std::cout << "wrote " << diag << "_eta_*.aosc\n";
    }
    return exit_ok;
}

int run_exp(const Common& common, const std::string& id) {
    ExperimentSpec s = default_spec(id, common.full);
    s.run = common.load();
    s.out = common.out;
    s.plots = !common.no_plots;
    const ResultTable t = run_experiment(s);
    for (const auto& p : emit_outputs(t, s.out, id, s.plots)) std::cout << "wrote " << p.string() << "\n";
    write_csv(std::cout, t);
    if (std::find(t.columns.begin(), t.columns.end(), "converged") != t.columns.end())
        for (std::size_t r = 0; r < t.rows.size(); ++r)
            if (t.num(r, "converged") == 0) {
                std::cerr << "convergence fit did not converge on row " << r << "\n";
                return exit_numerical;
            }
    return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lateral DM/WFS mis-registration toolkit"};
    app.require_subcommand(1);

    Common common;
    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "run the simulated AO loop and estimate the shift");
    add_common(simulate, common);
    simulate->add_option("--shift-x", sim.shift_x, "true shift, percent of a pitch");
    simulate->add_option("--shift-y", sim.shift_y, "true shift, percent of a pitch");
    simulate->add_option("--clocking", sim.clocking, "true clocking, degrees");
    simulate->add_option("--n-ph", sim.n_ph, "photons per subaperture per frame (0 = noiseless)");
    simulate->add_option("--frames", sim.frames, "recorded frames")->check(CLI::PositiveNumber);
    simulate->add_option("--burn-in", sim.burn_in, "frames discarded first")->check(CLI::NonNegativeNumber);
    simulate->add_option("--v0", sim.v0, "single frozen layer wind speed, m/s");
    simulate->add_option("--theta0", sim.theta0, "wind direction, degrees");
    simulate->add_option("--r0", sim.r0, "Fried parameter at 500 nm, m");
    simulate->add_flag("--gpao", sim.gpao, "five-layer reference atmosphere");
    simulate->add_option("--record", sim.record, "write telemetry (AOTC)");
    simulate->add_option("--im", sim.im, "write the modal IM at the true registration (AOIM)");
    simulate->add_option("--reference-im", sim.reference_im, "write the nominal modal IM (AOIM)");
    simulate->add_option("--modes", sim.modes, "KL modes of the IMs, first:last");
    simulate->add_option("--poke", sim.poke_um, "IM poke amplitude, um");
    simulate->add_option("--noise-px", sim.noise_px, "slope noise on the IM, pixels");

    std::string measured, reference, modes, alpha_out;
    int m_up = 8;
    auto* emodal = app.add_subcommand("estimate-modal", "2D modal correlation between two IMs");
    emodal->add_option("--measured", measured, "measured modal IM (AOIM)")->required();
    emodal->add_option("--reference", reference, "reference modal IM (AOIM)")->required();
    emodal->add_option("--m-up", m_up, "upsampling factor")->check(CLI::PositiveNumber);
    emodal->add_option("--modes", modes, "KL modes stored in the files, first:last");
    emodal->add_option("--alpha-out", alpha_out, "write the upsampled alpha map (AOSC)");

    std::string telemetry, diag;
    auto* ecl = app.add_subcommand("estimate-cl", "closed-loop estimate from recorded telemetry");
    add_common(ecl, common);
    ecl->add_option("--telemetry", telemetry, "telemetry cube (AOTC)")->required();
    ecl->add_option("--diagnostics", diag, "prefix for eta_cl / eta_t / eta_2d arrays (AOSC)");

    std::string exp_id;
    auto* exp = app.add_subcommand("exp", "reproduce a simulation study");
    add_common(exp, common);
    exp->add_option("id", exp_id, "experiment")->required()->check(CLI::IsMember(experiment_ids()));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? exit_ok : exit_config;
    }

    try {
        if (*simulate) return run_simulate(common, sim);
        if (*emodal) return run_estimate_modal(measured, reference, m_up, modes, alpha_out);
        if (*ecl) return run_estimate_cl(common, telemetry, diag);
        if (*exp) return run_exp(common, exp_id);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_config;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_config;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return exit_numerical;
    }
    return exit_config;
}
