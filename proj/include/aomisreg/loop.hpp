#pragma once

#include "core.hpp"
#include "optics.hpp"
#include "rng.hpp"
#include "turbulence.hpp"

#include <Eigen/SVD>

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <vector>

namespace aomisreg {

// Least-squares pseudo-inverse with a cutoff relative to the largest singular value.
inline Eigen::MatrixXd pinv(const Eigen::MatrixXd& A, double rcond = 1e-7, int* rank = nullptr) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& s = svd.singularValues();
    const double cut = s.size() ? rcond * s(0) : 0.0;
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(s.size());
    int r = 0;
    for (int i = 0; i < s.size(); ++i)
        if (s(i) > cut) {
            inv(i) = 1.0 / s(i);
            ++r;
        }
    if (rank) *rank = r;
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

struct CommandMatrix {
    Eigen::MatrixXd R;   // n_mod x n_slopes: slopes -> modal coefficients
    Eigen::MatrixXd Kc;  // n_act x n_mod: controlled KL modes (2 .. n_mod+1)
    int n_mod = 0;
    int rank = 0;

    Eigen::MatrixXd full() const { return Kc * R; }
};

// im: compact slopes per unit command (rows = slopes, cols = actuators).
// Piston is never controlled, so the modes are KL 2 .. n_mod + 1.
inline CommandMatrix build_command_matrix(const Eigen::MatrixXd& im, const KlBasis& kl, int n_mod) {
    if (n_mod < 1 || n_mod + 1 > kl.modes.cols()) throw ConfigError("n_mod exceeds KL basis");
    if (im.cols() != kl.modes.rows()) throw ConfigError("IM does not match KL basis");
    CommandMatrix cm;
    cm.n_mod = n_mod;
    cm.Kc = kl.modes.middleCols(1, n_mod);
    cm.R = pinv(im * cm.Kc, 1e-7, &cm.rank);
    return cm;
}

inline CommandMatrix build_command_matrix(const ZonalIM& reference, const KlBasis& kl, int n_mod) {
    return build_command_matrix(reference.compact(), kl, n_mod);
}

// Controlled-space radius in cycles per d_act-wide pupil.
inline double control_radius(int n_mod, int n_act, int d_act) {
    return d_act * std::sqrt(double(n_mod) / (pi * n_act));
}

struct TelemetryCube {
    int d_act = 0;
    double dt = 1e-3;
    double clip = 1.0;
    LoopConfig config;
    std::optional<MisRegistration> true_misreg;
    Eigen::MatrixXd frames;  // d_act^2 x n_frames, node iy * d_act + ix

    int n_frames() const { return static_cast<int>(frames.cols()); }
};

// Writes the compact slope vector of frame k.
using SlopeSource = std::function<void(long frame, Eigen::Ref<Eigen::VectorXd> out)>;

// Frozen-flow turbulence seen through the averaged finite-difference SH model.
inline SlopeSource frozen_flow_source(std::shared_ptr<const LayerSet> layers,
                                      const SubapertureGrid& g, int n_px, double dt,
                                      double t0 = 0.0) {
    auto cells = std::make_shared<std::vector<int>>(g.wfs_cells());
    return [layers, g, n_px, dt, t0, cells](long k, Eigen::Ref<Eigen::VectorXd> out) {
        const Aperture ap{g.d_sub * n_px, 0, 0};
        const Grid opd = layers->sample(t0 + k * dt, ap) * (layers->lambda0 / (2 * pi));
        sh_slopes_opd_compact(opd, g, *cells, out.data());
    };
}

// Leaky-integrator loop driven by a linear plant. The WFS at frame k sees the
// command computed delay_frames - 1 updates earlier:
//   m_k = s_k - D c_{k-d+1} + n_k,  c_{k+1} = clip((1 - g_leak) c_k + g_int Kc R m_k).
// While no command saturates, c stays in the span of Kc and the recurrence
// runs on modal coefficients; after the first clip it runs on actuators.
class ClosedLoop {
public:
    ClosedLoop(const LoopConfig& cfg, const CommandMatrix& cm, const Eigen::MatrixXd& d_true,
               double noise_sigma, SlopeSource source, RngStream rng)
        : cfg_(cfg), cm_(cm), sigma_(noise_sigma), source_(std::move(source)), rng_(rng) {
        cfg_.validate(static_cast<int>(cm.Kc.rows()));
        if (d_true.rows() != cm.R.cols() || d_true.cols() != cm.Kc.rows())
            throw ConfigError("plant does not match command matrix");
        B_.noalias() = cm_.R * d_true;
        G_.noalias() = B_ * cm_.Kc;
        const int d = cfg_.delay_frames;
        a_hist_ = Eigen::MatrixXd::Zero(cm_.n_mod, d);
        c_hist_ = Eigen::MatrixXd::Zero(cm_.Kc.rows(), d);
    }

    bool saturated() const { return !modal_; }
    long frame() const { return frame_; }

    // Swap the plant while the loop keeps running (the DM was moved).
    void set_plant(const Eigen::MatrixXd& d_true) {
        if (d_true.rows() != cm_.R.cols() || d_true.cols() != cm_.Kc.rows())
            throw ConfigError("plant does not match command matrix");
        B_.noalias() = cm_.R * d_true;
        G_.noalias() = B_ * cm_.Kc;
    }

    // Returns n_frames commands (n_act x n_frames), c_{k+1} for each frame k.
    Eigen::MatrixXd run(int n_frames) {
        const int n_act = static_cast<int>(cm_.Kc.rows()), n_mod = cm_.n_mod;
        const int n_s = static_cast<int>(cm_.R.cols());
        Eigen::MatrixXd out(n_act, n_frames);
        constexpr int chunk = 500;
        Eigen::MatrixXd S(n_s, chunk), RS, A(n_mod, chunk);
        for (int f0 = 0; f0 < n_frames; f0 += chunk) {
            const int n = std::min(chunk, n_frames - f0);
            for (int j = 0; j < n; ++j) {
                auto col = S.col(j);
                if (source_) source_(frame_ + j, col);
                else col.setZero();
                if (sigma_ > 0)
                    for (int i = 0; i < n_s; ++i) col(i) += sigma_ * rng_.normal();
            }
            RS.noalias() = cm_.R * S.leftCols(n);
            int j = 0;
            if (modal_) {
                const Eigen::MatrixXd a_start = a_hist_;
                for (; j < n; ++j) step_modal(RS.col(j), A.col(j));
                auto C = out.middleCols(f0, n);
                C.noalias() = cm_.Kc * A.leftCols(n);
                int bad = -1;
                for (int k = 0; k < n && bad < 0; ++k)
                    if (C.col(k).cwiseAbs().maxCoeff() > cfg_.clip) bad = k;
                if (bad >= 0) {
                    // rebuild the actuator history at frame `bad` and switch
                    const int d = cfg_.delay_frames;
                    Eigen::MatrixXd hist(n_mod, d);
                    for (int h = 0; h < d; ++h) {
                        const int idx = bad - d + h;  // A column holding c_{bad-d+h+1}
                        hist.col(h) = idx >= 0 ? Eigen::VectorXd(A.col(idx))
                                               : Eigen::VectorXd(a_start.col(d + idx));
                    }
                    c_hist_.noalias() = cm_.Kc * hist;
                    modal_ = false;
                    j = bad;
                } else {
                    frame_ += n;
                    continue;
                }
            }
            for (; j < n; ++j) {
                step_actuator(RS.col(j));
                out.col(f0 + j) = c_hist_.col(cfg_.delay_frames - 1);
            }
            frame_ += n;
        }
        if (!out.allFinite()) throw NumericalError("non-finite loop commands");
        return out;
    }

private:
    // history columns are oldest first; the last column is the newest command
    void step_modal(const Eigen::Ref<const Eigen::VectorXd>& rs, Eigen::Ref<Eigen::VectorXd> a_new) {
        const int d = cfg_.delay_frames;
        Eigen::VectorXd u = rs;
        u.noalias() -= G_ * a_hist_.col(0);
        a_new = (1.0 - cfg_.g_leak) * a_hist_.col(d - 1) + cfg_.g_int * u;
        for (int h = 0; h + 1 < d; ++h) a_hist_.col(h) = a_hist_.col(h + 1);
        a_hist_.col(d - 1) = a_new;
    }

    void step_actuator(const Eigen::Ref<const Eigen::VectorXd>& rs) {
        const int d = cfg_.delay_frames;
        Eigen::VectorXd u = rs;
        u.noalias() -= B_ * c_hist_.col(0);
        Eigen::VectorXd c = (1.0 - cfg_.g_leak) * c_hist_.col(d - 1);
        c.noalias() += cfg_.g_int * (cm_.Kc * u);
        c = c.cwiseMax(-cfg_.clip).cwiseMin(cfg_.clip);
        for (int h = 0; h + 1 < d; ++h) c_hist_.col(h) = c_hist_.col(h + 1);
        c_hist_.col(d - 1) = c;
    }

    LoopConfig cfg_;
    CommandMatrix cm_;
    Eigen::MatrixXd B_, G_;
    double sigma_;
    SlopeSource source_;
    RngStream rng_;
    bool modal_ = true;
    long frame_ = 0;
    Eigen::MatrixXd a_hist_, c_hist_;
};

// Shared, expensive pieces of a simulated AO system: DM, WFS grid, KL basis,
// reference interaction matrix and command matrices per n_mod.
class AoSystem {
public:
    AoSystem(int d_sub = 40, double obscuration = 0.14, double pitch_m = 0.2, int n_px = 8,
             IfParams p = {})
        : grid(SubapertureGrid::make(d_sub, pitch_m, obscuration)),
          dm(DmModel::make(d_sub + 1, pitch_m, p)),
          n_px(n_px) {}

    SubapertureGrid grid;
    DmModel dm;
    int n_px;  // turbulence samples per subaperture
    double lambda_wfs = 750e-9;
    // The DM seen by the sensor is finely sampled; the controller's model is
    // the coarse edge-difference PSIM. The mismatch is deliberate, a real
    // loop never runs on its own plant.
    ShSampling plant_sampling{SlopeModel::PixelFD, 32};
    ShSampling reference_sampling{SlopeModel::EdgeDifference, 8};

    const KlBasis& kl() {
        if (!kl_) kl_ = std::make_unique<KlBasis>(build_kl_basis(dm));
        return *kl_;
    }

    // Loop plant (slopes per unit command) for a given true registration.
    Eigen::MatrixXd plant(const MisRegistration& m) const {
        return zonal_response(dm.with_misreg(m), grid, plant_sampling);
    }

    // Command matrix from the nominal PSIM.
    const CommandMatrix& command_matrix(int n_mod) {
        auto it = cm_.find(n_mod);
        if (it != cm_.end()) return it->second;
        if (!ref_) ref_ = std::make_unique<Eigen::MatrixXd>(zonal_response(dm, grid, reference_sampling));
        return cm_.emplace(n_mod, build_command_matrix(*ref_, kl(), n_mod)).first->second;
    }

    TelemetryCube to_cube(const Eigen::MatrixXd& cmds, const LoopConfig& cfg,
                          std::optional<MisRegistration> truth = std::nullopt) const {
        TelemetryCube t;
        t.d_act = dm.d_act;
        t.dt = cfg.tau_rtc;
        t.clip = cfg.clip;
        t.config = cfg;
        t.true_misreg = truth;
        t.frames = Eigen::MatrixXd::Zero(dm.d_act * dm.d_act, cmds.cols());
        for (int a = 0; a < dm.n_act(); ++a) t.frames.row(dm.node[a]) = cmds.row(a);
        return t;
    }

    // Slope noise for a photon count, with r0 (at 500 nm) scaled to the WFS band.
    double photon_sigma(double n_ph, double r0_500 = 0.12) const {
        return photon_noise_sigma(n_ph, scale_r0(r0_500, 500e-9, lambda_wfs), lambda_wfs);
    }

private:
    std::unique_ptr<KlBasis> kl_;
    std::unique_ptr<Eigen::MatrixXd> ref_;
    std::map<int, CommandMatrix> cm_;
};

// One-shot convenience: builds everything, runs a burn-in of `burn_in` frames
// and records n_frames. n_ph <= 0 means noiseless.
inline TelemetryCube run_closed_loop(const LoopConfig& cfg, AoSystem& sys,
                                     const MisRegistration& truth,
                                     std::shared_ptr<const LayerSet> disturbance, double n_ph,
                                     int n_frames, RngStream rng, int burn_in = 0) {
    if (n_frames < 2) throw ConfigError("need at least 2 frames");
    const auto& cm = sys.command_matrix(cfg.n_mod);
    const double r0 = disturbance ? disturbance->r0 : 0.12;
    const double sigma = n_ph > 0 ? sys.photon_sigma(n_ph, r0) : 0.0;
    SlopeSource src;
    if (disturbance) src = frozen_flow_source(disturbance, sys.grid, sys.n_px, cfg.tau_rtc);
    ClosedLoop loop(cfg, cm, sys.plant(truth), sigma, src, rng);
    if (burn_in > 0) loop.run(burn_in);
    return sys.to_cube(loop.run(n_frames), cfg, truth);
}

// Open-loop push-pull: mode i is pushed on frame 2i and pulled on frame 2i+1,
// turbulence advancing one period between frames. The stored IM is
// (s+ - s-) / 2, the response to a poke of `amplitude_um`.
inline ModalIM measure_modal_im_pushpull(const DmModel& dm, const SubapertureGrid& g,
                                         const MisRegistration& truth, const KlBasis& kl,
                                         const std::vector<int>& modes, double amplitude_um,
                                         std::shared_ptr<const LayerSet> disturbance, int n_px,
                                         double sigma, RngStream& rng, double dt = 1e-3,
                                         double t0 = 0.0, ShSampling sh = {}) {
    const DmModel moved = dm.with_misreg(truth);
    const Eigen::MatrixXd D = zonal_response(moved, g, sh);
    const int n_s = static_cast<int>(D.rows());
    SlopeSource src;
    if (disturbance) src = frozen_flow_source(disturbance, g, n_px, dt, t0);
    Eigen::MatrixXd out(n_s, modes.size());
    Eigen::VectorXd sp(n_s), sm(n_s), turb(n_s);
    for (std::size_t i = 0; i < modes.size(); ++i) {
        if (modes[i] < 1 || modes[i] > kl.modes.cols()) throw ConfigError("mode out of range");
        Eigen::VectorXd c = kl.modes.col(modes[i] - 1);
        for (int a = 0; a < moved.n_act(); ++a) c(a) *= amplitude_um / moved.amp[a];
        const Eigen::VectorXd resp = D * c;
        for (int pm = 0; pm < 2; ++pm) {
            Eigen::VectorXd& s = pm ? sm : sp;
            s = pm ? Eigen::VectorXd(-resp) : resp;
            if (src) {
                src(long(2 * i + pm), turb);
                s += turb;
            }
            if (sigma > 0)
                for (int k = 0; k < n_s; ++k) s(k) += sigma * rng.normal();
        }
        out.col(i) = 0.5 * (sp - sm);
    }
    ModalIM im = expand_compact(out, g);
    im.amplitude_um = amplitude_um;
    im.items = modes;
    return im;
}

// Outer loop on the lateral error: the estimate has the sign of the residual
// shift, so the update subtracts it.
inline MisRegistration corrective_loop_step(const MisRegistration& current, const Vec2& estimate,
                                            double gain) {
    MisRegistration m = current;
    m.shift_x -= gain * estimate.x();
    m.shift_y -= gain * estimate.y();
    return m;
}

}  // namespace aomisreg
