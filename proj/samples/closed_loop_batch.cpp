// A few 500-frame noise-only batches from a loop whose DM sits 10% of a pitch
// off along x. The raw estimate is about 0.65-0.7 of the true shift.
#include <aomisreg/estimator_cl.hpp>
#include <aomisreg/loop.hpp>

#include <cstdio>

using namespace aomisreg;

int main() {
    AoSystem sys;
    LoopConfig cfg;
    const MisRegistration truth = MisRegistration::shift(0.10, 0.0);
    ClosedLoop loop(cfg, sys.command_matrix(cfg.n_mod), sys.plant(truth), sys.photon_sigma(100), {}, RngStream(3));
    loop.run(100);
    for (int b = 0; b < 5; ++b) {
        const TelemetryCube cube = sys.to_cube(loop.run(500), cfg);
        const CorrelationSpectrum cs = empirical_correlation(split_telemetry(cube));
        const Vec2 d = estimate_shift_cl(cs, eta0_curve(cfg, cs.f),
                                         control_space_mask(cfg.n_mod, sys.dm.n_act(), cube.d_act, cs.k));
        std::printf("batch %d: dx = %5.2f %%  dy = %5.2f %%\n", b, 100 * d.x(), 100 * d.y());
    }
}
