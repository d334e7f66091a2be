// Open-loop modal registration of a grossly shifted DM: noisy 4 um KL pokes
// (modes 4..50) correlated against the nominal synthetic IM.
#include <aomisreg/estimator_modal.hpp>
#include <aomisreg/loop.hpp>

#include <cstdio>

using namespace aomisreg;

int main() {
    AoSystem sys;
    const auto modes = mode_range(4, 50);
    const MisRegistration truth = MisRegistration::shift(13.35, 8.65);

    const ModalIM reference = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, {}, 4.0), sys.kl(), modes);
    ModalIM measured = project_zonal_to_modal(synth_zonal_im(sys.dm, sys.grid, truth, 4.0), sys.kl(), modes);
    RngStream rng(7);
    add_slope_noise(measured, pixel_noise_sigma(0.25), rng);

    const ModalEstimate e = estimate_shift_modal(measured, reference, sys.grid.mask_valid, sys.grid.mask_wfs, 8);
    std::printf("true shift      (%.3f, %.3f)\n", truth.shift_x, truth.shift_y);
    std::printf("estimated shift (%.3f, %.3f)\n", e.shift.x(), e.shift.y());
    std::printf("poke amplitude  %.3f um\n", e.amplitude_um);
}
