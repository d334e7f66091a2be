#pragma once

#include <fftw3.h>

#include <Eigen/Dense>

#include <complex>
#include <mutex>
#include <vector>

namespace aomisreg {

using cplx = std::complex<double>;
using CGrid = Eigen::Array<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {
// FFTW's planner is not reentrant; execution of distinct plans is.
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

class Plan {
public:
    explicit Plan(fftw_plan p) : p_(p) {}
    Plan(const Plan&) = delete;
    Plan& operator=(const Plan&) = delete;
    ~Plan() {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(p_);
    }
    void run() const { fftw_execute(p_); }

private:
    fftw_plan p_;
};
}  // namespace detail

enum class Direction : int { Forward = FFTW_FORWARD, Backward = FFTW_BACKWARD };

// Unnormalized in-place n-dimensional transform over a contiguous row-major block.
inline void fft_nd(cplx* data, const std::vector<int>& dims, Direction dir) {
    auto* p = reinterpret_cast<fftw_complex*>(data);
    fftw_plan plan;
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        plan = fftw_plan_dft(static_cast<int>(dims.size()), dims.data(), p, p,
                             static_cast<int>(dir), FFTW_ESTIMATE);
    }
    detail::Plan(plan).run();
}

inline void fft2(CGrid& g, Direction dir) {
    fft_nd(g.data(), {static_cast<int>(g.rows()), static_cast<int>(g.cols())}, dir);
}

// Reusable 2D plan for repeated transforms of one buffer.
class Fft2Plan {
public:
    Fft2Plan(int rows, int cols, Direction dir) : buf(rows, cols) {
        auto* p = reinterpret_cast<fftw_complex*>(buf.data());
        std::lock_guard lock(detail::fftw_planner_mutex());
        plan_ = fftw_plan_dft_2d(rows, cols, p, p, static_cast<int>(dir), FFTW_ESTIMATE);
    }
    Fft2Plan(const Fft2Plan&) = delete;
    Fft2Plan& operator=(const Fft2Plan&) = delete;
    ~Fft2Plan() {
        std::lock_guard lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(plan_);
    }
    void run() { fftw_execute(plan_); }

    CGrid buf;

private:
    fftw_plan plan_;
};

}  // namespace aomisreg
