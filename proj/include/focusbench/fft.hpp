#pragma once

// Thin RAII layer over FFTW's real-to-complex 2D transforms. Plans are cached
// per (width, height) and executed with the new-array interface, so callers
// only deal with std::vector.

#include <fftw3.h>

#include <complex>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <utility>
#include <vector>

#include "focusbench/image.hpp"

namespace focusbench::fft {

using Spectrum = std::vector<std::complex<double>>;

namespace detail {

struct FftwFree {
    void operator()(void* p) const { fftw_free(p); }
};

template <typename T>
using FftwBuffer = std::unique_ptr<T[], FftwFree>;

class Plans {
public:
    struct Pair {
        fftw_plan forward = nullptr;
        fftw_plan inverse = nullptr;
        FftwBuffer<double> real;
        FftwBuffer<fftw_complex> complex;
    };

    static Plans& instance()
    {
        static Plans plans;
        return plans;
    }

    // Returned reference stays valid: std::map nodes are stable.
    Pair& get(int width, int height)
    {
        std::lock_guard lock(mutex_);
        auto it = plans_.find({width, height});
        if (it != plans_.end())
            return it->second;
        Pair p;
        const std::size_t nreal = static_cast<std::size_t>(width) * height;
        const std::size_t ncomplex = static_cast<std::size_t>(width / 2 + 1) * height;
        p.real.reset(static_cast<double*>(fftw_malloc(sizeof(double) * nreal)));
        p.complex.reset(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * ncomplex)));
        p.forward = fftw_plan_dft_r2c_2d(height, width, p.real.get(), p.complex.get(), FFTW_ESTIMATE);
        p.inverse = fftw_plan_dft_c2r_2d(height, width, p.complex.get(), p.real.get(), FFTW_ESTIMATE);
        return plans_.emplace(std::pair{width, height}, std::move(p)).first->second;
    }

    ~Plans()
    {
        for (auto& [key, p] : plans_) {
            fftw_destroy_plan(p.forward);
            fftw_destroy_plan(p.inverse);
        }
    }

private:
    std::mutex mutex_;
    std::map<std::pair<int, int>, Pair> plans_;
};

}  // namespace detail

/// Half-spectrum of a real row-major grid: height rows of (width/2 + 1) bins.
inline Spectrum forward(std::span<const double> data, int width, int height)
{
    auto& plan = detail::Plans::instance().get(width, height);
    const std::size_t ncomplex = static_cast<std::size_t>(width / 2 + 1) * height;
    auto in = detail::FftwBuffer<double>(static_cast<double*>(fftw_malloc(sizeof(double) * data.size())));
    auto out = detail::FftwBuffer<fftw_complex>(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * ncomplex)));
    std::memcpy(in.get(), data.data(), sizeof(double) * data.size());
    fftw_execute_dft_r2c(plan.forward, in.get(), out.get());
    Spectrum s(ncomplex);
    std::memcpy(reinterpret_cast<void*>(s.data()), out.get(), sizeof(fftw_complex) * ncomplex);
    return s;
}

/// Inverse of forward(), including the 1/(width*height) normalization.
inline std::vector<double> inverse(const Spectrum& spectrum, int width, int height)
{
    auto& plan = detail::Plans::instance().get(width, height);
    const std::size_t nreal = static_cast<std::size_t>(width) * height;
    auto in = detail::FftwBuffer<fftw_complex>(
        static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * spectrum.size())));
    auto out = detail::FftwBuffer<double>(static_cast<double*>(fftw_malloc(sizeof(double) * nreal)));
    std::memcpy(in.get(), reinterpret_cast<const void*>(spectrum.data()), sizeof(fftw_complex) * spectrum.size());
    fftw_execute_dft_c2r(plan.inverse, in.get(), out.get());
    std::vector<double> r(out.get(), out.get() + nreal);
    const double scale = 1.0 / static_cast<double>(nreal);
    for (double& v : r)
        v *= scale;
    return r;
}

/// Signed frequency index for bin k of an n-point transform.
inline int signed_index(int k, int n) { return k <= n / 2 ? k : k - n; }

/// Radial frequency in cycles/pixel of half-spectrum bin (kx, ky).
inline double radial_frequency(int kx, int ky, int width, int height)
{
    const double fx = static_cast<double>(kx) / width;
    const double fy = static_cast<double>(signed_index(ky, height)) / height;
    return std::sqrt(fx * fx + fy * fy);
}

/// Multiplicity of half-spectrum column kx in the full spectrum (Hermitian
/// symmetry): the DC column and, for even widths, the Nyquist column count once.
inline double column_weight(int kx, int width)
{
    return (kx == 0 || (width % 2 == 0 && kx == width / 2)) ? 1.0 : 2.0;
}

}  // namespace focusbench::fft
