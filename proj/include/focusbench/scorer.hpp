#pragma once

// Sample-invariant blurriness scorers. Every backend maps an image patch to a
// BlurScore in [0, 1] (0 sharpest). The oracle reads the simulator's defocus
// side channel, the spectral backend estimates the Gaussian blur width from
// pixels alone, and the external backend (external_scorer.hpp) delegates to a
// subprocess.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "focusbench/fft.hpp"
#include "focusbench/image.hpp"
#include "focusbench/optics_sim.hpp"

namespace focusbench {

enum class ScorerKind { Oracle, Spectral, External };

inline const char* to_string(ScorerKind k)
{
    switch (k) {
    case ScorerKind::Oracle: return "ORACLE";
    case ScorerKind::Spectral: return "SPECTRAL";
    case ScorerKind::External: return "EXTERNAL";
    }
    return "?";
}

inline ScorerKind scorer_kind_from_string(const std::string& s)
{
    if (s == "ORACLE" || s == "oracle") return ScorerKind::Oracle;
    if (s == "SPECTRAL" || s == "spectral") return ScorerKind::Spectral;
    if (s == "EXTERNAL" || s == "external") return ScorerKind::External;
    throw Error("unknown scorer backend '" + s + "'");
}

/// Bounded monotone map sigma -> sigma / (sigma + sigma_half).
struct ResponseMap {
    double sigma_half_px = 1.0;

    double operator()(double sigma_px) const { return sigma_px / (sigma_px + sigma_half_px); }
};

class Scorer {
public:
    virtual ~Scorer() = default;
    virtual ScorerKind kind() const = 0;
    virtual std::string name() const = 0;
    /// Blurriness in [0, 1].
    virtual double score_patch(const Image& patch) = 0;
};

namespace spectral {

inline constexpr double reblur_sigma_px = 1.0;
// Upper edge of the fitted band in cycles/px.
inline constexpr double band_max_cpp = 0.3;
// Frequencies above this carry noise only; their median power is the floor.
inline constexpr double noise_band_min_cpp = 0.35;
inline constexpr double floor_margin = 8.0;
// A drop this many nats steeper than the running Gaussian fit predicts, across
// two radius bins, marks the edge of the specimen's own pass band.
inline constexpr double cliff_nats = 2.5;
inline constexpr int min_band_bins = 3;
// Radii below this are dominated by window leakage from the removed mean.
inline constexpr int first_band_bin = 3;
// The lowest radii are too noisy to predict a falloff from; cliffs are only
// looked for once this many bins are in the fit.
inline constexpr int min_cliff_bins = 5;
// Moment-estimate range (px) over which the slope estimate hands over.
inline constexpr double moment_blend_lo = 6.0;
inline constexpr double moment_blend_hi = 9.0;
// RMS below which a patch with a flat spectrum counts as featureless.
inline constexpr double featureless_rms = 0.02;

namespace detail {

struct RadialPower {
    std::vector<double> power;  // mean power per integer radius bin
    std::vector<double> count;
    int n = 0;                  // patch side used for the bins
};

inline std::vector<double> hann(int n)
{
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (i + 0.5) / n);
    return w;
}

struct WindowedSpectrum {
    fft::Spectrum bins;  // half spectrum of the Hann-windowed, mean-removed patch
    int width = 0;
    int height = 0;
};

inline WindowedSpectrum windowed_spectrum(const Image& img)
{
    const int w = img.width, h = img.height;
    const auto wx = hann(w), wy = hann(h);
    const double m = mean(img.pixels);
    std::vector<double> v(img.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            v[static_cast<std::size_t>(y) * w + x] = (img.at(x, y) - m) * wx[x] * wy[y];
    return {fft::forward(v, w, h), w, h};
}

inline RadialPower radial_power(const WindowedSpectrum& ws)
{
    const int w = ws.width, h = ws.height;
    const int n = std::min(w, h);
    RadialPower rp;
    rp.n = n;
    rp.power.assign(n / 2 + 1, 0.0);
    rp.count.assign(n / 2 + 1, 0.0);
    const int cols = w / 2 + 1;
    for (int ky = 0; ky < h; ++ky)
        for (int kx = 0; kx < cols; ++kx) {
            const double f = fft::radial_frequency(kx, ky, w, h);
            const auto bin = static_cast<std::size_t>(std::lround(f * n));
            if (bin >= rp.power.size())
                continue;
            const double wgt = fft::column_weight(kx, w);
            rp.power[bin] += wgt * std::norm(ws.bins[static_cast<std::size_t>(ky) * cols + kx]);
            rp.count[bin] += wgt;
        }
    for (std::size_t i = 0; i < rp.power.size(); ++i)
        if (rp.count[i] > 0.0)
            rp.power[i] /= rp.count[i];
    return rp;
}

inline RadialPower radial_power(const Image& img) { return radial_power(windowed_spectrum(img)); }

// Median power of the radii above noise_band_min_cpp.
inline double noise_floor(const RadialPower& rp)
{
    std::vector<double> samples;
    for (std::size_t k = 0; k < rp.power.size(); ++k)
        if (static_cast<double>(k) / rp.n >= noise_band_min_cpp && rp.count[k] > 0)
            samples.push_back(rp.power[k]);
    if (samples.empty())
        return 0.0;
    std::nth_element(samples.begin(), samples.begin() + samples.size() / 2, samples.end());
    return samples[samples.size() / 2];
}

// Blur width from the second moment of the floor-subtracted 2D power spectrum
// over the radii still clearly above the floor. A Gaussian of width sigma has
// E|f|^2 = 1/(4 pi^2 sigma^2); the Hann window adds 2/(3 n^2). Texture with a
// finite pass band biases this upward at small sigma, so it is only used for
// heavy blur where the slope fit runs out of radii.
inline double moment_sigma(const WindowedSpectrum& ws, const RadialPower& rp, double floor)
{
    const int w = ws.width, h = ws.height, n = rp.n;
    int last = 2;
    while (last + 1 < static_cast<int>(rp.power.size()) && rp.power[last + 1] > 2.0 * floor)
        ++last;
    const int cols = w / 2 + 1;
    double p0 = 0.0, p2 = 0.0;
    for (int ky = 0; ky < h; ++ky)
        for (int kx = 0; kx < cols; ++kx) {
            const double f = fft::radial_frequency(kx, ky, w, h);
            if (f * n > last + 0.5)
                continue;
            const double p = fft::column_weight(kx, w) *
                             (std::norm(ws.bins[static_cast<std::size_t>(ky) * cols + kx]) - floor);
            p0 += p;
            p2 += p * f * f;
        }
    const double m2 = (p0 > 0.0 ? p2 / p0 : 0.0) - 2.0 / (3.0 * static_cast<double>(n) * n);
    const double cap = static_cast<double>(n) / 4.0;
    if (!(m2 > 0.0))
        return cap;
    return std::min(cap, 1.0 / (2.0 * std::numbers::pi * std::sqrt(m2)));
}

inline Image reblur(const Image& patch, double sigma_px)
{
    const auto k = gaussian_kernel_1d(sigma_px);
    const int r = static_cast<int>(k.size() / 2);
    Image tmp(patch.width, patch.height, 0.0, patch.pitch_um);
    for (int y = 0; y < patch.height; ++y)
        for (int x = 0; x < patch.width; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i)
                acc += k[i + r] * patch.at(reflect101(x + i, patch.width), y);
            tmp.at(x, y) = acc;
        }
    Image out(patch.width, patch.height, 0.0, patch.pitch_um);
    for (int y = 0; y < patch.height; ++y)
        for (int x = 0; x < patch.width; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i)
                acc += k[i + r] * tmp.at(x, reflect101(y + i, patch.height));
            out.at(x, y) = acc;
        }
    return out;
}

// Weighted least-squares slope of y against x.
inline double wls_slope(const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>& w)
{
    double sw = 0, sx = 0, sy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sw += w[i];
        sx += w[i] * x[i];
        sy += w[i] * y[i];
    }
    const double mx = sx / sw, my = sy / sw;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
    }
    return sxx > 0.0 ? sxy / sxx : 0.0;
}

}  // namespace detail

namespace detail {

// Spectral-ratio slope fit from radius first_band_bin up to band_max_cpp. With
// bounded_band set, stops early where the power sinks to floor_margin x the
// floor or drops off the edge of the specimen's own pass band.
inline std::optional<double> slope_sigma(const RadialPower& base, const RadialPower& re, double floor,
                                         bool bounded_band)
{
    const int n = base.n;
    std::vector<double> f2, log_p, log_ratio, wgt;
    const int last = std::min(static_cast<int>(std::floor(band_max_cpp * n)), static_cast<int>(base.power.size()) - 3);
    for (int k = first_band_bin; k <= last; ++k) {
        if (base.count[k] <= 0 || base.power[k] <= 0.0 || re.power[k] <= 0.0)
            break;
        if (bounded_band && static_cast<int>(f2.size()) >= min_band_bins) {
            if (base.power[k] <= floor_margin * floor)
                break;
            const double fa = static_cast<double>(k) / n, fb = static_cast<double>(k + 2) / n;
            const double expected_drop = std::max(0.0, -wls_slope(f2, log_p, wgt) * (fb * fb - fa * fa));
            if (static_cast<int>(f2.size()) >= min_cliff_bins && base.power[k + 2] > 0.0 &&
                std::log(base.power[k] / base.power[k + 2]) - expected_drop > cliff_nats) {
                // Hann leakage smears the edge over about two bins.
                const auto keep = static_cast<std::size_t>(std::max(min_band_bins, static_cast<int>(f2.size()) - 1));
                f2.resize(keep);
                log_p.resize(keep);
                log_ratio.resize(keep);
                wgt.resize(keep);
                break;
            }
        }
        const double f = static_cast<double>(k) / n;
        f2.push_back(f * f);
        log_p.push_back(std::log(base.power[k]));
        log_ratio.push_back(std::log(re.power[k] / base.power[k]));
        wgt.push_back(base.count[k]);
    }
    if (f2.size() < 2)
        return std::nullopt;
    const double slope_patch = wls_slope(f2, log_p, wgt);
    const double slope_ratio = wls_slope(f2, log_ratio, wgt);
    if (!(slope_ratio < 0.0))
        return std::nullopt;
    return std::sqrt(std::max(0.0, reblur_sigma_px * reblur_sigma_px * slope_patch / slope_ratio));
}

}  // namespace detail

/// Gaussian blur width (px) estimated from the patch alone.
///
/// The radially averaged power spectrum of the Hann-windowed patch falls as
/// exp(-4 pi^2 sigma^2 f^2) across the texture band. Re-blurring the patch by a
/// known sigma_r shifts that log-slope by exactly the sigma_r^2 term, so the
/// ratio of the two fitted slopes (patch vs. re-blur ratio) gives sigma^2 in
/// units of sigma_r^2 without relying on a continuous-frequency model.
/// Heavy blur leaves too few radii for a slope, so above moment_blend_lo px the
/// estimate hands over to the spectral second moment. A flat spectrum is white
/// texture when the patch has contrast, and a featureless (fully blurred) field
/// when its RMS is below featureless_rms.
inline double estimate_gaussian_sigma(const Image& patch)
{
    if (patch.width < 64 || patch.height < 64)
        throw Error("estimate_gaussian_sigma: patch must be at least 64x64");
    if (is_constant(patch))
        throw Error("estimate_gaussian_sigma: no texture (constant patch)");
    const auto ws = detail::windowed_spectrum(patch);
    const auto base = detail::radial_power(ws);
    const auto re = detail::radial_power(detail::reblur(patch, reblur_sigma_px));
    const double floor = detail::noise_floor(base);
    const double cap = static_cast<double>(base.n) / 4.0;
    const double low_peak = std::max(base.power[1], base.power[2]);
    if (!(low_peak > floor_margin * floor)) {
        if (std::sqrt(variance(patch.pixels)) < featureless_rms)
            return cap;
        const auto white = detail::slope_sigma(base, re, floor, false);
        if (!white)
            throw Error("estimate_gaussian_sigma: degenerate re-blur response");
        return *white;
    }
    const double moment = detail::moment_sigma(ws, base, floor);
    const bool bounded = base.power[first_band_bin] > floor_margin * floor;
    const auto slope = detail::slope_sigma(base, re, floor, bounded);
    if (!slope || moment >= moment_blend_hi)
        return moment;
    if (moment <= moment_blend_lo)
        return *slope;
    const double t = (moment - moment_blend_lo) / (moment_blend_hi - moment_blend_lo);
    return (1.0 - t) * *slope + t * moment;
}

}  // namespace spectral

using spectral::estimate_gaussian_sigma;

/// Image-only backend: estimated sigma through the response map.
class SpectralScorer final : public Scorer {
public:
    explicit SpectralScorer(ResponseMap map = {}) : map_(map) {}

    ScorerKind kind() const override { return ScorerKind::Spectral; }
    std::string name() const override { return "SPECTRAL"; }
    double score_patch(const Image& patch) override { return std::clamp(map_(estimate_gaussian_sigma(patch)), 0.0, 1.0); }

    const ResponseMap& response() const { return map_; }

private:
    ResponseMap map_;
};

/// Simulator side-channel backend: clamp(s(sigma(defocus)) + noise, 0, 1).
/// Needs a VirtualMicroscope for its PSF model; reads each patch's defocus tag.
class OracleScorer final : public Scorer {
public:
    OracleScorer(const VirtualMicroscope& scope, ResponseMap map = {}, double noise_sd = 0.0, std::uint64_t seed = 0)
        : psf_(scope.psf()), map_(map), noise_sd_(noise_sd), rng_(mix_seed(seed, 0x0c1eu))
    {
        if (!(noise_sd >= 0.0))
            throw Error("oracle scorer: noise_sd must be >= 0");
    }

    ScorerKind kind() const override { return ScorerKind::Oracle; }
    std::string name() const override { return "ORACLE"; }

    double score_patch(const Image& patch) override
    {
        if (!patch.defocus_um)
            throw Error("oracle scorer: patch carries no simulator defocus tag");
        double s = map_(psf_sigma(psf_, *patch.defocus_um));
        if (noise_sd_ > 0.0)
            s += noise_sd_ * n01_(rng_);
        return std::clamp(s, 0.0, 1.0);
    }

    const ResponseMap& response() const { return map_; }

private:
    PsfModel psf_;
    ResponseMap map_;
    double noise_sd_;
    std::mt19937_64 rng_;
    std::normal_distribution<double> n01_;
};

/// Per-patch scores tiling a roi; cell (col, row) covers
/// [roi.x + col*stride, +patch_size) x [roi.y + row*stride, +patch_size).
struct PatchGrid {
    int patch_size = 128;
    int stride = 128;
    int cols = 0;
    int rows = 0;
    std::vector<double> scores;  // row-major

    double at(int col, int row) const { return scores[static_cast<std::size_t>(row) * cols + col]; }
    double mean() const { return focusbench::mean(scores); }
};

inline PatchGrid score_image_grid(Scorer& scorer, const Image& image, const Roi& roi, int patch_size = 128,
                                  int stride = 0)
{
    if (stride <= 0)
        stride = patch_size;
    if (patch_size < 32)
        throw Error("score_image_grid: patch_size must be >= 32");
    if (!contains(image.bounds(), roi))
        throw Error("score_image_grid: roi out of image bounds");
    if (roi.width < patch_size || roi.height < patch_size)
        throw Error("score_image_grid: roi " + std::to_string(roi.width) + "x" + std::to_string(roi.height) +
                    " is smaller than one " + std::to_string(patch_size) + " px patch");
    PatchGrid grid;
    grid.patch_size = patch_size;
    grid.stride = stride;
    grid.cols = (roi.width - patch_size) / stride + 1;
    grid.rows = (roi.height - patch_size) / stride + 1;
    grid.scores.reserve(static_cast<std::size_t>(grid.cols) * grid.rows);
    for (int r = 0; r < grid.rows; ++r)
        for (int c = 0; c < grid.cols; ++c) {
            const Image patch = crop(image, {roi.x + c * stride, roi.y + r * stride, patch_size, patch_size});
            const double s = scorer.score_patch(patch);
            if (!std::isfinite(s) || s < 0.0 || s > 1.0)
                throw Error(scorer.name() + " returned an out-of-range score");
            grid.scores.push_back(s);
        }
    return grid;
}

}  // namespace focusbench
