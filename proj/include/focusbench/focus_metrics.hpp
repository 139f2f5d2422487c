#pragma once

// Classical focus measures and the [0,1] blurriness convention
// (0 = sharpest sample of a curve, 1 = blurriest).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "focusbench/fft.hpp"
#include "focusbench/image.hpp"
#include "focusbench/optics_sim.hpp"

namespace focusbench {

enum class MetricKind { HPF, TENENGRAD, LAPV, SML, EWC, WS };

inline constexpr MetricKind all_metrics[] = {MetricKind::HPF, MetricKind::TENENGRAD, MetricKind::LAPV,
                                             MetricKind::SML, MetricKind::EWC,       MetricKind::WS};

inline const char* to_string(MetricKind m)
{
    switch (m) {
    case MetricKind::HPF: return "HPF";
    case MetricKind::TENENGRAD: return "TENENGRAD";
    case MetricKind::LAPV: return "LAPV";
    case MetricKind::SML: return "SML";
    case MetricKind::EWC: return "EWC";
    case MetricKind::WS: return "WS";
    }
    return "?";
}

inline MetricKind metric_from_string(const std::string& s)
{
    for (MetricKind m : all_metrics)
        if (s == to_string(m))
            return m;
    throw Error("unknown metric '" + s + "'");
}

namespace metrics {

inline constexpr double hpf_cutoff_fraction = 0.25;  // of Nyquist

namespace detail {

// Pixel lookup with reflect-101 borders.
inline double px(const Image& img, int x, int y)
{
    return img.at(reflect101(x, img.width), reflect101(y, img.height));
}

inline std::vector<double> mean_removed(const Image& img)
{
    const double m = mean(img.pixels);
    std::vector<double> v(img.pixels);
    for (double& p : v)
        p -= m;
    return v;
}

// One orthonormal 2D Haar analysis step on a w x h (both even) grid. Returns
// the LL band and accumulates the detail-band energy.
inline std::vector<double> haar_step(const std::vector<double>& in, int w, int h, double& detail_energy)
{
    const int hw = w / 2, hh = h / 2;
    std::vector<double> ll(static_cast<std::size_t>(hw) * hh);
    detail_energy = 0.0;
    for (int y = 0; y < hh; ++y)
        for (int x = 0; x < hw; ++x) {
            const double a = in[static_cast<std::size_t>(2 * y) * w + 2 * x];
            const double b = in[static_cast<std::size_t>(2 * y) * w + 2 * x + 1];
            const double c = in[static_cast<std::size_t>(2 * y + 1) * w + 2 * x];
            const double d = in[static_cast<std::size_t>(2 * y + 1) * w + 2 * x + 1];
            ll[static_cast<std::size_t>(y) * hw + x] = 0.5 * (a + b + c + d);
            const double hl = 0.5 * (a - b + c - d);
            const double lh = 0.5 * (a + b - c - d);
            const double hh_ = 0.5 * (a - b - c + d);
            detail_energy += hl * hl + lh * lh + hh_ * hh_;
        }
    return ll;
}

// Ratio of the energy in the `detail_levels` finest Haar detail levels to the
// total energy of the mean-removed image, after cropping to a multiple of
// 2^levels.
inline double haar_detail_ratio(const Image& img, int levels, int detail_levels)
{
    const int block = 1 << levels;
    const int w = img.width / block * block;
    const int h = img.height / block * block;
    std::vector<double> v(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            v[static_cast<std::size_t>(y) * w + x] = img.at(x, y);
    const double m = mean(v);
    double total = 0.0;
    for (double& p : v) {
        p -= m;
        total += p * p;
    }
    if (total <= 0.0)
        return 0.0;
    double detail = 0.0;
    int cw = w, ch = h;
    for (int level = 0; level < levels; ++level) {
        double e = 0.0;
        v = haar_step(v, cw, ch, e);
        cw /= 2;
        ch /= 2;
        if (level < detail_levels)
            detail += e;
    }
    return detail / total;
}

}  // namespace detail

inline double tenengrad(const Image& img)
{
    using detail::px;
    double acc = 0.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double gx = (px(img, x + 1, y - 1) + 2.0 * px(img, x + 1, y) + px(img, x + 1, y + 1)) -
                              (px(img, x - 1, y - 1) + 2.0 * px(img, x - 1, y) + px(img, x - 1, y + 1));
            const double gy = (px(img, x - 1, y + 1) + 2.0 * px(img, x, y + 1) + px(img, x + 1, y + 1)) -
                              (px(img, x - 1, y - 1) + 2.0 * px(img, x, y - 1) + px(img, x + 1, y - 1));
            acc += gx * gx + gy * gy;
        }
    return acc / static_cast<double>(img.size());
}

inline double laplacian_variance(const Image& img)
{
    using detail::px;
    std::vector<double> lap(img.size());
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            lap[static_cast<std::size_t>(y) * img.width + x] =
                px(img, x - 1, y) + px(img, x + 1, y) + px(img, x, y - 1) + px(img, x, y + 1) - 4.0 * img.at(x, y);
    return variance(lap);
}

inline double sum_modified_laplacian(const Image& img)
{
    using detail::px;
    double acc = 0.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double c = 2.0 * img.at(x, y);
            acc += std::abs(c - px(img, x - 1, y) - px(img, x + 1, y)) + std::abs(c - px(img, x, y - 1) - px(img, x, y + 1));
        }
    return acc / static_cast<double>(img.size());
}

/// Fraction of (mean-removed) power above hpf_cutoff_fraction x Nyquist.
inline double high_pass_fraction(const Image& img)
{
    const auto v = detail::mean_removed(img);
    const auto spec = fft::forward(v, img.width, img.height);
    const int cols = img.width / 2 + 1;
    const double cutoff = hpf_cutoff_fraction * 0.5;
    double total = 0.0, high = 0.0;
    for (int ky = 0; ky < img.height; ++ky)
        for (int kx = 0; kx < cols; ++kx) {
            const double p = std::norm(spec[static_cast<std::size_t>(ky) * cols + kx]) * fft::column_weight(kx, img.width);
            total += p;
            if (fft::radial_frequency(kx, ky, img.width, img.height) > cutoff)
                high += p;
        }
    return total > 0.0 ? high / total : 0.0;
}

inline double energy_wavelet_coefficients(const Image& img) { return detail::haar_detail_ratio(img, 1, 1); }

inline double wavelet_sharpness(const Image& img) { return detail::haar_detail_ratio(img, 3, 2); }

}  // namespace metrics

/// Nonnegative sharpness; larger is sharper.
inline double score_image(MetricKind metric, const Image& image)
{
    if (image.width < 16 || image.height < 16)
        throw Error(std::string("score_image: image must be at least 16x16 for ") + to_string(metric));
    switch (metric) {
    case MetricKind::HPF: return metrics::high_pass_fraction(image);
    case MetricKind::TENENGRAD: return metrics::tenengrad(image);
    case MetricKind::LAPV: return metrics::laplacian_variance(image);
    case MetricKind::SML: return metrics::sum_modified_laplacian(image);
    case MetricKind::EWC: return metrics::energy_wavelet_coefficients(image);
    case MetricKind::WS: return metrics::wavelet_sharpness(image);
    }
    return 0.0;
}

struct CurveSample {
    double z_um = 0.0;
    double value = 0.0;
};

/// Depth response of one scoring function. Raw curves use the sharpness
/// convention; normalized curves the blurriness convention.
struct ScoreCurve {
    std::vector<CurveSample> samples;
    bool normalized = false;
    bool degenerate = false;

    std::vector<double> z() const
    {
        std::vector<double> out;
        out.reserve(samples.size());
        for (const auto& s : samples)
            out.push_back(s.z_um);
        return out;
    }

    std::vector<double> values() const
    {
        std::vector<double> out;
        out.reserve(samples.size());
        for (const auto& s : samples)
            out.push_back(s.value);
        return out;
    }
};

inline ScoreCurve metric_curve(MetricKind metric, const ZStack& stack)
{
    stack.validate();
    ScoreCurve curve;
    curve.samples.reserve(stack.slices.size());
    for (std::size_t i = 0; i < stack.slices.size(); ++i) {
        try {
            curve.samples.push_back({stack.slices[i].z_um, score_image(metric, stack.slices[i].image)});
        } catch (const Error& e) {
            throw Error("metric_curve: slice " + std::to_string(i) + ": " + e.what());
        }
    }
    return curve;
}

/// out(z) = (max - raw(z)) / (max - min). A constant input yields 0.5
/// everywhere with the degenerate flag set. Curves that are already in the
/// blurriness convention are only rescaled, so the map is idempotent.
inline ScoreCurve normalize_to_blurriness(const ScoreCurve& curve)
{
    if (curve.samples.size() < 2)
        throw Error("normalize_to_blurriness: need at least 2 samples");
    const auto [lo_it, hi_it] = std::minmax_element(curve.samples.begin(), curve.samples.end(),
                                                    [](const auto& a, const auto& b) { return a.value < b.value; });
    const double lo = lo_it->value, hi = hi_it->value;
    ScoreCurve out;
    out.normalized = true;
    out.samples = curve.samples;
    if (!(hi > lo)) {
        out.degenerate = true;
        for (auto& s : out.samples)
            s.value = 0.5;
        return out;
    }
    for (auto& s : out.samples)
        s.value = curve.normalized ? (s.value - lo) / (hi - lo) : (hi - s.value) / (hi - lo);
    return out;
}

inline std::string format_g9(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline void write_curve_csv(std::ostream& os, const ScoreCurve& curve)
{
    os << "z_um,score\n";
    for (const auto& s : curve.samples)
        os << format_g9(s.z_um) << ',' << format_g9(s.value) << '\n';
}

}  // namespace focusbench
