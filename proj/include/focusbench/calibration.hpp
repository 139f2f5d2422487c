#pragma once

// Instrument calibration: the depth -> blurriness response b_calib(z), its
// Moffat dip model and the FWHM that seeds the autofocus search.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "focusbench/focus_metrics.hpp"
#include "focusbench/optics_sim.hpp"
#include "focusbench/scorer.hpp"

namespace focusbench {

/// m(z) = c - A * (1 + ((z - z0) / gamma)^2)^(-beta)
struct MoffatFit {
    double amplitude = 0.0;
    double offset = 0.0;
    double z0_um = 0.0;
    double gamma_um = 1.0;
    double beta = 2.0;
    double residual_rms = 0.0;
    int iterations = 0;

    double operator()(double z) const
    {
        const double t = (z - z0_um) / gamma_um;
        return offset - amplitude * std::pow(1.0 + t * t, -beta);
    }
};

class MoffatFitError : public Error {
public:
    MoffatFitError(const std::string& what, MoffatFit last) : Error(what), last_iterate(last) {}
    MoffatFit last_iterate;
};

/// 2 gamma sqrt(2^(1/beta) - 1), evaluated with expm1 so large beta keeps precision.
inline double moffat_fwhm(double gamma_um, double beta)
{
    return 2.0 * gamma_um * std::sqrt(std::expm1(std::numbers::ln2 / beta));
}

inline double fwhm(const MoffatFit& fit) { return moffat_fwhm(fit.gamma_um, fit.beta); }

struct CalibrationCurve {
    std::vector<CurveSample> samples;  // (z, b), z ascending, b in [0, 1]
    double spacing_um = 0.0;
    bool centered = false;
    // Affine map from raw scorer output to the stored [0, 1] scale.
    double raw_min = 0.0;
    double raw_max = 1.0;
    std::optional<MoffatFit> moffat;

    double z_min() const { return samples.front().z_um; }
    double z_max() const { return samples.back().z_um; }
    double half_range() const { return 0.5 * (z_max() - z_min()); }

    double to_blurriness(double raw) const { return (raw - raw_min) / (raw_max - raw_min); }
};

struct CalibrationQuery {
    double b = 0.0;
    bool out_of_range = false;
};

/// Piecewise-linear in z; clamps to the endpoint values outside the sampled range.
inline CalibrationQuery interpolate(const CalibrationCurve& curve, double z)
{
    const auto& s = curve.samples;
    if (z <= s.front().z_um)
        return {s.front().value, z < s.front().z_um};
    if (z >= s.back().z_um)
        return {s.back().value, z > s.back().z_um};
    auto hi = std::upper_bound(s.begin(), s.end(), z, [](double v, const CurveSample& c) { return v < c.z_um; });
    auto lo = hi - 1;
    if (lo->z_um == z)
        return {lo->value, false};
    const double t = (z - lo->z_um) / (hi->z_um - lo->z_um);
    return {lo->value + t * (hi->value - lo->value), false};
}

namespace detail {

using Vec5 = Eigen::Matrix<double, 5, 1>;

inline Vec5 pack(const MoffatFit& m) { return {m.amplitude, m.offset, m.z0_um, m.gamma_um, m.beta}; }

inline MoffatFit unpack(const Vec5& p)
{
    MoffatFit m;
    m.amplitude = p[0];
    m.offset = p[1];
    m.z0_um = p[2];
    m.gamma_um = p[3];
    m.beta = p[4];
    return m;
}

inline double sum_sq(const std::vector<CurveSample>& s, const MoffatFit& m)
{
    double acc = 0.0;
    for (const auto& p : s) {
        const double r = m(p.z_um) - p.value;
        acc += r * r;
    }
    return acc;
}

}  // namespace detail

/// Least-squares Moffat dip by damped Gauss-Newton (Marquardt-scaled damping).
///
/// Starts from z0 = argmin, c = max, A = max - min, gamma = half-width at
/// half-depth, beta = 2. Stops once ||step|| < 1e-8 ||p||; 200 iterations
/// without that is a failure.
inline MoffatFit fit_moffat(const CalibrationCurve& curve)
{
    const auto& s = curve.samples;
    if (s.size() < 7)
        throw Error("fit_moffat: need at least 7 samples, got " + std::to_string(s.size()));
    const auto [lo_it, hi_it] =
        std::minmax_element(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.value < b.value; });
    const double lo = lo_it->value, hi = hi_it->value;
    if (!(hi > lo))
        throw Error("fit_moffat: degenerate (constant) curve");

    MoffatFit init;
    init.z0_um = lo_it->z_um;
    init.offset = hi;
    init.amplitude = hi - lo;
    init.beta = 2.0;
    {
        const double half = 0.5 * (lo + hi);
        const auto imin = static_cast<std::size_t>(lo_it - s.begin());
        double widths = 0.0;
        int sides = 0;
        for (std::size_t i = imin + 1; i < s.size(); ++i)
            if (s[i].value >= half) {
                widths += s[i].z_um - init.z0_um;
                ++sides;
                break;
            }
        for (std::size_t i = imin; i-- > 0;)
            if (s[i].value >= half) {
                widths += init.z0_um - s[i].z_um;
                ++sides;
                break;
            }
        init.gamma_um = sides > 0 ? widths / sides : 0.25 * (s.back().z_um - s.front().z_um);
    }

    detail::Vec5 p = detail::pack(init);
    MoffatFit current = init;
    double cost = detail::sum_sq(s, current);
    double lambda = 1e-3;
    const auto n = static_cast<Eigen::Index>(s.size());
    Eigen::Matrix<double, Eigen::Dynamic, 5> jac(n, 5);
    Eigen::VectorXd res(n);

    for (int it = 1; it <= 200; ++it) {
        const double A = p[0], g = p[3], be = p[4];
        for (Eigen::Index i = 0; i < n; ++i) {
            const double dz = s[static_cast<std::size_t>(i)].z_um - p[2];
            const double u = 1.0 + (dz / g) * (dz / g);
            const double pw = std::pow(u, -be);
            const double pw1 = pw / u;
            jac(i, 0) = -pw;
            jac(i, 1) = 1.0;
            jac(i, 2) = -A * 2.0 * be * dz * pw1 / (g * g);
            jac(i, 3) = -A * 2.0 * be * dz * dz * pw1 / (g * g * g);
            jac(i, 4) = A * std::log(u) * pw;
            res[i] = p[1] - A * pw - s[static_cast<std::size_t>(i)].value;
        }
        const Eigen::Matrix<double, 5, 5> jtj = jac.transpose() * jac;
        const detail::Vec5 jtr = jac.transpose() * res;
        bool accepted = false;
        while (lambda < 1e16) {
            Eigen::Matrix<double, 5, 5> lhs = jtj;
            for (int d = 0; d < 5; ++d)
                lhs(d, d) += lambda * std::max(jtj(d, d), 1e-300);
            const detail::Vec5 step = lhs.ldlt().solve(-jtr);
            const detail::Vec5 trial = p + step;
            if (step.allFinite() && trial[3] > 0.0 && trial[4] > 0.0) {
                const MoffatFit cand = detail::unpack(trial);
                const double c2 = detail::sum_sq(s, cand);
                if (std::isfinite(c2) && c2 <= cost) {
                    const bool small = step.norm() < 1e-8 * (p.norm() + 1e-8);
                    p = trial;
                    current = cand;
                    cost = c2;
                    lambda = std::max(lambda / 10.0, 1e-12);
                    accepted = true;
                    if (small) {
                        current.iterations = it;
                        current.residual_rms = std::sqrt(cost / static_cast<double>(n));
                        if (!(current.gamma_um > 0.0))
                            throw MoffatFitError("fit_moffat: gamma <= 0 at solution", current);
                        return current;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if (!accepted) {
            // No downhill step exists at any damping: p is a stationary point.
            current.iterations = it;
            current.residual_rms = std::sqrt(cost / static_cast<double>(n));
            if (!(current.gamma_um > 0.0))
                throw MoffatFitError("fit_moffat: gamma <= 0 at solution", current);
            return current;
        }
    }
    current.iterations = 200;
    current.residual_rms = std::sqrt(cost / static_cast<double>(n));
    throw MoffatFitError("fit_moffat: no convergence after 200 iterations (rms " +
                             std::to_string(current.residual_rms) + ")",
                         current);
}

/// Round a value through its stored text form ("%.9g").
inline double quantize_g9(double v) { return std::strtod(format_g9(v).c_str(), nullptr); }

/// Score every slice over the roi (patch-grid mean), normalize to [0, 1] and
/// shift z so the minimum sits at the origin. The stored values are rounded to
/// their file representation so reloading and refitting is exact.
inline CalibrationCurve build_calibration(const ZStack& stack, Scorer& scorer, const Roi& roi, int patch_size = 128,
                                          int stride = 0)
{
    stack.validate();
    if (stack.slices.size() < 15)
        throw Error("build_calibration: need at least 15 slices, got " + std::to_string(stack.slices.size()));
    std::vector<double> raw;
    raw.reserve(stack.slices.size());
    for (const auto& slice : stack.slices)
        raw.push_back(score_image_grid(scorer, slice.image, roi, patch_size, stride).mean());
    const auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
    if (!(*hi_it > *lo_it))
        throw Error("calibration object lacks texture: scorer response is constant across the stack");
    CalibrationCurve curve;
    curve.raw_min = *lo_it;
    curve.raw_max = *hi_it;
    curve.spacing_um = stack.spacing_um;
    curve.centered = true;
    const double z_at_min = stack.slices[static_cast<std::size_t>(lo_it - raw.begin())].z_um;
    for (std::size_t i = 0; i < raw.size(); ++i)
        curve.samples.push_back(
            {quantize_g9(stack.slices[i].z_um - z_at_min), quantize_g9(curve.to_blurriness(raw[i]))});
    curve.raw_min = quantize_g9(curve.raw_min);
    curve.raw_max = quantize_g9(curve.raw_max);
    curve.spacing_um = quantize_g9(curve.spacing_um);
    return curve;
}

/// CSV `z_um,b` followed by `# moffat ...` and `# normalization ...` comment lines.
inline void write_calibration(std::ostream& os, const CalibrationCurve& curve)
{
    os << "z_um,b\n";
    for (const auto& s : curve.samples)
        os << format_g9(s.z_um) << ',' << format_g9(s.value) << '\n';
    if (curve.moffat) {
        const auto& m = *curve.moffat;
        os << "# moffat A=" << format_g9(m.amplitude) << " c=" << format_g9(m.offset) << " z0=" << format_g9(m.z0_um)
           << " gamma=" << format_g9(m.gamma_um) << " beta=" << format_g9(m.beta) << " fwhm=" << format_g9(fwhm(m))
           << " rms=" << format_g9(m.residual_rms) << '\n';
    }
    os << "# normalization raw_min=" << format_g9(curve.raw_min) << " raw_max=" << format_g9(curve.raw_max)
       << " spacing=" << format_g9(curve.spacing_um) << '\n';
}

namespace detail {

inline double parse_double(const std::string& s, const std::string& what)
{
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw Error("calibration file: bad number '" + s + "' for " + what);
    return v;
}

inline std::optional<std::string> field(const std::string& line, const std::string& key)
{
    std::istringstream is(line);
    std::string tok;
    while (is >> tok)
        if (tok.rfind(key + "=", 0) == 0)
            return tok.substr(key.size() + 1);
    return std::nullopt;
}

}  // namespace detail

inline CalibrationCurve read_calibration(std::istream& is)
{
    CalibrationCurve curve;
    std::string line;
    if (!std::getline(is, line) || line != "z_um,b")
        throw Error("calibration file: expected header 'z_um,b'");
    std::optional<double> spacing;
    while (std::getline(is, line)) {
        if (line.empty())
            continue;
        if (line[0] == '#') {
            if (line.rfind("# moffat", 0) == 0) {
                MoffatFit m;
                auto get = [&](const char* k) {
                    auto v = detail::field(line, k);
                    if (!v)
                        throw Error(std::string("calibration file: moffat line lacks ") + k);
                    return detail::parse_double(*v, k);
                };
                m.amplitude = get("A");
                m.offset = get("c");
                m.z0_um = get("z0");
                m.gamma_um = get("gamma");
                m.beta = get("beta");
                m.residual_rms = get("rms");
                curve.moffat = m;
            } else if (line.rfind("# normalization", 0) == 0) {
                if (auto v = detail::field(line, "raw_min")) curve.raw_min = detail::parse_double(*v, "raw_min");
                if (auto v = detail::field(line, "raw_max")) curve.raw_max = detail::parse_double(*v, "raw_max");
                if (auto v = detail::field(line, "spacing")) spacing = detail::parse_double(*v, "spacing");
            }
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw Error("calibration file: malformed row '" + line + "'");
        const double z = detail::parse_double(line.substr(0, comma), "z_um");
        const double b = detail::parse_double(line.substr(comma + 1), "b");
        if (!curve.samples.empty() && !(z > curve.samples.back().z_um))
            throw Error("calibration file: rows must be sorted by ascending z");
        curve.samples.push_back({z, b});
    }
    if (curve.samples.size() < 2)
        throw Error("calibration file: need at least 2 rows");
    curve.spacing_um = spacing ? *spacing : curve.samples[1].z_um - curve.samples[0].z_um;
    curve.centered = true;
    return curve;
}

inline void save_calibration(const std::string& path, const CalibrationCurve& curve)
{
    std::ofstream os(path);
    if (!os)
        throw Error("cannot write calibration file '" + path + "'");
    write_calibration(os, curve);
}

inline CalibrationCurve load_calibration(const std::string& path)
{
    std::ifstream is(path);
    if (!is)
        throw Error("cannot read calibration file '" + path + "'");
    return read_calibration(is);
}

}  // namespace focusbench
