#pragma once

// Calibration-guided autofocus: golden-section probing until the samples look
// convex, then a correlation of the samples against the calibration curve. A
// bounded Brent search over a classical metric is the comparison baseline.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "focusbench/calibration.hpp"
#include "focusbench/focus_metrics.hpp"
#include "focusbench/optics_sim.hpp"
#include "focusbench/scorer.hpp"

namespace focusbench {

inline constexpr double golden_fraction = 0.3819660112501051;  // 2 - phi

struct AfSample {
    double z_um = 0.0;
    double b = 0.0;
};

struct ConvexityVerdict {
    bool convex = false;
    double r2_quadratic = 0.0;
    double r2_linear = 0.0;
    double leading_coefficient = 0.0;
};

namespace detail {

// Least-squares polynomial of the given degree in (z - mean z); returns
// coefficients (constant first) and R^2.
inline std::pair<Eigen::VectorXd, double> poly_fit(const std::vector<AfSample>& s, int degree)
{
    const auto n = static_cast<Eigen::Index>(s.size());
    double zc = 0.0, bm = 0.0;
    for (const auto& p : s) {
        zc += p.z_um;
        bm += p.b;
    }
    zc /= static_cast<double>(n);
    bm /= static_cast<double>(n);
    Eigen::MatrixXd a(n, degree + 1);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double z = s[static_cast<std::size_t>(i)].z_um - zc;
        double t = 1.0;
        for (int d = 0; d <= degree; ++d) {
            a(i, d) = t;
            t *= z;
        }
        y[i] = s[static_cast<std::size_t>(i)].b;
    }
    const Eigen::VectorXd coef = a.colPivHouseholderQr().solve(y);
    const double ss_res = (a * coef - y).squaredNorm();
    const double ss_tot = (y.array() - bm).square().sum();
    const double r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
    return {coef, r2};
}

}  // namespace detail

/// With three samples: convex iff the middle (by z) is the strict minimum and
/// the interpolating parabola opens upward. With four or more: convex iff the
/// quadratic fit beats the linear fit's R^2 by more than eps and its leading
/// coefficient exceeds eps.
inline ConvexityVerdict convexity_check(std::vector<AfSample> samples, double eps = 1e-6)
{
    if (samples.size() < 3)
        throw Error("convexity_check: need at least 3 samples");
    std::sort(samples.begin(), samples.end(), [](const auto& a, const auto& b) { return a.z_um < b.z_um; });
    for (std::size_t i = 1; i < samples.size(); ++i)
        if (samples[i].z_um == samples[i - 1].z_um)
            throw Error("convexity_check: duplicate z = " + std::to_string(samples[i].z_um));
    ConvexityVerdict v;
    const auto [quad, r2q] = detail::poly_fit(samples, 2);
    const auto [lin, r2l] = detail::poly_fit(samples, 1);
    v.r2_quadratic = r2q;
    v.r2_linear = r2l;
    v.leading_coefficient = quad[2];
    if (samples.size() == 3) {
        const bool middle_min = samples[1].b < samples[0].b && samples[1].b < samples[2].b;
        v.convex = middle_min && v.leading_coefficient > 0.0;
    } else {
        v.convex = r2q > r2l + eps && v.leading_coefficient > eps;
    }
    return v;
}

/// Golden-section bracket (lo < mid < hi) on a function being minimized.
class GoldenSection {
public:
    GoldenSection(AfSample lo, AfSample mid, AfSample hi) : p_{lo, mid, hi}
    {
        if (!(lo.z_um < mid.z_um && mid.z_um < hi.z_um))
            throw Error("golden section: bracket must satisfy lo < mid < hi");
    }

    /// Bracket [a, b] with the interior point at the golden fraction from a.
    template <typename F>
    static GoldenSection from_interval(double a, double b, F&& f)
    {
        if (!(b - a > 0.0))
            throw Error("golden section: degenerate interval");
        const double m = a + golden_fraction * (b - a);
        return GoldenSection({a, f(a)}, {m, f(m)}, {b, f(b)});
    }

    const AfSample& lo() const { return p_[0]; }
    const AfSample& mid() const { return p_[1]; }
    const AfSample& hi() const { return p_[2]; }
    double length() const { return p_[2].z_um - p_[0].z_um; }

    /// Probe inside the larger sub-interval, at the golden fraction from mid.
    /// Ties go to the upper sub-interval.
    double next_probe() const
    {
        const double left = p_[1].z_um - p_[0].z_um;
        const double right = p_[2].z_um - p_[1].z_um;
        if (!(length() > 0.0) || !(left > 0.0) || !(right > 0.0))
            throw Error("golden section: bracket has collapsed");
        return right >= left ? p_[1].z_um + golden_fraction * right : p_[1].z_um - golden_fraction * left;
    }

    /// Keep the three consecutive points around the smallest value (first one
    /// wins ties).
    void update(AfSample probe)
    {
        std::array<AfSample, 4> q{p_[0], p_[1], p_[2], probe};
        std::sort(q.begin(), q.end(), [](const auto& a, const auto& b) { return a.z_um < b.z_um; });
        std::size_t m = 0;
        for (std::size_t i = 1; i < 4; ++i)
            if (q[i].b < q[m].b)
                m = i;
        if (m <= 1)
            p_ = {q[0], q[1], q[2]};
        else
            p_ = {q[1], q[2], q[3]};
    }

private:
    std::array<AfSample, 3> p_;
};

struct ShiftEstimate {
    double dz_um = 0.0;
    double residual = 0.0;  // mean squared mismatch at dz
    bool out_of_range = false;
};

namespace detail {

struct ShiftCost {
    double sse = 0.0;
    int clamped = 0;
};

inline ShiftCost shift_cost(const std::vector<AfSample>& s, const CalibrationCurve& calib, double dz)
{
    ShiftCost c;
    for (const auto& p : s) {
        const auto q = interpolate(calib, p.z_um - dz);
        c.sse += (q.b - p.b) * (q.b - p.b);
        c.clamped += q.out_of_range ? 1 : 0;
    }
    return c;
}

}  // namespace detail

/// Offset dz that best explains b_i ~ b_calib(z_i - dz): the focus lies at dz
/// in the samples' z frame. Exhaustive search on a grid of spacing/10
/// (anchored at 0, ties to smaller |dz|) followed by parabolic refinement.
inline ShiftEstimate correlate_shift(const std::vector<AfSample>& samples, const CalibrationCurve& calib)
{
    if (samples.empty())
        throw Error("correlate_shift: no samples");
    if (calib.samples.size() < 2 || !(calib.spacing_um > 0.0))
        throw Error("correlate_shift: calibration curve is empty");
    double zlo = samples.front().z_um, zhi = zlo;
    for (const auto& p : samples) {
        zlo = std::min(zlo, p.z_um);
        zhi = std::max(zhi, p.z_um);
    }
    const double step = calib.spacing_um / 10.0;
    const auto k0 = static_cast<long>(std::ceil((zlo - calib.z_max()) / step - 1e-9));
    const auto k1 = static_cast<long>(std::floor((zhi - calib.z_min()) / step + 1e-9));
    std::vector<double> cost;
    cost.reserve(static_cast<std::size_t>(k1 - k0 + 1));
    long best = k0;
    double best_cost = std::numeric_limits<double>::infinity();
    bool any_in_range = false;
    const auto ns = static_cast<int>(samples.size());
    for (long k = k0; k <= k1; ++k) {
        const double dz = static_cast<double>(k) * step;
        const auto c = detail::shift_cost(samples, calib, dz);
        any_in_range = any_in_range || c.clamped < ns;
        cost.push_back(c.sse);
        const double tol = 1e-12 * std::max(1.0, best_cost);
        if (c.sse < best_cost - tol || (std::abs(c.sse - best_cost) <= tol && std::abs(k) < std::abs(best))) {
            best_cost = c.sse;
            best = k;
        }
    }
    if (!any_in_range)
        throw Error("correlate_shift: every candidate offset falls outside the calibrated range");
    double offset = 0.0;
    const auto i = static_cast<std::size_t>(best - k0);
    if (i > 0 && i + 1 < cost.size()) {
        const double y0 = cost[i - 1], y1 = cost[i], y2 = cost[i + 1];
        const double den = y0 - 2.0 * y1 + y2;
        if (den > 0.0)
            offset = std::clamp(0.5 * (y0 - y2) / den, -0.5, 0.5);
    }
    ShiftEstimate est;
    est.dz_um = (static_cast<double>(best) + offset) * step;
    const auto c = detail::shift_cost(samples, calib, est.dz_um);
    est.residual = c.sse / ns;
    est.out_of_range = c.clamped > 0;
    return est;
}

/// Mean of the per-patch offsets.
inline double roi_average(const std::vector<double>& patch_offsets)
{
    if (patch_offsets.empty())
        throw Error("roi_average: no patches");
    return mean(patch_offsets);
}

struct AfLogRow {
    int iter = 0;
    double z_um = 0.0;
    double b = 0.0;
    std::string event;
};

struct AfResult {
    double delta_z_um = 0.0;  // move from the starting position
    double final_z_um = 0.0;
    int images_used = 0;
    bool converged = false;
    bool out_of_range = false;
    double residual = 0.0;
    std::vector<AfLogRow> log;
};

struct AfOptions {
    int max_images = 10;
    int patch_size = 128;
    int stride = 0;
    double convexity_eps = 1e-6;
    bool move_to_focus = true;
};

/// Raw scorer outputs (one per ROI patch) of an image taken at stage position z.
using PatchScoreSource = std::function<std::vector<double>(double z_um)>;

/// The autofocus decision loop, independent of how images are produced.
///
/// Samples z1, z1 - 2F and z1 + 2F, then golden-section probes until the
/// ROI-mean blurriness samples pass the convexity check or the image budget
/// runs out. Each patch's samples are correlated against the calibration; the
/// ROI average of those offsets is the focus estimate. Does not move anything:
/// final_z_um is where the caller should go.
inline AfResult autofocus_loop(const PatchScoreSource& acquire_scores, double z1, const CalibrationCurve& calib,
                               double fwhm_um, const AfOptions& opt = {})
{
    if (!(fwhm_um > 0.0))
        throw Error("autofocus: FWHM must be > 0");
    if (opt.max_images < 3)
        throw Error("autofocus: max_images must be >= 3");
    AfResult res;
    std::vector<AfSample> mean_samples;
    std::vector<std::vector<double>> patch_b;  // [image][patch]

    auto acquire = [&](double z, const char* event) {
        auto b = acquire_scores(z);
        if (b.empty() || (!patch_b.empty() && b.size() != patch_b.front().size()))
            throw Error("autofocus: inconsistent patch count");
        for (double& v : b)
            v = calib.to_blurriness(v);
        const double bm = mean(b);
        patch_b.push_back(std::move(b));
        mean_samples.push_back({z - z1, bm});
        ++res.images_used;
        res.log.push_back({res.images_used, z, bm, event});
        return AfSample{z - z1, bm};
    };

    const double f2 = 2.0 * fwhm_um;
    const AfSample s1 = acquire(z1, "init");
    const AfSample s2 = acquire(z1 - f2, "init");
    const AfSample s3 = acquire(z1 + f2, "init");
    GoldenSection gss(s2, s1, s3);

    while (true) {
        const auto verdict = convexity_check(mean_samples, opt.convexity_eps);
        if (verdict.convex) {
            res.converged = true;
            res.log.back().event = "converged";
            break;
        }
        if (res.images_used >= opt.max_images)
            break;
        const double zr = gss.next_probe();
        gss.update(acquire(z1 + zr, "gss"));
    }

    const std::size_t npatch = patch_b.front().size();
    std::vector<double> offsets;
    offsets.reserve(npatch);
    double residual = 0.0;
    for (std::size_t p = 0; p < npatch; ++p) {
        std::vector<AfSample> s;
        s.reserve(mean_samples.size());
        for (std::size_t i = 0; i < mean_samples.size(); ++i)
            s.push_back({mean_samples[i].z_um, patch_b[i][p]});
        const auto est = correlate_shift(s, calib);
        offsets.push_back(est.dz_um);
        residual += est.residual;
        res.out_of_range = res.out_of_range || est.out_of_range;
    }
    res.residual = residual / static_cast<double>(npatch);
    double dz = roi_average(offsets);
    const double limit = calib.half_range() + calib.spacing_um;
    if (std::abs(dz) > limit) {
        dz = std::clamp(dz, -limit, limit);
        res.out_of_range = true;
    }
    if (res.out_of_range)
        res.converged = false;
    res.delta_z_um = dz;
    res.final_z_um = z1 + dz;
    return res;
}

/// Autofocus on a microscope from its current stage position; moves the stage
/// to the estimated focus (or back to the start with move_to_focus off).
inline AfResult run_autofocus(VirtualMicroscope& scope, Scorer& scorer, const CalibrationCurve& calib,
                              double fwhm_um, const Roi& roi, const AfOptions& opt = {})
{
    const double z1 = scope.stage_z();
    auto source = [&](double z) {
        scope.move_stage_to(z);
        const Image img = scope.render_image(roi);
        return score_image_grid(scorer, img, img.bounds(), opt.patch_size, opt.stride).scores;
    };
    AfResult res = autofocus_loop(source, z1, calib, fwhm_um, opt);
    scope.move_stage_to(opt.move_to_focus ? res.final_z_um : z1);
    return res;
}

struct BrentOptions {
    double lower_um = -30.0;  // relative to the starting position
    double upper_um = 30.0;
    double xtol_um = 0.5;
    int max_images = 10;
    bool move_to_focus = true;
};

/// Bounded scalar minimization (golden section with parabolic steps, in the
/// fminbound formulation). Stops at xtol or after max_evals evaluations.
struct BrentMinimum {
    double x = 0.0;
    double fx = 0.0;
    int evaluations = 0;
    bool converged = false;
};

inline BrentMinimum bounded_brent(const std::function<double(double)>& f, double a, double b, double xtol,
                                  int max_evals)
{
    if (!(a < b))
        throw Error("brent: lower bound must be < upper bound");
    if (!(xtol > 0.0))
        throw Error("brent: xtol must be > 0");
    if (max_evals < 1)
        throw Error("brent: need at least one evaluation");
    const double sqrt_eps = std::sqrt(2.2e-16);
    double fulc = a + golden_fraction * (b - a);
    double nfc = fulc, xf = fulc;
    double rat = 0.0, e = 0.0;
    double x = xf;
    double fx = f(x);
    int num = 1;
    double ffulc = fx, fnfc = fx;
    double xm = 0.5 * (a + b);
    double tol1 = sqrt_eps * std::abs(xf) + xtol / 3.0;
    double tol2 = 2.0 * tol1;
    bool converged = true;
    auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
    while (std::abs(xf - xm) > tol2 - 0.5 * (b - a)) {
        if (num >= max_evals) {
            converged = false;
            break;
        }
        bool golden = true;
        if (std::abs(e) > tol1) {
            golden = false;
            double r = (xf - nfc) * (fx - ffulc);
            double q = (xf - fulc) * (fx - fnfc);
            double p = (xf - fulc) * q - (xf - nfc) * r;
            q = 2.0 * (q - r);
            if (q > 0.0)
                p = -p;
            q = std::abs(q);
            r = e;
            e = rat;
            if (std::abs(p) < std::abs(0.5 * q * r) && p > q * (a - xf) && p < q * (b - xf)) {
                rat = p / q;
                x = xf + rat;
                if ((x - a) < tol2 || (b - x) < tol2) {
                    const double si = sign(xm - xf) + ((xm - xf) == 0.0 ? 1.0 : 0.0);
                    rat = tol1 * si;
                }
            } else {
                golden = true;
            }
        }
        if (golden) {
            e = xf >= xm ? a - xf : b - xf;
            rat = golden_fraction * e;
        }
        const double si = sign(rat) + (rat == 0.0 ? 1.0 : 0.0);
        x = xf + si * std::max(std::abs(rat), tol1);
        const double fu = f(x);
        ++num;
        if (fu <= fx) {
            if (x >= xf)
                a = xf;
            else
                b = xf;
            fulc = nfc;
            ffulc = fnfc;
            nfc = xf;
            fnfc = fx;
            xf = x;
            fx = fu;
        } else {
            if (x < xf)
                a = x;
            else
                b = x;
            if (fu <= fnfc || nfc == xf) {
                fulc = nfc;
                ffulc = fnfc;
                nfc = x;
                fnfc = fu;
            } else if (fu <= ffulc || fulc == xf || fulc == nfc) {
                fulc = x;
                ffulc = fu;
            }
        }
        xm = 0.5 * (a + b);
        tol1 = sqrt_eps * std::abs(xf) + xtol / 3.0;
        tol2 = 2.0 * tol1;
    }
    return {xf, fx, num, converged};
}

/// Baseline: maximize a classical sharpness metric over stage positions
/// within [z1 + lower, z1 + upper]. One image per evaluation.
inline AfResult brent_autofocus(VirtualMicroscope& scope, MetricKind metric, const Roi& roi,
                                const BrentOptions& opt = {})
{
    const double z1 = scope.stage_z();
    const double travel = scope.config().z_travel_um;
    if (std::abs(z1 + opt.lower_um) > travel || std::abs(z1 + opt.upper_um) > travel)
        throw Error("brent autofocus: search bounds exceed stage travel");
    AfResult res;
    auto f = [&](double dz) {
        scope.move_stage_to(z1 + dz);
        const double s = score_image(metric, scope.render_image(roi));
        ++res.images_used;
        res.log.push_back({res.images_used, z1 + dz, s, "brent"});
        return -s;
    };
    const auto m = bounded_brent(f, opt.lower_um, opt.upper_um, opt.xtol_um, opt.max_images);
    res.delta_z_um = m.x;
    res.final_z_um = z1 + m.x;
    res.converged = m.converged;
    if (opt.move_to_focus)
        scope.move_stage_to(res.final_z_um);
    else
        scope.move_stage_to(z1);
    return res;
}

/// CSV `iter,z_um,b,event` with a trailing `# result ...` line.
inline void write_run_log(std::ostream& os, const AfResult& r)
{
    os << "iter,z_um,b,event\n";
    for (const auto& row : r.log)
        os << row.iter << ',' << format_g9(row.z_um) << ',' << format_g9(row.b) << ',' << row.event << '\n';
    os << "# result dz_um=" << format_g9(r.delta_z_um) << " images=" << r.images_used
       << " converged=" << (r.converged ? "true" : "false") << " out_of_range=" << (r.out_of_range ? "true" : "false")
       << '\n';
}

}  // namespace focusbench
