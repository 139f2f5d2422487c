#pragma once

// Evaluation statistics over ensembles of normalized depth-response curves,
// and the benchmark drivers that produce them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "focusbench/af_engine.hpp"
#include "focusbench/calibration.hpp"
#include "focusbench/focus_metrics.hpp"
#include "focusbench/optics_sim.hpp"
#include "focusbench/scorer.hpp"

namespace focusbench {

struct CurveEnsemble {
    std::vector<ScoreCurve> curves;
    std::vector<std::string> labels;

    /// Throws unless every curve is normalized and shares the first curve's z grid.
    void validate() const
    {
        if (curves.empty())
            throw Error("curve ensemble is empty");
        const auto z0 = curves.front().z();
        for (std::size_t i = 0; i < curves.size(); ++i) {
            if (!curves[i].normalized)
                throw Error("curve ensemble: curve " + std::to_string(i) + " is not normalized");
            if (curves[i].z() != z0)
                throw Error("curve ensemble: curve " + std::to_string(i) + " has a different z grid");
        }
    }

    std::vector<double> z() const { return curves.front().z(); }

    std::vector<double> mean_curve() const
    {
        std::vector<double> m(curves.front().samples.size(), 0.0);
        for (const auto& c : curves)
            for (std::size_t j = 0; j < m.size(); ++j)
                m[j] += c.samples[j].value;
        for (double& v : m)
            v /= static_cast<double>(curves.size());
        return m;
    }
};

/// Mean over the grid points with |z| <= z_window/2 of the across-curve
/// (population) standard deviation.
inline double curve_sd(const CurveEnsemble& ens, double z_window_um)
{
    ens.validate();
    if (ens.curves.size() < 2)
        throw Error("curve_sd: need at least 2 curves");
    const auto z = ens.z();
    const double half = 0.5 * z_window_um;
    if (!(z_window_um > 0.0) || z.front() > -half + 1e-9 || z.back() < half - 1e-9)
        throw Error("curve_sd: window of " + format_g9(z_window_um) + " um is not inside the z grid");
    double acc = 0.0;
    int count = 0;
    std::vector<double> col(ens.curves.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
        if (std::abs(z[j]) > half + 1e-9)
            continue;
        for (std::size_t i = 0; i < ens.curves.size(); ++i)
            col[i] = ens.curves[i].samples[j].value;
        acc += std::sqrt(variance(col));
        ++count;
    }
    if (count == 0)
        throw Error("curve_sd: no grid point inside the window");
    return acc / count;
}

/// Bin index of a normalized score among `bins` equal-width bins over [0, 1].
inline int score_bin(double b, int bins)
{
    const int k = static_cast<int>(std::floor(std::clamp(b, 0.0, 1.0) * bins));
    return std::min(k, bins - 1);
}

/// Conditional probability table p(b | z) estimated from the ensemble:
/// table[j][k] is the fraction of curves whose score at grid point j lands in bin k.
inline std::vector<std::vector<double>> conditional_table(const CurveEnsemble& ens, int bins)
{
    ens.validate();
    if (bins < 2)
        throw Error("conditional_entropy: bins must be >= 2");
    const std::size_t nz = ens.curves.front().samples.size();
    std::vector<std::vector<double>> p(nz, std::vector<double>(static_cast<std::size_t>(bins), 0.0));
    const double w = 1.0 / static_cast<double>(ens.curves.size());
    for (const auto& c : ens.curves)
        for (std::size_t j = 0; j < nz; ++j)
            p[j][static_cast<std::size_t>(score_bin(c.samples[j].value, bins))] += w;
    return p;
}

/// H = -sum_{b, z} p(b|z) ln( p(b|z) / sum_{z_i} p(b|z_i) ), natural log,
/// evaluated from a p(b|z) table (rows z, columns b); zero cells contribute 0.
/// Summed per bin as S_b ln S_b - sum_z p ln p with S_b the column sum, so a
/// bin holding only ones gives S_b ln S_b with a single rounding.
inline double entropy_from_table(const std::vector<std::vector<double>>& p)
{
    if (p.empty())
        return 0.0;
    const std::size_t nb = p.front().size();
    double h = 0.0;
    for (std::size_t k = 0; k < nb; ++k) {
        double s = 0.0, plogp = 0.0;
        for (const auto& row : p) {
            s += row[k];
            if (row[k] > 0.0)
                plogp += row[k] * std::log(row[k]);
        }
        if (s > 0.0)
            h += s * std::log(s) - plogp;
    }
    return h;
}

inline double conditional_entropy(const CurveEnsemble& ens, int bins = 64)
{
    return entropy_from_table(conditional_table(ens, bins));
}

struct DepthRange {
    double range_um = 0.0;
    double range_over_dof = 0.0;
};

/// Largest r such that the ensemble-mean curve's finite-difference slope
/// magnitude stays >= slope_floor on every grid segment walking outward from
/// z = 0 up to +r and down to -r.
inline DepthRange depth_information_range(const CurveEnsemble& ens, double slope_floor = 1.0 / 255.0,
                                          double depth_of_field_um = 10.7)
{
    ens.validate();
    if (!(depth_of_field_um > 0.0))
        throw Error("depth_information_range: depth of field must be > 0");
    const auto z = ens.z();
    const auto m = ens.mean_curve();
    auto slope_ok = [&](std::size_t j) {
        return std::abs(m[j + 1] - m[j]) / (z[j + 1] - z[j]) >= slope_floor;
    };
    // Walk from the grid points nearest z = 0 on each side; a segment that
    // straddles 0 belongs to neither side.
    std::size_t up = 0;
    while (up < z.size() && z[up] < 0.0)
        ++up;
    double r_up = 0.0;
    for (std::size_t j = up; j + 1 < z.size() && slope_ok(j); ++j)
        r_up = z[j + 1];
    // one past the last grid point <= 0
    const std::size_t down = (up < z.size() && z[up] == 0.0) ? up + 1 : up;
    double r_down = 0.0;
    for (std::size_t j = down; j >= 2 && slope_ok(j - 2); --j)
        r_down = -z[j - 2];
    DepthRange r;
    r.range_um = std::min(r_up, r_down);
    r.range_over_dof = r.range_um / depth_of_field_um;
    return r;
}

// ---------------------------------------------------------------------------
// Benchmarks

/// Everything the synthetic benchmarks depend on. Seeds for each stream are
/// derived from master_seed with fixed offsets (see derived_seed).
struct BenchConfig {
    OpticalConfig optics;
    PsfModel psf;
    NoiseModel noise;  // seed ignored: derived per texture / trial
    ResponseMap response;
    std::uint64_t master_seed = 1;

    // curve ensembles (invariance, entropy, depth range)
    int textures = 20;
    double z_min_um = -120.0;
    double z_max_um = 120.0;
    int slices = 132;
    int ensemble_roi_px = 128;
    double sd_window_um = 100.0;
    int entropy_bins = 64;
    double slope_floor_per_um = 1.0 / 255.0;

    // calibration used by the autofocus trials
    double calib_half_range_um = 60.0;
    double calib_spacing_um = 0.5;
    int calib_roi_px = 384;

    // autofocus trials
    int trials = 100;
    int budget_min = 3;
    int budget_max = 10;
    double offset_range_fwhm = 3.0;  // true focus uniform in +/- this many FWHM
    double oracle_noise_sd = 0.01;
    int af_roi_px = 256;
    int patch_px = 128;
    double brent_xtol_um = 0.1;
    bool include_spectral_af = true;

    // optional subprocess scorer included in the curve ensembles
    std::string external_command;
};

/// Seed offsets from the master seed; stable so stored seeds replay.
enum class SeedStream : std::uint64_t {
    ScopeNoise = 1,
    Texture = 2,
    OracleNoise = 3,
    Calibration = 4,
    Trial = 5,
};

inline std::uint64_t derived_seed(std::uint64_t master, SeedStream stream, std::uint64_t index = 0)
{
    return mix_seed(mix_seed(master + static_cast<std::uint64_t>(stream)), index);
}

/// Centered specimen of bandlimited texture large enough for roi at defocus up to max_defocus_um.
inline Image padded_specimen(const PsfModel& psf, int roi_px, double max_defocus_um, std::uint64_t seed)
{
    const int pad = required_padding(psf, max_defocus_um) + 1;
    const int side = std::max(128, roi_px + 2 * pad);
    return make_texture(TextureKind::BandlimitedNoise, side, side, seed);
}

struct MethodCurves {
    std::string method;
    CurveEnsemble ensemble;
};

/// Curve of a scorer backend: per-slice patch-grid mean, min-max normalized.
inline ScoreCurve scorer_curve(Scorer& scorer, const ZStack& stack, int patch_px)
{
    ScoreCurve raw;
    for (const auto& s : stack.slices)
        raw.samples.push_back({s.z_um, score_image_grid(scorer, s.image, s.image.bounds(), patch_px).mean()});
    raw.normalized = true;  // already blurriness-oriented: rescale only
    return normalize_to_blurriness(raw);
}

using ScorerFactory = std::function<std::unique_ptr<Scorer>(const VirtualMicroscope&)>;

struct NamedScorer {
    std::string name;
    ScorerFactory make;
};

/// One stack per texture (true focus at z = 0), scored by every classical
/// metric and every scorer backend.
inline std::vector<MethodCurves> build_curve_ensembles(const BenchConfig& cfg, const std::vector<NamedScorer>& scorers)
{
    if (cfg.textures < 2)
        throw Error("bench: need at least 2 textures");
    if (cfg.slices < 2)
        throw Error("bench: need at least 2 slices");
    std::vector<MethodCurves> out;
    for (MetricKind m : all_metrics)
        out.push_back({to_string(m), {}});
    for (const auto& s : scorers)
        out.push_back({s.name, {}});
    const double step = (cfg.z_max_um - cfg.z_min_um) / (cfg.slices - 1);
    const double reach = std::max(std::abs(cfg.z_min_um), std::abs(cfg.z_max_um));
    for (int t = 0; t < cfg.textures; ++t) {
        NoiseModel noise = cfg.noise;
        noise.seed = derived_seed(cfg.master_seed, SeedStream::ScopeNoise, static_cast<std::uint64_t>(t));
        VirtualMicroscope scope(cfg.optics, cfg.psf,
                                padded_specimen(cfg.psf, cfg.ensemble_roi_px, reach,
                                                derived_seed(cfg.master_seed, SeedStream::Texture,
                                                             static_cast<std::uint64_t>(t))),
                                0.0, noise);
        const Roi roi = scope.centered(cfg.ensemble_roi_px, cfg.ensemble_roi_px);
        const ZStack stack = acquire_stack(scope, cfg.z_min_um, cfg.z_max_um, step, roi);
        if (stack.slices.size() != static_cast<std::size_t>(cfg.slices))
            throw Error("bench: z grid produced " + std::to_string(stack.slices.size()) + " slices");
        const std::string label = "texture" + std::to_string(t);
        std::size_t i = 0;
        for (MetricKind m : all_metrics) {
            out[i].ensemble.curves.push_back(normalize_to_blurriness(metric_curve(m, stack)));
            out[i].ensemble.labels.push_back(label);
            ++i;
        }
        for (const auto& s : scorers) {
            auto scorer = s.make(scope);
            out[i].ensemble.curves.push_back(scorer_curve(*scorer, stack, cfg.patch_px));
            out[i].ensemble.labels.push_back(label);
            ++i;
        }
    }
    return out;
}

struct InvarianceRow {
    std::string method;
    double sigma = 0.0;
    double window_um = 0.0;
};

struct EntropyRow {
    std::string method;
    double h = 0.0;
    int bins = 0;
    double z_range_um = 0.0;
};

struct RangeRow {
    std::string method;
    double range_um = 0.0;
    double range_over_dof = 0.0;
};

struct CurveReport {
    std::vector<InvarianceRow> invariance;
    std::vector<EntropyRow> entropy;
    std::vector<RangeRow> range;
};

inline CurveReport evaluate_curves(const BenchConfig& cfg, const std::vector<MethodCurves>& methods)
{
    CurveReport r;
    for (const auto& m : methods) {
        r.invariance.push_back({m.method, curve_sd(m.ensemble, cfg.sd_window_um), cfg.sd_window_um});
        r.entropy.push_back({m.method, conditional_entropy(m.ensemble, cfg.entropy_bins), cfg.entropy_bins,
                             cfg.z_max_um - cfg.z_min_um});
        const auto d = depth_information_range(m.ensemble, cfg.slope_floor_per_um, cfg.optics.depth_of_field_um);
        r.range.push_back({m.method, d.range_um, d.range_over_dof});
    }
    return r;
}

// --- autofocus error vs. image budget ---

struct AfTrialRow {
    std::string method;
    int budget = 0;
    int trial = 0;
    double error_um = 0.0;
    std::uint64_t seed = 0;
    int images_used = 0;
};

struct AfCell {
    std::string method;
    int budget = 0;
    double mean_error_um = 0.0;
    double sd_error_um = 0.0;
    int trials = 0;
    double mean_images = 0.0;
};

struct AfBenchReport {
    std::vector<AfTrialRow> rows;
    std::vector<AfCell> cells;
    double oracle_fwhm_um = 0.0;
    double spectral_fwhm_um = 0.0;

    const AfCell& cell(const std::string& method, int budget) const
    {
        for (const auto& c : cells)
            if (c.method == method && c.budget == budget)
                return c;
        throw Error("af bench: no cell for " + method + " at budget " + std::to_string(budget));
    }
};

class AfBenchError : public Error {
public:
    AfBenchError(const std::string& what, std::uint64_t seed) : Error(what), trial_seed(seed) {}
    std::uint64_t trial_seed;
};

struct BenchCalibration {
    CalibrationCurve curve;
    double fwhm_um = 0.0;
};

/// Calibration stack on its own texture, scored by `scorer`, fitted.
inline BenchCalibration bench_calibration(const BenchConfig& cfg, const ScorerFactory& make, std::uint64_t index)
{
    NoiseModel noise = cfg.noise;
    noise.seed = derived_seed(cfg.master_seed, SeedStream::Calibration, index);
    VirtualMicroscope scope(cfg.optics, cfg.psf,
                            padded_specimen(cfg.psf, cfg.calib_roi_px, cfg.calib_half_range_um,
                                            derived_seed(cfg.master_seed, SeedStream::Calibration, index + 100)),
                            0.0, noise);
    const Roi roi = scope.centered(cfg.calib_roi_px, cfg.calib_roi_px);
    const ZStack stack = acquire_stack(scope, -cfg.calib_half_range_um, cfg.calib_half_range_um, cfg.calib_spacing_um, roi);
    auto scorer = make(scope);
    BenchCalibration c;
    c.curve = build_calibration(stack, *scorer, stack.slices.front().image.bounds(), cfg.patch_px);
    c.curve.moffat = fit_moffat(c.curve);
    c.fwhm_um = fwhm(*c.curve.moffat);
    return c;
}

inline const char* af_method_oracle = "ORACLE";
inline const char* af_method_spectral = "SPECTRAL";
inline const char* af_method_brent_tenengrad = "BRENT+TENENGRAD";
inline const char* af_method_brent_hpf = "BRENT+HPF";

/// For every trial: fresh texture, true focus uniform in +/- offset_range_fwhm
/// x FWHM (oracle calibration), stage starting at 0. Each method runs at every
/// budget from the same start; the error is |final stage z - true focus|.
inline AfBenchReport af_error_vs_iterations(const BenchConfig& cfg, const std::function<void(int)>& progress = {})
{
    if (cfg.trials < 1)
        throw Error("af bench: trials must be >= 1");
    if (cfg.budget_min < 3 || cfg.budget_max < cfg.budget_min)
        throw Error("af bench: budgets must satisfy 3 <= min <= max");
    AfBenchReport rep;
    const ScorerFactory oracle_clean = [&](const VirtualMicroscope& s) {
        return std::make_unique<OracleScorer>(s, cfg.response, cfg.oracle_noise_sd,
                                              derived_seed(cfg.master_seed, SeedStream::OracleNoise, 0));
    };
    const ScorerFactory spectral = [&](const VirtualMicroscope&) { return std::make_unique<SpectralScorer>(cfg.response); };
    const auto cal_oracle = bench_calibration(cfg, oracle_clean, 0);
    rep.oracle_fwhm_um = cal_oracle.fwhm_um;
    BenchCalibration cal_spectral;
    if (cfg.include_spectral_af) {
        cal_spectral = bench_calibration(cfg, spectral, 1);
        rep.spectral_fwhm_um = cal_spectral.fwhm_um;
    }
    const double fw = cal_oracle.fwhm_um;
    const double offset_range = cfg.offset_range_fwhm * fw;
    const double max_probe =
        std::max(2.0 * std::max(fw, cal_spectral.fwhm_um), offset_range);  // farthest stage position visited
    const double max_defocus = offset_range + max_probe + 1.0;

    std::vector<std::string> methods{af_method_oracle};
    if (cfg.include_spectral_af)
        methods.push_back(af_method_spectral);
    methods.push_back(af_method_brent_tenengrad);
    methods.push_back(af_method_brent_hpf);

    for (int t = 0; t < cfg.trials; ++t) {
        const std::uint64_t seed = derived_seed(cfg.master_seed, SeedStream::Trial, static_cast<std::uint64_t>(t));
        try {
            std::mt19937_64 rng(seed);
            const double truth = std::uniform_real_distribution<double>(-offset_range, offset_range)(rng);
            NoiseModel noise = cfg.noise;
            noise.seed = mix_seed(seed, 1);
            VirtualMicroscope scope(cfg.optics, cfg.psf, padded_specimen(cfg.psf, cfg.af_roi_px, max_defocus, mix_seed(seed, 2)),
                                    truth, noise);
            scope.set_render_cache(true);
            const Roi roi = scope.centered(cfg.af_roi_px, cfg.af_roi_px);
            for (const auto& method : methods)
                for (int budget = cfg.budget_min; budget <= cfg.budget_max; ++budget) {
                    scope.move_stage_to(0.0);
                    const std::size_t before = scope.acquisitions();
                    AfResult r;
                    if (method == af_method_oracle || method == af_method_spectral) {
                        std::unique_ptr<Scorer> scorer;
                        if (method == af_method_oracle)
                            scorer = std::make_unique<OracleScorer>(scope, cfg.response, cfg.oracle_noise_sd, mix_seed(seed, 3));
                        else
                            scorer = std::make_unique<SpectralScorer>(cfg.response);
                        const auto& cal = method == af_method_oracle ? cal_oracle : cal_spectral;
                        AfOptions opt;
                        opt.max_images = budget;
                        opt.patch_size = cfg.patch_px;
                        r = run_autofocus(scope, *scorer, cal.curve, cal.fwhm_um, roi, opt);
                    } else {
                        BrentOptions opt;
                        opt.lower_um = -offset_range;
                        opt.upper_um = offset_range;
                        opt.xtol_um = cfg.brent_xtol_um;
                        opt.max_images = budget;
                        r = brent_autofocus(scope, method == af_method_brent_hpf ? MetricKind::HPF : MetricKind::TENENGRAD,
                                            roi, opt);
                    }
                    if (static_cast<std::size_t>(r.images_used) != scope.acquisitions() - before)
                        throw Error("image accounting mismatch");
                    rep.rows.push_back({method, budget, t, std::abs(scope.stage_z() - truth), seed, r.images_used});
                }
        } catch (const std::exception& e) {
            throw AfBenchError("af bench trial " + std::to_string(t) + " (seed " + std::to_string(seed) +
                                   ") failed: " + e.what(),
                               seed);
        }
        if (progress)
            progress(t);
    }
    for (const auto& method : methods)
        for (int budget = cfg.budget_min; budget <= cfg.budget_max; ++budget) {
            std::vector<double> errs;
            double imgs = 0.0;
            for (const auto& row : rep.rows)
                if (row.method == method && row.budget == budget) {
                    errs.push_back(row.error_um);
                    imgs += row.images_used;
                }
            AfCell c;
            c.method = method;
            c.budget = budget;
            c.trials = static_cast<int>(errs.size());
            c.mean_error_um = mean(errs);
            c.sd_error_um = errs.size() > 1 ? std::sqrt(variance(errs)) : 0.0;
            c.mean_images = imgs / static_cast<double>(errs.size());
            rep.cells.push_back(c);
        }
    return rep;
}

// --- report files ---

inline void write_invariance_csv(std::ostream& os, const std::vector<InvarianceRow>& rows)
{
    os << "method,sigma,window_um\n";
    for (const auto& r : rows)
        os << r.method << ',' << format_g9(r.sigma) << ',' << format_g9(r.window_um) << '\n';
}

inline void write_entropy_csv(std::ostream& os, const std::vector<EntropyRow>& rows)
{
    os << "# pair-sum H: -sum over (b,z) of p(b|z) ln(p(b|z) / sum_z' p(b|z')), natural log\n";
    os << "method,H,bins,z_range_um\n";
    for (const auto& r : rows)
        os << r.method << ',' << format_g9(r.h) << ',' << r.bins << ',' << format_g9(r.z_range_um) << '\n';
}

inline void write_range_csv(std::ostream& os, const std::vector<RangeRow>& rows, double slope_floor)
{
    os << "# slope_floor_per_um=" << format_g9(slope_floor) << '\n';
    os << "method,range_um,range_over_dof\n";
    for (const auto& r : rows)
        os << r.method << ',' << format_g9(r.range_um) << ',' << format_g9(r.range_over_dof) << '\n';
}

inline void write_af_bench_csv(std::ostream& os, const AfBenchReport& rep)
{
    os << "method,budget,trial,error_um,seed\n";
    for (const auto& r : rep.rows)
        os << r.method << ',' << r.budget << ',' << r.trial << ',' << format_g9(r.error_um) << ',' << r.seed << '\n';
}

inline void write_af_summary_csv(std::ostream& os, const AfBenchReport& rep)
{
    os << "method,budget,mean_error_um,sd_error_um,trials,mean_images\n";
    for (const auto& c : rep.cells)
        os << c.method << ',' << c.budget << ',' << format_g9(c.mean_error_um) << ',' << format_g9(c.sd_error_um) << ','
           << c.trials << ',' << format_g9(c.mean_images) << '\n';
}

}  // namespace focusbench
