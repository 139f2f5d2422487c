// focusbench command-line front end.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "focusbench/focusbench.hpp"

namespace fs = std::filesystem;
using namespace focusbench;

namespace {

constexpr int exit_config = 2;
constexpr int exit_runtime = 3;

struct CommonFlags {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_common(CLI::App* app, CommonFlags& f)
{
    app->add_option("-c,--config", f.config_path, "INI config file; see `config dump` for every key")
        ->check(CLI::ExistingFile);
    app->add_option("--set", f.overrides, "override one key, section.key=value (repeatable; applied after --config)");
    app->add_option("--seed", f.seed, "master seed (general.master_seed)");
    app->add_option("-o,--out", f.out, "output directory (general.output_dir)");
}

RunConfig base_config(const CommonFlags& f)
{
    RunConfig cfg;
    if (!f.config_path.empty())
        cfg = load_config(f.config_path);
    for (const auto& o : f.overrides)
        apply_override(cfg, o);
    if (f.seed)
        cfg.master_seed = *f.seed;
    if (f.out)
        cfg.output_dir = *f.out;
    return cfg;
}

// Writes through a temporary so a failed run leaves no partial file.
void write_file_atomic(const fs::path& path, const std::string& content)
{
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out << content;
        if (!out)
            throw Error("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

template <typename Fn>
void write_report(const fs::path& path, Fn&& fn)
{
    std::ostringstream os;
    fn(os);
    write_file_atomic(path, os.str());
}

std::unique_ptr<Scorer> make_scorer(const RunConfig& cfg, const VirtualMicroscope& scope, double noise_sd)
{
    switch (scorer_kind_from_string(cfg.scorer.backend)) {
    case ScorerKind::Oracle: return std::make_unique<OracleScorer>(scope, cfg.response, noise_sd, cfg.oracle_seed());
    case ScorerKind::Spectral: return std::make_unique<SpectralScorer>(cfg.response);
    case ScorerKind::External: return std::make_unique<ExternalScorer>(cfg.scorer.external_command);
    }
    throw Error("unknown scorer backend");
}

// Specimen for a single-scope command, padded for defocus up to max_defocus_um.
Image command_specimen(const RunConfig& cfg, int roi_px, double max_defocus_um)
{
    const int pad = required_padding(cfg.psf, max_defocus_um) + 1;
    if (!cfg.simulate.texture_png.empty()) {
        Image img = read_png(cfg.simulate.texture_png);
        if (img.width < roi_px + 2 * pad || img.height < roi_px + 2 * pad)
            throw Error("texture " + cfg.simulate.texture_png + " is " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + " px; this run needs at least " +
                        std::to_string(roi_px + 2 * pad) + " px per side (roi " + std::to_string(roi_px) +
                        " + padding " + std::to_string(pad) + " each side)");
        return img;
    }
    const int side = std::max(128, roi_px + 2 * pad);
    return make_texture(texture_kind_from_string(cfg.simulate.texture), side, side, cfg.texture_seed());
}

NoiseModel command_noise(const RunConfig& cfg)
{
    NoiseModel n = cfg.noise;
    n.seed = cfg.noise_seed();
    return n;
}

// --- simulate ---

int cmd_simulate(const RunConfig& cfg)
{
    const fs::path out = cfg.output_dir;
    OutputLock lock(out);
    write_effective_config(out, cfg);
    const auto& s = cfg.simulate;
    const double reach =
        std::max(std::abs(s.z_min_um - s.true_focus_um), std::abs(s.z_max_um - s.true_focus_um));
    VirtualMicroscope scope(cfg.optics, cfg.psf, command_specimen(cfg, s.roi_px, reach), s.true_focus_um,
                            command_noise(cfg), s.stage_jitter_um);
    const Roi roi = scope.centered(s.roi_px, s.roi_px);
    ZStack stack;
    if (s.slices == 1) {
        scope.move_stage_to(s.z_min_um);
        stack.slices.push_back({s.z_min_um, scope.render_image(roi)});
        stack.spacing_um = 1.0;
    } else {
        const double step = (s.z_max_um - s.z_min_um) / (s.slices - 1);
        stack = acquire_stack(scope, s.z_min_um, s.z_max_um, step, roi);
        if (static_cast<int>(stack.slices.size()) != s.slices)
            stack.slices.resize(static_cast<std::size_t>(s.slices));
    }
    save_stack(out / "stack", stack);
    std::printf("wrote %zu slices over [%g, %g] um to %s\n", stack.slices.size(), stack.slices.front().z_um,
                stack.slices.back().z_um, (out / "stack").string().c_str());
    return 0;
}

// --- calibrate ---

int cmd_calibrate(const RunConfig& cfg)
{
    const fs::path out = cfg.output_dir;
    const fs::path target = cfg.calibration.path.empty() ? out / "calibration.csv" : fs::path(cfg.calibration.path);
    ZStack stack = load_stack(cfg.calibration.stack_dir);
    // A stack on disk carries no simulator state; the oracle reads defocus
    // relative to the configured true focus.
    for (auto& sl : stack.slices)
        sl.image.defocus_um = sl.z_um - cfg.simulate.true_focus_um;
    const Image& first = stack.slices.front().image;
    VirtualMicroscope model(cfg.optics, cfg.psf, Image(1, 1), cfg.simulate.true_focus_um, command_noise(cfg));
    auto scorer = make_scorer(cfg, model, cfg.scorer.oracle_noise_sd);

    OutputLock lock(out);
    write_effective_config(out, cfg);
    CalibrationCurve curve =
        build_calibration(stack, *scorer, first.bounds(), cfg.scorer.patch_px, cfg.scorer.stride_px);
    curve.moffat = fit_moffat(curve);
    if (target.has_parent_path())
        fs::create_directories(target.parent_path());
    write_report(target, [&](std::ostream& os) { write_calibration(os, curve); });
    std::printf("calibration: %zu samples, spacing %g um, half range %g um\n", curve.samples.size(),
                curve.spacing_um, curve.half_range());
    std::printf("moffat: A=%.6g c=%.6g z0=%.6g gamma=%.6g beta=%.6g rms=%.3g\n", curve.moffat->amplitude,
                curve.moffat->offset, curve.moffat->z0_um, curve.moffat->gamma_um, curve.moffat->beta,
                curve.moffat->residual_rms);
    std::printf("FWHM = %.6g um\nwrote %s\n", fwhm(*curve.moffat), target.string().c_str());
    return 0;
}

// --- autofocus ---

int cmd_autofocus(const RunConfig& cfg)
{
    const fs::path out = cfg.output_dir;
    const CalibrationCurve calib = load_calibration(cfg.calibration.path);
    if (!calib.moffat)
        throw Error("calibration " + cfg.calibration.path + " has no Moffat fit; rerun calibrate");
    const double fw = fwhm(*calib.moffat);
    const double start = cfg.simulate.true_focus_um + cfg.autofocus.start_offset_um;
    const double reach = std::abs(cfg.autofocus.start_offset_um) +
                         std::max(2.0 * fw, calib.half_range() + calib.spacing_um) + 1.0;
    if (std::abs(start) + std::max(2.0 * fw, calib.half_range() + calib.spacing_um) > cfg.optics.z_travel_um)
        throw Error("autofocus probes would leave the stage travel of +/-" + format_g9(cfg.optics.z_travel_um) +
                    " um");
    VirtualMicroscope scope(cfg.optics, cfg.psf, command_specimen(cfg, cfg.autofocus.roi_px, reach),
                            cfg.simulate.true_focus_um, command_noise(cfg), cfg.simulate.stage_jitter_um);
    scope.move_stage_to(start);
    auto scorer = make_scorer(cfg, scope, cfg.scorer.oracle_noise_sd);
    AfOptions opt;
    opt.max_images = cfg.autofocus.max_images;
    opt.patch_size = cfg.scorer.patch_px;
    opt.stride = cfg.scorer.stride_px;
    opt.convexity_eps = cfg.autofocus.convexity_eps;

    OutputLock lock(out);
    write_effective_config(out, cfg);
    const AfResult r = run_autofocus(scope, *scorer, calib, fw, scope.centered(cfg.autofocus.roi_px, cfg.autofocus.roi_px), opt);
    write_report(out / "af_run.csv", [&](std::ostream& os) { write_run_log(os, r); });
    std::printf("dz_um = %.6g\nimages_used = %d\nconverged = %s\nout_of_range = %s\n", r.delta_z_um, r.images_used,
                r.converged ? "true" : "false", r.out_of_range ? "true" : "false");
    std::printf("final_z_um = %.6g\nerror_um = %.6g\n", scope.stage_z(), std::abs(scope.stage_z() - scope.ground_truth_focus()));
    std::printf("wrote %s\n", (out / "af_run.csv").string().c_str());
    return 0;
}

// --- bench ---

SvgChart af_chart(const AfBenchReport& rep, const BenchConfig& b)
{
    SvgChart c{"Autofocus error vs. image budget", "images", "mean |error| (um)", {}};
    std::vector<std::string> methods;
    for (const auto& cell : rep.cells)
        if (std::find(methods.begin(), methods.end(), cell.method) == methods.end())
            methods.push_back(cell.method);
    for (const auto& m : methods) {
        SvgSeries s{m, {}, {}};
        for (int k = b.budget_min; k <= b.budget_max; ++k) {
            s.x.push_back(k);
            s.y.push_back(rep.cell(m, k).mean_error_um);
        }
        c.series.push_back(std::move(s));
    }
    return c;
}

SvgChart curve_chart(const std::vector<MethodCurves>& methods)
{
    SvgChart c{"Ensemble-mean blurriness curves", "z (um)", "normalized blurriness", {}};
    for (const auto& m : methods)
        c.series.push_back({m.method, m.ensemble.z(), m.ensemble.mean_curve()});
    return c;
}

int cmd_bench(const RunConfig& cfg)
{
    const fs::path out = cfg.output_dir;
    const BenchConfig b = cfg.bench_config();
    OutputLock lock(out);
    write_effective_config(out, cfg);

    std::vector<NamedScorer> scorers{
        {"ORACLE", [&](const VirtualMicroscope& s) { return std::make_unique<OracleScorer>(s, b.response, 0.0); }},
        {"SPECTRAL", [&](const VirtualMicroscope&) { return std::make_unique<SpectralScorer>(b.response); }},
    };
    if (!cfg.scorer.external_command.empty())
        scorers.push_back({"EXTERNAL", [&](const VirtualMicroscope&) {
                               return std::make_unique<ExternalScorer>(cfg.scorer.external_command);
                           }});
    std::fprintf(stderr, "curve ensembles: %d textures x %d slices\n", b.textures, b.slices);
    const auto methods = build_curve_ensembles(b, scorers);
    const CurveReport curves = evaluate_curves(b, methods);
    std::fprintf(stderr, "autofocus bench: %d trials, budgets %d..%d\n", b.trials, b.budget_min, b.budget_max);
    const AfBenchReport af = af_error_vs_iterations(b, [&](int t) {
        if ((t + 1) % 10 == 0 || t + 1 == b.trials)
            std::fprintf(stderr, "  trial %d/%d\n", t + 1, b.trials);
    });

    write_report(out / "invariance.csv", [&](std::ostream& os) { write_invariance_csv(os, curves.invariance); });
    write_report(out / "entropy.csv", [&](std::ostream& os) { write_entropy_csv(os, curves.entropy); });
    write_report(out / "range.csv", [&](std::ostream& os) { write_range_csv(os, curves.range, b.slope_floor_per_um); });
    write_report(out / "af_bench.csv", [&](std::ostream& os) { write_af_bench_csv(os, af); });
    write_report(out / "af_summary.csv", [&](std::ostream& os) { write_af_summary_csv(os, af); });
    write_file_atomic(out / "af_error.svg", render_svg(af_chart(af, b)));
    write_file_atomic(out / "score_curves.svg", render_svg(curve_chart(methods)));

    std::printf("%-16s %10s %10s %10s %8s\n", "method", "sd", "H", "range_um", "x DOF");
    for (std::size_t i = 0; i < curves.invariance.size(); ++i)
        std::printf("%-16s %10.4f %10.2f %10.1f %8.2f\n", curves.invariance[i].method.c_str(),
                    curves.invariance[i].sigma, curves.entropy[i].h, curves.range[i].range_um,
                    curves.range[i].range_over_dof);
    std::printf("\ncalibration FWHM: ORACLE %.3f um", af.oracle_fwhm_um);
    if (b.include_spectral_af)
        std::printf(", SPECTRAL %.3f um", af.spectral_fwhm_um);
    std::printf("\n%-16s", "budget");
    for (int k = b.budget_min; k <= b.budget_max; ++k)
        std::printf(" %8d", k);
    std::printf("\n");
    std::vector<std::string> names;
    for (const auto& c : af.cells)
        if (std::find(names.begin(), names.end(), c.method) == names.end())
            names.push_back(c.method);
    for (const auto& m : names) {
        std::printf("%-16s", m.c_str());
        for (int k = b.budget_min; k <= b.budget_max; ++k)
            std::printf(" %8.3f", af.cell(m, k).mean_error_um);
        std::printf("\n");
    }
    std::printf("\nwrote reports to %s\n", out.string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Calibration-curve autofocus engine and simulated-microscope benchmark"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "show help for every subcommand");

    CommonFlags sim_f, cal_f, af_f, bench_f, dump_f;

    auto* sim = app.add_subcommand("simulate", "render a z-stack of the virtual microscope to PNG slices + stack.csv");
    add_common(sim, sim_f);
    std::optional<int> sim_slices;
    std::optional<double> sim_zmin, sim_zmax, sim_focus;
    std::optional<std::string> sim_texture;
    sim->add_option("--slices", sim_slices, "number of slices (simulate.slices)");
    sim->add_option("--z-min", sim_zmin, "first slice z in um (simulate.z_min_um)");
    sim->add_option("--z-max", sim_zmax, "last slice z in um (simulate.z_max_um)");
    sim->add_option("--true-focus", sim_focus, "true focus in um (simulate.true_focus_um)");
    sim->add_option("--texture", sim_texture, "bandlimited_noise, checkerboard or blobs (simulate.texture)");

    auto* cal = app.add_subcommand("calibrate", "score a stack, fit the Moffat model and write a calibration CSV");
    add_common(cal, cal_f);
    std::optional<std::string> cal_stack, cal_out, cal_backend;
    cal->add_option("--stack", cal_stack, "stack directory containing stack.csv (calibration.stack_dir)");
    cal->add_option("--calibration", cal_out, "calibration CSV to write (calibration.path; default <out>/calibration.csv)");
    cal->add_option("--backend", cal_backend, "ORACLE, SPECTRAL or EXTERNAL (scorer.backend)");

    auto* af = app.add_subcommand("autofocus", "run one autofocus from a defocused start and write the run log");
    add_common(af, af_f);
    std::optional<std::string> af_calib, af_backend;
    std::optional<double> af_offset;
    std::optional<int> af_max;
    af->add_option("--calibration", af_calib, "calibration CSV (calibration.path)");
    af->add_option("--offset", af_offset, "start position relative to true focus in um (autofocus.start_offset_um)");
    af->add_option("--max-images", af_max, "image budget (autofocus.max_images)");
    af->add_option("--backend", af_backend, "ORACLE, SPECTRAL or EXTERNAL (scorer.backend)");

    auto* bench = app.add_subcommand("bench", "run the invariance, entropy, depth-range and autofocus benchmarks");
    add_common(bench, bench_f);
    std::optional<int> bench_trials, bench_textures;
    bench->add_option("--trials", bench_trials, "autofocus trials per method and budget (bench.trials)");
    bench->add_option("--textures", bench_textures, "textures per curve ensemble (bench.textures)");

    auto* config = app.add_subcommand("config", "configuration utilities");
    config->require_subcommand(1);
    auto* dump = config->add_subcommand("dump", "print the effective configuration with every key and its default");
    add_common(dump, dump_f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_config;
    }

    RunConfig cfg;
    Command cmd{};
    try {
        if (*sim) {
            cmd = Command::Simulate;
            cfg = base_config(sim_f);
            if (sim_slices) cfg.simulate.slices = *sim_slices;
            if (sim_zmin) cfg.simulate.z_min_um = *sim_zmin;
            if (sim_zmax) cfg.simulate.z_max_um = *sim_zmax;
            if (sim_focus) cfg.simulate.true_focus_um = *sim_focus;
            if (sim_texture) cfg.simulate.texture = *sim_texture;
        } else if (*cal) {
            cmd = Command::Calibrate;
            cfg = base_config(cal_f);
            if (cal_stack) cfg.calibration.stack_dir = *cal_stack;
            if (cal_out) cfg.calibration.path = *cal_out;
            if (cal_backend) cfg.scorer.backend = *cal_backend;
        } else if (*af) {
            cmd = Command::Autofocus;
            cfg = base_config(af_f);
            if (af_calib) cfg.calibration.path = *af_calib;
            if (af_offset) cfg.autofocus.start_offset_um = *af_offset;
            if (af_max) cfg.autofocus.max_images = *af_max;
            if (af_backend) cfg.scorer.backend = *af_backend;
        } else if (*bench) {
            cmd = Command::Bench;
            cfg = base_config(bench_f);
            if (bench_trials) cfg.bench.trials = *bench_trials;
            if (bench_textures) cfg.bench.textures = *bench_textures;
        } else {
            cmd = Command::Dump;
            cfg = base_config(dump_f);
        }
        validate_config(cfg, cmd);
    } catch (const Error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return exit_config;
    }

    try {
        switch (cmd) {
        case Command::Simulate: return cmd_simulate(cfg);
        case Command::Calibrate: return cmd_calibrate(cfg);
        case Command::Autofocus: return cmd_autofocus(cfg);
        case Command::Bench: return cmd_bench(cfg);
        case Command::Dump: std::fputs(dump_config(cfg).c_str(), stdout); return 0;
        }
    } catch (const AfBenchError& e) {
        std::fprintf(stderr, "error: %s\nreplay seed: %llu\n", e.what(), static_cast<unsigned long long>(e.trial_seed));
        return exit_runtime;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_runtime;
    }
    return exit_runtime;
}
