#pragma once

// Run configuration: one INI-style document with a section per module.
// Every key has a default, a one-line description and a validator; `dump`
// prints the full effective document, which reloads to the same values.

#include <fcntl.h>
#include <unistd.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "focusbench/eval.hpp"
#include "focusbench/optics_sim.hpp"
#include "focusbench/scorer.hpp"

namespace focusbench {

/// Invalid configuration: unknown key, unparsable value, failed invariant.
class ConfigError : public Error {
public:
    using Error::Error;
};

struct SimulationSettings {
    std::string texture = "bandlimited_noise";
    std::string texture_png;  // overrides `texture` when set
    double true_focus_um = 0.0;
    int roi_px = 384;
    double z_min_um = -120.0;
    double z_max_um = 120.0;
    int slices = 132;
    double stage_jitter_um = 0.0;
};

struct ScorerSettings {
    std::string backend = "ORACLE";
    double oracle_noise_sd = 0.01;
    int patch_px = 128;
    int stride_px = 0;  // 0 = patch size
    std::string external_command;
};

struct CalibrationSettings {
    std::string path;
    std::string stack_dir;
};

struct AutofocusSettings {
    int max_images = 10;
    double convexity_eps = 1e-6;
    int roi_px = 256;
    double start_offset_um = 0.0;
};

struct RunConfig {
    std::uint64_t master_seed = 1;
    std::string output_dir = "focusbench_out";
    OpticalConfig optics;
    PsfModel psf;
    NoiseModel noise;
    ResponseMap response;
    SimulationSettings simulate;
    ScorerSettings scorer;
    CalibrationSettings calibration;
    AutofocusSettings autofocus;
    BenchConfig bench;

    /// Bench settings with the shared optics/psf/noise/response/seed applied.
    BenchConfig bench_config() const
    {
        BenchConfig b = bench;
        b.optics = optics;
        b.psf = psf;
        b.noise = noise;
        b.response = response;
        b.master_seed = master_seed;
        b.patch_px = scorer.patch_px;
        b.oracle_noise_sd = scorer.oracle_noise_sd;
        return b;
    }

    std::uint64_t noise_seed() const { return derived_seed(master_seed, SeedStream::ScopeNoise); }
    std::uint64_t texture_seed() const { return derived_seed(master_seed, SeedStream::Texture); }
    std::uint64_t oracle_seed() const { return derived_seed(master_seed, SeedStream::OracleNoise); }
};

namespace detail {

inline std::string fmt_double(double v)
{
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

template <typename T>
T parse_number(const std::string& key, const std::string& text)
{
    T v{};
    const char* b = text.data();
    const char* e = b + text.size();
    const auto r = std::from_chars(b, e, v);
    if (r.ec != std::errc() || r.ptr != e)
        throw ConfigError(key + ": cannot parse '" + text + "'");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text)
{
    if (text == "true" || text == "1" || text == "yes" || text == "on")
        return true;
    if (text == "false" || text == "0" || text == "no" || text == "off")
        return false;
    throw ConfigError(key + ": expected true/false, got '" + text + "'");
}

}  // namespace detail

struct ConfigField {
    std::string section;
    std::string key;
    std::string help;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;

    std::string name() const { return section + "." + key; }
};

/// Every configurable key in document order.
inline const std::vector<ConfigField>& config_fields()
{
    using detail::fmt_double;
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f;
        auto num = [&f](std::string sec, std::string key, std::string help, auto member) {
            using T = std::remove_reference_t<decltype(member(std::declval<RunConfig&>()))>;
            const std::string full = sec + "." + key;
            f.push_back({sec, key, help,
                         [member](const RunConfig& c) {
                             const T v = member(const_cast<RunConfig&>(c));
                             if constexpr (std::is_same_v<T, double>)
                                 return fmt_double(v);
                             else if constexpr (std::is_same_v<T, bool>)
                                 return std::string(v ? "true" : "false");
                             else
                                 return std::to_string(v);
                         },
                         [member, full](RunConfig& c, const std::string& s) {
                             if constexpr (std::is_same_v<T, bool>)
                                 member(c) = detail::parse_bool(full, s);
                             else
                                 member(c) = detail::parse_number<T>(full, s);
                         }});
        };
        auto str = [&f](std::string sec, std::string key, std::string help, auto member) {
            f.push_back({sec, key, help, [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); },
                         [member](RunConfig& c, const std::string& s) { member(c) = s; }});
        };
        // clang-format off
        num("general", "master_seed", "master seed; every random stream derives from it", [](RunConfig& c) -> auto& { return c.master_seed; });
        str("general", "output_dir", "directory for artifacts (holds effective_config and a lock file)", [](RunConfig& c) -> auto& { return c.output_dir; });

        num("optics", "numerical_aperture", "objective NA, (0, 1.5]", [](RunConfig& c) -> auto& { return c.optics.numerical_aperture; });
        num("optics", "magnification", "objective magnification", [](RunConfig& c) -> auto& { return c.optics.magnification; });
        num("optics", "wavelength_um", "illumination wavelength in um, [0.2, 1.2]", [](RunConfig& c) -> auto& { return c.optics.wavelength_um; });
        num("optics", "camera_pixel_um", "camera pixel pitch in um", [](RunConfig& c) -> auto& { return c.optics.pixel_pitch_camera_um; });
        num("optics", "depth_of_field_um", "depth of field in um (range reports are in multiples of it)", [](RunConfig& c) -> auto& { return c.optics.depth_of_field_um; });
        num("optics", "z_travel_um", "stage travel, +/- this many um", [](RunConfig& c) -> auto& { return c.optics.z_travel_um; });

        num("psf", "sigma_focus_px", "Gaussian PSF sigma at focus (px)", [](RunConfig& c) -> auto& { return c.psf.sigma_focus_px; });
        num("psf", "defocus_slope_px_per_um", "PSF sigma growth per um of defocus (px/um)", [](RunConfig& c) -> auto& { return c.psf.defocus_slope_px_per_um; });

        num("noise", "gaussian_sd", "additive camera noise sd (intensity units)", [](RunConfig& c) -> auto& { return c.noise.gaussian_sd; });
        num("noise", "poisson_scale", "photons per unit intensity for shot noise; 0 disables", [](RunConfig& c) -> auto& { return c.noise.poisson_scale; });

        str("simulate", "texture", "specimen texture: bandlimited_noise, checkerboard or blobs", [](RunConfig& c) -> auto& { return c.simulate.texture; });
        str("simulate", "texture_png", "8/16-bit grayscale PNG used as specimen instead of a generated texture", [](RunConfig& c) -> auto& { return c.simulate.texture_png; });
        num("simulate", "true_focus_um", "true focal position of the specimen (um)", [](RunConfig& c) -> auto& { return c.simulate.true_focus_um; });
        num("simulate", "roi_px", "side of the square rendered region (px)", [](RunConfig& c) -> auto& { return c.simulate.roi_px; });
        num("simulate", "z_min_um", "first slice position (um)", [](RunConfig& c) -> auto& { return c.simulate.z_min_um; });
        num("simulate", "z_max_um", "last slice position (um)", [](RunConfig& c) -> auto& { return c.simulate.z_max_um; });
        num("simulate", "slices", "number of slices, evenly spaced over [z_min, z_max]", [](RunConfig& c) -> auto& { return c.simulate.slices; });
        num("simulate", "stage_jitter_um", "sd of random stage positioning error (um)", [](RunConfig& c) -> auto& { return c.simulate.stage_jitter_um; });

        str("scorer", "backend", "blurriness scorer: ORACLE, SPECTRAL or EXTERNAL", [](RunConfig& c) -> auto& { return c.scorer.backend; });
        num("scorer", "sigma_half_px", "sigma (px) at which the score map reaches 0.5", [](RunConfig& c) -> auto& { return c.response.sigma_half_px; });
        num("scorer", "oracle_noise_sd", "sd of Gaussian noise added to ORACLE scores", [](RunConfig& c) -> auto& { return c.scorer.oracle_noise_sd; });
        num("scorer", "patch_px", "patch side (px), >= 32", [](RunConfig& c) -> auto& { return c.scorer.patch_px; });
        num("scorer", "stride_px", "patch stride (px); 0 means patch_px", [](RunConfig& c) -> auto& { return c.scorer.stride_px; });
        str("scorer", "external_command", "shell command of an EXTERNAL scorer process", [](RunConfig& c) -> auto& { return c.scorer.external_command; });

        str("calibration", "path", "calibration CSV (written by calibrate, read by autofocus)", [](RunConfig& c) -> auto& { return c.calibration.path; });
        str("calibration", "stack_dir", "stack directory read by calibrate", [](RunConfig& c) -> auto& { return c.calibration.stack_dir; });

        num("autofocus", "max_images", "image budget per autofocus run, >= 3", [](RunConfig& c) -> auto& { return c.autofocus.max_images; });
        num("autofocus", "convexity_eps", "margin for the convexity test", [](RunConfig& c) -> auto& { return c.autofocus.convexity_eps; });
        num("autofocus", "roi_px", "side of the square autofocus region (px)", [](RunConfig& c) -> auto& { return c.autofocus.roi_px; });
        num("autofocus", "start_offset_um", "stage start relative to true focus (um)", [](RunConfig& c) -> auto& { return c.autofocus.start_offset_um; });

        num("bench", "textures", "textures per curve ensemble", [](RunConfig& c) -> auto& { return c.bench.textures; });
        num("bench", "z_min_um", "curve grid start (um)", [](RunConfig& c) -> auto& { return c.bench.z_min_um; });
        num("bench", "z_max_um", "curve grid end (um)", [](RunConfig& c) -> auto& { return c.bench.z_max_um; });
        num("bench", "slices", "curve grid size", [](RunConfig& c) -> auto& { return c.bench.slices; });
        num("bench", "ensemble_roi_px", "rendered side (px) for curve ensembles", [](RunConfig& c) -> auto& { return c.bench.ensemble_roi_px; });
        num("bench", "sd_window_um", "full width of the curve SD window (um)", [](RunConfig& c) -> auto& { return c.bench.sd_window_um; });
        num("bench", "entropy_bins", "score bins for the conditional entropy", [](RunConfig& c) -> auto& { return c.bench.entropy_bins; });
        num("bench", "slope_floor_per_um", "slope below which a mean curve stops carrying depth information", [](RunConfig& c) -> auto& { return c.bench.slope_floor_per_um; });
        num("bench", "calib_half_range_um", "calibration stack half range (um)", [](RunConfig& c) -> auto& { return c.bench.calib_half_range_um; });
        num("bench", "calib_spacing_um", "calibration stack spacing (um)", [](RunConfig& c) -> auto& { return c.bench.calib_spacing_um; });
        num("bench", "calib_roi_px", "calibration region side (px)", [](RunConfig& c) -> auto& { return c.bench.calib_roi_px; });
        num("bench", "trials", "autofocus trials per method and budget", [](RunConfig& c) -> auto& { return c.bench.trials; });
        num("bench", "budget_min", "smallest image budget, >= 3", [](RunConfig& c) -> auto& { return c.bench.budget_min; });
        num("bench", "budget_max", "largest image budget", [](RunConfig& c) -> auto& { return c.bench.budget_max; });
        num("bench", "offset_range_fwhm", "true focus drawn uniformly in +/- this many FWHM", [](RunConfig& c) -> auto& { return c.bench.offset_range_fwhm; });
        num("bench", "af_roi_px", "autofocus region side (px)", [](RunConfig& c) -> auto& { return c.bench.af_roi_px; });
        num("bench", "brent_xtol_um", "Brent baseline position tolerance (um)", [](RunConfig& c) -> auto& { return c.bench.brent_xtol_um; });
        num("bench", "include_spectral_af", "also run correlation autofocus with the SPECTRAL scorer", [](RunConfig& c) -> auto& { return c.bench.include_spectral_af; });
        // clang-format on
        return f;
    }();
    return fields;
}

inline const ConfigField& config_field(const std::string& name)
{
    for (const auto& f : config_fields())
        if (f.name() == name)
            return f;
    throw ConfigError("unknown config key '" + name + "'");
}

/// Applies `section.key=value`.
inline void apply_override(RunConfig& cfg, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
    config_field(assignment.substr(0, eq)).set(cfg, assignment.substr(eq + 1));
}

inline void apply_ini(RunConfig& cfg, std::istream& in, const std::string& source = "config")
{
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(source + ": " + e.what());
    }
    for (const auto& [section, keys] : tree) {
        if (keys.empty())
            throw ConfigError(source + ": key '" + section + "' is outside any section");
        for (const auto& [key, value] : keys)
            config_field(section + "." + key).set(cfg, value.get_value<std::string>());
    }
}

inline RunConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file " + path.string());
    RunConfig cfg;
    apply_ini(cfg, in, path.string());
    return cfg;
}

/// Full document with every key, one comment line of help per key.
inline std::string dump_config(const RunConfig& cfg)
{
    std::ostringstream o;
    std::string section;
    for (const auto& f : config_fields()) {
        if (f.section != section) {
            if (!section.empty())
                o << '\n';
            section = f.section;
            o << '[' << section << "]\n";
        }
        o << "# " << f.help << '\n' << f.key << " = " << f.get(cfg) << '\n';
    }
    return o.str();
}

enum class Command { Simulate, Calibrate, Autofocus, Bench, Dump };

/// Checks every invariant a command depends on, including that the files it
/// reads exist. Runs before any output is written.
inline void validate_config(const RunConfig& cfg, Command cmd)
{
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    try {
        cfg.optics.validate();
        cfg.psf.validate();
        cfg.noise.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (!(cfg.response.sigma_half_px > 0.0))
        fail("scorer.sigma_half_px must be > 0");
    try {
        scorer_kind_from_string(cfg.scorer.backend);
        if (cfg.simulate.texture_png.empty())
            texture_kind_from_string(cfg.simulate.texture);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (!(cfg.scorer.oracle_noise_sd >= 0.0))
        fail("scorer.oracle_noise_sd must be >= 0");
    if (cfg.scorer.patch_px < 32)
        fail("scorer.patch_px must be >= 32");
    if (cfg.scorer.stride_px < 0)
        fail("scorer.stride_px must be >= 0");
    if (scorer_kind_from_string(cfg.scorer.backend) == ScorerKind::External && cfg.scorer.external_command.empty() &&
        cmd != Command::Dump && cmd != Command::Simulate)
        fail("scorer.backend = EXTERNAL needs scorer.external_command");
    if (cfg.output_dir.empty())
        fail("general.output_dir must not be empty");
    if (!cfg.simulate.texture_png.empty() && !std::filesystem::is_regular_file(cfg.simulate.texture_png))
        fail("simulate.texture_png: no such file '" + cfg.simulate.texture_png + "'");

    switch (cmd) {
    case Command::Simulate:
        if (cfg.simulate.slices < 1)
            fail("simulate.slices must be >= 1");
        if (cfg.simulate.slices > 1 && !(cfg.simulate.z_min_um < cfg.simulate.z_max_um))
            fail("simulate.z_min_um must be < simulate.z_max_um");
        if (cfg.simulate.roi_px < 1)
            fail("simulate.roi_px must be >= 1");
        if (std::max(std::abs(cfg.simulate.z_min_um), std::abs(cfg.simulate.z_max_um)) > cfg.optics.z_travel_um)
            fail("simulate z range exceeds optics.z_travel_um");
        if (!(cfg.simulate.stage_jitter_um >= 0.0))
            fail("simulate.stage_jitter_um must be >= 0");
        break;
    case Command::Calibrate:
        if (cfg.calibration.stack_dir.empty())
            fail("calibration.stack_dir is not set");
        if (!std::filesystem::is_regular_file(std::filesystem::path(cfg.calibration.stack_dir) / "stack.csv"))
            fail("calibration.stack_dir: no stack.csv in '" + cfg.calibration.stack_dir + "'");
        break;
    case Command::Autofocus:
        if (cfg.calibration.path.empty())
            fail("autofocus needs a calibration (calibration.path is not set)");
        if (!std::filesystem::is_regular_file(cfg.calibration.path))
            fail("calibration.path: no such file '" + cfg.calibration.path + "'");
        if (cfg.autofocus.max_images < 3)
            fail("autofocus.max_images must be >= 3");
        if (cfg.autofocus.roi_px < cfg.scorer.patch_px)
            fail("autofocus.roi_px must be >= scorer.patch_px");
        if (!(cfg.autofocus.convexity_eps >= 0.0))
            fail("autofocus.convexity_eps must be >= 0");
        if (std::abs(cfg.autofocus.start_offset_um) > cfg.optics.z_travel_um)
            fail("autofocus.start_offset_um exceeds stage travel");
        break;
    case Command::Bench: {
        const auto& b = cfg.bench;
        if (b.textures < 2)
            fail("bench.textures must be >= 2");
        if (b.slices < 2 || !(b.z_min_um < b.z_max_um))
            fail("bench z grid needs >= 2 slices and z_min < z_max");
        if (b.entropy_bins < 2)
            fail("bench.entropy_bins must be >= 2");
        if (!(b.sd_window_um > 0.0) || b.sd_window_um / 2 > std::min(-b.z_min_um, b.z_max_um) + 1e-9)
            fail("bench.sd_window_um must fit inside the z grid");
        if (!(b.slope_floor_per_um > 0.0))
            fail("bench.slope_floor_per_um must be > 0");
        if (b.trials < 1)
            fail("bench.trials must be >= 1");
        if (b.budget_min < 3 || b.budget_max < b.budget_min)
            fail("bench budgets must satisfy 3 <= budget_min <= budget_max");
        if (!(b.calib_spacing_um > 0.0) || !(b.calib_half_range_um > 0.0))
            fail("bench calibration spacing and half range must be > 0");
        if (!(b.offset_range_fwhm > 0.0))
            fail("bench.offset_range_fwhm must be > 0");
        if (b.ensemble_roi_px < cfg.scorer.patch_px || b.af_roi_px < cfg.scorer.patch_px ||
            b.calib_roi_px < cfg.scorer.patch_px)
            fail("bench regions must be at least one patch wide");
        if (!(b.brent_xtol_um > 0.0))
            fail("bench.brent_xtol_um must be > 0");
        break;
    }
    case Command::Dump:
        break;
    }
}

/// Exclusive claim on an output directory for the lifetime of the object.
class OutputLock {
public:
    explicit OutputLock(const std::filesystem::path& dir) : path_(dir / ".focusbench.lock")
    {
        std::filesystem::create_directories(dir);
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw Error("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;
    ~OutputLock()
    {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }

private:
    std::filesystem::path path_;
};

inline void write_effective_config(const std::filesystem::path& dir, const RunConfig& cfg)
{
    std::ofstream out(dir / "effective_config", std::ios::binary);
    out << dump_config(cfg);
    if (!out)
        throw Error("cannot write " + (dir / "effective_config").string());
}

}  // namespace focusbench
