#pragma once

// Virtual widefield microscope: planar textured specimen, depth-dependent
// Gaussian PSF, camera noise and a motorized stage with bounded travel.

#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "focusbench/fft.hpp"
#include "focusbench/image.hpp"

namespace focusbench {

struct OpticalConfig {
    double numerical_aperture = 0.3;
    double magnification = 10.0;
    double wavelength_um = 0.55;
    double pixel_pitch_camera_um = 6.5;
    double depth_of_field_um = 10.7;
    double z_travel_um = 400.0;  // half-range of the stage

    /// Pixel pitch referred to the sample plane.
    double sample_pitch_um() const { return pixel_pitch_camera_um / magnification; }

    void validate() const
    {
        if (!(numerical_aperture > 0.0 && numerical_aperture <= 1.5))
            throw Error("optics: numerical_aperture must be in (0, 1.5]");
        if (!(wavelength_um >= 0.2 && wavelength_um <= 1.2))
            throw Error("optics: wavelength must be in [0.2, 1.2] um");
        if (!(depth_of_field_um > 0.0))
            throw Error("optics: depth_of_field must be > 0");
        if (!(z_travel_um > 0.0))
            throw Error("optics: z_travel must be > 0");
        if (!(magnification > 0.0 && pixel_pitch_camera_um > 0.0))
            throw Error("optics: magnification and camera pitch must be > 0");
    }
};

/// Gaussian PSF width model sigma(z) = sqrt(sigma_focus^2 + (defocus_slope * z)^2), in pixels.
struct PsfModel {
    double sigma_focus_px = 1.0;
    double defocus_slope_px_per_um = 0.8;

    void validate() const
    {
        if (!(sigma_focus_px >= 0.0))
            throw Error("psf: sigma_focus must be >= 0");
        if (!(defocus_slope_px_per_um > 0.0))
            throw Error("psf: defocus_slope must be > 0");
    }
};

struct NoiseModel {
    double gaussian_sd = 0.005;
    double poisson_scale = 0.0;  // photons per unit intensity; 0 disables shot noise
    std::uint64_t seed = 1;

    void validate() const
    {
        if (!(gaussian_sd >= 0.0) || !(poisson_scale >= 0.0))
            throw Error("noise: gaussian_sd and poisson_scale must be >= 0");
    }
};

inline double psf_sigma(const PsfModel& psf, double z_um)
{
    const double d = psf.defocus_slope_px_per_um * z_um;
    return std::sqrt(psf.sigma_focus_px * psf.sigma_focus_px + d * d);
}

inline int kernel_radius(double sigma_px) { return static_cast<int>(std::ceil(4.0 * sigma_px)); }

/// Truncated (radius ceil(4 sigma)) Gaussian renormalized to unit sum.
inline std::vector<double> gaussian_kernel_1d(double sigma_px)
{
    const int r = kernel_radius(sigma_px);
    std::vector<double> k(2 * r + 1, 0.0);
    if (r == 0) {
        k[0] = 1.0;
        return k;
    }
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[i + r] = std::exp(-0.5 * (i * i) / (sigma_px * sigma_px));
        sum += k[i + r];
    }
    for (double& v : k)
        v /= sum;
    return k;
}

namespace detail {

inline Roi expanded(const Roi& roi, int r) { return {roi.x - r, roi.y - r, roi.width + 2 * r, roi.height + 2 * r}; }

inline void check_support(const Image& src, const Roi& roi, int r)
{
    if (!contains(src.bounds(), roi))
        throw Error("roi out of specimen bounds");
    if (!contains(src.bounds(), expanded(roi, r)))
        throw Error("blur kernel exceeds specimen padding: requires " + std::to_string(r) +
                    " px of padding around the roi");
}

}  // namespace detail

/// Direct separable convolution of src over roi; reads src in roi expanded by
/// the kernel radius.
inline Image blur_spatial(const Image& src, const Roi& roi, double sigma_px)
{
    const auto k = gaussian_kernel_1d(sigma_px);
    const int r = static_cast<int>(k.size() / 2);
    detail::check_support(src, roi, r);
    const int rows = roi.height + 2 * r;
    std::vector<double> tmp(static_cast<std::size_t>(rows) * roi.width, 0.0);
    for (int yy = 0; yy < rows; ++yy) {
        const auto line = src.row(roi.y - r + yy);
        for (int x = 0; x < roi.width; ++x) {
            double acc = 0.0;
            const int base = roi.x + x - r;
            for (int i = 0; i <= 2 * r; ++i)
                acc += k[i] * line[base + i];
            tmp[static_cast<std::size_t>(yy) * roi.width + x] = acc;
        }
    }
    Image out(roi.width, roi.height, 0.0, src.pitch_um);
    for (int y = 0; y < roi.height; ++y)
        for (int x = 0; x < roi.width; ++x) {
            double acc = 0.0;
            for (int i = 0; i <= 2 * r; ++i)
                acc += k[i] * tmp[static_cast<std::size_t>(y + i) * roi.width + x];
            out.at(x, y) = acc;
        }
    return out;
}

/// Same operator as blur_spatial, evaluated with one circular FFT convolution
/// over the expanded window (only wrap-free outputs are kept).
inline Image blur_fft(const Image& src, const Roi& roi, double sigma_px)
{
    const auto k = gaussian_kernel_1d(sigma_px);
    const int r = static_cast<int>(k.size() / 2);
    detail::check_support(src, roi, r);
    const Roi win = detail::expanded(roi, r);
    const int w = win.width;
    const int h = win.height;
    const Image window = crop(src, win);
    std::vector<double> kern(static_cast<std::size_t>(w) * h, 0.0);
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const int x = (dx + w) % w;
            const int y = (dy + h) % h;
            kern[static_cast<std::size_t>(y) * w + x] = k[dx + r] * k[dy + r];
        }
    auto spec = fft::forward(window.pixels, w, h);
    const auto kspec = fft::forward(kern, w, h);
    for (std::size_t i = 0; i < spec.size(); ++i)
        spec[i] *= kspec[i];
    const auto full = fft::inverse(spec, w, h);
    Image out(roi.width, roi.height, 0.0, src.pitch_um);
    for (int y = 0; y < roi.height; ++y)
        for (int x = 0; x < roi.width; ++x)
            out.at(x, y) = full[static_cast<std::size_t>(y + r) * w + (x + r)];
    return out;
}

/// Spatial path for sigma <= 8 px, frequency domain above.
inline Image gaussian_blur(const Image& src, const Roi& roi, double sigma_px)
{
    return sigma_px <= 8.0 ? blur_spatial(src, roi, sigma_px) : blur_fft(src, roi, sigma_px);
}

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(a ^ mix_seed(b)); }

enum class TextureKind { BandlimitedNoise, Checkerboard, Blobs };

inline const char* to_string(TextureKind k)
{
    switch (k) {
    case TextureKind::BandlimitedNoise: return "bandlimited_noise";
    case TextureKind::Checkerboard: return "checkerboard";
    case TextureKind::Blobs: return "blobs";
    }
    return "?";
}

inline TextureKind texture_kind_from_string(const std::string& s)
{
    if (s == "bandlimited_noise") return TextureKind::BandlimitedNoise;
    if (s == "checkerboard") return TextureKind::Checkerboard;
    if (s == "blobs") return TextureKind::Blobs;
    throw Error("unknown texture kind '" + s + "'");
}

/// Deterministic synthetic specimen normalized to [0, 1].
///
/// bandlimited_noise is white Gaussian noise passed through an ideal radial
/// low-pass whose cutoff is drawn per seed from [0.2, 0.45] x Nyquist, so
/// different seeds differ in spectral content as well as phase.
inline Image make_texture(TextureKind kind, int width, int height, std::uint64_t seed, double pitch_um = 1.0)
{
    if (width < 128 || height < 128)
        throw Error("make_texture: size must be at least 128x128, got " + std::to_string(width) + "x" +
                    std::to_string(height));
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(kind) + 0x7e57u));
    Image img(width, height, 0.0, pitch_um);
    switch (kind) {
    case TextureKind::BandlimitedNoise: {
        std::uniform_real_distribution<double> frac(0.2, 0.45);
        const double cutoff = frac(rng) * 0.5;  // cycles/px
        std::normal_distribution<double> n01;
        for (double& p : img.pixels)
            p = n01(rng);
        auto spec = fft::forward(img.pixels, width, height);
        const int cols = width / 2 + 1;
        for (int ky = 0; ky < height; ++ky)
            for (int kx = 0; kx < cols; ++kx)
                if (fft::radial_frequency(kx, ky, width, height) > cutoff)
                    spec[static_cast<std::size_t>(ky) * cols + kx] = 0.0;
        img.pixels = fft::inverse(spec, width, height);
        break;
    }
    case TextureKind::Checkerboard: {
        std::uniform_int_distribution<int> cell_d(8, 32);
        const int cell = cell_d(rng);
        std::uniform_int_distribution<int> off_d(0, cell - 1);
        const int ox = off_d(rng);
        const int oy = off_d(rng);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                img.at(x, y) = (((x + ox) / cell + (y + oy) / cell) % 2 == 0) ? 1.0 : 0.0;
        break;
    }
    case TextureKind::Blobs: {
        const int count = std::max(8, width * height / 600);
        std::uniform_real_distribution<double> ux(0.0, width);
        std::uniform_real_distribution<double> uy(0.0, height);
        std::uniform_real_distribution<double> ur(1.5, 8.0);
        std::uniform_real_distribution<double> ua(0.3, 1.0);
        for (int b = 0; b < count; ++b) {
            const double cx = ux(rng), cy = uy(rng), rad = ur(rng), amp = ua(rng);
            const int reach = static_cast<int>(std::ceil(3.0 * rad));
            for (int y = std::max(0, static_cast<int>(cy) - reach); y < std::min(height, static_cast<int>(cy) + reach + 1); ++y)
                for (int x = std::max(0, static_cast<int>(cx) - reach); x < std::min(width, static_cast<int>(cx) + reach + 1); ++x) {
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    img.at(x, y) += amp * std::exp(-0.5 * d2 / (rad * rad));
                }
        }
        break;
    }
    }
    normalize_unit_range(img);
    return img;
}

struct ZSlice {
    double z_um = 0.0;
    Image image;
};

struct ZStack {
    std::vector<ZSlice> slices;
    double spacing_um = 0.0;

    /// Throws unless z is strictly increasing with uniform spacing (1e-9 um).
    void validate() const
    {
        if (slices.empty())
            throw Error("z-stack is empty");
        if (slices.size() == 1)
            return;
        if (!(spacing_um > 0.0))
            throw Error("z-stack spacing must be > 0");
        for (std::size_t i = 1; i < slices.size(); ++i) {
            const double d = slices[i].z_um - slices[i - 1].z_um;
            if (!(d > 0.0))
                throw Error("z-stack slices must have strictly increasing z (slice " + std::to_string(i) + ")");
            if (std::abs(d - spacing_um) > 1e-9)
                throw Error("z-stack spacing is not uniform at slice " + std::to_string(i));
        }
    }
};

/// Simulated microscope. The true focal position is hidden from autofocus
/// clients; evaluation code reads it through ground_truth_focus().
class VirtualMicroscope {
public:
    VirtualMicroscope(OpticalConfig config, PsfModel psf, Image specimen, double true_focus_um, NoiseModel noise,
                      double stage_jitter_sd_um = 0.0)
        : config_(config), psf_(psf), specimen_(std::move(specimen)), true_focus_(true_focus_um), noise_(noise),
          jitter_sd_(stage_jitter_sd_um)
    {
        config_.validate();
        psf_.validate();
        noise_.validate();
        if (!(jitter_sd_ >= 0.0))
            throw Error("stage jitter sd must be >= 0");
        specimen_.pitch_um = config_.sample_pitch_um();
    }

    const OpticalConfig& config() const { return config_; }
    const PsfModel& psf() const { return psf_; }
    const NoiseModel& noise() const { return noise_; }
    const Image& specimen() const { return specimen_; }
    double stage_z() const { return stage_z_; }
    double ground_truth_focus() const { return true_focus_; }
    std::size_t acquisitions() const { return acquisitions_; }

    /// A width x height roi centered in the specimen.
    Roi centered(int width, int height) const { return centered_roi(specimen_.width, specimen_.height, width, height); }

    /// Relative move; jitter affects imaging only, never the reported position.
    double move_stage(double dz_um) { return move_stage_to(stage_z_ + dz_um); }

    double move_stage_to(double z_um)
    {
        if (!(std::abs(z_um) <= config_.z_travel_um))
            throw Error("stage travel exceeded: requested z=" + std::to_string(z_um) + " um, travel is +/-" +
                        std::to_string(config_.z_travel_um) + " um");
        stage_z_ = z_um;
        return stage_z_;
    }

    /// Rendering is pure, so repeated acquisitions at the same position can be
    /// served from memory. Every call still counts as an acquisition.
    void set_render_cache(bool enabled)
    {
        cache_enabled_ = enabled;
        if (!enabled)
            cache_.clear();
    }

    /// Blur, then noise. Noise and jitter are drawn from a stream keyed by
    /// (noise seed, stage position, roi), so rendering is a pure function of
    /// the scope state.
    Image render_image(const Roi& roi)
    {
        if (!contains(specimen_.bounds(), roi))
            throw Error("render_image: roi out of specimen bounds");
        const CacheKey ck{std::bit_cast<std::uint64_t>(stage_z_), roi.x, roi.y, roi.width, roi.height};
        if (cache_enabled_) {
            if (auto it = cache_.find(ck); it != cache_.end()) {
                ++acquisitions_;
                return it->second;
            }
        }
        std::uint64_t key = mix_seed(noise_.seed, std::bit_cast<std::uint64_t>(stage_z_));
        key = mix_seed(key, (static_cast<std::uint64_t>(roi.x) << 32) ^ static_cast<std::uint64_t>(roi.y));
        key = mix_seed(key, (static_cast<std::uint64_t>(roi.width) << 32) ^ static_cast<std::uint64_t>(roi.height));
        std::mt19937_64 rng(key);
        std::normal_distribution<double> n01;
        const double jitter = jitter_sd_ > 0.0 ? jitter_sd_ * n01(rng) : 0.0;
        const double defocus = stage_z_ - true_focus_ + jitter;
        Image out = gaussian_blur(specimen_, roi, psf_sigma(psf_, defocus));
        if (noise_.poisson_scale > 0.0) {
            for (double& p : out.pixels) {
                std::poisson_distribution<long long> pd(noise_.poisson_scale * std::max(p, 0.0));
                p = static_cast<double>(pd(rng)) / noise_.poisson_scale;
            }
        }
        if (noise_.gaussian_sd > 0.0)
            for (double& p : out.pixels)
                p += noise_.gaussian_sd * n01(rng);
        out.defocus_um = defocus;
        ++acquisitions_;
        if (cache_enabled_)
            cache_.emplace(ck, out);
        return out;
    }

private:
    using CacheKey = std::tuple<std::uint64_t, int, int, int, int>;

    OpticalConfig config_;
    PsfModel psf_;
    Image specimen_;
    double true_focus_;
    NoiseModel noise_;
    double jitter_sd_;
    double stage_z_ = 0.0;
    std::size_t acquisitions_ = 0;
    bool cache_enabled_ = false;
    std::map<CacheKey, Image> cache_;
};

/// Padding (px) a specimen needs so that any defocus up to max_defocus_um
/// renders without reading out of bounds.
inline int required_padding(const PsfModel& psf, double max_defocus_um)
{
    return kernel_radius(psf_sigma(psf, max_defocus_um));
}

/// Slices at z_min + i*step for i = 0..floor((z_max - z_min)/step). The stage
/// is restored to its starting position afterward.
inline ZStack acquire_stack(VirtualMicroscope& scope, double z_min, double z_max, double step, const Roi& roi)
{
    if (!(z_min < z_max))
        throw Error("acquire_stack: z_min must be < z_max");
    if (!(step > 0.0))
        throw Error("acquire_stack: step must be > 0");
    const double travel = scope.config().z_travel_um;
    if (z_min < -travel || z_max > travel)
        throw Error("acquire_stack: range [" + std::to_string(z_min) + ", " + std::to_string(z_max) +
                    "] exceeds stage travel +/-" + std::to_string(travel));
    const auto count = static_cast<std::size_t>(std::floor((z_max - z_min) / step + 1e-9)) + 1;
    const double start = scope.stage_z();
    ZStack stack;
    stack.spacing_um = step;
    stack.slices.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double z = z_min + static_cast<double>(i) * step;
        scope.move_stage_to(z);
        stack.slices.push_back({z, scope.render_image(roi)});
    }
    scope.move_stage_to(start);
    return stack;
}

}  // namespace focusbench
