#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace focusbench {

/// Base error for everything the library reports.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Rectangle in pixel coordinates, origin at the top-left corner.
struct Roi {
    int x = 0;
    int y = 0;
    int width = 0;
    int height = 0;

    bool operator==(const Roi&) const = default;
};

/// Row-major scalar image with a physical pixel pitch (micrometers per pixel
/// in sample space).
///
/// `defocus_um` is a simulator side channel: the axial offset from focus at
/// which a virtual microscope rendered the image. It is empty for images that
/// come from disk. Only the oracle scorer reads it.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;
    double pitch_um = 1.0;
    std::optional<double> defocus_um;

    Image() = default;
    Image(int w, int h, double fill = 0.0, double pitch = 1.0)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill),
          pitch_um(pitch)
    {
        if (w < 1 || h < 1)
            throw Error("image dimensions must be >= 1, got " + std::to_string(w) + "x" + std::to_string(h));
    }

    double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

    std::span<const double> row(int y) const
    {
        return {pixels.data() + static_cast<std::size_t>(y) * width, static_cast<std::size_t>(width)};
    }

    std::size_t size() const { return pixels.size(); }
    Roi bounds() const { return {0, 0, width, height}; }
};

inline bool contains(const Roi& outer, const Roi& inner)
{
    return inner.width >= 1 && inner.height >= 1 && inner.x >= outer.x && inner.y >= outer.y &&
           inner.x + inner.width <= outer.x + outer.width && inner.y + inner.height <= outer.y + outer.height;
}

inline Roi centered_roi(int outer_w, int outer_h, int w, int h)
{
    return {(outer_w - w) / 2, (outer_h - h) / 2, w, h};
}

inline Image crop(const Image& img, const Roi& roi)
{
    if (!contains(img.bounds(), roi))
        throw Error("crop: roi out of image bounds");
    Image out(roi.width, roi.height, 0.0, img.pitch_um);
    for (int y = 0; y < roi.height; ++y)
        std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(roi.y + y) * img.width + roi.x, roi.width,
                    out.pixels.begin() + static_cast<std::ptrdiff_t>(y) * roi.width);
    out.defocus_um = img.defocus_um;
    return out;
}

/// Reflect-101 index mapping (… 2 1 | 0 1 2 … n-1 | n-2 n-3 …).
inline int reflect101(int i, int n)
{
    if (n == 1)
        return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0)
        i += period;
    return i < n ? i : period - i;
}

inline double mean(std::span<const double> v)
{
    double s = 0.0;
    for (double x : v)
        s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Population variance. Works on offsets from the first element so identical
/// inputs give exactly 0.
inline double variance(std::span<const double> v)
{
    if (v.empty())
        return 0.0;
    const double x0 = v.front();
    double m = 0.0;
    for (double x : v)
        m += x - x0;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v)
        s += (x - x0 - m) * (x - x0 - m);
    return s / static_cast<double>(v.size());
}

inline bool is_constant(const Image& img)
{
    const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    return *lo == *hi;
}

/// Rescale intensities affinely onto [0, 1]. A constant image maps to 0.
inline void normalize_unit_range(Image& img)
{
    const auto [lo_it, hi_it] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    const double lo = *lo_it;
    const double span = *hi_it - lo;
    for (double& p : img.pixels)
        p = span > 0.0 ? (p - lo) / span : 0.0;
}

}  // namespace focusbench
