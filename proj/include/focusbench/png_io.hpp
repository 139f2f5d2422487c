#pragma once

// Grayscale PNG read/write and the on-disk z-stack layout
// (slice_NNNN.png files plus stack.csv).

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "focusbench/focus_metrics.hpp"
#include "focusbench/optics_sim.hpp"

namespace focusbench {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const
    {
        if (f)
            std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg)
{
    auto* text = static_cast<std::string*>(png_get_error_ptr(png));
    if (text)
        *text = msg;
    png_longjmp(png, 1);
}

inline void png_warn(png_structp, png_const_charp) {}

}  // namespace detail

/// Writes intensities clamped to [0,1] as a 16-bit grayscale PNG.
inline void write_png16(const std::filesystem::path& path, const Image& img)
{
    std::vector<png_byte> rows(static_cast<std::size_t>(img.width) * img.height * 2);
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = std::clamp(img.pixels[i], 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround(v * 65535.0));
        rows[2 * i] = static_cast<png_byte>(q >> 8);
        rows[2 * i + 1] = static_cast<png_byte>(q & 0xffu);
    }
    std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        row_ptrs[y] = rows.data() + static_cast<std::size_t>(y) * img.width * 2;

    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp)
        throw Error("cannot open " + path.string() + " for writing");
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_fail, detail::png_warn);
    if (!png)
        throw Error("png: out of memory");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("png write " + path.string() + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 16,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Reads an 8- or 16-bit grayscale PNG into [0,1] intensities.
inline Image read_png(const std::filesystem::path& path)
{
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp)
        throw Error("cannot open " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw Error(path.string() + " is not a PNG file");

    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_fail, detail::png_warn);
    if (!png)
        throw Error("png: out of memory");
    png_infop info = png_create_info_struct(png);
    Image img;
    std::vector<png_byte> data;
    std::vector<png_bytep> row_ptrs;
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("png read " + path.string() + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto width = static_cast<int>(png_get_image_width(png, info));
    const auto height = static_cast<int>(png_get_image_height(png, info));
    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || (depth != 8 && depth != 16)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(path.string() + ": only 8/16-bit grayscale PNG is supported");
    }
    const std::size_t bytes = depth / 8;
    data.resize(static_cast<std::size_t>(width) * height * bytes);
    row_ptrs.resize(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y)
        row_ptrs[y] = data.data() + static_cast<std::size_t>(y) * width * bytes;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    img = Image(width, height);
    for (std::size_t i = 0; i < img.size(); ++i)
        img.pixels[i] = bytes == 1 ? data[i] / 255.0 : ((data[2 * i] << 8) | data[2 * i + 1]) / 65535.0;
    return img;
}

/// Writes slice_NNNN.png files and stack.csv (`index,z_um,filename`).
inline void save_stack(const std::filesystem::path& dir, const ZStack& stack)
{
    stack.validate();
    std::filesystem::create_directories(dir);
    std::ostringstream csv;
    csv << "index,z_um,filename\n";
    for (std::size_t i = 0; i < stack.slices.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "slice_%04zu.png", i);
        write_png16(dir / name, stack.slices[i].image);
        char z[32];
        std::snprintf(z, sizeof z, "%.17g", stack.slices[i].z_um);
        csv << i << ',' << z << ',' << name << '\n';
    }
    std::ofstream out(dir / "stack.csv", std::ios::binary);
    out << csv.str();
    if (!out)
        throw Error("cannot write " + (dir / "stack.csv").string());
}

/// Loads a stack written by save_stack; spacing comes from the first two slices.
inline ZStack load_stack(const std::filesystem::path& dir)
{
    const auto csv_path = dir / "stack.csv";
    std::ifstream in(csv_path);
    if (!in)
        throw Error("cannot open " + csv_path.string());
    std::string line;
    if (!std::getline(in, line) || line != "index,z_um,filename")
        throw Error(csv_path.string() + ": expected header index,z_um,filename");
    ZStack stack;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::istringstream row(line);
        std::string idx, z, file;
        if (!std::getline(row, idx, ',') || !std::getline(row, z, ',') || !std::getline(row, file))
            throw Error(csv_path.string() + ": malformed row '" + line + "'");
        try {
            stack.slices.push_back({std::stod(z), read_png(dir / file)});
        } catch (const std::invalid_argument&) {
            throw Error(csv_path.string() + ": bad z value '" + z + "'");
        }
    }
    if (stack.slices.size() >= 2)
        stack.spacing_um = stack.slices[1].z_um - stack.slices[0].z_um;
    stack.validate();
    return stack;
}

}  // namespace focusbench
