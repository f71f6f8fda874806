#pragma once

#include "bilevel/core.hpp"

#include <string>

namespace bilevel {

enum class ImageFormat { pgm, csv };

/// Picks the format from the file extension (".pgm" or ".csv").
ImageFormat format_from_path(const std::string& path);

/// Plain PGM (P2). Gray levels are mapped linearly from [0, maxval] to [0, 1];
/// on write, values are clamped to [0, 1] and rounded to 8 bits.
GridImage<double> read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GridImage<double>& image);

/// Row-major comma-separated reals, one image row per line. Written with
/// round-trip precision so that read(write(x)) == x exactly.
GridImage<double> read_csv_image(const std::string& path);
void write_csv_image(const std::string& path, const GridImage<double>& image);

GridImage<double> read_image(const std::string& path, ImageFormat format);
GridImage<double> read_image(const std::string& path);
void write_image(const std::string& path, const GridImage<double>& image, ImageFormat format);
void write_image(const std::string& path, const GridImage<double>& image);

}  // namespace bilevel
