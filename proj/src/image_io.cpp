#include "bilevel/image_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace bilevel {
namespace {

std::runtime_error io_error(const std::string& path, const std::string& what) {
  return std::runtime_error(path + ": " + what);
}

// Next whitespace-separated PGM token, skipping '#' comments.
bool next_token(std::istream& in, std::string& token) {
  token.clear();
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string discard;
      std::getline(in, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!token.empty()) return true;
      continue;
    }
    token.push_back(ch);
  }
  return !token.empty();
}

long parse_long(const std::string& path, const std::string& token, const char* field) {
  long value = 0;
  const auto* first = token.data();
  const auto* last = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw io_error(path, std::string("malformed ") + field + " '" + token + "'");
  }
  return value;
}

}  // namespace

ImageFormat format_from_path(const std::string& path) {
  const auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == "pgm") return ImageFormat::pgm;
  if (ext == "csv") return ImageFormat::csv;
  throw std::invalid_argument(path + ": unknown image extension (expected .pgm or .csv)");
}

GridImage<double> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(path, "cannot open for reading");
  std::string token;
  if (!next_token(in, token) || token != "P2") {
    throw io_error(path, "not a plain PGM file (magic number P2 missing)");
  }
  if (!next_token(in, token)) throw io_error(path, "missing width");
  const long width = parse_long(path, token, "width");
  if (!next_token(in, token)) throw io_error(path, "missing height");
  const long height = parse_long(path, token, "height");
  if (!next_token(in, token)) throw io_error(path, "missing maxval");
  const long maxval = parse_long(path, token, "maxval");
  if (width <= 0 || height <= 0) throw io_error(path, "non-positive image dimensions");
  if (maxval <= 0 || maxval > 65535) throw io_error(path, "maxval out of range");
  if (width != height) {
    throw io_error(path, "non-square image (" + std::to_string(width) + "x" + std::to_string(height) + ")");
  }
  const Index n = width;
  Vector<double> data(n * n);
  for (Index k = 0; k < n * n; ++k) {
    if (!next_token(in, token)) {
      throw io_error(path, "truncated pixel data: expected " + std::to_string(n * n) + " values, got " +
                               std::to_string(k));
    }
    const long v = parse_long(path, token, "pixel value");
    if (v < 0 || v > maxval) throw io_error(path, "pixel value " + token + " exceeds maxval");
    data[k] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  if (next_token(in, token)) throw io_error(path, "trailing data after pixels");
  return GridImage<double>(n, std::move(data));
}

void write_pgm(const std::string& path, const GridImage<double>& image) {
  std::ofstream out(path);
  if (!out) throw io_error(path, "cannot open for writing");
  const Index n = image.side;
  out << "P2\n" << n << ' ' << n << "\n255\n";
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const double v = std::clamp(image(i, j), 0.0, 1.0);
      out << (j ? " " : "") << static_cast<int>(std::lround(v * 255.0));
    }
    out << '\n';
  }
  if (!out) throw io_error(path, "write failed");
}

GridImage<double> read_csv_image(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error(path, "cannot open for reading");
  std::vector<double> values;
  std::string line;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t count = 0;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t");
      const auto e = cell.find_last_not_of(" \t");
      if (b == std::string::npos) {
        throw io_error(path, "line " + std::to_string(line_no) + ": empty cell");
      }
      const std::string trimmed = cell.substr(b, e - b + 1);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(trimmed.data(), trimmed.data() + trimmed.size(), v);
      if (ec != std::errc() || ptr != trimmed.data() + trimmed.size() || !std::isfinite(v)) {
        throw io_error(path, "line " + std::to_string(line_no) + ": malformed number '" + trimmed + "'");
      }
      values.push_back(v);
      ++count;
    }
    if (rows == 0) {
      cols = count;
    } else if (count != cols) {
      throw io_error(path, "line " + std::to_string(line_no) + ": ragged row (" + std::to_string(count) +
                               " columns, expected " + std::to_string(cols) + ")");
    }
    ++rows;
  }
  if (rows == 0) throw io_error(path, "empty file");
  if (rows != cols) {
    throw io_error(path, "non-square data (" + std::to_string(rows) + " rows x " + std::to_string(cols) +
                             " columns)");
  }
  const auto n = static_cast<Index>(rows);
  return GridImage<double>(n, Eigen::Map<const Vector<double>>(values.data(), n * n));
}

void write_csv_image(const std::string& path, const GridImage<double>& image) {
  std::ofstream out(path);
  if (!out) throw io_error(path, "cannot open for writing");
  const Index n = image.side;
  char buf[64];
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), image(i, j));
      if (j) out << ',';
      out.write(buf, ptr - buf);
    }
    out << '\n';
  }
  if (!out) throw io_error(path, "write failed");
}

GridImage<double> read_image(const std::string& path, ImageFormat format) {
  return format == ImageFormat::pgm ? read_pgm(path) : read_csv_image(path);
}

GridImage<double> read_image(const std::string& path) { return read_image(path, format_from_path(path)); }

void write_image(const std::string& path, const GridImage<double>& image, ImageFormat format) {
  if (format == ImageFormat::pgm) {
    write_pgm(path, image);
  } else {
    write_csv_image(path, image);
  }
}

void write_image(const std::string& path, const GridImage<double>& image) {
  write_image(path, image, format_from_path(path));
}

}  // namespace bilevel
