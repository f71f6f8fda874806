#include "doctest.h"

#include "bilevel/image_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

using namespace bilevel;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "bilevel_image_io_test";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string error_of(const fs::path& p) {
  try {
    (void)read_image(p.string());
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("CSV round trip is exact") {
  Rng rng(1);
  const GridImage<double> img(8, rng.normal_vector<double>(64));
  const auto p = scratch("rt.csv");
  write_image(p.string(), img);
  const auto back = read_image(p.string());
  CHECK(back.side == 8);
  CHECK(back.data == img.data);
}

TEST_CASE("PGM round trip is within one gray level") {
  const auto img = generate_phantom(16, 3);
  const auto p = scratch("rt.pgm");
  write_image(p.string(), img);
  const auto back = read_image(p.string());
  CHECK((back.data - img.data).cwiseAbs().maxCoeff() <= 1.0 / 255.0);
}

TEST_CASE("PGM writer clamps out-of-range values") {
  GridImage<double> img(2, (Vector<double>(4) << -0.5, 0.0, 1.0, 1.7).finished());
  const auto p = scratch("clamp.pgm");
  write_pgm(p.string(), img);
  const auto back = read_pgm(p.string());
  CHECK(back.data[0] == 0.0);
  CHECK(back.data[3] == 1.0);
}

TEST_CASE("PGM reader handles comments and rejects defects") {
  const auto ok = scratch("ok.pgm");
  write_text(ok, "P2\n# comment\n2 2\n# another\n255\n0 255\n51 102\n");
  const auto img = read_pgm(ok.string());
  CHECK(img(0, 1) == 1.0);
  CHECK(img(1, 0) == doctest::Approx(0.2));

  const auto magic = scratch("magic.pgm");
  write_text(magic, "P5\n2 2\n255\n0 0 0 0\n");
  CHECK(error_of(magic).find("P2") != std::string::npos);

  const auto rect = scratch("rect.pgm");
  write_text(rect, "P2\n3 2\n255\n0 0 0 0 0 0\n");
  CHECK(error_of(rect).find("non-square") != std::string::npos);

  const auto trunc = scratch("trunc.pgm");
  write_text(trunc, "P2\n2 2\n255\n0 0 0\n");
  CHECK(error_of(trunc).find("truncated") != std::string::npos);

  const auto big = scratch("big.pgm");
  write_text(big, "P2\n1 1\n255\n300\n");
  CHECK(error_of(big).find("exceeds maxval") != std::string::npos);
}

TEST_CASE("CSV reader names the defect") {
  const auto rect = scratch("rect.csv");
  write_text(rect, "1,2,3,4\n5,6,7,8\n9,10,11,12\n");
  CHECK(error_of(rect).find("non-square data (3 rows x 4 columns)") != std::string::npos);

  const auto ragged = scratch("ragged.csv");
  write_text(ragged, "1,2\n3\n");
  CHECK(error_of(ragged).find("line 2: ragged row") != std::string::npos);

  const auto bad = scratch("bad.csv");
  write_text(bad, "1,2\n3,x\n");
  CHECK(error_of(bad).find("line 2: malformed number 'x'") != std::string::npos);

  const auto empty = scratch("empty.csv");
  write_text(empty, "");
  CHECK(error_of(empty).find("empty file") != std::string::npos);

  CHECK(error_of(scratch("missing.csv")).find("cannot open") != std::string::npos);
  CHECK_THROWS_AS(format_from_path("image.png"), std::invalid_argument);
}
