#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <unistd.h>

#include "pointdiff/data_io.hpp"
#include "pointdiff/errors.hpp"
#include "pointdiff/metrics.hpp"
#include "support.hpp"

using namespace pointdiff;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const auto dir = fs::temp_directory_path() / ("pointdiff_data_io_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("parse_ply") {
  const std::string ply =
      "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\n"
      "property float x\nproperty float y\nproperty float z\nproperty uchar red\n"
      "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
      "0 0 0 255\n1 2 3 0\n-1.5 0.25 4e-3 7\n3 0 1 2\n";
  const auto c = parse_ply(ply);
  REQUIRE(c.size() == 3);
  CHECK(c[1] == Point{1, 2, 3});
  CHECK(c[2] == Point{-1.5, 0.25, 4e-3});

  const std::string short_ply =
      "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\n"
      "property float z\nend_header\n0 0 0\n1 1 1\n2 2 2\n3 3 3\n";
  try {
    parse_ply(short_ply);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 12);
  }
  CHECK_THROWS_AS(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n"), ParseError);
  CHECK_THROWS_AS(parse_ply("not a ply\n"), ParseError);
  CHECK_THROWS_AS(parse_ply("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                            "property float z\nend_header\n1 2\n"),
                  ParseError);
}

TEST_CASE("parse_xyz") {
  const auto c = parse_xyz("# header\n0 0 0\n\n1 2 3 # trailing\n  -1 -2 -3\n");
  REQUIRE(c.size() == 3);
  CHECK(c[2] == Point{-1, -2, -3});
  try {
    parse_xyz("0 0 0\n1 2\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(parse_xyz("0 0 x\n"), ParseError);
}

TEST_CASE("save and load round trips") {
  const auto dir = scratch_dir();
  const auto c = testing::random_cloud(100000, 3, -10, 10);
  for (const char* ext : {".ply", ".xyz"}) {
    const auto path = dir / (std::string("big") + ext);
    save_cloud(c, path);
    const auto back = load_cloud(path);
    REQUIRE(back.size() == c.size());
    for (std::size_t i = 0; i < c.size(); ++i)
      for (int k = 0; k < 3; ++k) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", c[i][k]);
        CHECK_MESSAGE(back[i][k] == std::strtod(buf, nullptr), "point ", i);
      }
  }
  CHECK_THROWS_AS(save_cloud(PointCloud{}, dir / "empty.ply"), InvalidArgument);
  CHECK_THROWS(load_cloud(dir / "missing.ply"));
  fs::remove_all(dir);
}

TEST_CASE("normalize") {
  const PointCloud corners{{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1}}};
  const auto n = normalize(corners);
  for (const auto& p : n.cloud.points)
    for (double v : p) CHECK(std::abs(v) == 0.5);

  const auto raw = testing::random_cloud(500, 2, -3, 7);
  const auto a = normalize(raw);
  for (const auto& p : a.cloud.points)
    for (double v : p) CHECK(std::abs(v) <= 0.5);
  Point centroid{0, 0, 0};
  for (const auto& p : a.cloud.points) centroid = centroid + p;
  for (double v : centroid) CHECK(std::abs(v / 500) < 1e-6);

  const auto back = denormalize(a.cloud, a.record);
  for (std::size_t i = 0; i < raw.size(); ++i)
    for (int k = 0; k < 3; ++k) CHECK(std::abs(back[i][k] - raw[i][k]) < 1e-6);

  const auto again = normalize(a.cloud);
  CHECK(again.record.scale >= 1.0 - 1e-12);
  CHECK(again.record.scale <= 1.0 + 1e-6);
  for (std::size_t i = 0; i < raw.size(); ++i)
    for (int k = 0; k < 3; ++k) CHECK(std::abs(again.cloud[i][k] - a.cloud[i][k]) < 1e-6);
}

TEST_CASE("resample") {
  const auto c = synth_shape(ShapeKind::Sphere, 1024, 0, 1);
  const auto same = resample(c, 1024, ResampleMethod::Fps, 0);
  std::set<Point> a(c.points.begin(), c.points.end()), b(same.points.begin(), same.points.end());
  CHECK(a == b);
  CHECK(resample(c, 1, ResampleMethod::Fps, 17)[0] == c[17]);

  const auto half = resample(c, 512, ResampleMethod::Fps, 0);
  double cover = 0;  // largest nearest-neighbour spacing of the original
  for (std::size_t i = 0; i < c.size(); ++i) {
    double best = 1e300;
    for (std::size_t j = 0; j < c.size(); ++j)
      if (i != j) best = std::min(best, testing::sq(c[i], c[j]));
    cover = std::max(cover, std::sqrt(best));
  }
  CHECK(hausdorff(half, c) < 2 * cover);

  const auto r = resample(c, 300, ResampleMethod::Random, 5);
  std::set<Point> rs(r.points.begin(), r.points.end());
  CHECK(rs.size() == 300);  // without replacement
  CHECK(resample(c, 2000, ResampleMethod::Random, 5).size() == 2000);
  CHECK(resample(c, 300, ResampleMethod::Random, 5) == r);
  CHECK_THROWS_AS(resample(c, 2000, ResampleMethod::Fps, 0), InvalidArgument);
}

TEST_CASE("synthetic shapes") {
  const auto sphere = synth_shape(ShapeKind::Sphere, 512, 0, 1);
  for (const auto& p : sphere.points) CHECK(std::abs(std::sqrt(testing::sq(p, {0, 0, 0})) - 0.5) < 1e-6);

  const auto cube = synth_shape(ShapeKind::Cube, 512, 0, 1);
  for (const auto& p : cube.points)
    CHECK((std::abs(std::abs(p[0]) - 0.5) < 1e-12 || std::abs(std::abs(p[1]) - 0.5) < 1e-12 ||
           std::abs(std::abs(p[2]) - 0.5) < 1e-12));

  const auto torus = synth_shape(ShapeKind::Torus, 512, 0, 1);
  for (const auto& p : torus.points) {
    const double q = std::hypot(p[0], p[1]) - 0.35;
    CHECK(std::abs(q * q + p[2] * p[2] - 0.15 * 0.15) < 1e-6);
  }

  const auto cyl = synth_shape(ShapeKind::Cylinder, 512, 0, 1);
  for (const auto& p : cyl.points) {
    const double rho = std::hypot(p[0], p[1]);
    CHECK((std::abs(rho - 0.3) < 1e-9 || (std::abs(std::abs(p[2]) - 0.4) < 1e-12 && rho <= 0.3 + 1e-12)));
  }

  const auto two = synth_shape(ShapeKind::TwoSpheres, 512, 0, 1);
  for (const auto& p : two.points) {
    const double d = std::min(std::sqrt(testing::sq(p, {0.3, 0, 0})), std::sqrt(testing::sq(p, {-0.3, 0, 0})));
    CHECK(std::abs(d - 0.2) < 1e-6);
  }

  for (int k = 0; k < 5; ++k) {
    const auto kind = static_cast<ShapeKind>(k);
    const auto s = synth_shape(kind, 256, 0.01, 9);
    CHECK(s == synth_shape(kind, 256, 0.01, 9));
    CHECK(s.size() == 256);
    Point c{0, 0, 0};
    for (const auto& p : s.points) {
      c = c + p;
      for (double v : p) CHECK(std::abs(v) <= 0.5);
    }
    for (double v : c) CHECK(std::abs(v / 256) < 1e-6);
    CHECK(shape_kind_from_string(to_string(kind)) == kind);
  }
  CHECK_THROWS_AS(shape_kind_from_string("pyramid"), InvalidArgument);
}

TEST_CASE("manifest") {
  const auto dir = scratch_dir();
  save_cloud(testing::random_cloud(300, 1, -2, 2), dir / "a.xyz");
  write_atomic(dir / "m.tsv", "# training set\na\ta.xyz\ttrain\nb\tsynth:torus:4\ttrain\nc\tsynth:cube:5:0.01\tval\n");
  const auto m = load_manifest(dir / "m.tsv", 128);
  REQUIRE(m.entries.size() == 3);
  const auto train = load_dataset(m, Split::Train, dir);
  REQUIRE(train.size() == 2);
  for (const auto& c : train) {
    CHECK(c.size() == 128);
    for (const auto& p : c.points)
      for (double v : p) CHECK(std::abs(v) <= 0.5);
  }
  CHECK(train[1] == synth_shape(ShapeKind::Torus, 128, 0, 4));
  CHECK(load_dataset(m, Split::Val, dir).size() == 1);

  CHECK_THROWS_AS(parse_manifest("a\tsynth:sphere:1\ttrain\na\tsynth:cube:1\ttrain\n", 64), ParseError);
  CHECK_THROWS_AS(parse_manifest("a\tsynth:sphere:1\n", 64), ParseError);
  CHECK_THROWS_AS(parse_manifest("a\tsynth:sphere:1\ttest\n", 64), ParseError);
  fs::remove_all(dir);
}
