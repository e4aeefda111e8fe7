#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pointdiff/point.hpp"

namespace pointdiff {

enum class CloudFormat { AsciiPly, Xyz };

// Picks the format from the file extension (.ply / .xyz / .txt).
CloudFormat format_for(const std::filesystem::path& path);

PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format);
PointCloud load_cloud(const std::filesystem::path& path);
PointCloud parse_ply(const std::string& text);
PointCloud parse_xyz(const std::string& text);

// Coordinates are written with 9 significant digits.
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, CloudFormat format);
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path);
std::string format_ply(const PointCloud& cloud);
std::string format_xyz(const PointCloud& cloud);

struct NormalizationRecord {
  Point centroid{0, 0, 0};
  double scale = 1.0;  // twice the largest absolute centered coordinate

  Point apply(const Point& p) const;
  Point invert(const Point& p) const;
};

struct Normalized {
  PointCloud cloud;
  NormalizationRecord record;
};

// Centers at the centroid and scales into [-0.5, 0.5]^3.
Normalized normalize(const PointCloud& cloud);
PointCloud denormalize(const PointCloud& cloud, const NormalizationRecord& record);

enum class ResampleMethod { Fps, Random };

// Fps starts from index seed % N. Random draws without replacement, or with
// replacement when target > N.
PointCloud resample(const PointCloud& cloud, std::size_t target, ResampleMethod method,
                    std::uint64_t seed);

enum class ShapeKind { Sphere, Cube, Torus, Cylinder, TwoSpheres };

ShapeKind shape_kind_from_string(const std::string& s);
const char* to_string(ShapeKind k);

// Area-uniform surface samples of a shape that fits [-0.5, 0.5]^3, drawn in
// antipodal pairs so the centroid is the origin. Sphere radius 0.5; cube of
// side 1; torus R = 0.35, r = 0.15 around z; cylinder radius 0.3, height 0.8
// with caps; two spheres of radius 0.2 at x = +-0.3. With noise the jittered
// cloud is re-normalized.
PointCloud synth_shape(ShapeKind kind, std::size_t n, double noise_sigma, std::uint64_t seed);

enum class Split { Train, Val };

struct ManifestEntry {
  std::string id;
  std::string spec;  // file path, or synth:<kind>:<seed>[:<noise>]
  Split split = Split::Train;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::size_t target_points = 0;
};

// One entry per line: id<TAB>spec<TAB>split. Blank lines and '#' comments skipped.
DatasetManifest parse_manifest(const std::string& text, std::size_t target_points);
DatasetManifest load_manifest(const std::filesystem::path& path, std::size_t target_points);

// Resolves one entry to a normalized cloud of exactly target_points points.
// Relative file paths are taken relative to `base`.
PointCloud load_entry(const ManifestEntry& entry, std::size_t target_points,
                      const std::filesystem::path& base = {});

std::vector<PointCloud> load_dataset(const DatasetManifest& manifest, Split split,
                                     const std::filesystem::path& base = {});

std::string read_text(const std::filesystem::path& path);
// Writes to a temporary sibling and renames it into place.
void write_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace pointdiff
