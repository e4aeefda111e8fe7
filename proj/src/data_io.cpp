#include "pointdiff/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <unistd.h>

#include "pointdiff/errors.hpp"
#include "pointdiff/geometry.hpp"

namespace pointdiff {

namespace fs = std::filesystem;

namespace {

std::vector<std::string_view> tokens_of(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

bool to_double(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size() && std::isfinite(out);
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(std::move(line));
  }
  return out;
}

void append_coord(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  out += buf;
}

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<std::string> properties;
  bool has_list = false;
};

}  // namespace

CloudFormat format_for(const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".ply") return CloudFormat::AsciiPly;
  if (ext == ".xyz" || ext == ".txt") return CloudFormat::Xyz;
  throw InvalidArgument("unrecognized point cloud extension '" + ext + "' for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

PointCloud parse_ply(const std::string& text) {
  const auto lines = lines_of(text);
  std::size_t ln = 0;
  auto line_no = [&] { return ln + 1; };
  if (lines.empty() || lines[0] != "ply") throw ParseError("missing 'ply' magic", 1);
  ++ln;

  std::vector<PlyElement> elements;
  bool ended = false, ascii = false;
  for (; ln < lines.size(); ++ln) {
    const auto t = tokens_of(lines[ln]);
    if (t.empty()) continue;
    if (t[0] == "comment" || t[0] == "obj_info") continue;
    if (t[0] == "format") {
      if (t.size() != 3 || t[1] != "ascii") throw ParseError("only 'format ascii 1.0' is supported", line_no());
      ascii = true;
    } else if (t[0] == "element") {
      std::size_t count = 0;
      if (t.size() != 3 || std::from_chars(t[2].data(), t[2].data() + t[2].size(), count).ec != std::errc())
        throw ParseError("malformed element line", line_no());
      elements.push_back({std::string(t[1]), count, {}, false});
    } else if (t[0] == "property") {
      if (elements.empty()) throw ParseError("property before any element", line_no());
      if (t.size() >= 2 && t[1] == "list") {
        if (t.size() != 5) throw ParseError("malformed list property", line_no());
        elements.back().has_list = true;
        elements.back().properties.emplace_back(t[4]);
      } else {
        if (t.size() != 3) throw ParseError("malformed property line", line_no());
        elements.back().properties.emplace_back(t[2]);
      }
    } else if (t[0] == "end_header") {
      ended = true;
      ++ln;
      break;
    } else {
      throw ParseError("unexpected header keyword '" + std::string(t[0]) + "'", line_no());
    }
  }
  if (!ascii) throw ParseError("missing format line", line_no());
  if (!ended) throw ParseError("missing end_header", line_no());

  PointCloud cloud;
  bool saw_vertex = false;
  for (const auto& el : elements) {
    if (el.name != "vertex") {
      for (std::size_t r = 0; r < el.count; ++r, ++ln)
        if (ln >= lines.size()) throw ParseError("missing " + el.name + " row", line_no());
      continue;
    }
    saw_vertex = true;
    std::ptrdiff_t col[3] = {-1, -1, -1};
    for (std::size_t p = 0; p < el.properties.size(); ++p)
      for (int k = 0; k < 3; ++k)
        if (el.properties[p] == std::string(1, static_cast<char>('x' + k))) col[k] = static_cast<std::ptrdiff_t>(p);
    if (col[0] < 0 || col[1] < 0 || col[2] < 0 || el.has_list)
      throw ParseError("vertex element needs scalar x, y, z properties", 1);
    cloud.points.reserve(el.count);
    for (std::size_t r = 0; r < el.count; ++r, ++ln) {
      if (ln >= lines.size())
        throw ParseError("expected vertex " + std::to_string(r) + " of " + std::to_string(el.count),
                         line_no());
      const auto t = tokens_of(lines[ln]);
      if (t.size() != el.properties.size())
        throw ParseError("vertex row has " + std::to_string(t.size()) + " values, expected " +
                             std::to_string(el.properties.size()),
                         line_no());
      Point p;
      for (int k = 0; k < 3; ++k)
        if (!to_double(t[static_cast<std::size_t>(col[k])], p[k]))
          throw ParseError("bad number '" + std::string(t[static_cast<std::size_t>(col[k])]) + "'", line_no());
      cloud.points.push_back(p);
    }
  }
  if (!saw_vertex) throw ParseError("no vertex element", 1);
  return cloud;
}

PointCloud parse_xyz(const std::string& text) {
  const auto lines = lines_of(text);
  PointCloud cloud;
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    std::string_view line = lines[ln];
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto t = tokens_of(line);
    if (t.empty()) continue;
    if (t.size() != 3) throw ParseError("expected 3 coordinates, got " + std::to_string(t.size()), ln + 1);
    Point p;
    for (int k = 0; k < 3; ++k)
      if (!to_double(t[static_cast<std::size_t>(k)], p[k]))
        throw ParseError("bad number '" + std::string(t[static_cast<std::size_t>(k)]) + "'", ln + 1);
    cloud.points.push_back(p);
  }
  return cloud;
}

PointCloud load_cloud(const fs::path& path, CloudFormat format) {
  const auto text = read_text(path);
  return format == CloudFormat::AsciiPly ? parse_ply(text) : parse_xyz(text);
}

PointCloud load_cloud(const fs::path& path) { return load_cloud(path, format_for(path)); }

std::string format_ply(const PointCloud& cloud) {
  std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(cloud.size()) +
                    "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  for (const auto& p : cloud.points) {
    append_coord(out, p[0]);
    out += ' ';
    append_coord(out, p[1]);
    out += ' ';
    append_coord(out, p[2]);
    out += '\n';
  }
  return out;
}

std::string format_xyz(const PointCloud& cloud) {
  std::string out;
  for (const auto& p : cloud.points) {
    append_coord(out, p[0]);
    out += ' ';
    append_coord(out, p[1]);
    out += ' ';
    append_coord(out, p[2]);
    out += '\n';
  }
  return out;
}

void save_cloud(const PointCloud& cloud, const fs::path& path, CloudFormat format) {
  if (cloud.empty()) throw InvalidArgument("save_cloud: empty cloud");
  write_atomic(path, format == CloudFormat::AsciiPly ? format_ply(cloud) : format_xyz(cloud));
}

void save_cloud(const PointCloud& cloud, const fs::path& path) {
  save_cloud(cloud, path, format_for(path));
}

Point NormalizationRecord::apply(const Point& p) const {
  const Point c = p - centroid;
  return {c[0] / scale, c[1] / scale, c[2] / scale};
}

Point NormalizationRecord::invert(const Point& p) const {
  return Point{p[0] * scale, p[1] * scale, p[2] * scale} + centroid;
}

Normalized normalize(const PointCloud& cloud) {
  if (cloud.empty()) throw InvalidArgument("normalize: empty cloud");
  Normalized out;
  Point c{0, 0, 0};
  for (const auto& p : cloud.points)
    for (int k = 0; k < 3; ++k) c[k] += p[k];
  for (int k = 0; k < 3; ++k) c[k] /= static_cast<double>(cloud.size());
  double extent = 0;
  for (const auto& p : cloud.points)
    for (int k = 0; k < 3; ++k) extent = std::max(extent, std::abs(p[k] - c[k]));
  out.record.centroid = c;
  out.record.scale = extent > 0 ? 2.0 * extent : 1.0;
  out.cloud.points.reserve(cloud.size());
  for (const auto& p : cloud.points) {
    Point q = out.record.apply(p);
    for (auto& v : q) v = std::clamp(v, -0.5, 0.5);
    out.cloud.points.push_back(q);
  }
  return out;
}

PointCloud denormalize(const PointCloud& cloud, const NormalizationRecord& record) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(record.invert(p));
  return out;
}

PointCloud resample(const PointCloud& cloud, std::size_t target, ResampleMethod method,
                    std::uint64_t seed) {
  if (cloud.empty()) throw InvalidArgument("resample: empty cloud");
  if (target == 0) throw InvalidArgument("resample: target must be positive");
  PointCloud out;
  out.points.reserve(target);
  if (method == ResampleMethod::Fps) {
    if (target > cloud.size())
      throw InvalidArgument("resample: fps cannot produce " + std::to_string(target) +
                            " points from " + std::to_string(cloud.size()));
    for (auto i : fps(cloud, target, seed % cloud.size())) out.points.push_back(cloud[i]);
    return out;
  }
  std::mt19937_64 rng(seed);
  if (target <= cloud.size()) {
    std::vector<std::size_t> idx(cloud.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < target; ++i) out.points.push_back(cloud[idx[i]]);
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, cloud.size() - 1);
    for (std::size_t i = 0; i < target; ++i) out.points.push_back(cloud[pick(rng)]);
  }
  return out;
}

ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "sphere") return ShapeKind::Sphere;
  if (s == "cube") return ShapeKind::Cube;
  if (s == "torus") return ShapeKind::Torus;
  if (s == "cylinder") return ShapeKind::Cylinder;
  if (s == "two-spheres") return ShapeKind::TwoSpheres;
  throw InvalidArgument("unknown shape kind '" + s + "'");
}

const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::Cube: return "cube";
    case ShapeKind::Torus: return "torus";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::TwoSpheres: return "two-spheres";
  }
  return "?";
}

PointCloud synth_shape(ShapeKind kind, std::size_t n, double noise_sigma, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("synth_shape: n must be positive");
  if (noise_sigma < 0) throw InvalidArgument("synth_shape: negative noise");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;

  auto on_sphere = [&](double radius) {
    Point p;
    double len;
    do {
      p = {normal(rng), normal(rng), normal(rng)};
      len = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    } while (len < 1e-12);
    return Point{radius * p[0] / len, radius * p[1] / len, radius * p[2] / len};
  };

  auto draw = [&]() -> Point {
    switch (kind) {
      case ShapeKind::Sphere:
        return on_sphere(0.5);
      case ShapeKind::Cube: {
        const auto face = static_cast<int>(unit(rng) * 6.0) % 6;
        Point p{unit(rng) - 0.5, unit(rng) - 0.5, unit(rng) - 0.5};
        p[face / 2] = face % 2 ? 0.5 : -0.5;
        return p;
      }
      case ShapeKind::Torus: {
        constexpr double R = 0.35, r = 0.15;
        double theta;
        do theta = two_pi * unit(rng);
        while (unit(rng) * (R + r) > R + r * std::cos(theta));
        const double phi = two_pi * unit(rng);
        const double ring = R + r * std::cos(theta);
        return {ring * std::cos(phi), ring * std::sin(phi), r * std::sin(theta)};
      }
      case ShapeKind::Cylinder: {
        constexpr double r = 0.3, h = 0.8;
        const double lateral = two_pi * r * h, caps = 2.0 * std::numbers::pi * r * r;
        if (unit(rng) * (lateral + caps) < lateral) {
          const double phi = two_pi * unit(rng);
          return {r * std::cos(phi), r * std::sin(phi), h * (unit(rng) - 0.5)};
        }
        const double rho = r * std::sqrt(unit(rng)), phi = two_pi * unit(rng);
        return {rho * std::cos(phi), rho * std::sin(phi), unit(rng) < 0.5 ? -h / 2 : h / 2};
      }
      case ShapeKind::TwoSpheres: {
        const Point p = on_sphere(0.2);
        return {p[0] + (unit(rng) < 0.5 ? -0.3 : 0.3), p[1], p[2]};
      }
    }
    return {0, 0, 0};
  };

  PointCloud cloud;
  cloud.points.reserve(n);
  while (cloud.size() < n) {
    const Point p = draw();
    cloud.points.push_back(p);
    if (cloud.size() < n) cloud.points.push_back({-p[0], -p[1], -p[2]});
  }
  if (noise_sigma == 0) return cloud;
  std::normal_distribution<double> jitter(0.0, noise_sigma);
  for (auto& p : cloud.points)
    for (auto& v : p) v += jitter(rng);
  return normalize(cloud).cloud;
}

DatasetManifest parse_manifest(const std::string& text, std::size_t target_points) {
  DatasetManifest m;
  m.target_points = target_points;
  const auto lines = lines_of(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const std::string& line = lines[ln];
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3) throw ParseError("manifest needs id<TAB>spec<TAB>split", ln + 1);
    ManifestEntry e{fields[0], fields[1], Split::Train};
    if (fields[2] == "train") e.split = Split::Train;
    else if (fields[2] == "val") e.split = Split::Val;
    else throw ParseError("split must be train or val, got '" + fields[2] + "'", ln + 1);
    for (const auto& other : m.entries)
      if (other.id == e.id) throw ParseError("duplicate id '" + e.id + "'", ln + 1);
    m.entries.push_back(std::move(e));
  }
  return m;
}

DatasetManifest load_manifest(const fs::path& path, std::size_t target_points) {
  return parse_manifest(read_text(path), target_points);
}

PointCloud load_entry(const ManifestEntry& entry, std::size_t target_points, const fs::path& base) {
  if (entry.spec.rfind("synth:", 0) == 0) {
    std::vector<std::string> parts;
    std::stringstream ss(entry.spec);
    std::string part;
    while (std::getline(ss, part, ':')) parts.push_back(part);
    if (parts.size() < 3 || parts.size() > 4)
      throw InvalidArgument("manifest entry '" + entry.id + "': expected synth:<kind>:<seed>[:<noise>]");
    const auto seed = std::stoull(parts[2]);
    const double noise = parts.size() == 4 ? std::stod(parts[3]) : 0.0;
    return synth_shape(shape_kind_from_string(parts[1]), target_points, noise, seed);
  }
  fs::path p = entry.spec;
  if (p.is_relative() && !base.empty()) p = base / p;
  PointCloud cloud = normalize(load_cloud(p)).cloud;
  if (cloud.size() != target_points) {
    const auto method = cloud.size() > target_points ? ResampleMethod::Fps : ResampleMethod::Random;
    cloud = normalize(resample(cloud, target_points, method, 0)).cloud;
  }
  return cloud;
}

std::vector<PointCloud> load_dataset(const DatasetManifest& manifest, Split split, const fs::path& base) {
  std::vector<PointCloud> out;
  for (const auto& e : manifest.entries)
    if (e.split == split) out.push_back(load_entry(e, manifest.target_points, base));
  return out;
}

}  // namespace pointdiff
