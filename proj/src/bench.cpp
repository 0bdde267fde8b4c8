#include "equidesc/bench.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <queue>
#include <sstream>
#include <thread>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <json.hpp>

namespace equidesc {
namespace {

namespace fs = std::filesystem;

std::string Lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void WriteFile(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path + "'");
}

std::vector<std::string> SplitWords(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> words;
  std::string w;
  while (ss >> w) words.push_back(w);
  return words;
}

bool ParseDouble(const std::string& s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

std::string FormatG(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

struct PlyHeader {
  bool binary = false;
  std::size_t vertices = 0;
  std::vector<std::string> properties;
  std::optional<Vec3> sensor_origin;
  std::size_t body_offset = 0;
  int body_line = 0;
};

[[noreturn]] void HeaderError(const std::string& path, int line, const std::string& what) {
  throw CloudFormatError(path + ": line " + std::to_string(line) + ": " + what);
}

PlyHeader ParsePlyHeader(const std::string& bytes, const std::string& path) {
  PlyHeader h;
  std::size_t pos = 0;
  int line_no = 0;
  bool saw_format = false;
  bool saw_vertex = false;
  bool in_vertex = false;
  while (true) {
    const std::size_t eol = bytes.find('\n', pos);
    if (eol == std::string::npos) HeaderError(path, line_no + 1, "header is not terminated by end_header");
    std::string line = bytes.substr(pos, eol - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pos = eol + 1;
    ++line_no;
    const std::vector<std::string> w = SplitWords(line);
    if (line_no == 1) {
      if (w.size() != 1 || w[0] != "ply") HeaderError(path, 1, "missing 'ply' magic");
      continue;
    }
    if (w.empty()) continue;
    if (w[0] == "end_header") break;
    if (w[0] == "comment" || w[0] == "obj_info") {
      if (w.size() == 5 && w[1] == "sensor_origin") {
        Vec3 o;
        for (int i = 0; i < 3; ++i) {
          if (!ParseDouble(w[2 + i], o(i))) HeaderError(path, line_no, "bad sensor_origin value");
        }
        h.sensor_origin = o;
      }
      continue;
    }
    if (w[0] == "format") {
      if (w.size() != 3) HeaderError(path, line_no, "malformed format line");
      if (w[1] == "ascii") {
        h.binary = false;
      } else if (w[1] == "binary_little_endian") {
        h.binary = true;
      } else {
        HeaderError(path, line_no, "unsupported encoding '" + w[1] + "'");
      }
      saw_format = true;
      continue;
    }
    if (w[0] == "element") {
      if (w.size() != 3) HeaderError(path, line_no, "malformed element line");
      std::size_t count = 0;
      auto [ptr, ec] = std::from_chars(w[2].data(), w[2].data() + w[2].size(), count);
      if (ec != std::errc() || ptr != w[2].data() + w[2].size()) {
        HeaderError(path, line_no, "bad element count '" + w[2] + "'");
      }
      if (w[1] == "vertex") {
        if (saw_vertex) HeaderError(path, line_no, "duplicate vertex element");
        saw_vertex = true;
        in_vertex = true;
        h.vertices = count;
      } else {
        if (count != 0) HeaderError(path, line_no, "unsupported element '" + w[1] + "'");
        in_vertex = false;
      }
      continue;
    }
    if (w[0] == "property") {
      if (w.size() >= 2 && w[1] == "list") HeaderError(path, line_no, "list properties are not supported");
      if (w.size() != 3) HeaderError(path, line_no, "malformed property line");
      if (!in_vertex) continue;
      if (w[1] != "float" && w[1] != "float32") {
        HeaderError(path, line_no, "non-float property type '" + w[1] + "' for '" + w[2] + "'");
      }
      h.properties.push_back(w[2]);
      continue;
    }
    HeaderError(path, line_no, "unexpected header keyword '" + w[0] + "'");
  }
  if (!saw_format) HeaderError(path, line_no, "missing format line");
  if (!saw_vertex) HeaderError(path, line_no, "missing vertex element");
  h.body_offset = pos;
  h.body_line = line_no + 1;
  return h;
}

PointCloud LoadPly(const std::string& path) {
  const std::string bytes = ReadFile(path);
  const PlyHeader h = ParsePlyHeader(bytes, path);
  auto find = [&](const char* name) -> int {
    for (std::size_t i = 0; i < h.properties.size(); ++i) {
      if (h.properties[i] == name) return static_cast<int>(i);
    }
    return -1;
  };
  const int ix = find("x"), iy = find("y"), iz = find("z");
  if (ix < 0 || iy < 0 || iz < 0) {
    throw CloudFormatError(path + ": vertex element lacks x, y or z");
  }
  const int inx = find("nx"), iny = find("ny"), inz = find("nz");
  const int normal_props = (inx >= 0) + (iny >= 0) + (inz >= 0);
  if (normal_props != 0 && normal_props != 3) {
    throw CloudFormatError(path + ": normals need all of nx, ny, nz");
  }
  const std::size_t np = h.properties.size();
  std::vector<float> values(h.vertices * np);

  if (h.binary) {
    const std::size_t payload = bytes.size() - h.body_offset;
    const std::size_t expected = values.size() * sizeof(float);
    if (payload != expected) {
      throw CloudFormatError(path + ": element count mismatch: header declares " +
                             std::to_string(h.vertices) + " vertices (" +
                             std::to_string(expected) + " bytes) but the payload at offset " +
                             std::to_string(h.body_offset) + " holds " +
                             std::to_string(payload) + " bytes");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      const unsigned char* b =
          reinterpret_cast<const unsigned char*>(bytes.data() + h.body_offset + 4 * i);
      const std::uint32_t u = static_cast<std::uint32_t>(b[0]) |
                              (static_cast<std::uint32_t>(b[1]) << 8) |
                              (static_cast<std::uint32_t>(b[2]) << 16) |
                              (static_cast<std::uint32_t>(b[3]) << 24);
      std::memcpy(&values[i], &u, sizeof(float));
    }
  } else {
    std::istringstream body(bytes.substr(h.body_offset));
    std::string line;
    std::size_t row = 0;
    int line_no = h.body_line - 1;
    while (std::getline(body, line)) {
      ++line_no;
      const std::vector<std::string> w = SplitWords(line);
      if (w.empty()) continue;
      if (row >= h.vertices) {
        ++row;
        continue;
      }
      if (w.size() != np) {
        HeaderError(path, line_no, "expected " + std::to_string(np) + " values, found " +
                                       std::to_string(w.size()));
      }
      for (std::size_t p = 0; p < np; ++p) {
        double v = 0.0;
        if (!ParseDouble(w[p], v)) HeaderError(path, line_no, "bad number '" + w[p] + "'");
        values[row * np + p] = static_cast<float>(v);
      }
      ++row;
    }
    if (row != h.vertices) {
      throw CloudFormatError(path + ": element count mismatch: header declares " +
                             std::to_string(h.vertices) + " vertices, found " +
                             std::to_string(row));
    }
  }

  PointCloud cloud;
  cloud.sensor_origin = h.sensor_origin;
  cloud.points.resize(h.vertices);
  if (normal_props == 3) cloud.normals.resize(h.vertices);
  for (std::size_t i = 0; i < h.vertices; ++i) {
    const float* r = values.data() + i * np;
    cloud.points[i] = Vec3(r[ix], r[iy], r[iz]);
    if (normal_props == 3) cloud.normals[i] = Vec3(r[inx], r[iny], r[inz]);
  }
  return cloud;
}

PointCloud LoadXyz(const std::string& path) {
  std::istringstream in(ReadFile(path));
  PointCloud cloud;
  std::string line;
  int line_no = 0;
  int width = -1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::vector<std::string> w = SplitWords(line);
    if (w.empty() || w[0][0] == '#') continue;
    if (w.size() != 3 && w.size() != 6) {
      HeaderError(path, line_no, "expected 3 or 6 values, found " + std::to_string(w.size()));
    }
    if (width < 0) width = static_cast<int>(w.size());
    if (static_cast<int>(w.size()) != width) HeaderError(path, line_no, "inconsistent column count");
    double v[6];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!ParseDouble(w[i], v[i])) HeaderError(path, line_no, "bad number '" + w[i] + "'");
    }
    // Round through float32 so both formats load identically.
    auto f = [](double x) { return static_cast<double>(static_cast<float>(x)); };
    cloud.points.emplace_back(f(v[0]), f(v[1]), f(v[2]));
    if (width == 6) cloud.normals.emplace_back(f(v[3]), f(v[4]), f(v[5]));
  }
  return cloud;
}

enum class CloudKind { kPly, kXyz };

CloudKind KindOf(const std::string& path) {
  const std::string ext = Lower(fs::path(path).extension().string());
  if (ext == ".ply") return CloudKind::kPly;
  if (ext == ".xyz" || ext == ".txt") return CloudKind::kXyz;
  throw CloudFormatError(path + ": unknown format (expected .ply, .xyz or .txt)");
}

bool KeyLess(const std::pair<double, std::size_t>& a, const std::pair<double, std::size_t>& b) {
  return a.first < b.first || (a.first == b.first && a.second < b.second);
}

constexpr std::uint32_t kLeafSize = 8;

}  // namespace

PointCloud load_cloud(const std::string& path) {
  return KindOf(path) == CloudKind::kPly ? LoadPly(path) : LoadXyz(path);
}

void save_cloud(const PointCloud& cloud, const std::string& path, PlyEncoding encoding) {
  cloud.validate();
  const bool normals = cloud.has_normals();
  std::string out;
  if (KindOf(path) == CloudKind::kXyz) {
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const Vec3& p = cloud.points[i];
      out += FormatG(static_cast<float>(p.x()), 9) + " " + FormatG(static_cast<float>(p.y()), 9) +
             " " + FormatG(static_cast<float>(p.z()), 9);
      if (normals) {
        const Vec3& n = cloud.normals[i];
        out += " " + FormatG(static_cast<float>(n.x()), 9) + " " +
               FormatG(static_cast<float>(n.y()), 9) + " " + FormatG(static_cast<float>(n.z()), 9);
      }
      out += "\n";
    }
    WriteFile(path, out);
    return;
  }
  const bool binary = encoding == PlyEncoding::kBinaryLittleEndian;
  out += "ply\n";
  out += binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n";
  if (cloud.sensor_origin) {
    const Vec3& o = *cloud.sensor_origin;
    out += "comment sensor_origin " + FormatG(o.x(), 17) + " " + FormatG(o.y(), 17) + " " +
           FormatG(o.z(), 17) + "\n";
  }
  out += "element vertex " + std::to_string(cloud.size()) + "\n";
  out += "property float x\nproperty float y\nproperty float z\n";
  if (normals) out += "property float nx\nproperty float ny\nproperty float nz\n";
  out += "end_header\n";
  const int np = normals ? 6 : 3;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    float v[6];
    for (int a = 0; a < 3; ++a) v[a] = static_cast<float>(cloud.points[i](a));
    if (normals) {
      for (int a = 0; a < 3; ++a) v[3 + a] = static_cast<float>(cloud.normals[i](a));
    }
    if (binary) {
      for (int p = 0; p < np; ++p) {
        std::uint32_t u;
        std::memcpy(&u, &v[p], sizeof(float));
        const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                           static_cast<char>((u >> 16) & 0xff), static_cast<char>(u >> 24)};
        out.append(b, 4);
      }
    } else {
      for (int p = 0; p < np; ++p) {
        if (p) out += ' ';
        out += FormatG(v[p], 9);
      }
      out += '\n';
    }
  }
  WriteFile(path, out);
}

Mat4 load_pose(const std::string& path) {
  std::istringstream in(ReadFile(path));
  Mat4 m;
  std::string tok;
  for (int i = 0; i < 16; ++i) {
    if (!(in >> tok) || !ParseDouble(tok, m(i / 4, i % 4))) {
      throw CloudFormatError(path + ": expected 16 numbers in a pose file");
    }
  }
  if (in >> tok) throw CloudFormatError(path + ": trailing data in a pose file");
  return m;
}

void save_pose(const Mat4& pose, const std::string& path) {
  std::string out;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      if (c) out += ' ';
      out += FormatG(pose(r, c), 17);
    }
    out += '\n';
  }
  WriteFile(path, out);
}

KdTree::KdTree(const std::vector<Vec3>& points) : points_(points) {
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  if (!points_.empty()) build(0, static_cast<std::uint32_t>(points_.size()));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  const std::int32_t id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({begin, end, -1, 0.0, -1, -1});
  if (end - begin <= kLeafSize) return id;
  Vec3 lo = points_[order_[begin]], hi = lo;
  for (std::uint32_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     return points_[a](axis) < points_[b](axis) ||
                            (points_[a](axis) == points_[b](axis) && a < b);
                   });
  const double split = points_[order_[mid]](axis);
  const std::int32_t left = build(begin, mid);
  const std::int32_t right = build(mid, end);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

std::size_t KdTree::nearest(const Vec3& q, double* squared_distance) const {
  const std::vector<std::size_t> r = knn(q, 1);
  if (r.empty()) throw InvalidArgument("KdTree: empty tree");
  if (squared_distance) *squared_distance = (points_[r[0]] - q).squaredNorm();
  return r[0];
}

std::vector<std::size_t> KdTree::knn(const Vec3& q, std::size_t k) const {
  std::vector<std::size_t> out;
  if (points_.empty() || k == 0) return out;
  k = std::min(k, points_.size());
  using Entry = std::pair<double, std::size_t>;
  auto cmp = [](const Entry& a, const Entry& b) { return KeyLess(a, b); };
  std::priority_queue<Entry, std::vector<Entry>, decltype(cmp)> heap(cmp);  // max on top
  std::vector<std::pair<std::int32_t, double>> stack;  // node, lower bound on d^2
  stack.emplace_back(0, 0.0);
  while (!stack.empty()) {
    const auto [id, bound] = stack.back();
    stack.pop_back();
    if (heap.size() == k && bound > heap.top().first) continue;
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        const Entry e{(points_[order_[i]] - q).squaredNorm(), order_[i]};
        if (heap.size() < k) {
          heap.push(e);
        } else if (KeyLess(e, heap.top())) {
          heap.pop();
          heap.push(e);
        }
      }
      continue;
    }
    const double diff = q(n.axis) - n.split;
    const double far_bound = std::max(bound, diff * diff);
    // Push the far side first so the near side is explored first.
    if (diff < 0.0) {
      stack.emplace_back(n.right, far_bound);
      stack.emplace_back(n.left, bound);
    } else {
      stack.emplace_back(n.left, far_bound);
      stack.emplace_back(n.right, bound);
    }
  }
  std::vector<Entry> entries;
  while (!heap.empty()) {
    entries.push_back(heap.top());
    heap.pop();
  }
  std::sort(entries.begin(), entries.end(), KeyLess);
  for (const Entry& e : entries) out.push_back(e.second);
  return out;
}

std::vector<std::size_t> KdTree::radius_search(const Vec3& q, double radius) const {
  std::vector<std::size_t> out;
  if (points_.empty()) return out;
  const double r2 = radius * radius;
  std::vector<std::int32_t> stack{0};
  while (!stack.empty()) {
    const Node& n = nodes_[stack.back()];
    stack.pop_back();
    if (n.axis < 0) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        if ((points_[order_[i]] - q).squaredNorm() <= r2) out.push_back(order_[i]);
      }
      continue;
    }
    const double diff = q(n.axis) - n.split;
    if (diff <= radius) stack.push_back(n.left);
    if (diff >= -radius) stack.push_back(n.right);
  }
  std::sort(out.begin(), out.end());
  return out;
}

PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  if (!(voxel > 0.0)) throw InvalidArgument("voxel_downsample: voxel must be positive");
  using Key = std::array<std::int64_t, 3>;
  std::vector<std::pair<Key, std::size_t>> keyed(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    Key key;
    for (int a = 0; a < 3; ++a) {
      key[a] = static_cast<std::int64_t>(std::floor(cloud.points[i](a) / voxel));
    }
    keyed[i] = {key, i};
  }
  std::sort(keyed.begin(), keyed.end());
  PointCloud out;
  out.sensor_origin = cloud.sensor_origin;
  const bool normals = cloud.has_normals();
  for (std::size_t s = 0; s < keyed.size();) {
    std::size_t e = s;
    Vec3 sum = Vec3::Zero();
    Vec3 nsum = Vec3::Zero();
    while (e < keyed.size() && keyed[e].first == keyed[s].first) {
      sum += cloud.points[keyed[e].second];
      if (normals) nsum += cloud.normals[keyed[e].second];
      ++e;
    }
    out.points.push_back(sum / static_cast<double>(e - s));
    if (normals) {
      const double len = nsum.norm();
      out.normals.push_back(len > 1e-12 ? Vec3(nsum / len) : cloud.normals[keyed[s].second]);
    }
    s = e;
  }
  return out;
}

PointCloud estimate_normals(const PointCloud& cloud, int k, const std::optional<Vec3>& viewpoint) {
  if (k < 3) throw InvalidArgument("estimate_normals: k must be at least 3");
  if (static_cast<std::size_t>(k) > cloud.size()) {
    throw InvalidArgument("estimate_normals: k exceeds the number of points");
  }
  const KdTree tree(cloud.points);
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : cloud.points) centroid += p;
  centroid /= static_cast<double>(cloud.size());

  PointCloud out = cloud;
  out.normals.assign(cloud.size(), Vec3::UnitZ());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const std::vector<std::size_t> nb = tree.knn(cloud.points[i], k);
    Vec3 mean = Vec3::Zero();
    for (std::size_t j : nb) mean += cloud.points[j];
    mean /= static_cast<double>(nb.size());
    Mat3 cov = Mat3::Zero();
    for (std::size_t j : nb) {
      const Vec3 d = cloud.points[j] - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 ev = eig.eigenvalues();
    Vec3 n;
    if (ev(2) <= 0.0) {
      n = Vec3::UnitZ();  // all neighbors coincide
    } else if (ev(1) <= 1e-12 * ev(2)) {
      // Collinear neighbors: pick the unit vector orthogonal to the line that
      // lies in the plane of the line and the least-aligned coordinate axis.
      const Vec3 u = eig.eigenvectors().col(2).normalized();
      int axis = 0;
      u.cwiseAbs().minCoeff(&axis);
      const Vec3 e = Vec3::Unit(axis);
      n = (e - e.dot(u) * u).normalized();
    } else {
      n = eig.eigenvectors().col(0).normalized();
    }
    const Vec3 toward = viewpoint ? Vec3(*viewpoint - cloud.points[i])
                                  : Vec3(cloud.points[i] - centroid);
    if (n.dot(toward) < 0.0) n = -n;
    out.normals[i] = n;
  }
  return out;
}

std::vector<std::size_t> sample_keypoints(const PointCloud& cloud, std::size_t n, Rng& rng) {
  if (n > cloud.size()) throw InvalidArgument("sample_keypoints: n exceeds the number of points");
  std::vector<std::size_t> idx(cloud.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  return idx;
}

void EvalConfig::validate() const {
  if (!(tau1 > 0.0)) throw InvalidArgument("tau1 must be positive");
  if (!(tau2 > 0.0 && tau2 <= 1.0)) throw InvalidArgument("tau2 must lie in (0, 1]");
  if (!(min_overlap > 0.0 && min_overlap <= 1.0)) {
    throw InvalidArgument("min_overlap must lie in (0, 1]");
  }
  if (n_keypoints < 1) throw InvalidArgument("n_keypoints must be positive");
  if (!(voxel > 0.0)) throw InvalidArgument("voxel must be positive");
  if (normal_k < 3) throw InvalidArgument("normal_k must be at least 3");
  if (!(support_radius > 0.0)) throw InvalidArgument("support_radius must be positive");
  if (!(overlap_inlier_distance > 0.0)) {
    throw InvalidArgument("overlap_inlier_distance must be positive");
  }
}

double compute_overlap(const FragmentPair& pair, double inlier_dist) {
  if (pair.source.empty() || pair.target.empty()) {
    throw InvalidArgument("compute_overlap: empty cloud");
  }
  std::vector<Vec3> aligned(pair.target.size());
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    aligned[i] = transform_point(pair.gt_pose, pair.target.points[i]);
  }
  const double r2 = inlier_dist * inlier_dist;
  auto fraction = [&](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    const KdTree tree(to);
    std::size_t hit = 0;
    for (const Vec3& p : from) {
      double d2 = 0.0;
      tree.nearest(p, &d2);
      if (d2 <= r2) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(from.size());
  };
  return 0.5 * (fraction(pair.source.points, aligned) + fraction(aligned, pair.source.points));
}

std::vector<Correspondence> match_keypoints(const std::vector<Descriptor>& a,
                                            const std::vector<Descriptor>& b, bool mutual,
                                            int threads) {
  if (a.empty() || b.empty()) throw InvalidArgument("match_keypoints: empty descriptor list");
  if (threads < 1) throw InvalidArgument("match_keypoints: threads must be >= 1");
  const std::size_t dim = a[0].values.size();
  for (const auto* list : {&a, &b}) {
    for (const Descriptor& d : *list) {
      if (d.values.size() != dim) throw InvalidArgument("match_keypoints: dimension mismatch");
    }
  }
  auto nn = [&](const std::vector<Descriptor>& from, const std::vector<Descriptor>& to) {
    std::vector<std::size_t> best(from.size(), 0);
    auto rows = [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        const double* x = from[i].values.data();
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < to.size(); ++j) {
          const double* y = to[j].values.data();
          double s = 0.0;
          for (std::size_t c = 0; c < dim; ++c) {
            const double d = x[c] - y[c];
            s += d * d;
          }
          if (s < best_d) {
            best_d = s;
            best[i] = j;
          }
        }
      }
    };
    const std::size_t block = 64;
    const std::size_t blocks = (from.size() + block - 1) / block;
    std::vector<std::thread> pool;
    const int workers = static_cast<int>(std::min<std::size_t>(threads, blocks));
    for (int t = 1; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t c = t; c < blocks; c += workers) {
          rows(c * block, std::min(from.size(), (c + 1) * block));
        }
      });
    }
    for (std::size_t c = 0; c < blocks; c += workers) {
      rows(c * block, std::min(from.size(), (c + 1) * block));
    }
    for (std::thread& th : pool) th.join();
    return best;
  };
  const std::vector<std::size_t> ab = nn(a, b);
  std::vector<std::size_t> ba;
  if (mutual) ba = nn(b, a);
  std::vector<Correspondence> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mutual && ba[ab[i]] != i) continue;
    out.push_back({i, ab[i]});
  }
  return out;
}

std::vector<double> tau2_sweep() {
  std::vector<double> t;
  for (int i = 1; i <= 20; ++i) t.push_back(i / 100.0);
  return t;
}

RecallResult registration_recall(const std::vector<PairDescriptors>& pairs,
                                 const EvalConfig& cfg, int threads) {
  cfg.validate();
  RecallResult result;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const PairDescriptors& pd = pairs[p];
    if (pd.source_keypoints.size() != pd.source_descriptors.size() ||
        pd.target_keypoints.size() != pd.target_descriptors.size()) {
      throw InvalidArgument("registration_recall: mismatched keypoint counts in pair " +
                            std::to_string(p));
    }
    PairResult r;
    r.pair = p;
    r.evaluated = pd.overlap >= cfg.min_overlap && !pd.source_descriptors.empty() &&
                  !pd.target_descriptors.empty();
    if (r.evaluated) {
      const std::vector<Correspondence> m =
          match_keypoints(pd.source_descriptors, pd.target_descriptors, cfg.mutual, threads);
      r.matches = m.size();
      for (const Correspondence& c : m) {
        const Vec3 t = transform_point(pd.gt_pose, pd.target_keypoints[c.target]);
        if ((pd.source_keypoints[c.source] - t).norm() < cfg.tau1) ++r.correct;
      }
      r.inlier_ratio = r.matches ? static_cast<double>(r.correct) / r.matches : 0.0;
      r.registered = r.inlier_ratio > cfg.tau2;
      ++result.evaluated;
      if (r.registered) ++result.registered;
    }
    result.pairs.push_back(r);
  }
  if (result.evaluated == 0) {
    throw InvalidArgument("registration_recall: no pair reaches the minimum overlap");
  }
  result.recall = static_cast<double>(result.registered) / result.evaluated;
  for (double t2 : tau2_sweep()) {
    std::size_t reg = 0;
    for (const PairResult& r : result.pairs) {
      if (r.evaluated && r.inlier_ratio > t2) ++reg;
    }
    result.curve.emplace_back(t2, static_cast<double>(reg) / result.evaluated);
  }
  return result;
}

std::vector<FragmentPair> make_rotated_benchmark(const std::vector<FragmentPair>& pairs,
                                                 Rng& rng) {
  return make_rotated_benchmark(pairs, [&rng] { return sample_uniform_rotation(rng); });
}

std::vector<FragmentPair> make_rotated_benchmark(const std::vector<FragmentPair>& pairs,
                                                 const RotationSampler& sample) {
  auto rotate = [](const PointCloud& c, const Mat3& r) {
    Vec3 centroid = Vec3::Zero();
    for (const Vec3& p : c.points) centroid += p;
    if (!c.empty()) centroid /= static_cast<double>(c.size());
    const Mat4 a = make_transform(r, centroid - r * centroid);
    PointCloud out;
    out.points.reserve(c.size());
    for (const Vec3& p : c.points) out.points.push_back(transform_point(a, p));
    for (const Vec3& n : c.normals) out.normals.push_back(r * n);
    if (c.sensor_origin) out.sensor_origin = transform_point(a, *c.sensor_origin);
    return std::make_pair(out, a);
  };
  std::vector<FragmentPair> out;
  out.reserve(pairs.size());
  for (const FragmentPair& p : pairs) {
    const Mat3 rs = sample().to_matrix();
    const Mat3 rt = sample().to_matrix();
    auto [src, as] = rotate(p.source, rs);
    auto [tgt, at] = rotate(p.target, rt);
    FragmentPair q;
    q.source = std::move(src);
    q.target = std::move(tgt);
    q.gt_pose = as * p.gt_pose * rigid_inverse(at);
    q.overlap = p.overlap;
    out.push_back(std::move(q));
  }
  return out;
}

double SmoothSurface::height(double x, double y) const {
  double z = curvature_x * x * x + curvature_y * y * y;
  for (const Bump& b : bumps) {
    const double dx = x - b.x;
    const double dy = y - b.y;
    z += b.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * b.width * b.width));
  }
  return z;
}

SmoothSurface SmoothSurface::random(Rng& rng, double extent, double bump_density) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double margin = 0.2;
  std::uniform_real_distribution<double> pos(-extent - margin, extent + margin);
  std::uniform_real_distribution<double> width(0.06, 0.14);
  SmoothSurface s;
  s.curvature_x = 0.3 * gauss(rng);
  s.curvature_y = 0.3 * gauss(rng);
  const double area = 4.0 * (extent + margin) * (extent + margin);
  const int count = std::max(1, static_cast<int>(std::lround(bump_density * area)));
  for (int i = 0; i < count; ++i) {
    Bump b;
    b.x = pos(rng);
    b.y = pos(rng);
    b.amplitude = 0.05 * gauss(rng);
    b.width = width(rng);
    s.bumps.push_back(b);
  }
  return s;
}

PointCloud sample_smooth_patch(Rng& rng, int count, double radius, double thickness) {
  if (count < 1 || !(radius > 0.0) || thickness < 0.0) {
    throw InvalidArgument("sample_smooth_patch: bad arguments");
  }
  const SmoothSurface s = SmoothSurface::random(rng, radius);
  const double z0 = s.height(0.0, 0.0);
  std::uniform_real_distribution<double> u(-radius, radius);
  std::normal_distribution<double> gauss(0.0, 1.0);
  PointCloud cloud;
  cloud.points.reserve(count);
  while (static_cast<int>(cloud.size()) < count) {
    const double x = u(rng);
    const double y = u(rng);
    if (x * x + y * y > radius * radius) continue;
    const double z = s.height(x, y) - z0 + thickness * gauss(rng);
    cloud.points.emplace_back(x, y, z);
  }
  return cloud;
}

void SceneSpec::validate() const {
  if (pairs < 1) throw InvalidArgument("pairs must be positive");
  if (points < 16) throw InvalidArgument("points must be at least 16");
  if (!(noise >= 0.0)) throw InvalidArgument("noise must be non-negative");
  if (!(overlap > 0.0 && overlap <= 1.0)) throw InvalidArgument("overlap must lie in (0, 1]");
  if (!(size > 0.0)) throw InvalidArgument("size must be positive");
  if (!(max_tilt >= 0.0 && max_tilt <= M_PI)) throw InvalidArgument("max_tilt must lie in [0, pi]");
}

std::vector<FragmentPair> generate_synthetic_scene(Rng& rng, const SceneSpec& spec) {
  spec.validate();
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double half = 0.5 * spec.size;
  const double shift = (1.0 - spec.overlap) * spec.size;
  std::vector<FragmentPair> pairs;
  for (int p = 0; p < spec.pairs; ++p) {
    // Surface centered between the two windows.
    const SmoothSurface surface = SmoothSurface::random(rng, half + 0.5 * shift);
    auto sample_window = [&](double cx) {
      PointCloud c;
      c.points.reserve(spec.points);
      for (int i = 0; i < spec.points; ++i) {
        const double x = cx + spec.size * (unit(rng) - 0.5);
        const double y = spec.size * (unit(rng) - 0.5);
        Vec3 q(x, y, surface.height(x, y));
        if (spec.noise > 0.0) q += spec.noise * Vec3(gauss(rng), gauss(rng), gauss(rng));
        c.points.push_back(q);
      }
      c.sensor_origin = Vec3(cx, 0.0, surface.height(cx, 0.0) + 1.5);
      return c;
    };
    const double sx = -0.5 * shift;
    const double tx = 0.5 * shift;
    FragmentPair pair;
    pair.source = sample_window(sx);
    const PointCloud target_world = sample_window(tx);

    Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
    axis.normalize();
    const double angle = spec.max_tilt * unit(rng);
    const Mat3 r = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
    const Vec3 t = Vec3(tx, 0.0, surface.height(tx, 0.0)) + 0.05 * Vec3(gauss(rng), gauss(rng), gauss(rng));
    pair.gt_pose = make_transform(r, t);
    const Mat4 inv = rigid_inverse(pair.gt_pose);
    for (const Vec3& q : target_world.points) pair.target.points.push_back(transform_point(inv, q));
    pair.target.sensor_origin = transform_point(inv, *target_world.sensor_origin);
    pair.overlap = compute_overlap(pair);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

void save_scene(const std::vector<FragmentPair>& pairs, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory '" + dir + "'");
  nlohmann::ordered_json index;
  index["format"] = "equidesc-scene-v1";
  index["pairs"] = nlohmann::ordered_json::array();
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "pair_%03zu", p);
    const std::string s = std::string(stem) + "_source.ply";
    const std::string t = std::string(stem) + "_target.ply";
    const std::string pose = std::string(stem) + ".pose";
    save_cloud(pairs[p].source, (fs::path(dir) / s).string());
    save_cloud(pairs[p].target, (fs::path(dir) / t).string());
    save_pose(pairs[p].gt_pose, (fs::path(dir) / pose).string());
    index["pairs"].push_back(
        {{"source", s}, {"target", t}, {"pose", pose}, {"overlap", pairs[p].overlap}});
  }
  WriteFile((fs::path(dir) / "scene.json").string(), index.dump(2) + "\n");
}

std::vector<FragmentPair> load_scene(const std::string& dir) {
  const std::string path = (fs::path(dir) / "scene.json").string();
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(ReadFile(path));
  } catch (const nlohmann::json::exception& e) {
    throw CloudFormatError(path + ": " + e.what());
  }
  if (index.value("format", "") != "equidesc-scene-v1" || !index.contains("pairs")) {
    throw CloudFormatError(path + ": not a scene index");
  }
  std::vector<FragmentPair> pairs;
  for (const auto& e : index["pairs"]) {
    FragmentPair p;
    try {
      p.source = load_cloud((fs::path(dir) / e.at("source").get<std::string>()).string());
      p.target = load_cloud((fs::path(dir) / e.at("target").get<std::string>()).string());
      p.gt_pose = load_pose((fs::path(dir) / e.at("pose").get<std::string>()).string());
      p.overlap = e.at("overlap").get<double>();
    } catch (const nlohmann::json::exception& ex) {
      throw CloudFormatError(path + ": " + ex.what());
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void save_descriptor_file(const DescriptorSet& set, const std::string& path) {
  if (set.keypoints.size() != set.descriptors.size()) {
    throw InvalidArgument("save_descriptor_file: mismatched keypoint counts");
  }
  const std::size_t dim = set.descriptors.empty() ? 0 : set.descriptors[0].values.size();
  nlohmann::ordered_json head;
  head["format"] = "equidesc-desc-v1";
  head["count"] = set.descriptors.size();
  head["dim"] = dim;
  head["mode"] = set.mode;
  head["bandwidth"] = set.bandwidth;
  head["channels"] = set.channels;
  head["keypoints"] = nlohmann::ordered_json::array();
  for (const Vec3& k : set.keypoints) head["keypoints"].push_back({k.x(), k.y(), k.z()});
  head["skipped"] = set.skipped;
  std::string out = head.dump() + "\n";
  out.reserve(out.size() + 4 * dim * set.descriptors.size());
  for (const Descriptor& d : set.descriptors) {
    if (d.values.size() != dim) throw InvalidArgument("save_descriptor_file: dimension mismatch");
    for (double v : d.values) {
      const float f = static_cast<float>(v);
      std::uint32_t u;
      std::memcpy(&u, &f, sizeof(float));
      const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                         static_cast<char>((u >> 16) & 0xff), static_cast<char>(u >> 24)};
      out.append(b, 4);
    }
  }
  WriteFile(path, out);
}

DescriptorSet load_descriptor_file(const std::string& path) {
  const std::string bytes = ReadFile(path);
  const std::size_t eol = bytes.find('\n');
  if (eol == std::string::npos) throw DescriptorFileError(path + ": missing manifest line");
  DescriptorSet set;
  std::size_t count = 0, dim = 0;
  try {
    const nlohmann::json head = nlohmann::json::parse(bytes.substr(0, eol));
    if (head.at("format").get<std::string>() != "equidesc-desc-v1") {
      throw DescriptorFileError(path + ": unknown format");
    }
    count = head.at("count").get<std::size_t>();
    dim = head.at("dim").get<std::size_t>();
    set.mode = head.at("mode").get<std::string>();
    set.bandwidth = head.at("bandwidth").get<int>();
    set.channels = head.at("channels").get<int>();
    for (const auto& k : head.at("keypoints")) {
      set.keypoints.emplace_back(k.at(0).get<double>(), k.at(1).get<double>(), k.at(2).get<double>());
    }
    set.skipped = head.at("skipped").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DescriptorFileError(path + ": bad manifest: " + e.what());
  }
  if (set.keypoints.size() != count) {
    throw DescriptorFileError(path + ": mismatched keypoint counts (" +
                              std::to_string(set.keypoints.size()) + " keypoints, count " +
                              std::to_string(count) + ")");
  }
  const std::size_t payload = bytes.size() - eol - 1;
  if (payload != 4 * count * dim) {
    throw DescriptorFileError(path + ": mismatched keypoint counts (payload of " +
                              std::to_string(payload) + " bytes for " + std::to_string(count) +
                              " rows of " + std::to_string(dim) + ")");
  }
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data() + eol + 1);
  for (std::size_t r = 0; r < count; ++r) {
    Descriptor d;
    d.bandwidth = set.bandwidth;
    d.channels = set.channels;
    d.values.resize(dim);
    for (std::size_t c = 0; c < dim; ++c, p += 4) {
      const std::uint32_t u = static_cast<std::uint32_t>(p[0]) |
                              (static_cast<std::uint32_t>(p[1]) << 8) |
                              (static_cast<std::uint32_t>(p[2]) << 16) |
                              (static_cast<std::uint32_t>(p[3]) << 24);
      float f;
      std::memcpy(&f, &u, sizeof(float));
      d.values[c] = f;
    }
    set.descriptors.push_back(std::move(d));
  }
  return set;
}

PointCloud preprocess(const PointCloud& cloud, const EvalConfig& cfg) {
  const PointCloud down = voxel_downsample(cloud, cfg.voxel);
  if (down.size() < static_cast<std::size_t>(cfg.normal_k)) return down;
  return estimate_normals(down, cfg.normal_k, cloud.sensor_origin);
}

DescriptorSet describe_keypoints(const PointCloud& cloud, const std::vector<Vec3>& keypoints,
                                 const ModelWeights& w, OrientMode mode, int threads) {
  DescriptorSet set;
  set.mode = to_string(mode);
  set.bandwidth = w.config.encoder.final_bandwidth();
  set.channels = 1;
  const std::vector<std::optional<Descriptor>> d =
      invariant_descriptors(cloud, keypoints, w, mode, {}, threads);
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    if (!d[i]) {
      set.skipped.push_back(i);
      continue;
    }
    set.keypoints.push_back(keypoints[i]);
    set.descriptors.push_back(*d[i]);
  }
  return set;
}

DescriptorSet oracle_descriptor_set(const std::vector<Vec3>& keypoints, const Mat4& to_common,
                                    double quantum) {
  if (!(quantum > 0.0)) throw InvalidArgument("oracle_descriptor_set: quantum must be positive");
  DescriptorSet set;
  set.mode = "oracle";
  set.keypoints = keypoints;
  for (const Vec3& k : keypoints) {
    const Vec3 c = transform_point(to_common, k);
    Descriptor d;
    d.values = {quantum * std::round(c.x() / quantum), quantum * std::round(c.y() / quantum),
                quantum * std::round(c.z() / quantum)};
    set.descriptors.push_back(std::move(d));
  }
  return set;
}

DescriptorSet random_descriptor_set(const std::vector<Vec3>& keypoints, int dim, Rng& rng) {
  if (dim < 1) throw InvalidArgument("random_descriptor_set: dim must be positive");
  std::normal_distribution<double> gauss(0.0, 1.0);
  DescriptorSet set;
  set.mode = "random";
  set.keypoints = keypoints;
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    Descriptor d;
    d.values.resize(dim);
    for (double& v : d.values) v = gauss(rng);
    set.descriptors.push_back(std::move(d));
  }
  return set;
}

PairDescriptors make_pair_descriptors(const DescriptorSet& source, const DescriptorSet& target,
                                      const FragmentPair& pair) {
  PairDescriptors p;
  p.source_keypoints = source.keypoints;
  p.source_descriptors = source.descriptors;
  p.target_keypoints = target.keypoints;
  p.target_descriptors = target.descriptors;
  p.gt_pose = pair.gt_pose;
  p.overlap = pair.overlap;
  return p;
}

std::vector<Patch> extract_training_patches(const std::vector<FragmentPair>& pairs,
                                            std::size_t count, const EvalConfig& cfg, Rng& rng) {
  std::vector<PointCloud> clouds;
  for (const FragmentPair& p : pairs) {
    clouds.push_back(preprocess(p.source, cfg));
    clouds.push_back(preprocess(p.target, cfg));
  }
  if (clouds.empty()) throw InvalidArgument("extract_training_patches: no fragments");
  std::vector<Patch> out;
  std::size_t attempts = 0;
  const std::size_t budget = 20 * count + 100;
  while (out.size() < count) {
    if (++attempts > budget) throw InvalidArgument("extract_training_patches: clouds too sparse");
    const PointCloud& c = clouds[out.size() % clouds.size()];
    if (c.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
    Patch patch = extract_patch(c, c.points[pick(rng)], cfg.support_radius);
    if (patch.points.size() < kMinSupportPoints) continue;
    out.push_back(std::move(patch));
  }
  return out;
}

}  // namespace equidesc
