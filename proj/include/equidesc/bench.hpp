#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "equidesc/core.hpp"
#include "equidesc/network.hpp"
#include "equidesc/orient.hpp"
#include "equidesc/train.hpp"

namespace equidesc {

/// A cloud file could not be parsed. The message carries the header line or
/// byte offset where parsing stopped.
class CloudFormatError : public Error {
 public:
  using Error::Error;
};

enum class PlyEncoding { kAscii, kBinaryLittleEndian };

/// Reads PLY (ascii or binary little-endian; float x, y, z and optional
/// nx, ny, nz) or whitespace-separated XYZ text (".xyz", ".txt"). A
/// "comment sensor_origin x y z" header line restores the sensor origin.
PointCloud load_cloud(const std::string& path);

/// Writes PLY for ".ply" and XYZ text for ".xyz"/".txt". Coordinates are
/// stored as float32.
void save_cloud(const PointCloud& cloud, const std::string& path,
                PlyEncoding encoding = PlyEncoding::kBinaryLittleEndian);

/// Four lines of four numbers, row-major, meters.
Mat4 load_pose(const std::string& path);
void save_pose(const Mat4& pose, const std::string& path);

/// Static 3-d tree over a point set (the points are copied).
class KdTree {
 public:
  explicit KdTree(const std::vector<Vec3>& points);

  std::size_t size() const { return points_.size(); }

  /// Index of the closest point; ties go to the lowest index. Throws on an
  /// empty tree.
  std::size_t nearest(const Vec3& q, double* squared_distance = nullptr) const;

  /// The k closest points sorted by (distance, index).
  std::vector<std::size_t> knn(const Vec3& q, std::size_t k) const;

  /// All points within the closed ball, in increasing index order.
  std::vector<std::size_t> radius_search(const Vec3& q, double radius) const;

 private:
  struct Node {
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    int axis = -1;  // -1 for leaves
    double split = 0.0;
    std::int32_t left = -1;
    std::int32_t right = -1;
  };
  std::int32_t build(std::uint32_t begin, std::uint32_t end);

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

/// One centroid per occupied voxel (index floor(coord / voxel)), sorted by
/// voxel index. Normals, when present, are averaged and renormalized.
PointCloud voxel_downsample(const PointCloud& cloud, double voxel);

/// Plane-fit normals over the k nearest neighbors (the point included).
/// Normals face the viewpoint when given, else away from the cloud centroid.
PointCloud estimate_normals(const PointCloud& cloud, int k,
                            const std::optional<Vec3>& viewpoint = std::nullopt);

/// n distinct indices drawn uniformly, in draw order.
std::vector<std::size_t> sample_keypoints(const PointCloud& cloud, std::size_t n, Rng& rng);

/// gt_pose maps target coordinates into the source frame.
struct FragmentPair {
  PointCloud source;
  PointCloud target;
  Mat4 gt_pose = Mat4::Identity();
  double overlap = 0.0;
};

struct EvalConfig {
  double tau1 = 0.10;        // meters
  double tau2 = 0.05;        // inlier ratio
  double min_overlap = 0.30;
  int n_keypoints = 5000;
  double voxel = 0.02;       // meters
  int normal_k = 17;
  double support_radius = 0.30;
  double overlap_inlier_distance = 0.05;
  bool mutual = false;

  void validate() const;
};

/// Mean over both directions of the fraction of points whose nearest
/// neighbor in the other (gt-aligned) fragment lies within inlier_dist.
double compute_overlap(const FragmentPair& pair, double inlier_dist = 0.05);

struct Correspondence {
  std::size_t source = 0;
  std::size_t target = 0;
};

/// Nearest neighbor in b for each descriptor of a; ties go to the lowest
/// index. With `mutual`, only reciprocal pairs are kept.
std::vector<Correspondence> match_keypoints(const std::vector<Descriptor>& a,
                                            const std::vector<Descriptor>& b,
                                            bool mutual = false, int threads = 1);

/// Keypoints and their descriptors for both fragments of a pair.
struct PairDescriptors {
  std::vector<Vec3> source_keypoints;
  std::vector<Vec3> target_keypoints;
  std::vector<Descriptor> source_descriptors;
  std::vector<Descriptor> target_descriptors;
  Mat4 gt_pose = Mat4::Identity();
  double overlap = 0.0;
};

struct PairResult {
  std::size_t pair = 0;
  bool evaluated = false;
  std::size_t matches = 0;
  std::size_t correct = 0;
  double inlier_ratio = 0.0;
  bool registered = false;
};

struct RecallResult {
  double recall = 0.0;
  std::size_t evaluated = 0;
  std::size_t registered = 0;
  std::vector<PairResult> pairs;
  std::vector<std::pair<double, double>> curve;  // (tau2, recall)
};

/// The tau2 values of the recall curve: 0.01, 0.02, ..., 0.20.
std::vector<double> tau2_sweep();

/// Registration recall over pairs with overlap >= min_overlap. A match is
/// correct when the gt-aligned keypoints are closer than tau1; a pair is
/// registered when its correct fraction exceeds tau2. Throws
/// InvalidArgument when no pair qualifies.
RecallResult registration_recall(const std::vector<PairDescriptors>& pairs,
                                 const EvalConfig& cfg, int threads = 1);

using RotationSampler = std::function<RotationZYZ()>;

/// Rotates each fragment about its centroid by an independent draw and
/// updates gt_pose (and sensor origins) to keep the pair consistent.
std::vector<FragmentPair> make_rotated_benchmark(const std::vector<FragmentPair>& pairs,
                                                 Rng& rng);
std::vector<FragmentPair> make_rotated_benchmark(const std::vector<FragmentPair>& pairs,
                                                 const RotationSampler& sample);

/// Height field: a quadratic base plus a sum of Gaussian bumps.
struct SmoothSurface {
  struct Bump {
    double x = 0.0;
    double y = 0.0;
    double amplitude = 0.0;
    double width = 0.0;
  };
  double curvature_x = 0.0;
  double curvature_y = 0.0;
  std::vector<Bump> bumps;

  double height(double x, double y) const;

  /// Random surface over [-extent, extent]^2 with about `bump_density`
  /// bumps per square meter.
  static SmoothSurface random(Rng& rng, double extent, double bump_density = 12.0);
};

/// `count` points of a random smooth surface within `radius` of the origin
/// in the xy plane, shifted so the surface passes through the origin, with
/// Gaussian offsets of standard deviation `thickness` along z.
PointCloud sample_smooth_patch(Rng& rng, int count, double radius, double thickness);

struct SceneSpec {
  int pairs = 4;
  int points = 8000;      // per fragment
  double noise = 0.002;   // meters
  double overlap = 0.6;   // target fraction
  double size = 1.2;      // fragment side length in meters
  double max_tilt = 0.3;  // radians, target pose rotation

  void validate() const;
};

/// Pairs of partially overlapping fragments cut from smooth surfaces. The
/// source is in the surface frame; the target is expressed in its own frame
/// related by a random rigid transform. Both record the sensor origin.
std::vector<FragmentPair> generate_synthetic_scene(Rng& rng, const SceneSpec& spec);

/// pair_NNN_source.ply, pair_NNN_target.ply and pair_NNN.pose, plus
/// scene.json listing the files and overlaps.
void save_scene(const std::vector<FragmentPair>& pairs, const std::string& dir);
std::vector<FragmentPair> load_scene(const std::string& dir);

class DescriptorFileError : public Error {
 public:
  using Error::Error;
};

/// Descriptors of one cloud's keypoints. `skipped` lists the positions, in
/// the requested keypoint list, of keypoints that got no descriptor.
struct DescriptorSet {
  std::string mode;
  int bandwidth = 0;
  int channels = 1;
  std::vector<Vec3> keypoints;
  std::vector<Descriptor> descriptors;
  std::vector<std::size_t> skipped;
};

/// One JSON line (format, count, dim, mode, bandwidth, channels, keypoints,
/// skipped) followed by count x dim little-endian float32 values.
void save_descriptor_file(const DescriptorSet& set, const std::string& path);
/// Throws DescriptorFileError("mismatched keypoint counts") when the
/// keypoint list and the descriptor rows disagree.
DescriptorSet load_descriptor_file(const std::string& path);

/// Voxel filter then normals, with the sensor origin as viewpoint when known.
PointCloud preprocess(const PointCloud& cloud, const EvalConfig& cfg);

/// Descriptors for the given keypoints of a (preprocessed) cloud. Keypoints
/// without a descriptor are listed in `skipped`.
DescriptorSet describe_keypoints(const PointCloud& cloud, const std::vector<Vec3>& keypoints,
                                 const ModelWeights& w, OrientMode mode, int threads = 1);

/// Reference descriptors: keypoint coordinates mapped by `to_common` into a
/// frame shared by both fragments and rounded to multiples of `quantum`.
DescriptorSet oracle_descriptor_set(const std::vector<Vec3>& keypoints, const Mat4& to_common,
                                    double quantum = 0.01);
/// Independent standard normal descriptors of length `dim`.
DescriptorSet random_descriptor_set(const std::vector<Vec3>& keypoints, int dim, Rng& rng);

PairDescriptors make_pair_descriptors(const DescriptorSet& source, const DescriptorSet& target,
                                      const FragmentPair& pair);

/// Keypoints drawn uniformly from each preprocessed fragment in turn, with
/// the patch around each; fragments with fewer than 6 support points at a
/// drawn keypoint are redrawn up to a fixed budget.
std::vector<Patch> extract_training_patches(const std::vector<FragmentPair>& pairs,
                                            std::size_t count, const EvalConfig& cfg, Rng& rng);

}  // namespace equidesc
