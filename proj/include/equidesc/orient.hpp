#pragma once

#include <optional>
#include <string>
#include <vector>

#include "equidesc/core.hpp"
#include "equidesc/harmonic.hpp"
#include "equidesc/network.hpp"

namespace equidesc {

/// Rows are the frame axes x, y, z in world coordinates, so rotation * v
/// expresses a world vector in the frame.
struct LocalFrame {
  Mat3 rotation = Mat3::Identity();
};

struct OrientConfig {
  int top_k = 32;

  /// Throws InvalidArgument unless 1 <= top_k <= total_bins.
  void validate(std::size_t total_bins) const;
};

/// Self-orientation of a single-channel descriptor: among the top-k bins,
/// pick the one whose 3x3x3 neighborhood (periodic in alpha and gamma,
/// clamped in beta) holds the most top-k bins, preferring the neighborhood
/// with the largest value, then the largest summed value, then the lowest
/// flat index, and return the
/// chordal mean of the top-k bin rotations in that neighborhood.
/// Throws InvalidArgument("degenerate feature map") for a constant map.
RotationZYZ self_orient(const Descriptor& d, const OrientConfig& cfg = {});

/// Rotation of an SO(3) grid bin.
RotationZYZ bin_rotation(int bandwidth, int j, int k, int l);

/// Chordal mean: projection of the summed matrices onto SO(3).
Mat3 chordal_mean(const std::vector<Mat3>& rotations);

/// L_{r^-1} d. Pure alpha shifts by whole grid cells are applied as exact
/// bin permutations; other rotations use the Wigner-D (spectral) method.
Descriptor canonicalize(const Descriptor& d, const RotationZYZ& r);

/// FLARE-style frame: z is the plane-fit normal of the points within
/// 0.3 * radius, oriented toward the sensor when known and otherwise toward
/// the support centroid; x points to the annulus point [0.85 r, r] highest
/// along z, projected onto the tangent plane; y = z x x.
/// Throws InvalidArgument for fewer than 6 support points, an ambiguous
/// normal (smallest eigenvalue ratio > 0.99) or an ambiguous tangent.
LocalFrame compute_lrf(const PointCloud& cloud, const Vec3& center, double radius);

/// Canonicalizing rotation of a frame. For views related by Q the frames
/// are F and F Q^T, and F^T is the rotation that undoes Q on descriptors.
RotationZYZ frame_rotation(const LocalFrame& frame);

enum class OrientMode {
  kNone,  // raw equivariant descriptor
  kSelf,  // self-orientation on the final feature map
  kLrf,   // external local reference frame
};

/// "raw", "self" or "lrf".
std::string to_string(OrientMode mode);
/// Accepts "raw" (or "none"), "self", "lrf"; throws InvalidArgument otherwise.
OrientMode parse_orient_mode(const std::string& name);

/// Keypoints with fewer support points than this get no descriptor.
inline constexpr std::size_t kMinSupportPoints = 6;

/// Signal -> encoder -> canonicalization for one keypoint. Throws
/// InvalidArgument("insufficient support") below kMinSupportPoints.
Descriptor invariant_descriptor(const PointCloud& cloud, const Vec3& center,
                                const ModelWeights& w, OrientMode mode,
                                const OrientConfig& cfg = {});

/// Batched version over many keypoints. Keypoints are processed in fixed
/// chunks of `chunk` so results do not depend on `threads`. Keypoints whose
/// support is insufficient or whose orientation fails (degenerate map,
/// ambiguous frame) come back empty.
std::vector<std::optional<Descriptor>> invariant_descriptors(
    const PointCloud& cloud, const std::vector<Vec3>& centers, const ModelWeights& w,
    OrientMode mode, const OrientConfig& cfg = {}, int threads = 1, int chunk = 16);

/// Euclidean distance of the flattened values; throws on length mismatch.
double descriptor_distance(const Descriptor& a, const Descriptor& b);

}  // namespace equidesc
