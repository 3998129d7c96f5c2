#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace rfx::geom {

struct Point3 {
  double x = 0, y = 0, z = 0;
  double operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
};

// Axis-aligned box, center + positive per-axis extents (meters).
struct Box3 {
  Point3 center;
  Point3 size;
  double lo(int axis) const { return center[axis] - 0.5 * size[axis]; }
  double hi(int axis) const { return center[axis] + 0.5 * size[axis]; }
  double volume() const { return size.x * size.y * size.z; }
};

struct VoxelGridSpec {
  double voxel_size = 0.05;
  Point3 origin;
};

// Point cloud with per-point feature rows. valid[i] == 0 marks a point that
// carries no lifted semantic feature.
struct FeaturizedPointCloud {
  std::vector<Point3> coords;
  std::vector<double> feats;  // N x dim, row-major
  std::vector<uint8_t> valid;
  int dim = 0;

  int size() const { return int(coords.size()); }
  const double* feat_row(int i) const { return feats.data() + size_t(i) * dim; }
  double* feat_row(int i) { return feats.data() + size_t(i) * dim; }
  void check() const;  // throws if field lengths disagree
};

struct CameraIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
};

// Row-major 4x4 rigid transform.
using Pose = std::array<double, 16>;

inline Pose identity_pose() {
  return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
}

bool pose_is_rigid(const Pose& pose, double tol = 1e-9);
Point3 apply_pose(const Pose& pose, const Point3& p);

// One world-frame point per pixel with depth > 0; NaN depth pixels skipped.
// Throws if the pose is not rigid.
std::vector<Point3> unproject(const std::vector<double>& depth, int height, int width,
                              const CameraIntrinsics& intr, const Pose& pose);

// Inverse of unproject for a single point: world -> (u, v, z) in the camera.
std::array<double, 3> project(const Point3& world, const CameraIntrinsics& intr,
                              const Pose& pose);

struct VoxelizeResult {
  FeaturizedPointCloud cloud;  // one point per occupied voxel, at the voxel center
  // Per output point: contributing input indices and their trilinear weights.
  std::vector<std::vector<std::pair<int, double>>> contributors;
};

// Trilinear-weighted feature averaging into a voxel grid. Weight of a point is
// the product over axes of max(0, 1 - |p - c| / voxel_size) with c the center
// of its voxel; a voxel whose weights all vanish falls back to the plain mean.
VoxelizeResult voxelize(const std::vector<Point3>& points, const std::vector<double>& feats,
                        int dim, const std::vector<uint8_t>& valid, const VoxelGridSpec& spec);

// [sin(2^k pi v), cos(2^k pi v)] for k = 0..octaves-1; v clamped to [0,1].
std::vector<double> harmonic_encode(double v, int octaves);
void harmonic_encode(double v, int octaves, double* out);

double iou3(const Box3& a, const Box3& b);

// IoU minus (enclosing - union) / enclosing, in (-1, 1].
double giou3(const Box3& a, const Box3& b);

// Axis-aligned bounds of points with mask >= threshold; empty selection gives
// nullopt (no detection). Extents are floored to keep Box3 valid.
std::optional<Box3> box_from_mask(const FeaturizedPointCloud& pc,
                                  const std::vector<double>& mask, double threshold);

constexpr int kMortonMaxBits = 21;

// Bit interleave with x in the least-significant slot of each triple.
uint64_t morton_encode(uint32_t ix, uint32_t iy, uint32_t iz, int bits);
std::array<uint32_t, 3> morton_decode(uint64_t code);

enum class Curve { Morton };

// Permutation of 0..N-1 sorted by curve code of quantized coordinates,
// ties broken by original index. Throws if a point quantizes out of range.
std::vector<int> serialize_order(const FeaturizedPointCloud& pc, const VoxelGridSpec& spec,
                                 Curve curve = Curve::Morton, int bits = 16);

// Contiguous slices of `order`, all of size g except possibly the last.
std::vector<std::vector<int>> group(const std::vector<int>& order, int group_size);

}  // namespace rfx::geom
