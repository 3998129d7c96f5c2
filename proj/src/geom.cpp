#include "rfx/geom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>

namespace rfx::geom {

void FeaturizedPointCloud::check() const {
  const size_t n = coords.size();
  if (valid.size() != n) throw std::invalid_argument("point cloud: valid/coords length mismatch");
  if (dim < 0 || feats.size() != n * size_t(dim))
    throw std::invalid_argument("point cloud: feats size does not match N x dim");
}

bool pose_is_rigid(const Pose& pose, double tol) {
  // R^T R = I and det(R) = +1, bottom row (0,0,0,1).
  const double* m = pose.data();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0;
      for (int k = 0; k < 3; ++k) dot += m[k * 4 + i] * m[k * 4 + j];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > tol) return false;
    }
  }
  const double det = m[0] * (m[5] * m[10] - m[6] * m[9]) - m[1] * (m[4] * m[10] - m[6] * m[8]) +
                     m[2] * (m[4] * m[9] - m[5] * m[8]);
  if (std::abs(det - 1.0) > tol) return false;
  if (std::abs(m[12]) > tol || std::abs(m[13]) > tol || std::abs(m[14]) > tol ||
      std::abs(m[15] - 1.0) > tol)
    return false;
  return true;
}

Point3 apply_pose(const Pose& pose, const Point3& p) {
  const double* m = pose.data();
  return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
          m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
          m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
}

std::vector<Point3> unproject(const std::vector<double>& depth, int height, int width,
                              const CameraIntrinsics& intr, const Pose& pose) {
  if (int(depth.size()) != height * width)
    throw std::invalid_argument("unproject: depth size != H*W");
  if (!pose_is_rigid(pose)) throw std::invalid_argument("unproject: pose is not rigid");
  std::vector<Point3> out;
  out.reserve(depth.size());
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      const double z = depth[size_t(v) * width + u];
      if (std::isnan(z) || z <= 0) continue;
      const Point3 cam{(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z};
      out.push_back(apply_pose(pose, cam));
    }
  }
  return out;
}

std::array<double, 3> project(const Point3& world, const CameraIntrinsics& intr,
                              const Pose& pose) {
  // Invert the rigid transform: p_cam = R^T (p_world - t).
  const double* m = pose.data();
  const double dx = world.x - m[3], dy = world.y - m[7], dz = world.z - m[11];
  const Point3 cam{m[0] * dx + m[4] * dy + m[8] * dz, m[1] * dx + m[5] * dy + m[9] * dz,
                   m[2] * dx + m[6] * dy + m[10] * dz};
  return {cam.x * intr.fx / cam.z + intr.cx, cam.y * intr.fy / cam.z + intr.cy, cam.z};
}

namespace {

struct VoxelKey {
  int64_t x, y, z;
  bool operator==(const VoxelKey& o) const { return x == o.x && y == o.y && z == o.z; }
};

struct VoxelKeyHash {
  size_t operator()(const VoxelKey& k) const {
    uint64_t h = uint64_t(k.x) * 0x9e3779b97f4a7c15ULL;
    h ^= uint64_t(k.y) * 0xc2b2ae3d27d4eb4fULL;
    h ^= uint64_t(k.z) * 0x165667b19e3779f9ULL;
    return size_t(h ^ (h >> 29));
  }
};

}  // namespace

VoxelizeResult voxelize(const std::vector<Point3>& points, const std::vector<double>& feats,
                        int dim, const std::vector<uint8_t>& valid, const VoxelGridSpec& spec) {
  const size_t n = points.size();
  if (feats.size() != n * size_t(dim)) throw std::invalid_argument("voxelize: feats row count");
  if (valid.size() != n) throw std::invalid_argument("voxelize: valid length");
  if (!(spec.voxel_size > 0)) throw std::invalid_argument("voxelize: voxel_size must be > 0");
  const double vs = spec.voxel_size;

  std::unordered_map<VoxelKey, int, VoxelKeyHash> slot;
  std::vector<VoxelKey> keys;
  std::vector<std::vector<int>> members;
  std::vector<int> first_seen;  // stable output order: first point landing in the voxel
  for (size_t i = 0; i < n; ++i) {
    const VoxelKey key{int64_t(std::floor((points[i].x - spec.origin.x) / vs)),
                       int64_t(std::floor((points[i].y - spec.origin.y) / vs)),
                       int64_t(std::floor((points[i].z - spec.origin.z) / vs))};
    auto [it, inserted] = slot.try_emplace(key, int(keys.size()));
    if (inserted) {
      keys.push_back(key);
      members.emplace_back();
      first_seen.push_back(int(i));
    }
    members[it->second].push_back(int(i));
  }

  VoxelizeResult res;
  const int m = int(keys.size());
  res.cloud.dim = dim;
  res.cloud.coords.resize(m);
  res.cloud.feats.assign(size_t(m) * dim, 0.0);
  res.cloud.valid.assign(m, 0);
  res.contributors.resize(m);

  for (int o = 0; o < m; ++o) {
    const Point3 center{spec.origin.x + (keys[o].x + 0.5) * vs,
                        spec.origin.y + (keys[o].y + 0.5) * vs,
                        spec.origin.z + (keys[o].z + 0.5) * vs};
    res.cloud.coords[o] = center;
    double wsum = 0;
    auto& contrib = res.contributors[o];
    for (int i : members[o]) {
      const double w = std::max(0.0, 1.0 - std::abs(points[i].x - center.x) / vs) *
                       std::max(0.0, 1.0 - std::abs(points[i].y - center.y) / vs) *
                       std::max(0.0, 1.0 - std::abs(points[i].z - center.z) / vs);
      contrib.emplace_back(i, w);
      wsum += w;
      if (valid[i]) res.cloud.valid[o] = 1;
    }
    double* out = res.cloud.feat_row(o);
    if (wsum > 0) {
      for (auto& [i, w] : contrib)
        for (int c = 0; c < dim; ++c) out[c] += w * feats[size_t(i) * dim + c];
      for (int c = 0; c < dim; ++c) out[c] /= wsum;
    } else {
      for (auto& [i, w] : contrib)
        for (int c = 0; c < dim; ++c) out[c] += feats[size_t(i) * dim + c];
      for (int c = 0; c < dim; ++c) out[c] /= double(members[o].size());
    }
  }
  (void)first_seen;
  return res;
}

void harmonic_encode(double v, int octaves, double* out) {
  if (octaves < 1) throw std::invalid_argument("harmonic_encode: octaves must be >= 1");
  v = std::clamp(v, 0.0, 1.0);
  double freq = 3.141592653589793 * v;
  for (int k = 0; k < octaves; ++k) {
    out[2 * k] = std::sin(freq);
    out[2 * k + 1] = std::cos(freq);
    freq *= 2.0;
  }
}

std::vector<double> harmonic_encode(double v, int octaves) {
  std::vector<double> out(size_t(octaves) * 2);
  harmonic_encode(v, octaves, out.data());
  return out;
}

namespace {

double overlap_len(double lo1, double hi1, double lo2, double hi2) {
  return std::max(0.0, std::min(hi1, hi2) - std::max(lo1, lo2));
}

double intersection_volume(const Box3& a, const Box3& b) {
  double vol = 1;
  for (int ax = 0; ax < 3; ++ax) vol *= overlap_len(a.lo(ax), a.hi(ax), b.lo(ax), b.hi(ax));
  return vol;
}

}  // namespace

double iou3(const Box3& a, const Box3& b) {
  const double inter = intersection_volume(a, b);
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double giou3(const Box3& a, const Box3& b) {
  const double inter = intersection_volume(a, b);
  const double uni = a.volume() + b.volume() - inter;
  double hull = 1;
  for (int ax = 0; ax < 3; ++ax)
    hull *= std::max(a.hi(ax), b.hi(ax)) - std::min(a.lo(ax), b.lo(ax));
  const double iou = uni > 0 ? inter / uni : 0.0;
  return hull > 0 ? iou - (hull - uni) / hull : iou;
}

std::optional<Box3> box_from_mask(const FeaturizedPointCloud& pc,
                                  const std::vector<double>& mask, double threshold) {
  if (mask.size() != pc.coords.size())
    throw std::invalid_argument("box_from_mask: mask length != point count");
  constexpr double kMinExtent = 1e-6;
  Point3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
            std::numeric_limits<double>::infinity()};
  Point3 hi{-lo.x, -lo.y, -lo.z};
  bool any = false;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] < threshold) continue;
    any = true;
    const Point3& p = pc.coords[i];
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  if (!any) return std::nullopt;
  Box3 box;
  box.center = {0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y), 0.5 * (lo.z + hi.z)};
  box.size = {std::max(hi.x - lo.x, kMinExtent), std::max(hi.y - lo.y, kMinExtent),
              std::max(hi.z - lo.z, kMinExtent)};
  return box;
}

namespace {

// Spread the low 21 bits of x so each lands 3 positions apart.
uint64_t spread3(uint64_t x) {
  x &= 0x1fffff;
  x = (x | x << 32) & 0x001f00000000ffff;
  x = (x | x << 16) & 0x001f0000ff0000ff;
  x = (x | x << 8) & 0x100f00f00f00f00f;
  x = (x | x << 4) & 0x10c30c30c30c30c3;
  x = (x | x << 2) & 0x1249249249249249;
  return x;
}

uint32_t compact3(uint64_t x) {
  x &= 0x1249249249249249;
  x = (x ^ (x >> 2)) & 0x10c30c30c30c30c3;
  x = (x ^ (x >> 4)) & 0x100f00f00f00f00f;
  x = (x ^ (x >> 8)) & 0x001f0000ff0000ff;
  x = (x ^ (x >> 16)) & 0x001f00000000ffff;
  x = (x ^ (x >> 32)) & 0x1fffff;
  return uint32_t(x);
}

}  // namespace

uint64_t morton_encode(uint32_t ix, uint32_t iy, uint32_t iz, int bits) {
  if (bits < 1 || bits > kMortonMaxBits) throw std::invalid_argument("morton: bits out of range");
  const uint32_t limit = uint32_t(1) << bits;
  if (ix >= limit || iy >= limit || iz >= limit)
    throw std::invalid_argument("morton: coordinate out of range for bits");
  return spread3(ix) | (spread3(iy) << 1) | (spread3(iz) << 2);
}

std::array<uint32_t, 3> morton_decode(uint64_t code) {
  return {compact3(code), compact3(code >> 1), compact3(code >> 2)};
}

std::vector<int> serialize_order(const FeaturizedPointCloud& pc, const VoxelGridSpec& spec,
                                 Curve curve, int bits) {
  (void)curve;  // Morton is the only curve
  const int n = pc.size();
  const double vs = spec.voxel_size;
  const uint32_t limit = uint32_t(1) << bits;
  std::vector<uint64_t> codes(n);
  for (int i = 0; i < n; ++i) {
    const Point3& p = pc.coords[i];
    const double qx = std::floor((p.x - spec.origin.x) / vs);
    const double qy = std::floor((p.y - spec.origin.y) / vs);
    const double qz = std::floor((p.z - spec.origin.z) / vs);
    if (qx < 0 || qy < 0 || qz < 0 || qx >= limit || qy >= limit || qz >= limit)
      throw std::invalid_argument("serialize_order: point quantizes outside grid range");
    codes[i] = morton_encode(uint32_t(qx), uint32_t(qy), uint32_t(qz), bits);
  }
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return codes[a] < codes[b]; });
  return order;
}

std::vector<std::vector<int>> group(const std::vector<int>& order, int group_size) {
  if (group_size < 1) throw std::invalid_argument("group: group_size must be >= 1");
  std::vector<std::vector<int>> groups;
  for (size_t start = 0; start < order.size(); start += group_size) {
    const size_t end = std::min(order.size(), start + group_size);
    groups.emplace_back(order.begin() + start, order.begin() + end);
  }
  return groups;
}

}  // namespace rfx::geom
