#include "rfx/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rfx::masking {

std::vector<int> MaskSpec::unmasked() const {
  std::vector<int> out;
  out.reserve(total_n - masked.size());
  size_t j = 0;
  for (int i = 0; i < total_n; ++i) {
    if (j < masked.size() && masked[j] == i)
      ++j;
    else
      out.push_back(i);
  }
  return out;
}

std::vector<uint8_t> MaskSpec::bitmap() const {
  std::vector<uint8_t> bits(total_n, 0);
  for (int i : masked) bits[i] = 1;
  return bits;
}

void MaskSpec::check() const {
  if (masked.empty()) throw std::logic_error("mask: empty");
  int prev = -1;
  for (int i : masked) {
    if (i <= prev || i < 0 || i >= total_n) throw std::logic_error("mask: bad index order");
    prev = i;
  }
}

MaskSpec serialized_percent_mask(const std::vector<int>& order, double ratio, double block_lo,
                                 double block_hi, Rng& rng) {
  const int n = int(order.size());
  if (!(ratio > 0 && ratio < 1)) throw std::invalid_argument("percent mask: ratio out of (0,1)");
  if (!(block_lo > 0 && block_lo <= block_hi && block_hi <= ratio))
    throw std::invalid_argument("percent mask: need 0 < lo <= hi <= ratio");
  const int target = int(std::floor(ratio * n));
  if (target < 1) throw std::invalid_argument("percent mask: ratio*N < 1");

  const int len_lo = std::max(1, int(std::ceil(block_lo * n)));
  const int len_hi = std::max(len_lo, int(std::floor(block_hi * n)));

  // marked[p] flags serialized position p (not a point index).
  std::vector<uint8_t> marked(n, 0);
  int count = 0;
  int last_end = 0;  // one past the end of the last block placed
  while (count < target) {
    const int len = int(rng.uniform_int(len_lo, len_hi));
    const int start = int(rng.uniform_int(0, n - len));
    last_end = start + len;
    for (int p = start; p < last_end; ++p) {
      if (!marked[p]) {
        marked[p] = 1;
        ++count;
      }
    }
  }

  // Truncate to the exact target by unmasking the tail of the run that the
  // last block ends in; a run suffix keeps the mask a union of contiguous runs.
  int run_end = last_end;
  while (run_end < n && marked[run_end]) ++run_end;
  for (int p = run_end - 1; count > target; --p) {
    if (marked[p]) {
      marked[p] = 0;
      --count;
    }
  }

  MaskSpec spec;
  spec.total_n = n;
  spec.strategy = Strategy::SerializedPercent;
  for (int p = 0; p < n; ++p)
    if (marked[p]) spec.masked.push_back(order[p]);
  std::sort(spec.masked.begin(), spec.masked.end());
  spec.check();
  return spec;
}

namespace {

std::vector<int> nearest_indices(const geom::FeaturizedPointCloud& pc, int seed, int count) {
  const int n = pc.size();
  std::vector<double> d2(n);
  const geom::Point3 s = pc.coords[seed];
  for (int i = 0; i < n; ++i) {
    const geom::Point3& p = pc.coords[i];
    const double dx = p.x - s.x, dy = p.y - s.y, dz = p.z - s.z;
    d2[i] = dx * dx + dy * dy + dz * dz;
  }
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return d2[a] < d2[b]; });
  idx.resize(count);
  return idx;
}

}  // namespace

MaskSpec radius_mask(const geom::FeaturizedPointCloud& pc, int count, Rng& rng) {
  const int n = pc.size();
  if (count < 1 || count > n) throw std::invalid_argument("radius mask: count out of [1, N]");
  const int seed = int(rng.uniform_int(0, n - 1));
  MaskSpec spec;
  spec.total_n = n;
  spec.strategy = Strategy::Radius;
  spec.masked = nearest_indices(pc, seed, count);
  std::sort(spec.masked.begin(), spec.masked.end());
  spec.check();
  return spec;
}

MaskSpec fixed_count_masks(const geom::FeaturizedPointCloud& pc, int mask_size, double ratio,
                           Rng& rng) {
  const int n = pc.size();
  if (mask_size < 1) throw std::invalid_argument("fixed count: mask_size must be >= 1");
  if (mask_size > n) throw std::invalid_argument("fixed count: mask_size > N");
  if (!(ratio > 0 && ratio < 1)) throw std::invalid_argument("fixed count: ratio out of (0,1)");
  const int target = std::max(1, int(std::floor(ratio * n)));

  std::vector<uint8_t> member(n, 0);
  int count = 0;
  while (count < target) {
    const int seed = int(rng.uniform_int(0, n - 1));
    for (int i : nearest_indices(pc, seed, mask_size)) {
      if (!member[i]) {
        member[i] = 1;
        ++count;
      }
    }
  }
  MaskSpec spec;
  spec.total_n = n;
  spec.strategy = Strategy::FixedCount;
  for (int i = 0; i < n; ++i)
    if (member[i]) spec.masked.push_back(i);
  spec.check();
  return spec;
}

}  // namespace rfx::masking
