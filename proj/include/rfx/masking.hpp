#pragma once

#include <vector>

#include "rfx/geom.hpp"
#include "rfx/rng.hpp"

namespace rfx::masking {

enum class Strategy { SerializedPercent, Radius, FixedCount };

// The set of point indices hidden from the context encoder.
struct MaskSpec {
  std::vector<int> masked;  // sorted, unique, nonempty
  int total_n = 0;
  Strategy strategy = Strategy::SerializedPercent;

  std::vector<int> unmasked() const;
  std::vector<uint8_t> bitmap() const;
  void check() const;  // throws on an invariant violation
};

// Union of contiguous blocks in serialized order, block lengths drawn from
// [lo, hi] fractions of N, truncated to exactly floor(ratio * N) indices.
MaskSpec serialized_percent_mask(const std::vector<int>& order, double ratio, double block_lo,
                                 double block_hi, Rng& rng);

// A uniformly random seed point plus its count-1 nearest neighbors by
// Euclidean distance; ties broken by index.
MaskSpec radius_mask(const geom::FeaturizedPointCloud& pc, int count, Rng& rng);

// Repeated radius masks of fixed size, unioned until coverage reaches
// floor(ratio * N) points.
MaskSpec fixed_count_masks(const geom::FeaturizedPointCloud& pc, int mask_size, double ratio,
                           Rng& rng);

}  // namespace rfx::masking
