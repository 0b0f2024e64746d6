#pragma once

#include <optional>
#include <span>
#include <vector>

#include "latentedit/tensor.hpp"

namespace latentedit {

/// Clamp applied to p inside the log so that 0 * log 0 evaluates to 0.
inline constexpr double kEntropyEpsilon = 1e-12;

/// Default |value| threshold below which an offset entry counts as "near zero".
inline constexpr double kNearZeroThreshold = 1e-3;

/// Min-max normalization of absolute offsets over the whole tensor:
/// p = |d| / max|d|. An identically-zero offset maps to all zeros.
NormalizedOffset normalize_offset(const OffsetDelta& delta);

/// Shannon entropy of the normalized offset, natural log:
/// -sum p log p, with 0 log 0 := 0.
double entropy_loss(const OffsetDelta& delta);

/// Gradient of entropy_loss with respect to every offset entry. Ties for the
/// maximum magnitude route the max-dependence through the first such entry;
/// zero entries get a zero (sub)gradient.
std::vector<double> entropy_loss_gradient(const OffsetDelta& delta);

/// Euclidean norm of the flattened offset.
double latent_norm_loss(const OffsetDelta& delta);

/// d/d delta of ||delta||_2; zero at the origin.
std::vector<double> latent_norm_loss_gradient(const OffsetDelta& delta);

/// w + alpha * delta.
LatentCode apply_offset(const LatentCode& w, const OffsetDelta& delta, double alpha = 1.0);

struct SparsityStats {
  double near_zero_fraction = 0.0;  // share of entries with |d| < threshold
  double total_abs_mass = 0.0;      // sum |d|
  std::optional<double> in_mask_mass_fraction;  // sum_{mask} |d| / sum |d|, 1.0 when the offset is zero
  double threshold = kNearZeroThreshold;
};

/// `relevant_mask`, when provided, flags the ground-truth controlling entries
/// (one flag per offset entry).
SparsityStats sparsity_report(const OffsetDelta& delta, std::optional<std::span<const bool>> relevant_mask = std::nullopt,
                              double threshold = kNearZeroThreshold);

}  // namespace latentedit
