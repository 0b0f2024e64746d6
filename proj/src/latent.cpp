#include "latentedit/latent.hpp"

#include <algorithm>
#include <cmath>

#include "latentedit/error.hpp"

namespace latentedit {

namespace {

void require_finite(const LatentTensor& t, const char* what) {
  if (!t.all_finite()) throw NonFiniteError(std::string(what) + " contains non-finite entries");
}

// Index of the first entry with the largest magnitude.
std::size_t argmax_abs(std::span<const double> v) {
  std::size_t best = 0;
  double best_abs = -1.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double a = std::abs(v[i]);
    if (a > best_abs) {
      best_abs = a;
      best = i;
    }
  }
  return best;
}

}  // namespace

NormalizedOffset normalize_offset(const OffsetDelta& delta) {
  require_finite(delta, "offset");
  NormalizedOffset out(delta.shape());
  auto v = delta.values();
  double max_abs = std::abs(v[argmax_abs(v)]);
  if (max_abs == 0.0) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::abs(v[i]) / max_abs;
  return out;
}

double entropy_loss(const OffsetDelta& delta) {
  auto p = normalize_offset(delta);
  double sum = 0.0;
  for (double pi : p.values()) {
    double clamped = std::clamp(pi, kEntropyEpsilon, 1.0);
    sum -= pi * std::log(clamped);
  }
  // p * log p <= 0 for p in [0, 1]; guard against -0.0.
  return sum <= 0.0 ? 0.0 : sum;
}

std::vector<double> entropy_loss_gradient(const OffsetDelta& delta) {
  require_finite(delta, "offset");
  auto v = delta.values();
  std::vector<double> grad(v.size(), 0.0);
  const std::size_t k = argmax_abs(v);
  const double m = std::abs(v[k]);
  if (m == 0.0) return grad;
  const double sign_k = v[k] > 0.0 ? 1.0 : -1.0;
  // L = -sum_i p_i log p_i with p_i = |v_i| / m. dL/dp_i = -(log p_i + 1).
  // For i != k: dp_i/dv_i = sign(v_i)/m and dp_i/dv_k = -|v_i| sign(v_k)/m^2.
  // p_k == 1 identically, so it contributes nothing directly.
  double through_max = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i == k || v[i] == 0.0) continue;
    double p = std::abs(v[i]) / m;
    // Below the clamp the term is -p log(eps), linear in p.
    double dl_dp = p < kEntropyEpsilon ? -std::log(kEntropyEpsilon) : -(std::log(p) + 1.0);
    double sign_i = v[i] > 0.0 ? 1.0 : -1.0;
    grad[i] = dl_dp * sign_i / m;
    through_max += dl_dp * (-std::abs(v[i]) * sign_k / (m * m));
  }
  grad[k] = through_max;
  return grad;
}

double latent_norm_loss(const OffsetDelta& delta) {
  require_finite(delta, "offset");
  double sq = 0.0;
  for (double x : delta.values()) sq += x * x;
  return std::sqrt(sq);
}

std::vector<double> latent_norm_loss_gradient(const OffsetDelta& delta) {
  double n = latent_norm_loss(delta);
  std::vector<double> grad(delta.size(), 0.0);
  if (n == 0.0) return grad;
  for (std::size_t i = 0; i < delta.size(); ++i) grad[i] = delta[i] / n;
  return grad;
}

LatentCode apply_offset(const LatentCode& w, const OffsetDelta& delta, double alpha) {
  if (w.shape() != delta.shape()) {
    throw ShapeError("offset shape " + delta.shape().to_string() + " does not match latent shape " + w.shape().to_string());
  }
  if (!std::isfinite(alpha)) throw NonFiniteError("alpha is not finite");
  require_finite(delta, "offset");
  LatentCode out = w;
  if (alpha == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[i] + alpha * delta[i];
  return out;
}

SparsityStats sparsity_report(const OffsetDelta& delta, std::optional<std::span<const bool>> relevant_mask, double threshold) {
  if (relevant_mask && relevant_mask->size() != delta.size()) {
    throw ShapeError("sparsity mask has " + std::to_string(relevant_mask->size()) + " entries, offset has " +
                     std::to_string(delta.size()));
  }
  SparsityStats stats;
  stats.threshold = threshold;
  std::size_t near_zero = 0;
  double in_mask = 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double a = std::abs(delta[i]);
    if (a < threshold) ++near_zero;
    stats.total_abs_mass += a;
    if (relevant_mask && (*relevant_mask)[i]) in_mask += a;
  }
  stats.near_zero_fraction = delta.size() == 0 ? 1.0 : static_cast<double>(near_zero) / static_cast<double>(delta.size());
  if (relevant_mask) {
    stats.in_mask_mass_fraction = stats.total_abs_mass == 0.0 ? 1.0 : in_mask / stats.total_abs_mass;
  }
  return stats;
}

}  // namespace latentedit
