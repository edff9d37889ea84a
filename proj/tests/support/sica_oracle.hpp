#pragma once

// Literal evaluation of the supervised cross-view contrastive loss, written
// without reference to the library implementation: explicit positive sets,
// explicit cosine similarity, and plain exponential sums in 64-bit.

#include <cmath>
#include <cstddef>
#include <vector>

namespace care::testing {

using Rows = std::vector<std::vector<double>>;

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// cross_view = false drops the other-view positive set.
inline double oracle_anchor_loss(const Rows& zs, const Rows& zi, const std::vector<std::size_t>& y,
                                 double tau, bool cross_view, std::size_t anchor) {
  const std::size_t b = y.size();
  Rows all(zs);
  all.insert(all.end(), zi.begin(), zi.end());
  auto view = [&](std::size_t k) { return k < b ? 0 : 1; };
  auto label = [&](std::size_t k) { return y[k % b]; };

  std::vector<std::size_t> same, other;
  for (std::size_t k = 0; k < 2 * b; ++k) {
    if (k == anchor || label(k) != label(anchor)) continue;
    if (view(k) == view(anchor)) {
      same.push_back(k);
    } else {
      other.push_back(k);
    }
  }
  if (!cross_view) other.clear();
  const double count = static_cast<double>(same.size() + other.size());
  if (count == 0) return 0.0;

  double denom = 0.0;
  for (std::size_t a = 0; a < 2 * b; ++a) {
    if (a != anchor) denom += std::exp(cosine(all[anchor], all[a]) / tau);
  }
  double acc = 0.0;
  for (const auto* set : {&same, &other}) {
    for (std::size_t p : *set) acc += std::log(std::exp(cosine(all[anchor], all[p]) / tau) / denom);
  }
  return -acc / count;
}

inline double oracle_sica(const Rows& zs, const Rows& zi, const std::vector<std::size_t>& y,
                          double tau, bool cross_view) {
  double total = 0.0;
  for (std::size_t i = 0; i < 2 * y.size(); ++i) total += oracle_anchor_loss(zs, zi, y, tau, cross_view, i);
  return total / (2.0 * static_cast<double>(y.size()));
}

}  // namespace care::testing
