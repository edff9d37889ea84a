#pragma once

// Supervised cross-view contrastive loss, cross-entropy, and their blend.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "care/ad/graph.hpp"
#include "care/ad/ops.hpp"
#include "care/ad/tensor.hpp"
#include "care/error.hpp"

namespace care {

enum class ContrastiveMode { kCrossView, kWithinView, kOff };

inline const char* contrastive_mode_name(ContrastiveMode m) {
  switch (m) {
    case ContrastiveMode::kCrossView: return "cross_view";
    case ContrastiveMode::kWithinView: return "within_view";
    case ContrastiveMode::kOff: return "off";
  }
  return "?";
}

struct ContrastiveConfig {
  double temperature = 0.1;
  ContrastiveMode mode = ContrastiveMode::kCrossView;
  double beta = 0.5;

  void validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw UsageError("contrastive temperature must be > 0");
    }
    if (!(beta >= 0.0 && beta <= 1.0)) throw UsageError("beta must lie in [0, 1]");
  }
};

// Index sets for one anchor over the 2B embeddings ordered
// [z_1^S .. z_B^S, z_1^I .. z_B^I].
struct PositiveSets {
  std::vector<std::size_t> same_view;
  std::vector<std::size_t> other_view;
  std::vector<std::size_t> denominator;  // every non-anchor embedding

  std::size_t positives() const { return same_view.size() + other_view.size(); }
};

inline PositiveSets build_positive_sets(const std::vector<std::size_t>& labels,
                                        ContrastiveMode mode, std::size_t anchor) {
  const std::size_t b = labels.size();
  if (mode == ContrastiveMode::kOff) throw UsageError("positive sets requested with mode off");
  if (b < 2) throw UsageError("contrastive loss needs a batch of at least 2, got " + std::to_string(b));
  if (anchor >= 2 * b) throw UsageError("anchor index out of range");
  PositiveSets out;
  const std::size_t anchor_view = anchor / b;
  const std::size_t anchor_label = labels[anchor % b];
  for (std::size_t a = 0; a < 2 * b; ++a) {
    if (a == anchor) continue;
    out.denominator.push_back(a);
    if (labels[a % b] != anchor_label) continue;
    if (a / b == anchor_view) {
      out.same_view.push_back(a);
    } else if (mode == ContrastiveMode::kCrossView) {
      out.other_view.push_back(a);
    }
  }
  return out;
}

namespace detail {

struct SicaForward {
  double total = 0.0;
  std::vector<double> anchor_loss;  // 0 for skipped anchors
  std::vector<double> grad_sim;     // d total / d s[i,a], row-major 2B x 2B
};

// z holds the 2B rows [seq; img] of width d.
inline SicaForward sica_forward(const std::vector<double>& z, std::size_t b, std::size_t d,
                                const std::vector<std::size_t>& labels,
                                const ContrastiveConfig& cfg) {
  cfg.validate();
  if (cfg.mode == ContrastiveMode::kOff) throw UsageError("sica_loss called with mode off");
  if (labels.size() != b) throw UsageError("sica_loss: label count does not match batch");
  if (b < 2) throw UsageError("contrastive loss needs a batch of at least 2, got " + std::to_string(b));
  for (double v : z) {
    if (!std::isfinite(v)) throw NumericError("sica_loss: non-finite embedding");
  }
  const std::size_t n = 2 * b;
  const double inv_t = 1.0 / cfg.temperature;
  std::vector<double> s(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += z[i * d + c] * z[j * d + c];
      s[i * n + j] = s[j * n + i] = acc * inv_t;
    }
  }
  auto positive = [&](std::size_t i, std::size_t a) {
    return a != i && labels[a % b] == labels[i % b] &&
           (cfg.mode == ContrastiveMode::kCrossView || a / b == i / b);
  };

  SicaForward out;
  out.anchor_loss.assign(n, 0.0);
  out.grad_sim.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t npos = 0;
    double pos_sum = 0.0;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n; ++a) {
      if (a == i) continue;
      m = std::max(m, s[i * n + a]);
      if (positive(i, a)) {
        ++npos;
        pos_sum += s[i * n + a];
      }
    }
    if (npos == 0) continue;
    double denom = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      if (a != i) denom += std::exp(s[i * n + a] - m);
    }
    const double lse = m + std::log(denom);
    out.anchor_loss[i] = lse - pos_sum / static_cast<double>(npos);
    out.total += out.anchor_loss[i];
    // softmax_ia - [a in P(i)] / |P(i)|, scaled by the 1/(2B) normalizer
    for (std::size_t a = 0; a < n; ++a) {
      if (a == i) continue;
      out.grad_sim[i * n + a] = (std::exp(s[i * n + a] - lse) -
                                 (positive(i, a) ? 1.0 / static_cast<double>(npos) : 0.0)) /
                                static_cast<double>(n);
    }
  }
  out.total /= static_cast<double>(n);
  if (!std::isfinite(out.total)) throw NumericError("sica_loss: non-finite loss");
  return out;
}

template <typename T>
std::vector<double> stack_views(const ad::BasicTensor<T>& z_seq, const ad::BasicTensor<T>& z_img) {
  const ad::Shape& ss = z_seq.shape();
  const ad::Shape& si = z_img.shape();
  if (ss.size() != 2 || ss != si) {
    throw UsageError("sica_loss: view embeddings have shapes " + ad::shape_str(ss) + " and " +
                     ad::shape_str(si));
  }
  std::vector<double> z;
  z.reserve(2 * z_seq.size());
  for (T v : z_seq.values()) z.push_back(static_cast<double>(v));
  for (T v : z_img.values()) z.push_back(static_cast<double>(v));
  return z;
}

}  // namespace detail

// Per-anchor terms L_i over the 2B anchors (0 where an anchor has no positive).
template <typename T>
std::vector<double> sica_anchor_losses(const ad::BasicTensor<T>& z_seq,
                                       const ad::BasicTensor<T>& z_img,
                                       const std::vector<std::size_t>& labels,
                                       const ContrastiveConfig& cfg) {
  auto z = detail::stack_views(z_seq, z_img);
  return detail::sica_forward(z, z_seq.dim(0), z_seq.dim(1), labels, cfg).anchor_loss;
}

// Mean over all 2B anchors of
//   -1/|P(i)| * sum_p log( exp(<z_i,z_p>/t) / sum_{a != i} exp(<z_i,z_a>/t) ),
// anchors without positives contributing zero. Rows are assumed unit-norm,
// so the dot product is the cosine similarity. Evaluated in double.
template <typename T>
ad::Var<T> sica_loss(ad::Var<T> z_seq, ad::Var<T> z_img, const std::vector<std::size_t>& labels,
                     const ContrastiveConfig& cfg) {
  std::vector<double> z = detail::stack_views(z_seq.value(), z_img.value());
  const std::size_t b = z_seq.dim(0), d = z_seq.dim(1), n = 2 * b;
  detail::SicaForward fwd = detail::sica_forward(z, b, d, labels, cfg);
  const double inv_t = 1.0 / cfg.temperature;
  return z_seq.graph->record(
      ad::BasicTensor<T>::scalar(static_cast<T>(fwd.total)), {z_seq, z_img},
      [z_seq, z_img, z = std::move(z), gs = std::move(fwd.grad_sim), b, d, n, inv_t](
          ad::Graph<T>& g, const ad::BasicTensor<T>& gy) {
        const double scale = static_cast<double>(gy[0]) * inv_t;
        ad::BasicTensor<T> g_seq({b, d}), g_img({b, d});
        // dZ = (G + G^T) Z / t
        std::vector<double> row(d);
        for (std::size_t i = 0; i < n; ++i) {
          std::fill(row.begin(), row.end(), 0.0);
          for (std::size_t a = 0; a < n; ++a) {
            const double w = gs[i * n + a] + gs[a * n + i];
            if (w == 0.0) continue;
            for (std::size_t c = 0; c < d; ++c) row[c] += w * z[a * d + c];
          }
          auto& dst = i < b ? g_seq : g_img;
          const std::size_t r = i % b;
          for (std::size_t c = 0; c < d; ++c) dst[r * d + c] = static_cast<T>(row[c] * scale);
        }
        g.accumulate(z_seq, std::move(g_seq));
        g.accumulate(z_img, std::move(g_img));
      });
}

// Mean over the batch of -log softmax(logits)_y.
template <typename T>
ad::Var<T> ce_loss(ad::Var<T> logits, const std::vector<std::size_t>& labels) {
  const ad::Shape& sh = logits.shape();
  if (sh.size() != 2) throw UsageError("ce_loss: logits must be rank 2, got " + ad::shape_str(sh));
  const std::size_t b = sh[0], c = sh[1];
  if (c < 2) throw UsageError("ce_loss: need at least 2 classes");
  if (labels.size() != b) throw UsageError("ce_loss: label count does not match batch");
  const auto& x = logits.value();
  std::vector<double> probs(b * c);
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= c) {
      throw DataError("ce_loss: label " + std::to_string(labels[r]) + " >= class count " +
                      std::to_string(c));
    }
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) m = std::max(m, static_cast<double>(x[r * c + k]));
    double denom = 0.0;
    for (std::size_t k = 0; k < c; ++k) denom += std::exp(static_cast<double>(x[r * c + k]) - m);
    const double lse = m + std::log(denom);
    for (std::size_t k = 0; k < c; ++k) {
      probs[r * c + k] = std::exp(static_cast<double>(x[r * c + k]) - lse);
    }
    total += lse - static_cast<double>(x[r * c + labels[r]]);
  }
  total /= static_cast<double>(b);
  if (!std::isfinite(total)) throw NumericError("ce_loss: non-finite loss");
  return logits.graph->record(
      ad::BasicTensor<T>::scalar(static_cast<T>(total)), {logits},
      [logits, labels, probs = std::move(probs), b, c](ad::Graph<T>& g,
                                                         const ad::BasicTensor<T>& gy) {
        const double scale = static_cast<double>(gy[0]) / static_cast<double>(b);
        ad::BasicTensor<T> gx({b, c});
        for (std::size_t r = 0; r < b; ++r) {
          for (std::size_t k = 0; k < c; ++k) {
            const double t = k == labels[r] ? 1.0 : 0.0;
            gx[r * c + k] = static_cast<T>((probs[r * c + k] - t) * scale);
          }
        }
        g.accumulate(logits, std::move(gx));
      });
}

inline double care_loss(double sica, double ce, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw UsageError("beta must lie in [0, 1]");
  if (beta == 0.0) return ce;
  if (beta == 1.0) return sica;
  return beta * sica + (1.0 - beta) * ce;
}

// beta * sica + (1 - beta) * ce; the endpoints return the single term as is.
template <typename T>
ad::Var<T> care_loss(ad::Var<T> sica, ad::Var<T> ce, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw UsageError("beta must lie in [0, 1]");
  if (beta == 0.0) return ce;
  if (beta == 1.0) return sica;
  return ad::add(ad::scale(sica, beta), ad::scale(ce, 1.0 - beta));
}

}  // namespace care
