#pragma once

// Splits, mini-batch training with early stopping, and classification metrics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "care/ad/graph.hpp"
#include "care/error.hpp"
#include "care/img_repr.hpp"
#include "care/model.hpp"
#include "care/objective.hpp"
#include "care/seq_repr.hpp"

namespace care {

// One segment in model-ready form. `image` is already downsampled to the
// model's input size.
struct Sample {
  std::size_t label = 0;
  SequenceTensor seq;
  Image image;
};

enum class OptimizerKind { kAdam, kSgdMomentum };

inline const char* optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::kAdam ? "adam" : "sgd_momentum";
}

enum class Averaging { kWeighted, kMacro };

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t max_epochs = 60;
  std::size_t patience = 10;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  double train_fraction = 0.7;
  // Share of the training split held back for early stopping.
  double valid_fraction = 0.1;
  std::size_t folds = 5;
  Averaging averaging = Averaging::kWeighted;

  void validate() const {
    if (batch_size < 2) throw UsageError("batch_size must be >= 2");
    if (max_epochs < 1) throw UsageError("max_epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("momentum must lie in [0,1)");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
      throw UsageError("split fractions must lie in (0,1) and sum to 1");
    }
    if (!(valid_fraction >= 0.0 && valid_fraction < 1.0)) {
      throw UsageError("valid_fraction must lie in [0,1)");
    }
    if (folds < 2) throw UsageError("cross-validation needs k >= 2");
    if (seeds.empty()) throw UsageError("at least one seed is required");
  }
};

// ---------------------------------------------------------------------------
// Splits

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline std::map<std::size_t, std::vector<std::size_t>> indices_by_class(
    const std::vector<std::size_t>& labels) {
  std::map<std::size_t, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < labels.size(); ++i) by[labels[i]].push_back(i);
  return by;
}

// Per class, round(fraction * n) items (halves toward train) go to train,
// clamped so both sides keep at least one.
inline Split stratified_split(const std::vector<std::size_t>& labels, double train_fraction,
                              std::uint64_t seed,
                              const std::vector<std::string>& class_names = {}) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw UsageError("train fraction must lie in (0,1)");
  }
  std::mt19937_64 rng(seed);
  Split out;
  for (auto& [label, idx] : indices_by_class(labels)) {
    if (idx.size() < 2) {
      const std::string name =
          label < class_names.size() ? class_names[label] : "#" + std::to_string(label);
      throw DataError("class '" + name + "' has " + std::to_string(idx.size()) +
                      " segment; stratified split needs at least 2");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const double target = train_fraction * static_cast<double>(idx.size());
    auto n_train = static_cast<std::size_t>(std::floor(target + 0.5 + 1e-9));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<long>(n_train));
    out.test.insert(out.test.end(), idx.begin() + static_cast<long>(n_train), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

struct Folds {
  std::vector<std::vector<std::size_t>> folds;
  std::vector<std::string> warnings;
};

// Each class is shuffled and dealt round-robin; the dealing position carries
// over between classes so fold sizes stay within one of each other.
inline Folds kfold_indices(const std::vector<std::size_t>& labels, std::size_t k,
                           std::uint64_t seed) {
  if (k < 2) throw UsageError("kfold: k must be >= 2");
  std::mt19937_64 rng(seed);
  Folds out;
  out.folds.resize(k);
  std::size_t next = 0;
  for (auto& [label, idx] : indices_by_class(labels)) {
    if (idx.size() < k) {
      out.warnings.push_back("class #" + std::to_string(label) + " has " +
                             std::to_string(idx.size()) + " samples for " + std::to_string(k) +
                             " folds; some folds will not contain it");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) {
      out.folds[next].push_back(i);
      next = (next + 1) % k;
    }
  }
  for (auto& f : out.folds) std::sort(f.begin(), f.end());
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  Averaging averaging = Averaging::kWeighted;
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double seconds_per_batch = 0.0;
  std::size_t samples = 0;
};

inline MetricsReport compute_metrics(const std::vector<std::size_t>& truth,
                                     const std::vector<std::size_t>& predicted,
                                     std::size_t num_classes, Averaging averaging) {
  if (truth.empty()) throw UsageError("metrics over an empty set");
  if (truth.size() != predicted.size()) throw UsageError("metrics: length mismatch");
  MetricsReport r;
  r.averaging = averaging;
  r.samples = truth.size();
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) {
      throw DataError("metrics: label out of range");
    }
    ++r.confusion[truth[i]][predicted[i]];
    correct += truth[i] == predicted[i];
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  r.per_class.resize(num_classes);
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t tp = r.confusion[c][c], row = 0, col = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      row += r.confusion[c][k];
      col += r.confusion[k][c];
    }
    ClassMetrics& m = r.per_class[c];
    m.support = row;
    m.precision = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    m.recall = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
                                        : 0.0;
    present += row > 0;
  }
  // Weighted: by support. Macro: plain mean over classes present in truth.
  for (const ClassMetrics& m : r.per_class) {
    if (m.support == 0) continue;
    const double w = averaging == Averaging::kWeighted
                         ? static_cast<double>(m.support) / static_cast<double>(truth.size())
                         : 1.0 / static_cast<double>(present);
    r.precision += w * m.precision;
    r.recall += w * m.recall;
    r.f1 += w * m.f1;
  }
  return r;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) throw UsageError("mean_std of nothing");
  MeanStd r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  for (double x : xs) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(xs.size()));
  return r;
}

struct AggregateMetrics {
  MeanStd accuracy, precision, recall, f1, seconds_per_batch;
  std::size_t runs = 0;
};

inline AggregateMetrics aggregate(const std::vector<MetricsReport>& reports) {
  auto pick = [&](auto field) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(field(r));
    return mean_std(v);
  };
  AggregateMetrics a;
  a.runs = reports.size();
  a.accuracy = pick([](const MetricsReport& r) { return r.accuracy; });
  a.precision = pick([](const MetricsReport& r) { return r.precision; });
  a.recall = pick([](const MetricsReport& r) { return r.recall; });
  a.f1 = pick([](const MetricsReport& r) { return r.f1; });
  a.seconds_per_batch = pick([](const MetricsReport& r) { return r.seconds_per_batch; });
  return a;
}

// ---------------------------------------------------------------------------
// Optimizers

template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double momentum)
      : kind_(kind), lr_(lr), momentum_(momentum) {}

  // Updates the named parameters (all of them when `only` is empty).
  void step(ParameterStore<T>& params, const std::vector<std::string>& only = {}) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
      auto& st = state_[name];
      const std::size_t n = p.value.size();
      if (st.m.size() != n) {
        st.m.assign(n, 0.0);
        st.v.assign(n, 0.0);
      }
      T* w = p.value.data();
      const T* g = p.grad.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]);
        if (kind_ == OptimizerKind::kAdam) {
          st.m[i] = kBeta1 * st.m[i] + (1.0 - kBeta1) * gi;
          st.v[i] = kBeta2 * st.v[i] + (1.0 - kBeta2) * gi * gi;
          const double mh = st.m[i] / bc1, vh = st.v[i] / bc2;
          w[i] = static_cast<T>(static_cast<double>(w[i]) - lr_ * mh / (std::sqrt(vh) + kEps));
        } else {
          st.m[i] = momentum_ * st.m[i] + gi;
          w[i] = static_cast<T>(static_cast<double>(w[i]) - lr_ * st.m[i]);
        }
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  struct State {
    std::vector<double> m, v;
  };
  OptimizerKind kind_;
  double lr_, momentum_;
  std::uint64_t t_ = 0;
  std::map<std::string, State> state_;
};

// ---------------------------------------------------------------------------
// Batching

// Shuffled batches for one epoch; the final short batch is kept only if it
// holds at least 2 samples.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += batch_size) {
    const std::size_t end = std::min(n, at + batch_size);
    if (end - at < 2) break;
    out.emplace_back(order.begin() + static_cast<long>(at), order.begin() + static_cast<long>(end));
  }
  return out;
}

// Consecutive batches in data order for evaluation (every sample kept).
inline std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += batch_size) {
    std::vector<std::size_t> b;
    for (std::size_t i = at; i < std::min(n, at + batch_size); ++i) b.push_back(i);
    out.push_back(std::move(b));
  }
  return out;
}

template <typename T>
struct BatchInputs {
  std::optional<SequenceBatch<T>> seq;
  std::optional<ad::BasicTensor<T>> images;
  std::vector<std::size_t> labels;
};

template <typename T>
BatchInputs<T> assemble_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& idx,
                              const ModelConfig& cfg) {
  BatchInputs<T> b;
  std::vector<const SequenceTensor*> seqs;
  std::vector<const Image*> imgs;
  for (std::size_t i : idx) {
    b.labels.push_back(data[i].label);
    seqs.push_back(&data[i].seq);
    imgs.push_back(&data[i].image);
  }
  if (cfg.has_sequence()) b.seq = make_sequence_batch<T>(seqs);
  if (cfg.has_image()) b.images = make_image_batch<T>(imgs);
  return b;
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename T>
std::vector<std::size_t> predict(CareModel<T>& model, const std::vector<Sample>& data,
                                 std::size_t batch_size, double* seconds_per_batch = nullptr) {
  if (data.empty()) throw UsageError("evaluate: empty data");
  std::vector<std::size_t> out;
  out.reserve(data.size());
  double seconds = 0.0;
  const auto batches = sequential_batches(data.size(), batch_size);
  for (const auto& idx : batches) {
    const auto start = std::chrono::steady_clock::now();
    auto in = assemble_batch<T>(data, idx, model.config());
    ad::Graph<T> g;
    auto res = model.forward(g, in.seq ? &*in.seq : nullptr, in.images ? &*in.images : nullptr, false);
    const auto& logits = res.logits.value();
    const std::size_t c = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k) {
        if (logits.at(r, k) > logits.at(r, best)) best = k;
      }
      out.push_back(best);
    }
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  if (seconds_per_batch) *seconds_per_batch = seconds / static_cast<double>(batches.size());
  return out;
}

template <typename T>
MetricsReport evaluate(CareModel<T>& model, const std::vector<Sample>& data, std::size_t batch_size,
                       Averaging averaging = Averaging::kWeighted) {
  double spb = 0.0;
  auto pred = predict(model, data, batch_size, &spb);
  std::vector<std::size_t> truth;
  truth.reserve(data.size());
  for (const auto& s : data) truth.push_back(s.label);
  MetricsReport r = compute_metrics(truth, pred, model.config().num_classes, averaging);
  r.seconds_per_batch = spb;
  return r;
}

// Mean SICA over validation batches of at least 2 samples.
template <typename T>
double validation_sica(CareModel<T>& model, const std::vector<Sample>& valid, std::size_t batch_size,
                       const ContrastiveConfig& cc) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& idx : sequential_batches(valid.size(), batch_size)) {
    if (idx.size() < 2) continue;
    auto in = assemble_batch<T>(valid, idx, model.config());
    ad::Graph<T> g;
    auto out = model.forward(g, &*in.seq, &*in.images, true);
    total += static_cast<double>(sica_loss(*out.z_seq, *out.z_img, in.labels, cc).value()[0]);
    ++count;
  }
  if (count == 0) throw UsageError("validation set too small for a contrastive batch");
  return total / static_cast<double>(count);
}


// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t stage = 1;  // 2 only for the classifier stage of beta = 1
  std::size_t epoch = 0;  // 1-based within the stage
  double loss = 0.0;      // mean over steps
  double sica = std::numeric_limits<double>::quiet_NaN();
  double ce = std::numeric_limits<double>::quiet_NaN();
  double train_accuracy = 0.0;
  double valid_metric = 0.0;  // F1, or -SICA during contrastive-only pretraining
  bool improved = false;
  double seconds = 0.0;
};

template <typename T>
struct FitResult {
  ParameterStore<T> best;
  std::size_t best_epoch = 0;
  double best_valid_metric = -std::numeric_limits<double>::infinity();
  std::vector<EpochLog> log;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
};

struct FitHooks {
  // Replaces the computed validation metric (tests force plateaus with it).
  std::function<double(const EpochLog&)> valid_metric;
  std::function<void(const EpochLog&)> on_epoch;
};

namespace detail {

inline std::string loss_diagnostics(std::size_t stage, std::size_t epoch, std::size_t step,
                                    double loss, double sica, double ce) {
  std::ostringstream os;
  os << "non-finite loss at stage " << stage << " epoch " << epoch << " step " << step
     << " (loss=" << loss << ", sica=" << sica << ", ce=" << ce << ")";
  return os.str();
}

template <typename T>
std::vector<std::string> names_with_prefix(const ParameterStore<T>& params, const std::string& prefix,
                                           bool keep) {
  std::vector<std::string> out;
  for (const auto& [name, p] : params) {
    if ((name.rfind(prefix, 0) == 0) == keep) out.push_back(name);
  }
  return out;
}

}  // namespace detail

// Trains `model` in place and returns the best-validation parameters (the
// model itself is left holding them). With beta = 1 the objective has no
// classification term, so training runs in two stages: encoders and
// projections under SICA alone (early stopping on validation SICA), then the
// classifier under cross-entropy with the encoders frozen.
template <typename T>
FitResult<T> fit(CareModel<T>& model, const std::vector<Sample>& train,
                 const std::vector<Sample>& valid, const TrainConfig& tc,
                 const ContrastiveConfig& cc, std::uint64_t seed, const FitHooks& hooks = {}) {
  tc.validate();
  cc.validate();
  if (train.size() < 2) throw UsageError("fit: need at least 2 training samples");
  if (valid.empty()) throw UsageError("fit: empty validation set");
  const ModelConfig& mc = model.config();
  const bool two_views = mc.has_sequence() && mc.has_image();
  const bool contrastive = two_views && cc.mode != ContrastiveMode::kOff && cc.beta > 0.0;
  if (!contrastive && cc.beta == 1.0 && cc.mode != ContrastiveMode::kOff) {
    throw UsageError("beta = 1 needs both views and a contrastive mode");
  }

  FitResult<T> result;
  const std::vector<std::string> cls_names = detail::names_with_prefix(model.parameters(), "cls.", true);
  const std::vector<std::string> enc_names = detail::names_with_prefix(model.parameters(), "cls.", false);

  auto run_stage = [&](std::size_t stage, bool use_sica, bool use_ce, double beta,
                       const std::vector<std::string>& trainable) {
    Optimizer<T> opt(tc.optimizer, tc.learning_rate, tc.momentum);
    double best = -std::numeric_limits<double>::infinity();
    std::size_t since = 0;
    ParameterStore<T> best_params = model.parameters();
    std::size_t best_epoch = 0;
    for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
      const auto start = std::chrono::steady_clock::now();
      EpochLog row;
      row.stage = stage;
      row.epoch = epoch;
      double loss_sum = 0.0, sica_sum = 0.0, ce_sum = 0.0;
      std::size_t steps = 0, correct = 0, seen = 0;
      const auto batches = epoch_batches(train.size(), tc.batch_size, seed, epoch + 1000 * stage);
      for (const auto& idx : batches) {
        ++steps;
        auto in = assemble_batch<T>(train, idx, mc);
        ad::Graph<T> g;
        auto out = model.forward(g, in.seq ? &*in.seq : nullptr, in.images ? &*in.images : nullptr,
                                 use_sica);
        double sica_v = std::numeric_limits<double>::quiet_NaN();
        double ce_v = std::numeric_limits<double>::quiet_NaN();
        std::optional<ad::Var<T>> sica, ce;
        try {
          if (use_ce) {
            ce = ce_loss(out.logits, in.labels);
            ce_v = static_cast<double>(ce->value()[0]);
          }
          if (use_sica) {
            sica = sica_loss(*out.z_seq, *out.z_img, in.labels, cc);
            sica_v = static_cast<double>(sica->value()[0]);
          }
        } catch (const NumericError&) {
          throw NumericError(detail::loss_diagnostics(stage, epoch, steps, NAN, sica_v, ce_v));
        }
        ad::Var<T> loss = sica && ce ? care_loss(*sica, *ce, beta) : (sica ? *sica : *ce);
        const double loss_v = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(loss_v)) {
          throw NumericError(detail::loss_diagnostics(stage, epoch, steps, loss_v, sica_v, ce_v));
        }
        model.zero_grad();
        g.backward(loss);
        opt.step(model.parameters(), trainable);
        loss_sum += loss_v;
        if (sica) sica_sum += sica_v;
        if (ce) ce_sum += ce_v;
        const auto& logits = out.logits.value();
        for (std::size_t r = 0; r < idx.size(); ++r) {
          std::size_t arg = 0;
          for (std::size_t k = 1; k < logits.dim(1); ++k) {
            if (logits.at(r, k) > logits.at(r, arg)) arg = k;
          }
          correct += arg == in.labels[r];
          ++seen;
        }
      }
      const double n = static_cast<double>(std::max<std::size_t>(steps, 1));
      row.loss = loss_sum / n;
      if (use_sica) row.sica = sica_sum / n;
      if (use_ce) row.ce = ce_sum / n;
      row.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
      if (use_ce) {
        row.valid_metric = evaluate(model, valid, tc.batch_size, tc.averaging).f1;
      } else {
        row.valid_metric = -validation_sica(model, valid, tc.batch_size, cc);
      }
      if (hooks.valid_metric) row.valid_metric = hooks.valid_metric(row);
      // strict improvement: ties keep the earlier epoch
      if (row.valid_metric > best) {
        best = row.valid_metric;
        best_params = model.parameters();
        best_epoch = epoch;
        since = 0;
        row.improved = true;
      } else {
        ++since;
      }
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back(row);
      ++result.epochs_run;
      if (hooks.on_epoch) hooks.on_epoch(row);
      if (tc.patience > 0 && since >= tc.patience) {
        result.stopped_early = true;
        break;
      }
    }
    for (auto& [name, p] : model.parameters()) p.value = best_params.at(name).value;
    return std::make_pair(best, best_epoch);
  };

  if (contrastive && cc.beta == 1.0) {
    run_stage(1, true, false, 1.0, enc_names);
    auto [best, epoch] = run_stage(2, false, true, 0.0, cls_names);
    result.best_valid_metric = best;
    result.best_epoch = epoch;
  } else {
    auto [best, epoch] = run_stage(1, contrastive, true, contrastive ? cc.beta : 0.0, {});
    result.best_valid_metric = best;
    result.best_epoch = epoch;
  }
  result.best = model.parameters();
  return result;
}

}  // namespace care
