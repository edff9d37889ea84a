#pragma once

// Two-branch encoder model: a recurrent sequence encoder and a small
// residual CNN over composite images, per-view projection heads onto the
// unit sphere, and an MLP classifier over the concatenated encoder outputs.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "care/ad/graph.hpp"
#include "care/ad/ops.hpp"
#include "care/ad/tensor.hpp"
#include "care/error.hpp"
#include "care/img_repr.hpp"
#include "care/seq_repr.hpp"

namespace care {

enum class SeqEncoderKind { kLstm, kBiLstm };

// Which encoder branches the model carries.
enum class Views { kBoth, kSequence, kImage };

enum class View { kSequence, kImage };

struct ModelConfig {
  SeqEncoderKind seq_kind = SeqEncoderKind::kBiLstm;
  std::size_t seq_hidden = 64;
  std::vector<std::size_t> img_widths = {8, 16, 32};
  std::size_t blocks_per_stage = 2;
  // Composite images are block-mean downsampled by this factor on input.
  std::size_t img_input_pool = 8;
  std::size_t repr_dim = 64;   // encoder output
  std::size_t proj_dim = 64;   // shared latent space
  std::size_t cls_hidden = 128;
  std::size_t num_classes = 2;
  std::size_t input_dim = 0;   // sequence row width D
  Views views = Views::kBoth;
  std::uint64_t seed = 0;

  bool has_sequence() const { return views != Views::kImage; }
  bool has_image() const { return views != Views::kSequence; }
  std::size_t seq_state_dim() const {
    return seq_kind == SeqEncoderKind::kBiLstm ? 2 * seq_hidden : seq_hidden;
  }
  std::size_t image_height() const { return kCompositeHeight / img_input_pool; }
  std::size_t image_width() const { return kCompositeWidth / img_input_pool; }

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v < 1) throw UsageError(std::string("model config: ") + what + " must be >= 1");
    };
    positive(seq_hidden, "seq_hidden");
    positive(blocks_per_stage, "blocks_per_stage");
    positive(repr_dim, "repr_dim");
    positive(proj_dim, "proj_dim");
    positive(cls_hidden, "cls_hidden");
    if (num_classes < 2) throw UsageError("model config: need at least 2 classes");
    if (has_sequence()) positive(input_dim, "input_dim");
    if (img_widths.empty()) throw UsageError("model config: img_widths is empty");
    for (std::size_t w : img_widths) positive(w, "image stage width");
    if (img_input_pool == 0 || kCompositeHeight % img_input_pool != 0 ||
        kCompositeWidth % img_input_pool != 0) {
      throw UsageError("model config: img_input_pool must divide 256");
    }
  }

  // Architecture fingerprint (the init seed is excluded).
  std::string canonical() const {
    std::ostringstream os;
    os << "seq=" << (seq_kind == SeqEncoderKind::kBiLstm ? "bilstm" : "lstm") << ";hs=" << seq_hidden
       << ";widths=";
    for (std::size_t w : img_widths) os << w << ',';
    os << ";blocks=" << blocks_per_stage << ";pool=" << img_input_pool << ";dr=" << repr_dim
       << ";dz=" << proj_dim << ";cls=" << cls_hidden << ";C=" << num_classes
       << ";D=" << input_dim << ";views=" << static_cast<int>(views);
    return os.str();
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

template <typename T>
using ParameterStore = std::map<std::string, ad::Parameter<T>>;

// Time-major sequence batch: row t*B + b holds event t of sample b.
template <typename T>
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t width = 0;
  ad::BasicTensor<T> steps;           // (L*B) x D
  std::vector<std::uint8_t> mask;     // L x B
};

template <typename T>
SequenceBatch<T> make_sequence_batch(const std::vector<const SequenceTensor*>& items) {
  if (items.empty()) throw UsageError("sequence batch is empty");
  SequenceBatch<T> out;
  out.batch = items.size();
  out.length = items[0]->length;
  out.width = items[0]->width;
  out.steps = ad::BasicTensor<T>({out.length * out.batch, out.width});
  out.mask.assign(out.length * out.batch, 0);
  for (std::size_t b = 0; b < out.batch; ++b) {
    const SequenceTensor& s = *items[b];
    if (s.length != out.length || s.width != out.width) {
      throw UsageError("sequence batch: non-uniform L or D");
    }
    for (std::size_t t = 0; t < out.length; ++t) {
      for (std::size_t d = 0; d < out.width; ++d) {
        out.steps.at(t * out.batch + b, d) = static_cast<T>(s.at(t, d));
      }
      out.mask[t * out.batch + b] = s.mask[t];
    }
  }
  return out;
}

// [B,3,H,W] from already downsampled images.
template <typename T>
ad::BasicTensor<T> make_image_batch(const std::vector<const Image*>& items) {
  if (items.empty()) throw UsageError("image batch is empty");
  const Image& first = *items[0];
  ad::BasicTensor<T> out({items.size(), first.channels, first.height, first.width});
  const std::size_t plane = first.data.size();
  for (std::size_t b = 0; b < items.size(); ++b) {
    if (items[b]->data.size() != plane || items[b]->height != first.height) {
      throw UsageError("image batch: non-uniform image shapes");
    }
    for (std::size_t i = 0; i < plane; ++i) out[b * plane + i] = static_cast<T>(items[b]->data[i]);
  }
  return out;
}

template <typename T>
class CareModel {
 public:
  using Var = ad::Var<T>;
  using Graph = ad::Graph<T>;
  using Tensor = ad::BasicTensor<T>;

  explicit CareModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterStore<T>& parameters() noexcept { return params_; }
  const ParameterStore<T>& parameters() const noexcept { return params_; }

  ad::Parameter<T>& param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("no parameter named " + name);
    return it->second;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.value.size();
    return n;
  }

  // Final recurrent state(s), masked steps leave the state untouched,
  // then a linear map to repr_dim. Output [B, repr_dim].
  Var seq_encode(Graph& g, const SequenceBatch<T>& batch) {
    if (!cfg_.has_sequence()) throw UsageError("seq_encode: model has no sequence branch");
    if (batch.width != cfg_.input_dim) {
      throw UsageError("seq_encode: row width " + std::to_string(batch.width) +
                       " does not match config D=" + std::to_string(cfg_.input_dim));
    }
    Var steps = g.constant(batch.steps);
    std::vector<Var> finals{run_lstm(g, steps, batch, "seq.fwd", false)};
    if (cfg_.seq_kind == SeqEncoderKind::kBiLstm) {
      finals.push_back(run_lstm(g, steps, batch, "seq.bwd", true));
    }
    Var state = finals.size() == 1 ? finals[0] : ad::concat(finals, 1);
    return linear(g, state, "seq.out");
  }

  // stem conv -> residual stages (stride-2 between stages) -> global average
  // pool -> linear. Accepts full 3x256x512 composites or pre-pooled inputs.
  Var img_encode(Graph& g, const Tensor& images) {
    if (!cfg_.has_image()) throw UsageError("img_encode: model has no image branch");
    const ad::Shape& s = images.shape();
    if (s.size() != 4 || s[1] != 3) {
      throw UsageError("img_encode: expected [B,3,H,W], got " + ad::shape_str(s));
    }
    Var x = g.constant(images);
    if (s[2] == kCompositeHeight && s[3] == kCompositeWidth && cfg_.img_input_pool > 1) {
      x = ad::avg_pool2d(x, cfg_.img_input_pool);
    } else if (s[2] != cfg_.image_height() || s[3] != cfg_.image_width()) {
      throw UsageError("img_encode: image shape " + ad::shape_str(s) + " matches neither " +
                       "the composite size nor the pooled input size");
    }
    x = ad::relu(conv(g, x, "img.stem", 1, 1));
    if (x.dim(2) >= 2 && x.dim(3) >= 2) x = ad::maxpool2d(x, 2, 2);
    for (std::size_t s_idx = 0; s_idx < cfg_.img_widths.size(); ++s_idx) {
      for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
        const std::string name = "img.s" + std::to_string(s_idx) + ".b" + std::to_string(b);
        const std::size_t stride = (s_idx > 0 && b == 0) ? 2 : 1;
        Var y = ad::relu(conv(g, x, name + ".conv1", stride, 1));
        y = conv(g, y, name + ".conv2", 1, 1);
        Var shortcut = params_.count(name + ".short.w") ? conv(g, x, name + ".short", stride, 0) : x;
        x = ad::relu(ad::add(y, shortcut));
      }
    }
    return linear(g, ad::global_avg_pool(x), "img.out");
  }

  // One affine layer per view followed by row l2-normalization.
  Var project(Graph& g, Var r, View view) {
    return ad::l2_normalize_rows(linear(g, r, view == View::kSequence ? "proj_s" : "proj_i"));
  }

  Var classify(Graph& g, std::optional<Var> r_seq, std::optional<Var> r_img) {
    Var in;
    if (r_seq && r_img) {
      if (r_seq->dim(0) != r_img->dim(0)) {
        throw UsageError("classify: batch sizes " + std::to_string(r_seq->dim(0)) + " and " +
                         std::to_string(r_img->dim(0)) + " differ");
      }
      in = ad::concat<T>({*r_seq, *r_img}, 1);
    } else if (r_seq) {
      in = *r_seq;
    } else if (r_img) {
      in = *r_img;
    } else {
      throw UsageError("classify: no encoder output");
    }
    return linear(g, ad::relu(linear(g, in, "cls.hidden")), "cls.out");
  }

  struct Outputs {
    std::optional<Var> r_seq, r_img, z_seq, z_img;
    Var logits;
  };

  Outputs forward(Graph& g, const SequenceBatch<T>* seq, const Tensor* images, bool project_views) {
    Outputs out;
    if (cfg_.has_sequence()) {
      if (!seq) throw UsageError("forward: sequence batch required");
      out.r_seq = seq_encode(g, *seq);
      if (project_views) out.z_seq = project(g, *out.r_seq, View::kSequence);
    }
    if (cfg_.has_image()) {
      if (!images) throw UsageError("forward: image batch required");
      out.r_img = img_encode(g, *images);
      if (project_views) out.z_img = project(g, *out.r_img, View::kImage);
    }
    out.logits = classify(g, out.r_seq, out.r_img);
    return out;
  }

 private:
  void add_param(const std::string& name, ad::Shape shape, double bound, std::mt19937_64& rng) {
    Tensor t(shape);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
    params_.emplace(name, ad::Parameter<T>(std::move(t)));
  }

  void add_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double k = 1.0 / std::sqrt(static_cast<double>(in));
    add_param(name + ".w", {in, out}, k, rng);
    add_param(name + ".b", {out}, k, rng);
  }

  void add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                std::mt19937_64& rng) {
    // He-uniform weights and zero bias: there is no normalization layer, and the
    // 1/sqrt(fan_in) bound shrinks sparse images to near-constant features.
    const double k = std::sqrt(6.0 / static_cast<double>(in * kernel * kernel));
    add_param(name + ".w", {out, in, kernel, kernel}, k, rng);
    add_param(name + ".b", {out}, 0.0, rng);
  }

  void add_lstm(const std::string& name, std::mt19937_64& rng) {
    const std::size_t h = cfg_.seq_hidden;
    const double k = 1.0 / std::sqrt(static_cast<double>(h));
    add_param(name + ".w_x", {cfg_.input_dim, 4 * h}, k, rng);
    add_param(name + ".w_h", {h, 4 * h}, k, rng);
    add_param(name + ".b", {4 * h}, k, rng);
    // Gate order [input, forget, cell, output]; forget bias starts at 1.
    auto& b = params_.at(name + ".b").value;
    for (std::size_t i = h; i < 2 * h; ++i) b[i] = T{1};
  }

  void init() {
    std::mt19937_64 rng(cfg_.seed);
    if (cfg_.has_sequence()) {
      add_lstm("seq.fwd", rng);
      if (cfg_.seq_kind == SeqEncoderKind::kBiLstm) add_lstm("seq.bwd", rng);
      add_linear("seq.out", cfg_.seq_state_dim(), cfg_.repr_dim, rng);
      add_linear("proj_s", cfg_.repr_dim, cfg_.proj_dim, rng);
    }
    if (cfg_.has_image()) {
      add_conv("img.stem", 3, cfg_.img_widths[0], 3, rng);
      std::size_t in = cfg_.img_widths[0];
      for (std::size_t s = 0; s < cfg_.img_widths.size(); ++s) {
        const std::size_t w = cfg_.img_widths[s];
        for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
          const std::string name = "img.s" + std::to_string(s) + ".b" + std::to_string(b);
          const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
          add_conv(name + ".conv1", in, w, 3, rng);
          add_conv(name + ".conv2", w, w, 3, rng);
          if (stride != 1 || in != w) add_conv(name + ".short", in, w, 1, rng);
          in = w;
        }
      }
      add_linear("img.out", in, cfg_.repr_dim, rng);
      add_linear("proj_i", cfg_.repr_dim, cfg_.proj_dim, rng);
    }
    const std::size_t cls_in =
        (cfg_.has_sequence() ? cfg_.repr_dim : 0) + (cfg_.has_image() ? cfg_.repr_dim : 0);
    add_linear("cls.hidden", cls_in, cfg_.cls_hidden, rng);
    add_linear("cls.out", cfg_.cls_hidden, cfg_.num_classes, rng);
  }

  Var linear(Graph& g, Var x, const std::string& name) {
    Var w = g.parameter(param(name + ".w"));
    Var b = g.parameter(param(name + ".b"));
    return ad::add(ad::matmul(x, w), b);
  }

  Var conv(Graph& g, Var x, const std::string& name, std::size_t stride, std::size_t pad) {
    return ad::conv2d(x, g.parameter(param(name + ".w")), g.parameter(param(name + ".b")), stride,
                      pad);
  }

  Var run_lstm(Graph& g, Var steps, const SequenceBatch<T>& batch, const std::string& name,
               bool reverse) {
    const std::size_t h = cfg_.seq_hidden, bsz = batch.batch, len = batch.length;
    Var w_x = g.parameter(param(name + ".w_x"));
    Var w_h = g.parameter(param(name + ".w_h"));
    Var bias = g.parameter(param(name + ".b"));
    Var xw = ad::add(ad::matmul(steps, w_x), bias);
    Var hs = g.constant(Tensor({bsz, h}));
    Var cs = g.constant(Tensor({bsz, h}));
    for (std::size_t k = 0; k < len; ++k) {
      const std::size_t t = reverse ? len - 1 - k : k;
      std::size_t live = 0;
      for (std::size_t b = 0; b < bsz; ++b) live += batch.mask[t * bsz + b];
      if (live == 0) continue;
      Var gates = ad::add(ad::slice(xw, 0, t * bsz, (t + 1) * bsz), ad::matmul(hs, w_h));
      Var in_gate = ad::sigmoid(ad::slice(gates, 1, 0, h));
      Var forget = ad::sigmoid(ad::slice(gates, 1, h, 2 * h));
      Var cell = ad::tanh(ad::slice(gates, 1, 2 * h, 3 * h));
      Var out_gate = ad::sigmoid(ad::slice(gates, 1, 3 * h, 4 * h));
      Var c_new = ad::add(ad::mul(forget, cs), ad::mul(in_gate, cell));
      Var h_new = ad::mul(out_gate, ad::tanh(c_new));
      if (live == bsz) {
        cs = c_new;
        hs = h_new;
        continue;
      }
      // m * new + (1 - m) * old is exact for m in {0, 1}.
      Tensor keep({bsz, h}), hold({bsz, h});
      for (std::size_t b = 0; b < bsz; ++b) {
        const T m = batch.mask[t * bsz + b] ? T{1} : T{0};
        for (std::size_t j = 0; j < h; ++j) {
          keep.at(b, j) = m;
          hold.at(b, j) = T{1} - m;
        }
      }
      Var vk = g.constant(std::move(keep));
      Var vh = g.constant(std::move(hold));
      cs = ad::add(ad::mul(vk, c_new), ad::mul(vh, cs));
      hs = ad::add(ad::mul(vk, h_new), ad::mul(vh, hs));
    }
    return hs;
  }

  ModelConfig cfg_;
  ParameterStore<T> params_;
};

// ---------------------------------------------------------------------------
// Checkpoints. Little-endian:
//   "CAREM1" | u16 version | u64 config hash | u32 count
//   per parameter: u32 name length | name | u32 rank | rank x u32 extents
//                  | f32 payload

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void ck_put(std::ostream& os, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t ck_get(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw DataError("checkpoint: unexpected EOF");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(std::ostream& os, const ParameterStore<T>& params, const ModelConfig& cfg) {
  os.write("CAREM1", 6);
  detail::ck_put(os, kCheckpointVersion, 2);
  detail::ck_put(os, cfg.hash(), 8);
  detail::ck_put(os, params.size(), 4);
  for (const auto& [name, p] : params) {
    detail::ck_put(os, name.size(), 4);
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::ck_put(os, p.value.rank(), 4);
    for (std::size_t e : p.value.shape()) detail::ck_put(os, e, 4);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const float f = static_cast<float>(p.value[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::ck_put(os, bits, 4);
    }
  }
  if (!os) throw IoError("checkpoint: write failed");
}

template <typename T>
ParameterStore<T> load_checkpoint(std::istream& is, const ModelConfig& cfg) {
  char magic[6];
  is.read(magic, 6);
  if (is.gcount() != 6) throw DataError("checkpoint: unexpected EOF");
  if (std::string(magic, 6) != "CAREM1") throw DataError("checkpoint: bad magic");
  const auto version = detail::ck_get(is, 2);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  if (detail::ck_get(is, 8) != cfg.hash()) throw DataError("checkpoint: config hash mismatch");
  const auto count = detail::ck_get(is, 4);
  ParameterStore<T> out;
  for (std::uint64_t n = 0; n < count; ++n) {
    const auto len = detail::ck_get(is, 4);
    if (len > 4096) throw DataError("checkpoint: corrupt parameter name");
    std::string name(len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(len));
    if (static_cast<std::uint64_t>(is.gcount()) != len) throw DataError("checkpoint: unexpected EOF");
    const auto rank = detail::ck_get(is, 4);
    if (rank == 0 || rank > 8) throw DataError("checkpoint: corrupt rank for " + name);
    ad::Shape shape;
    std::uint64_t total = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      const auto e = detail::ck_get(is, 4);
      if (e == 0) throw DataError("checkpoint: zero extent for " + name);
      shape.push_back(static_cast<std::size_t>(e));
      total *= e;
      if (total > (1ULL << 32)) throw DataError("checkpoint: corrupt extents for " + name);
    }
    std::vector<T> values(static_cast<std::size_t>(total));
    for (auto& v : values) {
      const auto bits = static_cast<std::uint32_t>(detail::ck_get(is, 4));
      float f;
      std::memcpy(&f, &bits, 4);
      v = static_cast<T>(f);
    }
    out.emplace(name, ad::Parameter<T>(ad::BasicTensor<T>(std::move(shape), std::move(values))));
  }
  return out;
}

// Replaces the model's parameters, checking names and shapes.
template <typename T>
void assign_parameters(CareModel<T>& model, const ParameterStore<T>& loaded) {
  auto& params = model.parameters();
  if (loaded.size() != params.size()) throw DataError("checkpoint: parameter count mismatch");
  for (auto& [name, p] : params) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw DataError("checkpoint: missing parameter " + name);
    if (it->second.value.shape() != p.value.shape()) {
      throw DataError("checkpoint: shape mismatch for " + name);
    }
    p.value = it->second.value;
  }
}

template <typename T>
void save_checkpoint(const std::string& path, const ParameterStore<T>& params,
                     const ModelConfig& cfg) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint '" + path + "'");
  save_checkpoint(os, params, cfg);
}

template <typename T>
ParameterStore<T> load_checkpoint(const std::string& path, const ModelConfig& cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  return load_checkpoint<T>(is, cfg);
}

}  // namespace care
