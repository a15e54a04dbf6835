#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "iblm/diagnostics.hpp"
#include "iblm/error.hpp"
#include "iblm/ops.hpp"
#include "iblm/tape.hpp"

namespace iblm {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Ordered collection of named parameter tensors.
class ParameterSet {
 public:
  void add(std::string name, Tensor value) {
    if (index_.count(name)) throw ConfigError("parameter '" + name + "' already exists");
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& operator[](const std::string& name) { return entries_.at(lookup(name)).value; }
  const Tensor& operator[](const std::string& name) const { return entries_.at(lookup(name)).value; }

  std::vector<NamedTensor>& entries() noexcept { return entries_; }
  const std::vector<NamedTensor>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  // Same names and shapes, all values zero.
  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& e : entries_) out.add(e.name, Tensor(e.value.shape(), 0.0));
    return out;
  }

  bool same_layout(const ParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name || entries_[i].value.shape() != other.entries_[i].value.shape()) {
        return false;
      }
    }
    return true;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (!a.same_layout(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.entries_[i].value != b.entries_[i].value) return false;
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<NamedTensor> entries_;
  std::map<std::string, std::size_t> index_;
};

// Parameters placed on a tape as differentiable leaves.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParameterSet& params, bool requires_grad = true) : params_(&params) {
    vars_.reserve(params.size());
    for (const auto& e : params.entries()) vars_.push_back(tape.leaf(e.value, requires_grad));
  }

  Var operator[](const std::string& name) const {
    const auto& entries = params_->entries();
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name == name) return vars_[i];
    throw ConfigError("unknown parameter '" + name + "'");
  }

  const std::vector<Var>& vars() const noexcept { return vars_; }
  const ParameterSet& params() const noexcept { return *params_; }

  // Current gradient of every parameter; zeros where backward did not reach.
  ParameterSet gradients() const {
    ParameterSet out;
    const auto& entries = params_->entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      out.add(entries[i].name, vars_[i].has_grad() ? vars_[i].grad() : Tensor(entries[i].value.shape(), 0.0));
    }
    return out;
  }

 private:
  const ParameterSet* params_;
  std::vector<Var> vars_;
};

// theta + sign * delta, elementwise.
inline ParameterSet shifted_params(const ParameterSet& params, const ParameterSet& delta, int sign) {
  if (sign != 1 && sign != -1) throw DomainError("shifted-params: sign must be +1 or -1");
  if (!params.same_layout(delta)) throw ShapeError("shifted-params", Shape{params.size()}, Shape{delta.size()});
  ParameterSet out = params;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& dst = out.entries()[i].value;
    const auto& d = delta.entries()[i].value;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += static_cast<double>(sign) * d[j];
  }
  return out;
}

struct ActivationBundle {
  std::vector<Var> layers;  // R_1 .. R_L, tokens x features
  Var output;               // logits or regression output
};

enum class Activation { relu, gelu };

inline Var activate(Activation a, Var x) { return a == Activation::relu ? relu(x) : gelu(x); }

// ---------------------------------------------------------------------------
// Two-layer MLP: x -> act(x W1 + b1) -> h W2 + b2. The hidden activation is R_1.

struct MlpConfig {
  std::size_t input_dim = 10;
  std::size_t hidden_dim = 32;
  std::size_t output_dim = 4;
  Activation activation = Activation::relu;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim == 0 || hidden_dim == 0 || output_dim == 0) throw ConfigError("mlp: dimensions must be positive");
  }
};

inline ParameterSet init_mlp(const MlpConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  ParameterSet p;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(c.input_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(c.hidden_dim));
  p.add("fc1.w", Tensor::randn({c.input_dim, c.hidden_dim}, rng, s1));
  p.add("fc1.b", Tensor::randn({1, c.hidden_dim}, rng, s1));
  p.add("fc2.w", Tensor::randn({c.hidden_dim, c.output_dim}, rng, s2));
  p.add("fc2.b", Tensor::randn({1, c.output_dim}, rng, s2));
  return p;
}

// Per-tensor initialization scale, used to size parameter shifts.
inline double mlp_init_scale(const MlpConfig& c, const std::string& name) {
  return 1.0 / std::sqrt(static_cast<double>(name.rfind("fc1", 0) == 0 ? c.input_dim : c.hidden_dim));
}

// Gaussian shift with standard deviation `relative` times each tensor's init scale.
inline ParameterSet mlp_shift(const MlpConfig& c, double relative, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet p = init_mlp(c).zeros_like();
  for (auto& e : p.entries()) e.value = Tensor::randn(e.value.shape(), rng, relative * mlp_init_scale(c, e.name));
  return p;
}

inline ActivationBundle mlp_forward(const MlpConfig& c, const BoundParams& params, Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.dim(1) != c.input_dim) throw ShapeError("mlp-forward", xv.shape(), Shape{0, c.input_dim});
  Var h = activate(c.activation, add(matmul(x, params["fc1.w"]), params["fc1.b"]));
  Var y = add(matmul(h, params["fc2.w"]), params["fc2.b"]);
  return {{h}, y};
}

// ---------------------------------------------------------------------------
// Decoder-only transformer with pre-norm blocks, learned absolute positions and
// optional U-Net style skips: the output of block l (l <= L/2), scaled by a
// learned gain initialized to zero, is added to the input of block L+1-l.

struct TransformerConfig {
  int layers = 4;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t vocab_size = 256;
  std::size_t context_length = 128;
  bool unet_skips = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (layers < 1 || model_dim == 0 || heads == 0 || vocab_size == 0 || context_length == 0) {
      throw ConfigError("transformer: sizes must be positive");
    }
    if (model_dim % heads != 0) throw ConfigError("transformer: model_dim must be divisible by heads");
    if (unet_skips && layers % 2 != 0) throw ConfigError("transformer: unet skips need an even layer count");
  }
};

inline std::string block_prefix(int layer) { return "blocks." + std::to_string(layer) + "."; }

inline ParameterSet init_transformer(const TransformerConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  const std::size_t d = c.model_dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double s4d = 1.0 / std::sqrt(static_cast<double>(4 * d));
  ParameterSet p;
  p.add("tok_emb", Tensor::randn({c.vocab_size, d}, rng, sd));
  p.add("pos_emb", Tensor::randn({c.context_length, d}, rng, sd));
  for (int l = 1; l <= c.layers; ++l) {
    const auto pre = block_prefix(l);
    p.add(pre + "ln1.g", Tensor({1, d}, 1.0));
    p.add(pre + "ln1.b", Tensor({1, d}, 0.0));
    p.add(pre + "attn.qkv.w", Tensor::randn({d, 3 * d}, rng, sd));
    p.add(pre + "attn.qkv.b", Tensor({1, 3 * d}, 0.0));
    p.add(pre + "attn.proj.w", Tensor::randn({d, d}, rng, sd));
    p.add(pre + "attn.proj.b", Tensor({1, d}, 0.0));
    p.add(pre + "ln2.g", Tensor({1, d}, 1.0));
    p.add(pre + "ln2.b", Tensor({1, d}, 0.0));
    p.add(pre + "mlp.fc.w", Tensor::randn({d, 4 * d}, rng, sd));
    p.add(pre + "mlp.fc.b", Tensor({1, 4 * d}, 0.0));
    p.add(pre + "mlp.proj.w", Tensor::randn({4 * d, d}, rng, s4d));
    p.add(pre + "mlp.proj.b", Tensor({1, d}, 0.0));
  }
  p.add("ln_f.g", Tensor({1, d}, 1.0));
  p.add("ln_f.b", Tensor({1, d}, 0.0));
  p.add("head.w", Tensor::randn({d, c.vocab_size}, rng, sd));
  if (c.unet_skips) {
    for (int l = 1; l <= c.layers / 2; ++l) p.add("skip." + std::to_string(l) + ".gain", Tensor({1, 1}, 0.0));
  }
  return p;
}

// tokens: batch * seq ids, row-major by sequence.
inline ActivationBundle transformer_forward(const TransformerConfig& c, const BoundParams& params,
                                           std::span<const int> tokens, std::size_t batch, std::size_t seq) {
  if (seq == 0 || batch == 0 || tokens.size() != batch * seq) {
    throw ShapeError("transformer-forward", Shape{tokens.size()}, Shape{batch, seq});
  }
  if (seq > c.context_length) {
    throw ShapeError("transformer-forward", Shape{batch, seq}, "sequence longer than context " + std::to_string(c.context_length));
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw ShapeError("transformer-forward", Shape{batch, seq}, "token id " + std::to_string(id) + " out of range");
    }
  }
  std::vector<int> positions(batch * seq);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % seq);

  Var x = add(embedding(params["tok_emb"], tokens), embedding(params["pos_emb"], positions));
  ActivationBundle out;
  for (int l = 1; l <= c.layers; ++l) {
    if (c.unet_skips && l > c.layers / 2) {
      const int src = c.layers + 1 - l;
      x = add(x, mul(out.layers[static_cast<std::size_t>(src - 1)], params["skip." + std::to_string(src) + ".gain"]));
    }
    const auto pre = block_prefix(l);
    Var h = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"]);
    Var qkv = add(matmul(h, params[pre + "attn.qkv.w"]), params[pre + "attn.qkv.b"]);
    Var att = causal_attention(qkv, batch, seq, c.heads);
    x = add(x, add(matmul(att, params[pre + "attn.proj.w"]), params[pre + "attn.proj.b"]));
    h = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"]);
    Var m = gelu(add(matmul(h, params[pre + "mlp.fc.w"]), params[pre + "mlp.fc.b"]));
    x = add(x, add(matmul(m, params[pre + "mlp.proj.w"]), params[pre + "mlp.proj.b"]));
    out.layers.push_back(x);
  }
  out.output = matmul(layer_norm(x, params["ln_f.g"], params["ln_f.b"]), params["head.w"]);
  return out;
}

// Maps a parameter name to its diagnostic group (layer, kind).
inline diag::GroupId parameter_group(const std::string& name) {
  using diag::ParamKind;
  if (name == "tok_emb" || name == "pos_emb") return {0, ParamKind::embedding};
  if (name.rfind("blocks.", 0) == 0) {
    const auto dot = name.find('.', 7);
    const int layer = std::stoi(name.substr(7, dot - 7));
    const auto rest = name.substr(dot + 1);
    if (rest.rfind("attn.", 0) == 0 || rest.rfind("ln1.", 0) == 0) return {layer, ParamKind::attention};
    if (rest.rfind("mlp.", 0) == 0 || rest.rfind("ln2.", 0) == 0) return {layer, ParamKind::mlp};
  }
  return {0, ParamKind::other};
}

}  // namespace iblm
