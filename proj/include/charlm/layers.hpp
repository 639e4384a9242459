#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "charlm/ops.hpp"
#include "charlm/rng.hpp"

namespace charlm {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

// ---- initialisers ----------------------------------------------------------

template <typename T>
Tensor<T> init_uniform(Shape shape, double limit, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

// Glorot-scaled normal: stddev sqrt(2 / (fan_in + fan_out)).
template <typename T>
Tensor<T> init_glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> v(fan_in * fan_out);
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>({fan_in, fan_out}, std::move(v), true);
}

template <typename T>
Tensor<T> param_zeros(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> param_full(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value, true);
}

// ---- embedding / dense / norm ---------------------------------------------

template <typename T>
struct Embedding {
  Tensor<T> table;  // [V, E]

  static Embedding init(std::size_t vocab, std::size_t width, Rng& rng) {
    return {init_uniform<T>({vocab, width}, 0.05, rng)};
  }

  Tensor<T> operator()(std::span<const std::int32_t> ids, const Shape& id_shape) const {
    return embedding(ids, id_shape, table);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const { out.push_back({prefix + ".table", table}); }
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], undefined when the layer has none

  static Linear init(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    Linear l{init_glorot<T>(in, out, rng), {}};
    if (with_bias) l.bias = param_zeros<T>({out});
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }

  void zero() {
    for (auto& v : weight.mutable_values()) v = T{};
    if (bias.defined()) {
      for (auto& v : bias.mutable_values()) v = T{};
    }
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNorm init(std::size_t width) { return {param_full<T>({width}, T{1}), param_zeros<T>({width})}; }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---- LSTM ------------------------------------------------------------------

template <typename T>
struct LstmState {
  Tensor<T> h;  // [batch, hidden]
  Tensor<T> c;  // [batch, hidden]

  static LstmState zeros(std::size_t batch, std::size_t hidden) {
    return {Tensor<T>::zeros({batch, hidden}), Tensor<T>::zeros({batch, hidden})};
  }

  LstmState detach() const { return {h.detach(), c.detach()}; }
};

// Gate blocks along the 4H axis are ordered input, forget, candidate, output.
template <typename T>
struct LstmCell {
  Tensor<T> w_input;   // [in, 4H]
  Tensor<T> w_hidden;  // [H, 4H]
  Tensor<T> bias;      // [4H]
  std::size_t hidden = 0;

  static LstmCell init(std::size_t in, std::size_t hidden, Rng& rng) {
    LstmCell cell{init_glorot<T>(in, 4 * hidden, rng), init_glorot<T>(hidden, 4 * hidden, rng),
                  param_zeros<T>({4 * hidden}), hidden};
    auto b = cell.bias.mutable_values();
    for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = T{1};
    return cell;
  }

  // One step from input pre-activations x·W_input ([batch, 4H]); lets a caller
  // project a whole sequence with a single matmul.
  LstmState<T> step_projected(const Tensor<T>& x_proj, const LstmState<T>& state) const {
    if (state.h.rank() != 2 || state.h.dim(1) != hidden || state.c.shape() != state.h.shape()) {
      throw ShapeMismatch("lstm state " + to_string(state.h.shape()) + " for hidden size " + std::to_string(hidden));
    }
    const auto z = add(add(x_proj, matmul(state.h, w_hidden)), bias);
    const auto i = sigmoid(slice(z, -1, 0, hidden));
    const auto f = sigmoid(slice(z, -1, hidden, 2 * hidden));
    const auto g = tanh(slice(z, -1, 2 * hidden, 3 * hidden));
    const auto o = sigmoid(slice(z, -1, 3 * hidden, 4 * hidden));
    auto c = add(mul(f, state.c), mul(i, g));
    auto h = mul(o, tanh(c));
    return {std::move(h), std::move(c)};
  }

  LstmState<T> step(const Tensor<T>& x, const LstmState<T>& state) const {
    return step_projected(matmul(x, w_input), state);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".w_input", w_input});
    out.push_back({prefix + ".w_hidden", w_hidden});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---- positional encodings --------------------------------------------------

enum class PositionMode { absolute, relative };
enum class PositionCombine { add, concat };

// Row p holds sin(p / 10000^(2i/d)) at column 2i and the matching cos at
// column 2i+1, for positions first .. first + count - 1.
template <typename T>
Tensor<T> sinusoid_table(std::size_t count, std::size_t width, std::size_t first = 0) {
  std::vector<T> v(count * width);
  for (std::size_t p = 0; p < count; ++p) {
    const double pos = static_cast<double>(first + p);
    for (std::size_t i = 0; 2 * i < width; ++i) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(width));
      v[p * width + 2 * i] = static_cast<T>(std::sin(angle));
      if (2 * i + 1 < width) v[p * width + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>({count, width}, std::move(v));
}

template <typename T>
struct PositionalEncoding {
  PositionMode mode = PositionMode::absolute;
  PositionCombine combine = PositionCombine::add;
  Tensor<T> table;  // [max_positions, width]

  static PositionalEncoding make(PositionMode mode, PositionCombine combine, std::size_t max_positions,
                                 std::size_t width) {
    return {mode, combine, sinusoid_table<T>(max_positions, width)};
  }

  std::size_t width() const { return table.dim(1); }

  // x is [B, T, E]; adds or concatenates the first T rows of the table.
  Tensor<T> apply(const Tensor<T>& x) const {
    const std::size_t len = x.dim(1);
    if (len > table.dim(0)) throw ShapeMismatch("sequence of " + std::to_string(len) + " exceeds positional table");
    const auto rows = slice(table, 0, 0, len);
    if (combine == PositionCombine::add) return add(x, rows);
    std::vector<Tensor<T>> copies(x.dim(0), reshape(rows, {1, len, width()}));
    return concat<T>({x, concat(copies, 0)}, -1);
  }
};

// ---- attention -------------------------------------------------------------

namespace detail {

// [B, T, D] -> [B, h, T, D/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  return permute(reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3});
}

// [B, h, T, dk] -> [B, T, h*dk]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::size_t b = x.dim(0), h = x.dim(1), t = x.dim(2), dk = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, t, h * dk});
}

}  // namespace detail

enum class AttentionMask { none, causal };

struct AttentionContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const AttentionContext& ctx) {
  if (!ctx.training || ctx.dropout <= 0.0 || ctx.rng == nullptr) return x;
  return dropout(x, ctx.dropout, *ctx.rng);
}

template <typename T>
struct AttentionOutput {
  Tensor<T> output;   // [B, Tq, D]
  Tensor<T> weights;  // [B, h, Tq, Tk]
};

// Projections are bias-free [D, D] matrices; head k owns columns
// [k*dk, (k+1)*dk) of W_Q, W_K and W_V.
template <typename T>
struct AttentionHeadParams {
  Linear<T> query, key, value, output;
  std::size_t heads = 1;

  static AttentionHeadParams init(std::size_t model_dim, std::size_t heads, Rng& rng) {
    if (heads == 0 || model_dim % heads != 0) {
      throw InvalidConfig("model dim " + std::to_string(model_dim) + " not divisible by " + std::to_string(heads) + " heads");
    }
    return {Linear<T>::init(model_dim, model_dim, rng, false), Linear<T>::init(model_dim, model_dim, rng, false),
            Linear<T>::init(model_dim, model_dim, rng, false), Linear<T>::init(model_dim, model_dim, rng, false),
            heads};
  }

  std::size_t head_dim() const { return query.weight.dim(1) / heads; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    query.collect(prefix + ".query", out);
    key.collect(prefix + ".key", out);
    value.collect(prefix + ".value", out);
    output.collect(prefix + ".output", out);
  }
};

// softmax((Xq W_Q)(Xk W_K)^T / sqrt(dk)) (Xv W_V) per head, heads concatenated
// and projected by W_O. Causal masking hides key j from query i when j > i.
template <typename T>
AttentionOutput<T> multi_head_attention(const Tensor<T>& xq, const Tensor<T>& xk, const Tensor<T>& xv,
                                        const AttentionHeadParams<T>& p, AttentionMask mask,
                                        const AttentionContext& ctx = {}) {
  if (xq.rank() != 3 || xk.rank() != 3 || xv.rank() != 3 || xk.shape() != xv.shape() || xq.dim(0) != xk.dim(0) ||
      xq.dim(2) != xk.dim(2)) {
    throw ShapeMismatch("attention inputs " + to_string(xq.shape()) + ", " + to_string(xk.shape()) + ", " +
                        to_string(xv.shape()));
  }
  const std::size_t tq = xq.dim(1), tk = xk.dim(1);
  const auto q = detail::split_heads(p.query(xq), p.heads);
  const auto k = detail::split_heads(p.key(xk), p.heads);
  const auto v = detail::split_heads(p.value(xv), p.heads);
  const auto scores = scale(matmul(q, transpose_last2(k)), static_cast<T>(1.0 / std::sqrt(double(p.head_dim()))));
  Tensor<T> weights;
  if (mask == AttentionMask::causal) {
    if (tq > tk) throw ShapeMismatch("causal attention needs at least as many keys as queries");
    weights = masked_softmax(scores, causal_mask(tq, tk - tq));
  } else {
    weights = softmax(scores, -1);
  }
  const auto context = matmul(maybe_dropout(weights, ctx), v);
  return {p.output(detail::merge_heads(context)), weights};
}

// Relative-position attention with segment memory. Adds to the absolute
// parameters a projection for the sinusoidal distance encoding and two
// learned global biases: one on content scores, one on position scores.
template <typename T>
struct RelativeAttentionParams {
  AttentionHeadParams<T> base;
  Linear<T> position;    // W_R [D, D]
  Tensor<T> content_bias;   // [D], read per head as [h, dk]
  Tensor<T> position_bias;  // [D]

  static RelativeAttentionParams init(std::size_t model_dim, std::size_t heads, Rng& rng) {
    auto base = AttentionHeadParams<T>::init(model_dim, heads, rng);
    return {std::move(base), Linear<T>::init(model_dim, model_dim, rng, false), param_zeros<T>({model_dim}),
            param_zeros<T>({model_dim})};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    base.collect(prefix, out);
    position.collect(prefix + ".position", out);
    out.push_back({prefix + ".content_bias", content_bias});
    out.push_back({prefix + ".position_bias", position_bias});
  }
};

// Queries come from the current segment h [B, L, D]; keys and values from
// mem ⊕ h, where mem [B, M, D] is treated as a constant. Query j sees all M
// memory slots and current keys 0..j. The score for query i and key j is
//   (q_i + u)·k_j + (q_i + v)·W_R r_(M+i-j)
// with r_d the sinusoidal encoding of distance d.
template <typename T>
AttentionOutput<T> relative_attention(const Tensor<T>& h, const Tensor<T>& mem, const RelativeAttentionParams<T>& p,
                                      const AttentionContext& ctx = {}) {
  if (h.rank() != 3) throw ShapeMismatch("relative_attention input must be [B, L, D]");
  const std::size_t batch = h.dim(0), len = h.dim(1), width = h.dim(2);
  const std::size_t mem_len = mem.defined() ? mem.dim(1) : 0;
  Tensor<T> context = h;
  if (mem_len > 0) {
    if (mem.rank() != 3 || mem.dim(0) != batch || mem.dim(2) != width) {
      throw ShapeMismatch("memory " + to_string(mem.shape()) + " for segment " + to_string(h.shape()));
    }
    context = concat<T>({mem.detach(), h}, 1);
  }
  const std::size_t klen = mem_len + len;
  const std::size_t heads = p.base.heads;
  const auto& base = p.base;
  const auto q = base.query(h);
  const auto k = detail::split_heads(base.key(context), heads);
  const auto v = detail::split_heads(base.value(context), heads);

  const auto content_q = detail::split_heads(add(q, p.content_bias), heads);
  const auto position_q = detail::split_heads(add(q, p.position_bias), heads);

  // [klen, D] -> [h, dk, klen]
  const auto rel = p.position(sinusoid_table<T>(klen, width));
  const auto rel_heads = permute(reshape(rel, {klen, heads, width / heads}), {1, 2, 0});

  const auto content_scores = matmul(content_q, transpose_last2(k));
  const auto position_scores = relative_shift(matmul(position_q, rel_heads), mem_len);
  const auto scores = scale(add(content_scores, position_scores), static_cast<T>(1.0 / std::sqrt(double(width / heads))));
  const auto weights = masked_softmax(scores, causal_mask(len, mem_len));
  const auto out = matmul(maybe_dropout(weights, ctx), v);
  return {base.output(detail::merge_heads(out)), weights};
}

}  // namespace charlm
