#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "charlm/corpus.hpp"
#include "charlm/layers.hpp"

namespace charlm {

enum class ModelFamily { char_lstm, transformer, transformer_xl };

inline std::string to_string(ModelFamily f) {
  switch (f) {
    case ModelFamily::char_lstm: return "char_lstm";
    case ModelFamily::transformer: return "transformer";
    case ModelFamily::transformer_xl: return "transformer_xl";
  }
  return "?";
}

inline ModelFamily parse_family(const std::string& s) {
  if (s == "char_lstm" || s == "char-lstm") return ModelFamily::char_lstm;
  if (s == "transformer") return ModelFamily::transformer;
  if (s == "transformer_xl" || s == "transformer-xl") return ModelFamily::transformer_xl;
  throw InvalidConfig("unknown model family '" + s + "'");
}

struct ModelConfig {
  ModelFamily family = ModelFamily::char_lstm;
  std::size_t seq_len = 100;  // base length when variable_length is set
  std::size_t batch_size = 64;
  std::size_t num_layers = 1;
  std::size_t embedding_dim = 256;
  std::size_t hidden_dim = 1024;  // LSTM units, or the attention model width
  std::size_t num_heads = 0;
  std::size_t ffn_dim = 0;  // attention families; 0 means 4 * hidden_dim
  double dropout = 0.0;
  std::size_t mem_len = 0;
  bool variable_length = false;
  std::size_t vocab_size = 0;
  PositionCombine position_combine = PositionCombine::add;

  std::size_t feed_forward_dim() const { return ffn_dim ? ffn_dim : 4 * hidden_dim; }

  void validate() const {
    if (vocab_size == 0) throw InvalidConfig("vocab_size must be set");
    if (seq_len == 0 || batch_size == 0 || num_layers == 0 || embedding_dim == 0 || hidden_dim == 0) {
      throw InvalidConfig("dimensions must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw InvalidConfig("dropout must be in [0, 1)");
    if (family != ModelFamily::char_lstm) {
      if (num_heads == 0 || hidden_dim % num_heads != 0) {
        throw InvalidConfig("hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                            std::to_string(num_heads));
      }
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Per-layer hidden states cached from earlier segments, [B, m, D] each, with
// m <= mem_len. Entries are detached leaves.
template <typename T>
struct MemoryCache {
  std::vector<Tensor<T>> layers;

  bool empty() const { return layers.empty(); }
  std::size_t length() const { return layers.empty() ? 0 : layers.front().dim(1); }
};

// Per layer: the last mem_len positions of old ⊕ new, detached.
template <typename T>
MemoryCache<T> update_memory(const MemoryCache<T>& old, const std::vector<Tensor<T>>& fresh, std::size_t mem_len) {
  if (!old.empty() && old.layers.size() != fresh.size()) {
    throw LayerCountMismatch("memory has " + std::to_string(old.layers.size()) + " layers, update has " +
                             std::to_string(fresh.size()));
  }
  MemoryCache<T> out;
  NoGradGuard no_grad;
  for (std::size_t l = 0; l < fresh.size(); ++l) {
    const auto& add_on = fresh[l];
    if (add_on.rank() != 3) throw ShapeMismatch("memory entries must be [B, T, D]");
    Tensor<T> joined = add_on.detach();
    if (!old.empty() && old.layers[l].dim(1) > 0) {
      const auto& prev = old.layers[l];
      if (prev.dim(0) != add_on.dim(0) || prev.dim(2) != add_on.dim(2)) {
        throw ShapeMismatch("memory " + to_string(prev.shape()) + " vs update " + to_string(add_on.shape()));
      }
      joined = concat<T>({prev.detach(), joined}, 1);
    }
    const std::size_t total = joined.dim(1);
    const std::size_t keep = std::min(total, mem_len);
    out.layers.push_back(slice(joined, 1, total - keep, total).detach());
  }
  return out;
}

// Common surface of the three families: ids in, next-character logits out,
// with recurrent state or memory carried between calls.
template <typename T>
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  const ModelConfig& config() const { return config_; }

  // Stable order; names are checkpoint keys.
  virtual ParamList<T> parameters() const = 0;

  // Logits [B, T, V] for ids [B, T] continuing the carried state, which is
  // then advanced (and detached, so gradients stop at the call boundary).
  virtual Tensor<T> forward_stateful(const IdMatrix& ids, bool training, Rng& rng) = 0;

  virtual void reset_state() = 0;

  // Snapshot of the carried state (LSTM h and c per layer, XL memory per
  // layer); set_carry restores one.
  virtual std::vector<Tensor<T>> carry() const = 0;
  virtual void set_carry(std::vector<Tensor<T>> carried) = 0;

  // Longest context a single forward call accepts (0 = unbounded).
  virtual std::size_t max_segment() const { return 0; }

  virtual void zero_output_layer() = 0;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

 protected:
  explicit LanguageModel(ModelConfig config) : config_(std::move(config)) { config_.validate(); }

  ModelConfig config_;
};

namespace detail {

inline Shape id_shape(const IdMatrix& ids) { return {ids.rows, ids.cols}; }

}  // namespace detail

// ---- Char-LSTM ---------------------------------------------------------------

template <typename T>
class CharLstm : public LanguageModel<T> {
 public:
  using State = std::vector<LstmState<T>>;

  CharLstm(const ModelConfig& config, Rng& rng) : LanguageModel<T>(config) {
    const auto& c = this->config_;
    embed_ = Embedding<T>::init(c.vocab_size, c.embedding_dim, rng);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      cells_.push_back(LstmCell<T>::init(l == 0 ? c.embedding_dim : c.hidden_dim, c.hidden_dim, rng));
    }
    out_ = Linear<T>::init(c.hidden_dim, c.vocab_size, rng);
  }

  // embedding -> N stacked LSTM layers unrolled over T -> dense. An empty
  // state starts every layer from zeros.
  std::pair<Tensor<T>, State> forward(const IdMatrix& ids, State state, bool training, Rng& rng) const {
    const auto& c = this->config_;
    const std::size_t batch = ids.rows, steps = ids.cols;
    if (state.empty()) {
      for (std::size_t l = 0; l < cells_.size(); ++l) state.push_back(LstmState<T>::zeros(batch, c.hidden_dim));
    }
    if (state.size() != cells_.size()) throw LayerCountMismatch("state has " + std::to_string(state.size()) + " layers");
    for (const auto& s : state) {
      if (s.h.dim(0) != batch) throw ShapeMismatch("state batch " + std::to_string(s.h.dim(0)) + " for ids batch " + std::to_string(batch));
    }
    Tensor<T> layer_input = embed_(ids.data, detail::id_shape(ids));  // [B, T, E]
    for (std::size_t l = 0; l < cells_.size(); ++l) {
      if (training && c.dropout > 0.0) layer_input = dropout(layer_input, c.dropout, rng);
      const auto projected = matmul(layer_input, cells_[l].w_input);  // [B, T, 4H]
      std::vector<Tensor<T>> outputs;
      outputs.reserve(steps);
      for (std::size_t t = 0; t < steps; ++t) {
        const auto x_t = reshape(slice(projected, 1, t, t + 1), {batch, 4 * c.hidden_dim});
        state[l] = cells_[l].step_projected(x_t, state[l]);
        outputs.push_back(reshape(state[l].h, {batch, 1, c.hidden_dim}));
      }
      layer_input = concat(outputs, 1);
    }
    if (training && c.dropout > 0.0) layer_input = dropout(layer_input, c.dropout, rng);
    return {out_(layer_input), std::move(state)};
  }

  Tensor<T> forward_stateful(const IdMatrix& ids, bool training, Rng& rng) override {
    auto [logits, next] = forward(ids, std::move(state_), training, rng);
    state_.clear();
    for (const auto& s : next) state_.push_back(s.detach());
    return logits;
  }

  void reset_state() override { state_.clear(); }

  std::vector<Tensor<T>> carry() const override {
    std::vector<Tensor<T>> out;
    for (const auto& s : state_) {
      out.push_back(s.h);
      out.push_back(s.c);
    }
    return out;
  }

  void set_carry(std::vector<Tensor<T>> carried) override {
    state_.clear();
    for (std::size_t i = 0; i + 1 < carried.size(); i += 2) state_.push_back({carried[i], carried[i + 1]});
  }

  const State& state() const { return state_; }

  void zero_output_layer() override { out_.zero(); }

  ParamList<T> parameters() const override {
    ParamList<T> out;
    embed_.collect("embedding", out);
    for (std::size_t l = 0; l < cells_.size(); ++l) cells_[l].collect("lstm." + std::to_string(l), out);
    out_.collect("output", out);
    return out;
  }

 private:
  Embedding<T> embed_;
  std::vector<LstmCell<T>> cells_;
  Linear<T> out_;
  State state_;
};

// ---- Transformer blocks --------------------------------------------------

template <typename T>
struct FeedForward {
  Linear<T> inner, outer;

  static FeedForward init(std::size_t width, std::size_t hidden, Rng& rng) {
    return {Linear<T>::init(width, hidden, rng), Linear<T>::init(hidden, width, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x, const AttentionContext& ctx) const {
    return outer(maybe_dropout(relu(inner(x)), ctx));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    inner.collect(prefix + ".inner", out);
    outer.collect(prefix + ".outer", out);
  }
};

// Post-norm block: x = norm(x + attn(x)); x = norm(x + ffn(x)).
template <typename T, typename Attention>
struct Block {
  Attention attention;
  LayerNorm<T> attention_norm;
  FeedForward<T> ffn;
  LayerNorm<T> ffn_norm;

  static Block init(std::size_t width, std::size_t heads, std::size_t ffn_dim, Rng& rng) {
    auto attn = Attention::init(width, heads, rng);
    return {std::move(attn), LayerNorm<T>::init(width), FeedForward<T>::init(width, ffn_dim, rng),
            LayerNorm<T>::init(width)};
  }

  Tensor<T> finish(const Tensor<T>& x, const Tensor<T>& attended, const AttentionContext& ctx) const {
    const auto mid = attention_norm(add(x, maybe_dropout(attended, ctx)));
    return ffn_norm(add(mid, maybe_dropout(ffn(mid, ctx), ctx)));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    attention.collect(prefix + ".attention", out);
    attention_norm.collect(prefix + ".attention_norm", out);
    ffn.collect(prefix + ".ffn", out);
    ffn_norm.collect(prefix + ".ffn_norm", out);
  }
};

// Decoder-only causal transformer with absolute sinusoidal positions.
template <typename T>
class Transformer : public LanguageModel<T> {
 public:
  Transformer(const ModelConfig& config, Rng& rng) : LanguageModel<T>(config) {
    const auto& c = this->config_;
    embed_ = Embedding<T>::init(c.vocab_size, c.embedding_dim, rng);
    positions_ = PositionalEncoding<T>::make(PositionMode::absolute, c.position_combine, c.seq_len, c.embedding_dim);
    const std::size_t input_width =
        c.position_combine == PositionCombine::concat ? 2 * c.embedding_dim : c.embedding_dim;
    if (input_width != c.hidden_dim) input_proj_ = Linear<T>::init(input_width, c.hidden_dim, rng, false);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      blocks_.push_back(Block<T, AttentionHeadParams<T>>::init(c.hidden_dim, c.num_heads, c.feed_forward_dim(), rng));
    }
    out_ = Linear<T>::init(c.hidden_dim, c.vocab_size, rng);
  }

  Tensor<T> forward(const IdMatrix& ids, bool training, Rng& rng) const {
    const auto& c = this->config_;
    if (ids.cols > c.seq_len) {
      throw ShapeMismatch("segment of " + std::to_string(ids.cols) + " exceeds seq_len " + std::to_string(c.seq_len));
    }
    const AttentionContext ctx{training, c.dropout, &rng};
    auto x = scale(embed_(ids.data, detail::id_shape(ids)), static_cast<T>(std::sqrt(double(c.embedding_dim))));
    x = positions_.apply(x);
    if (input_proj_.weight.defined()) x = input_proj_(x);
    x = maybe_dropout(x, ctx);
    for (const auto& block : blocks_) {
      const auto attended = multi_head_attention(x, x, x, block.attention, AttentionMask::causal, ctx).output;
      x = block.finish(x, attended, ctx);
    }
    return out_(x);
  }

  Tensor<T> forward_stateful(const IdMatrix& ids, bool training, Rng& rng) override {
    return forward(ids, training, rng);
  }

  void reset_state() override {}
  std::vector<Tensor<T>> carry() const override { return {}; }
  void set_carry(std::vector<Tensor<T>>) override {}

  std::size_t max_segment() const override { return this->config_.seq_len; }

  void zero_output_layer() override { out_.zero(); }

  ParamList<T> parameters() const override {
    ParamList<T> out;
    embed_.collect("embedding", out);
    if (input_proj_.weight.defined()) input_proj_.collect("input_projection", out);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("block." + std::to_string(l), out);
    out_.collect("output", out);
    return out;
  }

 private:
  Embedding<T> embed_;
  PositionalEncoding<T> positions_;
  Linear<T> input_proj_;
  std::vector<Block<T, AttentionHeadParams<T>>> blocks_;
  Linear<T> out_;
};

// Transformer-XL: relative-position attention over cached hidden states of the
// previous segment at every layer.
template <typename T>
class TransformerXL : public LanguageModel<T> {
 public:
  TransformerXL(const ModelConfig& config, Rng& rng) : LanguageModel<T>(config) {
    const auto& c = this->config_;
    embed_ = Embedding<T>::init(c.vocab_size, c.embedding_dim, rng);
    if (c.embedding_dim != c.hidden_dim) input_proj_ = Linear<T>::init(c.embedding_dim, c.hidden_dim, rng, false);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      blocks_.push_back(
          Block<T, RelativeAttentionParams<T>>::init(c.hidden_dim, c.num_heads, c.feed_forward_dim(), rng));
    }
    out_ = Linear<T>::init(c.hidden_dim, c.vocab_size, rng);
  }

  // Each layer attends over memory.layers[l] ⊕ its input. The returned cache
  // holds every layer's input for this segment appended to the old cache and
  // cut to the last mem_len positions.
  std::pair<Tensor<T>, MemoryCache<T>> forward(const IdMatrix& ids, const MemoryCache<T>& memory, bool training,
                                               Rng& rng) const {
    const auto& c = this->config_;
    if (!memory.empty()) {
      if (memory.layers.size() != blocks_.size()) {
        throw LayerCountMismatch("memory has " + std::to_string(memory.layers.size()) + " layers, model has " +
                                 std::to_string(blocks_.size()));
      }
      for (const auto& m : memory.layers) {
        if (m.dim(0) != ids.rows) throw ShapeMismatch("memory batch " + std::to_string(m.dim(0)) + " for ids batch " + std::to_string(ids.rows));
      }
    }
    const AttentionContext ctx{training, c.dropout, &rng};
    auto x = scale(embed_(ids.data, detail::id_shape(ids)), static_cast<T>(std::sqrt(double(c.embedding_dim))));
    if (input_proj_.weight.defined()) x = input_proj_(x);
    x = maybe_dropout(x, ctx);
    std::vector<Tensor<T>> layer_inputs;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      layer_inputs.push_back(x);
      const Tensor<T> mem = memory.empty() ? Tensor<T>() : memory.layers[l];
      const auto attended = relative_attention(x, mem, blocks_[l].attention, ctx).output;
      x = blocks_[l].finish(x, attended, ctx);
    }
    return {out_(x), update_memory(memory, layer_inputs, c.mem_len)};
  }

  Tensor<T> forward_stateful(const IdMatrix& ids, bool training, Rng& rng) override {
    auto [logits, next] = forward(ids, memory_, training, rng);
    memory_ = std::move(next);
    return logits;
  }

  void reset_state() override { memory_ = {}; }
  std::vector<Tensor<T>> carry() const override { return memory_.layers; }
  void set_carry(std::vector<Tensor<T>> carried) override { memory_.layers = std::move(carried); }

  const MemoryCache<T>& memory() const { return memory_; }

  void zero_output_layer() override { out_.zero(); }

  ParamList<T> parameters() const override {
    ParamList<T> out;
    embed_.collect("embedding", out);
    if (input_proj_.weight.defined()) input_proj_.collect("input_projection", out);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("block." + std::to_string(l), out);
    out_.collect("output", out);
    return out;
  }

 private:
  Embedding<T> embed_;
  Linear<T> input_proj_;
  std::vector<Block<T, RelativeAttentionParams<T>>> blocks_;
  Linear<T> out_;
  MemoryCache<T> memory_;
};

template <typename T>
std::unique_ptr<LanguageModel<T>> make_model(const ModelConfig& config, Rng& rng) {
  switch (config.family) {
    case ModelFamily::char_lstm: return std::make_unique<CharLstm<T>>(config, rng);
    case ModelFamily::transformer: return std::make_unique<Transformer<T>>(config, rng);
    case ModelFamily::transformer_xl: return std::make_unique<TransformerXL<T>>(config, rng);
  }
  throw InvalidConfig("unknown model family");
}

// Copies parameter values between models of identical configuration,
// converting precision (used to check a float model in double).
template <typename To, typename From>
void copy_parameters(const LanguageModel<From>& from, LanguageModel<To>& to) {
  auto src = from.parameters();
  auto dst = to.parameters();
  if (src.size() != dst.size()) throw ShapeMismatch("parameter lists differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw ShapeMismatch("parameter " + src[i].name + " does not match " + dst[i].name);
    }
    auto out = dst[i].tensor.mutable_values();
    auto in = src[i].tensor.values();
    for (std::size_t k = 0; k < in.size(); ++k) out[k] = static_cast<To>(in[k]);
  }
}

}  // namespace charlm
