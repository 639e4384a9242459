#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "charlm/corpus.hpp"
#include "charlm/models.hpp"

namespace charlm {

struct SamplerConfig {
  double temperature = 0.7;
  std::size_t max_chars = 5000;
  std::string prefix;
  std::uint64_t seed = 0;
  std::optional<std::string> stop_sequence;
  bool greedy = false;  // argmax decoding, the temperature -> 0 limit
};

inline std::vector<double> apply_temperature(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw NonPositiveTemperature(std::to_string(temperature));
  std::vector<double> out(logits.begin(), logits.end());
  for (auto& v : out) v /= temperature;
  return out;
}

inline std::vector<double> softmax_probs(std::span<const double> logits) {
  if (logits.empty()) throw InvalidDistribution("empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - mx);
  for (auto& v : p) v /= total;
  return p;
}

inline double entropy_nats(std::span<const double> dist) {
  double h = 0.0;
  for (const double p : dist) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

inline std::int32_t argmax(std::span<const double> values) {
  if (values.empty()) throw InvalidDistribution("empty distribution");
  return static_cast<std::int32_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

// Inverse-CDF draw in vocabulary order.
inline std::int32_t sample_next(std::span<const double> dist, Rng& rng) {
  if (dist.empty()) throw InvalidDistribution("empty distribution");
  double total = 0.0;
  for (const double p : dist) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidDistribution("negative or non-finite probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw InvalidDistribution("probabilities sum to " + std::to_string(total));
  const double u = rng.uniform() * total;
  double acc = 0.0;
  std::int32_t last_nonzero = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    acc += dist[i];
    last_nonzero = static_cast<std::int32_t>(i);
    if (u < acc) return last_nonzero;
  }
  return last_nonzero;
}

// Feeds ids through a model one lane at a time and reports the logits that
// follow the last id fed. Recurrent state or memory persists across feeds;
// fixed-context models see a sliding window of their last seq_len ids.
template <typename T>
class GenerationSession {
 public:
  explicit GenerationSession(LanguageModel<T>& model) : model_(model) { model_.reset_state(); }

  std::vector<double> feed(std::span<const std::int32_t> ids) {
    if (ids.empty()) throw InvalidConfig("feed() needs at least one id");
    NoGradGuard no_grad;
    Tensor<T> logits;
    const std::size_t window = model_.max_segment();
    if (window != 0) {
      history_.insert(history_.end(), ids.begin(), ids.end());
      const std::size_t len = std::min(window, history_.size());
      IdMatrix x{1, len, {history_.end() - static_cast<std::ptrdiff_t>(len), history_.end()}};
      logits = model_.forward_stateful(x, false, rng_);
    } else {
      const std::size_t chunk = std::max<std::size_t>(1, model_.config().seq_len);
      for (std::size_t off = 0; off < ids.size(); off += chunk) {
        const std::size_t len = std::min(chunk, ids.size() - off);
        IdMatrix x{1, len, {ids.begin() + off, ids.begin() + off + len}};
        logits = model_.forward_stateful(x, false, rng_);
      }
    }
    const std::size_t vocab = logits.dim(-1);
    auto v = logits.values();
    return {v.end() - static_cast<std::ptrdiff_t>(vocab), v.end()};
  }

 private:
  LanguageModel<T>& model_;
  std::vector<std::int32_t> history_;
  Rng rng_{0};
};

// Feeds the prefix, then appends sampled characters until max_chars have been
// produced or the stop sequence appears. Returns prefix + continuation.
template <typename T>
std::string generate(LanguageModel<T>& model, const Vocabulary& vocab, const SamplerConfig& sampler) {
  if (!sampler.greedy && !(sampler.temperature > 0.0)) throw NonPositiveTemperature(std::to_string(sampler.temperature));
  const auto prefix_ids = vocab.encode_utf8(sampler.prefix);
  if (sampler.max_chars == 0) return sampler.prefix;
  if (prefix_ids.empty()) throw InvalidConfig("generation needs a non-empty prefix");
  Rng rng(sampler.seed);
  GenerationSession<T> session(model);
  auto logits = session.feed(prefix_ids);
  std::u32string produced;
  const std::u32string stop = sampler.stop_sequence ? utf8::decode(*sampler.stop_sequence) : std::u32string();
  for (std::size_t n = 0; n < sampler.max_chars; ++n) {
    const std::int32_t next = sampler.greedy ? argmax(logits)
                                             : sample_next(softmax_probs(apply_temperature(logits, sampler.temperature)), rng);
    produced.push_back(vocab.char_at(next));
    if (!stop.empty() && produced.size() >= stop.size() &&
        produced.compare(produced.size() - stop.size(), stop.size(), stop) == 0) {
      break;
    }
    if (n + 1 < sampler.max_chars) {
      const std::int32_t one[1] = {next};
      logits = session.feed(one);
    }
  }
  return sampler.prefix + utf8::encode(produced);
}

// Teacher-forced walk over `text`: at every position, the entropy of
// softmax(logits / T) for each temperature. Row i holds the entropies of
// step i in the order of `temperatures`.
template <typename T>
std::vector<std::vector<double>> temperature_entropy_profile(LanguageModel<T>& model, const Vocabulary& vocab,
                                                             const std::string& text,
                                                             std::span<const double> temperatures) {
  const auto ids = vocab.encode_utf8(text);
  GenerationSession<T> session(model);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto logits = session.feed(std::span<const std::int32_t>(ids).subspan(i, 1));
    std::vector<double> row;
    for (const double t : temperatures) row.push_back(entropy_nats(softmax_probs(apply_temperature(logits, t))));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace charlm
