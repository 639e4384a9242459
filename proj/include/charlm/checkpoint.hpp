#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "charlm/config.hpp"
#include "charlm/corpus.hpp"
#include "charlm/optim.hpp"

// Binary checkpoint layout (all integers little-endian):
//   "CLM1" | u32 version | u32 n | n bytes of config JSON | u64 vocab digest
//   | u32 count | count x parameter record
//   | u64 step | u32 n | n bytes of rng state
//   | u32 has_optimizer [ | u64 adam step | u32 count | records (first moment)
//                         | u32 count | records (second moment) ]
// A parameter record is u32 name length | name | u32 rank | rank x u32 dims
// | f32 values.

namespace charlm {

inline constexpr char kCheckpointMagic[4] = {'C', 'L', 'M', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  Vocabulary vocab;
  std::string corpus_dir;  // where the training corpus lived, informational
  std::vector<StoredTensor> params;
  std::uint64_t step = 0;
  std::string rng_state;
  bool has_optimizer = false;
  std::uint64_t adam_step = 0;
  std::vector<StoredTensor> first_moment;
  std::vector<StoredTensor> second_moment;
};

template <typename T>
std::vector<StoredTensor> store_params(const ParamList<T>& params) {
  std::vector<StoredTensor> out;
  for (const auto& p : params) {
    StoredTensor s{p.name, p.tensor.shape(), {}};
    for (const T v : p.tensor.values()) s.values.push_back(static_cast<float>(v));
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
void load_params(const std::vector<StoredTensor>& stored, const ParamList<T>& params) {
  if (stored.size() != params.size()) {
    throw CorruptCheckpoint("checkpoint has " + std::to_string(stored.size()) + " tensors, model has " +
                            std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < stored.size(); ++i) {
    if (stored[i].name != params[i].name || stored[i].shape != params[i].tensor.shape()) {
      throw CorruptCheckpoint("tensor " + stored[i].name + " " + to_string(stored[i].shape) + " does not match " +
                              params[i].name + " " + to_string(params[i].tensor.shape()));
    }
    auto t = params[i].tensor;
    auto dst = t.mutable_values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(stored[i].values[k]);
  }
}

template <typename T>
void store_optimizer(const OptimizerState<T>& state, const ParamList<T>& params, Checkpoint& ck) {
  ck.has_optimizer = true;
  ck.adam_step = state.step;
  ck.first_moment.clear();
  ck.second_moment.clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.first_moment.push_back({params[i].name, params[i].tensor.shape(),
                               {state.first_moment[i].begin(), state.first_moment[i].end()}});
    ck.second_moment.push_back({params[i].name, params[i].tensor.shape(),
                                {state.second_moment[i].begin(), state.second_moment[i].end()}});
  }
}

template <typename T>
OptimizerState<T> load_optimizer(const Checkpoint& ck, const ParamList<T>& params) {
  auto state = OptimizerState<T>::for_params(params, ck.train.adam);
  if (!ck.has_optimizer) return state;
  if (ck.first_moment.size() != params.size() || ck.second_moment.size() != params.size()) {
    throw CorruptCheckpoint("optimizer state does not match parameters");
  }
  state.step = ck.adam_step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ck.first_moment[i].values.size() != params[i].tensor.size() ||
        ck.second_moment[i].values.size() != params[i].tensor.size()) {
      throw CorruptCheckpoint("moment size mismatch for " + params[i].name);
    }
    std::transform(ck.first_moment[i].values.begin(), ck.first_moment[i].values.end(), state.first_moment[i].begin(),
                   [](float v) { return static_cast<T>(v); });
    std::transform(ck.second_moment[i].values.begin(), ck.second_moment[i].values.end(),
                   state.second_moment[i].begin(), [](float v) { return static_cast<T>(v); });
  }
  return state;
}

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.append(p, n);
  }
  template <typename U>
  void le(U value) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor(const StoredTensor& t) {
    str(t.name);
    le(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) le(static_cast<std::uint32_t>(d));
    for (float v : t.values) f32(v);
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CorruptCheckpoint("truncated at byte " + std::to_string(pos_));
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str() {
    const auto n = le<std::uint32_t>();
    return std::string(bytes(n));
  }
  StoredTensor tensor() {
    StoredTensor t;
    t.name = str();
    const auto rank = le<std::uint32_t>();
    if (rank > 8) throw CorruptCheckpoint("implausible rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(le<std::uint32_t>());
    const auto n = numel(t.shape);
    need(n * 4);
    t.values.resize(n);
    for (auto& v : t.values) v = f32();
    return t;
  }
  std::vector<StoredTensor> tensors() {
    const auto count = le<std::uint32_t>();
    std::vector<StoredTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) out.push_back(tensor());
    return out;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline nlohmann::json vocab_to_json(const Vocabulary& v) {
  nlohmann::json chars = nlohmann::json::array();
  nlohmann::json counts = nlohmann::json::array();
  for (std::size_t i = 0; i < v.size(); ++i) {
    chars.push_back(static_cast<std::uint32_t>(v.chars()[i]));
    counts.push_back(v.counts()[i]);
  }
  return {{"code_points", chars}, {"counts", counts}};
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
  std::vector<char32_t> chars;
  for (const auto& c : j.at("code_points")) chars.push_back(static_cast<char32_t>(c.get<std::uint32_t>()));
  return Vocabulary::from_chars(std::move(chars), j.at("counts").get<std::vector<std::uint64_t>>());
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.le(kCheckpointVersion);
  const nlohmann::json config = {{"model", to_json(ck.model)},
                                 {"train", to_json(ck.train)},
                                 {"vocab", detail::vocab_to_json(ck.vocab)},
                                 {"corpus_dir", ck.corpus_dir}};
  w.str(config.dump());
  w.le(ck.vocab.digest());
  w.le(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& t : ck.params) w.tensor(t);
  w.le(ck.step);
  w.str(ck.rng_state);
  w.le(static_cast<std::uint32_t>(ck.has_optimizer ? 1 : 0));
  if (ck.has_optimizer) {
    w.le(ck.adam_step);
    w.le(static_cast<std::uint32_t>(ck.first_moment.size()));
    for (const auto& t : ck.first_moment) w.tensor(t);
    w.le(static_cast<std::uint32_t>(ck.second_moment.size()));
    for (const auto& t : ck.second_moment) w.tensor(t);
  }
  return w.data();
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) throw CorruptCheckpoint("bad magic");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) throw CorruptCheckpoint("unsupported version " + std::to_string(version));
  Checkpoint ck;
  nlohmann::json config;
  try {
    config = nlohmann::json::parse(r.str());
    ck.model = model_config_from_json(config.at("model"));
    ck.train = train_config_from_json(config.at("train"));
    ck.vocab = detail::vocab_from_json(config.at("vocab"));
    ck.corpus_dir = config.at("corpus_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("config blob: ") + e.what());
  } catch (const InvalidConfig& e) {
    throw CorruptCheckpoint(std::string("config blob: ") + e.what());
  }
  const auto digest = r.le<std::uint64_t>();
  if (digest != ck.vocab.digest()) throw VocabularyMismatch("stored digest does not match stored vocabulary");
  ck.params = r.tensors();
  ck.step = r.le<std::uint64_t>();
  ck.rng_state = r.str();
  ck.has_optimizer = r.le<std::uint32_t>() != 0;
  if (ck.has_optimizer) {
    ck.adam_step = r.le<std::uint64_t>();
    ck.first_moment = r.tensors();
    ck.second_moment = r.tensors();
  }
  if (!r.at_end()) throw CorruptCheckpoint("trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

// Rejects a checkpoint whose vocabulary differs from the one in use.
inline void require_vocabulary(const Checkpoint& ck, const Vocabulary& vocab) {
  if (ck.vocab.digest() != vocab.digest()) {
    throw VocabularyMismatch("checkpoint vocabulary digest " + std::to_string(ck.vocab.digest()) +
                             " != corpus digest " + std::to_string(vocab.digest()));
  }
}

// Rebuilds a model of the stored configuration with the stored weights.
template <typename T>
std::unique_ptr<LanguageModel<T>> model_from_checkpoint(const Checkpoint& ck) {
  Rng rng(0);
  auto model = make_model<T>(ck.model, rng);
  load_params(ck.params, model->parameters());
  return model;
}

}  // namespace charlm
