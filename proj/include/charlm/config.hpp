#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <limits>
#include <string>

#include "charlm/models.hpp"

namespace charlm {

enum class ScheduleKind { constant, custom_warmup_rsqrt, cosine };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::custom_warmup_rsqrt: return "custom";
    case ScheduleKind::cosine: return "cosine";
  }
  return "?";
}

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "custom" || s == "custom_warmup_rsqrt") return ScheduleKind::custom_warmup_rsqrt;
  if (s == "cosine") return ScheduleKind::cosine;
  throw InvalidConfig("unknown schedule '" + s + "'");
}

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::constant;
  double base_lr = 0.001;       // peak for cosine, scale factor for custom
  double min_lr = 0.0;          // cosine floor
  std::size_t warmup_steps = 0; // custom
  std::size_t decay_steps = 0;  // custom: terminal linear-decay window
  std::size_t total_steps = 0;

  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct TrainConfig {
  AdamConfig adam;
  ScheduleConfig schedule;
  double clip_norm = 5.0;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 200;
  std::size_t log_interval = 1;
  std::size_t checkpoint_interval = 0;  // 0: only final and best
  bool determinism = false;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct Preset {
  std::string name;
  ModelConfig model;
  TrainConfig train;
};

// Full-size presets and their micro counterparts, which train in minutes on a CPU.
inline Preset load_preset(const std::string& name) {
  Preset p;
  p.name = name;
  auto& m = p.model;
  auto& t = p.train;
  if (name == "char-lstm") {
    m = {ModelFamily::char_lstm, 100, 64, 1, 256, 1024, 0, 0, 0.0, 0, false, 0, PositionCombine::add};
    t.adam = {0.9, 0.999, 1e-8};
    t.schedule = {ScheduleKind::constant, 0.001, 0.0, 0, 0, 0};
    t.clip_norm = 5.0;
  } else if (name == "transformer") {
    m = {ModelFamily::transformer, 128, 4096, 2, 256, 256, 4, 0, 0.1, 0, false, 0, PositionCombine::add};
    t.adam = {0.9, 0.997, 1e-9};
    t.schedule = {ScheduleKind::custom_warmup_rsqrt, 0.2, 0.0, 10000, 0, 0};
    t.clip_norm = 5.0;
  } else if (name == "transformer-xl") {
    m = {ModelFamily::transformer_xl, 128, 22, 12, 512, 512, 8, 0, 0.1, 128, true, 0, PositionCombine::add};
    t.adam = {0.9, 0.999, 1e-8};
    t.schedule = {ScheduleKind::cosine, 0.00025, 0.0, 0, 0, 0};
    t.clip_norm = 0.25;
  } else if (name == "micro-char-lstm") {
    m = {ModelFamily::char_lstm, 64, 16, 1, 32, 128, 0, 0, 0.0, 0, false, 0, PositionCombine::add};
    t.adam = {0.9, 0.999, 1e-8};
    t.schedule = {ScheduleKind::constant, 0.003, 0.0, 0, 0, 0};
    t.clip_norm = 5.0;
  } else if (name == "micro-transformer") {
    m = {ModelFamily::transformer, 64, 16, 2, 64, 64, 4, 128, 0.0, 0, false, 0, PositionCombine::add};
    t.adam = {0.9, 0.997, 1e-9};
    t.schedule = {ScheduleKind::custom_warmup_rsqrt, 0.2, 0.0, 100, 0, 0};
    t.clip_norm = 5.0;
  } else if (name == "micro-transformer-xl") {
    m = {ModelFamily::transformer_xl, 64, 16, 2, 64, 64, 4, 128, 0.0, 64, true, 0, PositionCombine::add};
    t.adam = {0.9, 0.999, 1e-8};
    t.schedule = {ScheduleKind::cosine, 0.003, 0.0, 0, 0, 0};
    t.clip_norm = 0.25;
  } else {
    throw UnknownPreset("'" + name + "' (known: char-lstm, transformer, transformer-xl, micro-char-lstm, "
                        "micro-transformer, micro-transformer-xl)");
  }
  return p;
}

// ---- JSON mirror of the configuration types ---------------------------------

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"family", to_string(m.family)},
          {"seq_len", m.seq_len},
          {"batch_size", m.batch_size},
          {"num_layers", m.num_layers},
          {"embedding_dim", m.embedding_dim},
          {"hidden_dim", m.hidden_dim},
          {"num_heads", m.num_heads},
          {"ffn_dim", m.ffn_dim},
          {"dropout", m.dropout},
          {"mem_len", m.mem_len},
          {"variable_length", m.variable_length},
          {"vocab_size", m.vocab_size},
          {"position_combine", m.position_combine == PositionCombine::add ? "add" : "concat"}};
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"beta1", t.adam.beta1},
          {"beta2", t.adam.beta2},
          {"epsilon", t.adam.epsilon},
          {"schedule", to_string(t.schedule.kind)},
          {"lr", t.schedule.base_lr},
          {"min_lr", t.schedule.min_lr},
          {"warmup_steps", t.schedule.warmup_steps},
          {"decay_steps", t.schedule.decay_steps},
          {"total_steps", t.schedule.total_steps},
          {"clip_norm", t.clip_norm},
          {"steps", t.steps},
          {"seed", t.seed},
          {"eval_interval", t.eval_interval},
          {"log_interval", t.log_interval},
          {"checkpoint_interval", t.checkpoint_interval},
          {"determinism", t.determinism}};
}

// Overlays the keys present in `j` onto the preset; unknown keys are errors.
inline void apply_overlay(Preset& p, const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidConfig("config overlay must be a JSON object");
  auto& m = p.model;
  auto& t = p.train;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "family") m.family = parse_family(v.get<std::string>());
      else if (key == "seq_len") m.seq_len = v.get<std::size_t>();
      else if (key == "batch_size") m.batch_size = v.get<std::size_t>();
      else if (key == "num_layers") m.num_layers = v.get<std::size_t>();
      else if (key == "embedding_dim") m.embedding_dim = v.get<std::size_t>();
      else if (key == "hidden_dim") m.hidden_dim = v.get<std::size_t>();
      else if (key == "num_heads") m.num_heads = v.get<std::size_t>();
      else if (key == "ffn_dim") m.ffn_dim = v.get<std::size_t>();
      else if (key == "dropout") m.dropout = v.get<double>();
      else if (key == "mem_len") m.mem_len = v.get<std::size_t>();
      else if (key == "variable_length") m.variable_length = v.get<bool>();
      else if (key == "vocab_size") m.vocab_size = v.get<std::size_t>();
      else if (key == "position_combine") {
        const auto s = v.get<std::string>();
        if (s != "add" && s != "concat") throw InvalidConfig("position_combine must be add or concat");
        m.position_combine = s == "add" ? PositionCombine::add : PositionCombine::concat;
      }
      else if (key == "beta1") t.adam.beta1 = v.get<double>();
      else if (key == "beta2") t.adam.beta2 = v.get<double>();
      else if (key == "epsilon") t.adam.epsilon = v.get<double>();
      else if (key == "schedule") t.schedule.kind = parse_schedule(v.get<std::string>());
      else if (key == "lr") t.schedule.base_lr = v.get<double>();
      else if (key == "min_lr") t.schedule.min_lr = v.get<double>();
      else if (key == "warmup_steps") t.schedule.warmup_steps = v.get<std::size_t>();
      else if (key == "decay_steps") t.schedule.decay_steps = v.get<std::size_t>();
      else if (key == "total_steps") t.schedule.total_steps = v.get<std::size_t>();
      else if (key == "clip_norm") t.clip_norm = v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>();
      else if (key == "steps") t.steps = v.get<std::size_t>();
      else if (key == "seed") t.seed = v.get<std::uint64_t>();
      else if (key == "eval_interval") t.eval_interval = v.get<std::size_t>();
      else if (key == "log_interval") t.log_interval = v.get<std::size_t>();
      else if (key == "checkpoint_interval") t.checkpoint_interval = v.get<std::size_t>();
      else if (key == "determinism") t.determinism = v.get<bool>();
      else throw InvalidConfig("unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("bad config value: ") + e.what());
  }
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  Preset p;
  apply_overlay(p, j);
  return p.model;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  Preset p;
  apply_overlay(p, j);
  return p.train;
}

}  // namespace charlm
