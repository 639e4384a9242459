#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "charlm/checkpoint.hpp"
#include "charlm/corpus.hpp"
#include "charlm/models.hpp"
#include "charlm/optim.hpp"

namespace charlm {

inline double bpc_from_ce(double ce_nats) {
  if (ce_nats < 0.0 || std::isnan(ce_nats)) throw NegativeInput("cross entropy " + std::to_string(ce_nats));
  return ce_nats / std::numbers::ln2;
}

enum class Split { train, validation };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "validation"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation" || s == "val") return Split::validation;
  throw InvalidConfig("unknown split '" + s + "'");
}

struct Metrics {
  Split split = Split::train;
  double ce_nats = 0.0;
  std::size_t step = 0;
  double wall_time = 0.0;
  double lr = 0.0;

  // Derived, never stored separately.
  double bpc() const { return bpc_from_ce(ce_nats); }

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

// Mean CE over every predictable position of `ids`, walked as one lane in
// chunks of `segment_len` with state or memory carried between chunks (the
// last chunk may be shorter). No dropout, no graph. The model's carried
// state is restored afterwards.
template <typename T>
Metrics evaluate(LanguageModel<T>& model, std::span<const std::int32_t> ids, std::size_t segment_len,
                 Split split = Split::validation) {
  if (ids.size() < 2) throw EmptySplit(to_string(split) + " split has " + std::to_string(ids.size()) + " ids");
  if (segment_len == 0) throw InvalidConfig("segment_len must be positive");
  if (model.max_segment() != 0) segment_len = std::min(segment_len, model.max_segment());
  NoGradGuard no_grad;
  const auto saved = model.carry();
  model.reset_state();
  Rng unused(0);
  double total = 0.0;
  const std::size_t predictable = ids.size() - 1;
  for (std::size_t offset = 0; offset < predictable; offset += segment_len) {
    const std::size_t len = std::min(segment_len, predictable - offset);
    IdMatrix inputs{1, len, {ids.begin() + offset, ids.begin() + offset + len}};
    const std::vector<std::int32_t> targets(ids.begin() + offset + 1, ids.begin() + offset + len + 1);
    const auto logits = model.forward_stateful(inputs, false, unused);
    total += static_cast<double>(cross_entropy(logits, std::span<const std::int32_t>(targets)).item()) *
             static_cast<double>(len);
  }
  model.set_carry(saved);
  Metrics m;
  m.split = split;
  m.ce_nats = total / static_cast<double>(predictable);
  return m;
}

// ---- metrics log ------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "step,split,ce_nats,bpc,lr,elapsed_s";

inline std::string metrics_row(const Metrics& m) {
  std::ostringstream out;
  out << m.step << ',' << to_string(m.split) << ',' << std::setprecision(9) << m.ce_nats << ',' << m.bpc() << ','
      << m.lr << ',' << std::fixed << std::setprecision(3) << m.wall_time;
  return out.str();
}

class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot open metrics log " + path.string());
    out_ << kMetricsHeader << '\n';
  }

  void append(const Metrics& m) {
    rows_.push_back(m);
    if (out_.is_open()) {
      out_ << metrics_row(m) << '\n';
      out_.flush();
      if (!out_) throw IoError("metrics log write failed");
    }
  }

  const std::vector<Metrics>& rows() const { return rows_; }

 private:
  std::ofstream out_;
  std::vector<Metrics> rows_;
};

// ---- training loop ----------------------------------------------------------

struct TrainData {
  std::span<const std::int32_t> train;
  std::span<const std::int32_t> validation;
  Vocabulary vocab;
  std::string corpus_dir;
};

struct TrainResult {
  std::vector<double> step_losses;  // per-step training CE (nats)
  std::vector<Metrics> log;
  std::optional<Metrics> best_validation;
  std::size_t steps = 0;
};

template <typename T>
Checkpoint make_checkpoint(const LanguageModel<T>& model, const TrainConfig& train, const TrainData& data,
                           const OptimizerState<T>* optimizer, const Rng& rng, std::size_t step) {
  Checkpoint ck;
  ck.model = model.config();
  ck.train = train;
  ck.vocab = data.vocab;
  ck.corpus_dir = data.corpus_dir;
  ck.params = store_params(model.parameters());
  ck.step = step;
  ck.rng_state = rng.serialize();
  if (optimizer) store_optimizer(*optimizer, model.parameters(), ck);
  return ck;
}

// forward -> CE -> backward -> clip -> Adam over stateful lane batches, with
// validation every eval_interval steps and at the end. With an output
// directory, writes metrics.csv, checkpoint_final.bin, checkpoint_best.bin
// and, every checkpoint_interval steps, checkpoint_step<N>.bin. In
// determinism mode the elapsed_s column is written as 0.
template <typename T>
TrainResult train(LanguageModel<T>& model, const TrainConfig& config, const TrainData& data,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  const auto& mc = model.config();
  Rng rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  ScheduleConfig schedule = config.schedule;
  if (schedule.total_steps == 0) schedule.total_steps = config.steps;
  const auto params = model.parameters();
  auto optimizer = OptimizerState<T>::for_params(params, config.adam);

  MetricsLog log;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    log = MetricsLog(*out_dir / "metrics.csv");
  }
  const auto started = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (config.determinism) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };

  std::vector<SegmentBatch> batches;
  std::size_t cursor = 0;
  auto next_epoch = [&] {
    batches = mc.variable_length ? segment_stream_variable(data.train, mc.seq_len, mc.batch_size, rng)
                                 : segment_stream(data.train, mc.seq_len, mc.batch_size);
    cursor = 0;
    model.reset_state();
  };
  next_epoch();

  TrainResult result;
  auto run_eval = [&](std::size_t step, double lr) {
    if (data.validation.size() < 2) return;
    auto m = evaluate(model, data.validation, mc.seq_len, Split::validation);
    m.step = step;
    m.lr = lr;
    m.wall_time = elapsed();
    log.append(m);
    if (!result.best_validation || m.ce_nats < result.best_validation->ce_nats) {
      result.best_validation = m;
      if (out_dir) save_checkpoint(make_checkpoint(model, config, data, &optimizer, rng, step), *out_dir / "checkpoint_best.bin");
    }
  };

  double lr = 0.0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    if (cursor == batches.size()) next_epoch();
    const auto& batch = batches[cursor++];
    for (const auto& p : params) {
      auto t = p.tensor;
      t.zero_grad();
    }
    Tensor<T> loss;
    try {
      const auto logits = model.forward_stateful(batch.inputs, true, rng);
      loss = cross_entropy(logits, std::span<const std::int32_t>(batch.targets.data));
      backward(loss);
      clip_grad_norm(params, config.clip_norm);
      lr = lr_schedule(step, schedule);
      adam_step(params, optimizer, lr);
    } catch (const NonFiniteValue& e) {
      throw NonFiniteValue("at step " + std::to_string(step) + ": " + e.what());
    } catch (const NonFiniteGradient& e) {
      throw NonFiniteGradient("at step " + std::to_string(step) + ": " + e.what());
    }
    const double ce = static_cast<double>(loss.item());
    result.step_losses.push_back(ce);
    result.steps = step;
    if (config.log_interval > 0 && step % config.log_interval == 0) {
      log.append({Split::train, ce, step, elapsed(), lr});
    }
    if (config.eval_interval > 0 && step % config.eval_interval == 0 && step != config.steps) run_eval(step, lr);
    if (out_dir && config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0) {
      save_checkpoint(make_checkpoint(model, config, data, &optimizer, rng, step),
                      *out_dir / ("checkpoint_step" + std::to_string(step) + ".bin"));
    }
  }
  run_eval(config.steps, lr);
  if (out_dir) {
    save_checkpoint(make_checkpoint(model, config, data, &optimizer, rng, config.steps), *out_dir / "checkpoint_final.bin");
  }
  result.log = log.rows();
  return result;
}

}  // namespace charlm
