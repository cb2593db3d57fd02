#ifndef LEXNMT_TRAIN_HPP
#define LEXNMT_TRAIN_HPP

#include "lexnmt/corpus.hpp"
#include "lexnmt/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lexnmt {

struct MrtConfig {
  int num_samples = 20;
  double alpha = 0.005;
  std::size_t max_sample_len = 0;  // 0: 2|F| + 10
  double learning_rate = 0.001;
  int epochs = 5;
};

struct TrainConfig {
  std::vector<double> lr_schedule{0.001, 0.0005, 0.00025};
  std::size_t word_budget = 2048;
  double clip_norm = 5.0;
  std::size_t dev_check_interval = 250000;  // sentences
  std::size_t patience = 2000000;           // sentences without dev improvement
  int max_epochs = 0;                       // 0: run until the schedule finishes
  MrtConfig mrt;
  std::uint64_t seed = 1;
  bool log_wall_time = false;
  std::filesystem::path run_dir;  // empty: keep everything in memory

  double initial_lr() const { return lr_schedule.front(); }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  /// Single-line JSON object with every field.
  std::string to_json() const;
};

struct LossAndGradient {
  double loss = 0.0;
  Parameters gradient;
};

/// Sum over pairs and target positions (plus the sentence end) of
/// -log p(e_i | F, e_<i).
LossAndGradient nll_loss(const Model& model, std::span<const SentencePair> batch);
double nll_value(const Model& model, std::span<const SentencePair> pairs);

double global_norm(const Parameters& grads);
/// Rescales to `max_norm` when the global L2 norm exceeds it; returns the norm
/// before clipping. Throws NumericalError on NaN/Inf.
double clip_gradients(Parameters& grads, double max_norm = 5.0);

struct AdamState {
  Parameters first_moment;
  Parameters second_moment;
  std::int64_t step = 0;

  static AdamState for_model(const ModelConfig& config);
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

void adam_update(Parameters& params, const Parameters& grads, AdamState& state, double lr);

/// Dev-driven learning-rate schedule: stays on a rate until `patience`
/// sentences pass without improvement, then moves to the next rate (the
/// caller restores the best model), and stops after the last rate.
class PlateauSchedule {
 public:
  enum class Action { Continue, Improved, Restart, Stop };

  PlateauSchedule(std::vector<double> rates, std::size_t patience);

  Action observe(std::size_t sentences_seen, double dev_loss);
  double learning_rate() const { return rates_[stage_]; }
  std::size_t stage() const { return stage_; }
  double best_loss() const { return best_; }
  bool finished() const { return finished_; }

 private:
  std::vector<double> rates_;
  std::size_t patience_;
  std::size_t stage_ = 0;
  std::size_t last_improvement_ = 0;
  double best_;
  bool finished_ = false;
};

struct TrainRecord {
  std::size_t sentences_seen = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> dev_loss;
  std::optional<double> expected_error;
  std::optional<double> wall_time;

  std::string to_json() const;
};

/// Line-delimited JSON log: one header line with the effective configuration,
/// then one line per record. Mirrors to `path` when one is attached.
class TrainLog {
 public:
  TrainLog() = default;
  TrainLog(std::string header, std::filesystem::path path);

  void append(const TrainRecord& record);
  const std::vector<TrainRecord>& records() const { return records_; }
  const std::string& header() const { return header_; }
  std::string str() const;

 private:
  std::string header_;
  std::filesystem::path path_;
  std::vector<TrainRecord> records_;
};

using DevEvaluator = std::function<double(const Model&)>;
/// Called after every epoch with the current (not best) model; return false to stop.
using EpochCallback = std::function<bool(const Model&, int epoch)>;

struct TrainResult {
  Model model;  // best on the dev set
  TrainLog log;
  double best_dev = 0.0;
  std::size_t sentences_seen = 0;
  int epochs = 0;
  std::size_t restarts = 0;
  double final_lr = 0.0;
};

/// Maximum-likelihood training with word-budget minibatches, gradient
/// clipping, ADAM and the plateau schedule. The default evaluator is per-token
/// dev NLL.
TrainResult train_ml(const Model& init, const std::vector<SentencePair>& train, const std::vector<SentencePair>& dev,
                     const TrainConfig& config, DevEvaluator evaluator = {}, EpochCallback on_epoch = {});

struct Sample {
  Sentence tokens;  // ends with the sentence-end id unless truncated
  double logprob = 0.0;
};

/// Ancestral sampling, one word at a time until the sentence end is drawn or
/// `max_len` tokens were produced.
Sample sample_translation(const Model& model, std::span<const TokenId> source, std::size_t max_len,
                          std::mt19937_64& rng);

std::size_t default_max_len(std::size_t source_length);

/// Content tokens of a sample or hypothesis, i.e. without a trailing sentence end.
Sentence strip_end(const Sentence& tokens, TokenId end_id);

/// Normalized sample weights P^alpha / sum P^alpha from log-probabilities.
Vector risk_weights(const Vector& logprobs, double alpha);
double expected_risk(const Vector& errors, const Vector& logprobs, double alpha);

/// Thrown when every sample is the empty translation.
class DegenerateSampleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Risk and its exact gradient over a fixed sample set.
LossAndGradient mrt_loss_fixed(const Model& model, std::span<const TokenId> source, const Sentence& reference,
                               const std::vector<Sentence>& samples, double alpha);

struct MrtLoss {
  LossAndGradient value;
  std::vector<Sentence> samples;  // deduplicated, in order of first appearance
};

/// Draws `num_samples` translations, deduplicates them and returns the
/// expected 1 - BLEU+1 under the alpha-sharpened renormalized distribution.
/// `reference` holds content tokens only.
MrtLoss mrt_loss(const Model& model, std::span<const TokenId> source, const Sentence& reference, int num_samples,
                 double alpha, std::size_t max_len, std::mt19937_64& rng);

/// Value-only counterpart of mrt_loss.
double sampled_risk(const Model& model, std::span<const TokenId> source, const Sentence& reference, int num_samples,
                    double alpha, std::size_t max_len, std::mt19937_64& rng);

/// Mean SBLEU of single samples drawn for each pair.
double mean_sampled_sbleu(const Model& model, const std::vector<SentencePair>& pairs, int samples_per_pair,
                          std::uint64_t seed);

/// Minimum-risk fine-tuning, one update per sentence, selecting the model
/// with the lowest dev expected sampled error.
TrainResult train_mrt(const Model& init, const std::vector<SentencePair>& train, const std::vector<SentencePair>& dev,
                      const TrainConfig& config, EpochCallback on_epoch = {});

}  // namespace lexnmt

#endif  // LEXNMT_TRAIN_HPP
