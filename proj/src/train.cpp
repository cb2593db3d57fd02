#include "lexnmt/train.hpp"

#include "lexnmt/checkpoint.hpp"
#include "lexnmt/error.hpp"
#include "lexnmt/eval.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace lexnmt {

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (lr_schedule.empty()) throw std::invalid_argument("lr_schedule must not be empty");
  for (double lr : lr_schedule)
    if (!(lr > 0.0)) throw std::invalid_argument("lr_schedule entries must be positive");
  if (word_budget < 1) throw std::invalid_argument("word_budget must be at least 1");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  if (dev_check_interval < 1) throw std::invalid_argument("dev_check_interval must be at least 1");
  if (patience < 1) throw std::invalid_argument("patience must be at least 1");
  if (max_epochs < 0) throw std::invalid_argument("max_epochs must not be negative");
  if (mrt.num_samples < 2) throw std::invalid_argument("mrt.num_samples must be at least 2");
  if (!(mrt.alpha > 0.0)) throw std::invalid_argument("mrt.alpha must be positive");
  if (!(mrt.learning_rate > 0.0)) throw std::invalid_argument("mrt.learning_rate must be positive");
  if (mrt.epochs < 0) throw std::invalid_argument("mrt.epochs must not be negative");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["lr_schedule"] = lr_schedule;
  j["word_budget"] = word_budget;
  j["clip_norm"] = clip_norm;
  j["dev_check_interval"] = dev_check_interval;
  j["patience"] = patience;
  j["max_epochs"] = max_epochs;
  j["seed"] = seed;
  j["log_wall_time"] = log_wall_time;
  j["mrt"] = {{"num_samples", mrt.num_samples},
              {"alpha", mrt.alpha},
              {"max_sample_len", mrt.max_sample_len},
              {"learning_rate", mrt.learning_rate},
              {"epochs", mrt.epochs}};
  j["adam"] = {{"beta1", kAdamBeta1}, {"beta2", kAdamBeta2}, {"epsilon", kAdamEpsilon}};
  return j.dump();
}

// ---------------------------------------------------------------- losses

namespace {

Sentence with_end(const Sentence& target, TokenId end) {
  Sentence out = target;
  out.push_back(end);
  return out;
}

}  // namespace

LossAndGradient nll_loss(const Model& model, std::span<const SentencePair> batch) {
  if (batch.empty()) throw std::invalid_argument("nll_loss: empty batch");
  LossAndGradient out{0.0, Parameters::zeros(model.config)};
  for (const auto& pair : batch) {
    Tape tape;
    const BoundParameters bound = BoundParameters::bind(tape, model.params, &out.gradient);
    const Sentence target = with_end(pair.target, model.target_vocab.end_id());
    Var loss = ad::scale(sentence_log_likelihood(tape, bound, model, pair.source, target), -1.0);
    out.loss += loss.value()(0, 0);
    tape.backward(loss);
  }
  return out;
}

double nll_value(const Model& model, std::span<const SentencePair> pairs) {
  double total = 0.0;
  for (const auto& pair : pairs)
    total -= sentence_logprob(model, pair.source, with_end(pair.target, model.target_vocab.end_id()));
  return total;
}

double global_norm(const Parameters& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads.tensors()) sq += g->squaredNorm();
  return std::sqrt(sq);
}

double clip_gradients(Parameters& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericalError("non-finite gradient");
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& [name, g] : grads.tensors()) *g *= factor;
  }
  return norm;
}

AdamState AdamState::for_model(const ModelConfig& config) {
  return {Parameters::zeros(config), Parameters::zeros(config), 0};
}

void adam_update(Parameters& params, const Parameters& grads, AdamState& state, double lr) {
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.first_moment.tensors();
  auto v = state.second_moment.tensors();
  ++state.step;
  const double correction1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    Matrix& param = *p[i].second;
    const Matrix& grad = *g[i].second;
    if (grad.rows() != param.rows() || grad.cols() != param.cols())
      throw std::invalid_argument("adam_update: gradient shape mismatch for '" + p[i].first + "'");
    Matrix& m1 = *m[i].second;
    Matrix& m2 = *v[i].second;
    m1 = kAdamBeta1 * m1 + (1.0 - kAdamBeta1) * grad;
    m2 = kAdamBeta2 * m2 + (1.0 - kAdamBeta2) * grad.cwiseAbs2();
    param.array() -= lr * (m1.array() / correction1) / ((m2.array() / correction2).sqrt() + kAdamEpsilon);
  }
}

// ---------------------------------------------------------------- schedule

PlateauSchedule::PlateauSchedule(std::vector<double> rates, std::size_t patience)
    : rates_(std::move(rates)), patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (rates_.empty()) throw std::invalid_argument("PlateauSchedule: no learning rates");
}

PlateauSchedule::Action PlateauSchedule::observe(std::size_t sentences_seen, double dev_loss) {
  if (finished_) return Action::Stop;
  if (dev_loss < best_) {
    best_ = dev_loss;
    last_improvement_ = sentences_seen;
    return Action::Improved;
  }
  if (sentences_seen - last_improvement_ < patience_) return Action::Continue;
  if (stage_ + 1 < rates_.size()) {
    ++stage_;
    last_improvement_ = sentences_seen;
    return Action::Restart;
  }
  finished_ = true;
  return Action::Stop;
}

// ---------------------------------------------------------------- log

std::string TrainRecord::to_json() const {
  nlohmann::ordered_json j;
  j["sentences_seen"] = sentences_seen;
  j["lr"] = lr;
  j["train_loss"] = train_loss;
  if (dev_loss) j["dev_loss"] = *dev_loss;
  if (expected_error) j["expected_error"] = *expected_error;
  j["wall_time"] = wall_time ? nlohmann::ordered_json(*wall_time) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

TrainLog::TrainLog(std::string header, std::filesystem::path path) : header_(std::move(header)), path_(std::move(path)) {
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write training log '" + path_.string() + "'");
    out << header_ << '\n';
  }
}

void TrainLog::append(const TrainRecord& record) {
  records_.push_back(record);
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    out << record.to_json() << '\n';
  }
}

std::string TrainLog::str() const {
  std::string out = header_ + '\n';
  for (const auto& r : records_) out += r.to_json() + '\n';
  return out;
}

// ---------------------------------------------------------------- ML training

namespace {

template <typename T>
void shuffle(std::vector<T>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(items[i - 1], items[std::min(j, i - 1)]);
  }
}

std::size_t target_tokens(std::span<const SentencePair> pairs) {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.target.size() + 1;
  return n;
}

std::string log_header(const char* kind, const Model& model, const TrainConfig& config) {
  nlohmann::ordered_json j;
  j["kind"] = kind;
  j["config"] = nlohmann::json::parse(config.to_json());
  j["model"] = {{"attention", to_string(model.config.attention)},
                {"embed_dim", model.config.embed_dim},
                {"hidden_dim", model.config.hidden_dim},
                {"attention_dim", model.config.attention_dim},
                {"use_lexicon", model.config.use_lexicon},
                {"epsilon", model.config.epsilon},
                {"source_vocab_size", model.config.source_vocab_size},
                {"target_vocab_size", model.config.target_vocab_size}};
  return j.dump();
}

class WallClock {
 public:
  explicit WallClock(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  std::optional<double> now() const {
    if (!enabled_) return std::nullopt;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

std::filesystem::path prepare_run_dir(const TrainConfig& config) {
  if (config.run_dir.empty()) return {};
  std::error_code ec;
  std::filesystem::create_directories(config.run_dir, ec);
  if (ec) throw DataError("cannot create run directory '" + config.run_dir.string() + "': " + ec.message());
  return config.run_dir;
}

}  // namespace

TrainResult train_ml(const Model& init, const std::vector<SentencePair>& train, const std::vector<SentencePair>& dev,
                     const TrainConfig& config, DevEvaluator evaluator, EpochCallback on_epoch) {
  config.validate();
  if (train.empty() || dev.empty()) throw std::invalid_argument("train_ml: empty training or dev set");
  if (!evaluator) {
    const double dev_tokens = static_cast<double>(target_tokens(dev));
    evaluator = [&dev, dev_tokens](const Model& m) { return nll_value(m, dev) / dev_tokens; };
  }
  const auto run_dir = prepare_run_dir(config);
  const WallClock clock(config.log_wall_time);

  TrainResult result{init, TrainLog(log_header("ml", init, config), run_dir.empty() ? run_dir : run_dir / "train.log")};
  Model model = init;
  AdamState adam = AdamState::for_model(model.config);
  PlateauSchedule schedule(config.lr_schedule, config.patience);
  std::mt19937_64 rng(config.seed);
  std::vector<Minibatch> batches = make_minibatches(train, config.word_budget);

  std::size_t seen = 0;
  double window_loss = 0.0;
  std::size_t window_tokens = 0;

  // Returns false when training should stop.
  auto check_dev = [&]() {
    const double dev_loss = evaluator(model);
    if (!std::isfinite(dev_loss)) throw NumericalError("non-finite dev loss after " + std::to_string(seen) + " sentences");
    const double lr = schedule.learning_rate();
    const auto action = schedule.observe(seen, dev_loss);
    TrainRecord record;
    record.sentences_seen = seen;
    record.lr = lr;
    record.train_loss = window_tokens ? window_loss / static_cast<double>(window_tokens) : 0.0;
    record.dev_loss = dev_loss;
    record.wall_time = clock.now();
    result.log.append(record);
    window_loss = 0.0;
    window_tokens = 0;
    switch (action) {
      case PlateauSchedule::Action::Improved:
        result.model = model;
        result.best_dev = dev_loss;
        if (!run_dir.empty()) save_checkpoint(run_dir / "model.ckpt", model);
        return true;
      case PlateauSchedule::Action::Restart:
        model = result.model;
        adam = AdamState::for_model(model.config);
        ++result.restarts;
        return true;
      case PlateauSchedule::Action::Stop:
        return false;
      case PlateauSchedule::Action::Continue:
        return true;
    }
    return true;
  };

  bool running = check_dev();
  std::size_t next_check = config.dev_check_interval;
  std::size_t batch_index = 0;
  int epoch = 0;
  while (running && (config.max_epochs == 0 || epoch < config.max_epochs)) {
    ++epoch;
    shuffle(batches, rng);
    for (const auto& batch : batches) {
      std::vector<SentencePair> pairs;
      pairs.reserve(batch.size());
      for (std::size_t idx : batch) pairs.push_back(train[idx]);
      LossAndGradient lg = nll_loss(model, pairs);
      if (!std::isfinite(lg.loss)) throw NumericalError("non-finite loss in batch " + std::to_string(batch_index));
      try {
        clip_gradients(lg.gradient, config.clip_norm);
      } catch (const NumericalError&) {
        throw NumericalError("non-finite gradient in batch " + std::to_string(batch_index));
      }
      adam_update(model.params, lg.gradient, adam, schedule.learning_rate());
      ++batch_index;
      seen += pairs.size();
      window_loss += lg.loss;
      window_tokens += target_tokens(pairs);
      if (seen >= next_check) {
        while (next_check <= seen) next_check += config.dev_check_interval;
        if (!(running = check_dev())) break;
      }
    }
    if (running && on_epoch && !on_epoch(model, epoch)) break;
  }
  if (running && window_tokens > 0) check_dev();

  result.sentences_seen = seen;
  result.epochs = epoch;
  result.final_lr = schedule.learning_rate();
  return result;
}

// ---------------------------------------------------------------- sampling and risk

std::size_t default_max_len(std::size_t source_length) { return 2 * source_length + 10; }

Sentence strip_end(const Sentence& tokens, TokenId end_id) {
  if (!tokens.empty() && tokens.back() == end_id) return Sentence(tokens.begin(), tokens.end() - 1);
  return tokens;
}

Sample sample_translation(const Model& model, std::span<const TokenId> source, std::size_t max_len,
                          std::mt19937_64& rng) {
  if (max_len < 1) throw std::invalid_argument("sample_translation: max_len must be at least 1");
  InferenceSession session(model, source);
  DecoderSnapshot state = session.initial_state();
  const TokenId end = session.end_id();
  Sample sample;
  TokenId previous = end;
  while (sample.tokens.size() < max_len) {
    auto step = session.step(state, previous);
    const Vector probs = step.log_probs.array().exp();
    const auto word = static_cast<TokenId>(sample_categorical(probs, rng));
    sample.tokens.push_back(word);
    sample.logprob += step.log_probs(word);
    if (word == end) break;
    state = std::move(step.state);
    previous = word;
  }
  return sample;
}

Vector risk_weights(const Vector& logprobs, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("risk_weights: alpha must be positive");
  return softmax(Vector(alpha * logprobs));
}

double expected_risk(const Vector& errors, const Vector& logprobs, double alpha) {
  if (errors.size() != logprobs.size() || errors.size() == 0)
    throw std::invalid_argument("expected_risk: errors and log-probabilities must be non-empty and equal in size");
  return errors.dot(risk_weights(logprobs, alpha));
}

namespace {

std::vector<Sample> draw_unique(const Model& model, std::span<const TokenId> source, int num_samples,
                                std::size_t max_len, std::mt19937_64& rng) {
  if (num_samples < 2) throw std::invalid_argument("mrt: num_samples must be at least 2");
  if (max_len == 0) max_len = default_max_len(source.size());
  std::vector<Sample> unique;
  std::map<Sentence, bool> seen;
  for (int k = 0; k < num_samples; ++k) {
    Sample s = sample_translation(model, source, max_len, rng);
    if (seen.emplace(s.tokens, true).second) unique.push_back(std::move(s));
  }
  const TokenId end = model.target_vocab.end_id();
  bool any_content = false;
  for (const auto& s : unique) any_content = any_content || !strip_end(s.tokens, end).empty();
  if (!any_content) throw DegenerateSampleError("all samples empty");
  return unique;
}

}  // namespace

LossAndGradient mrt_loss_fixed(const Model& model, std::span<const TokenId> source, const Sentence& reference,
                               const std::vector<Sentence>& samples, double alpha) {
  if (samples.empty()) throw std::invalid_argument("mrt_loss_fixed: no samples");
  if (!(alpha > 0.0)) throw std::invalid_argument("mrt_loss_fixed: alpha must be positive");
  const TokenId end = model.target_vocab.end_id();
  LossAndGradient out{0.0, Parameters::zeros(model.config)};

  Tape tape;
  const BoundParameters bound = BoundParameters::bind(tape, model.params, &out.gradient);
  const auto bias = lexicon_bias_for(model, source);
  const EncoderOutput encoded = encode(tape, bound, source);

  std::vector<Var> logprobs;
  Matrix errors(static_cast<Eigen::Index>(samples.size()), 1);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    logprobs.push_back(target_log_likelihood(tape, bound, model, encoded, bias ? &*bias : nullptr, samples[k]));
    errors(static_cast<Eigen::Index>(k), 0) = mrt_error(reference, strip_end(samples[k], end));
  }
  Var weights = ad::softmax(ad::scale(ad::vconcat(logprobs), alpha));
  Var loss = ad::transpose_product(tape.constant(std::move(errors)), weights);
  out.loss = loss.value()(0, 0);
  tape.backward(loss);
  return out;
}

MrtLoss mrt_loss(const Model& model, std::span<const TokenId> source, const Sentence& reference, int num_samples,
                 double alpha, std::size_t max_len, std::mt19937_64& rng) {
  MrtLoss out;
  for (auto& s : draw_unique(model, source, num_samples, max_len, rng)) out.samples.push_back(std::move(s.tokens));
  out.value = mrt_loss_fixed(model, source, reference, out.samples, alpha);
  return out;
}

double sampled_risk(const Model& model, std::span<const TokenId> source, const Sentence& reference, int num_samples,
                    double alpha, std::size_t max_len, std::mt19937_64& rng) {
  const auto samples = draw_unique(model, source, num_samples, max_len, rng);
  const TokenId end = model.target_vocab.end_id();
  Vector errors(static_cast<Eigen::Index>(samples.size()));
  Vector logprobs(static_cast<Eigen::Index>(samples.size()));
  for (std::size_t k = 0; k < samples.size(); ++k) {
    errors(static_cast<Eigen::Index>(k)) = mrt_error(reference, strip_end(samples[k].tokens, end));
    logprobs(static_cast<Eigen::Index>(k)) = samples[k].logprob;
  }
  return expected_risk(errors, logprobs, alpha);
}

double mean_sampled_sbleu(const Model& model, const std::vector<SentencePair>& pairs, int samples_per_pair,
                          std::uint64_t seed) {
  if (pairs.empty() || samples_per_pair < 1) throw std::invalid_argument("mean_sampled_sbleu: nothing to sample");
  std::mt19937_64 rng(seed);
  const TokenId end = model.target_vocab.end_id();
  double total = 0.0;
  for (const auto& p : pairs)
    for (int k = 0; k < samples_per_pair; ++k) {
      const Sample s = sample_translation(model, p.source, default_max_len(p.source.size()), rng);
      total += sbleu(strip_end(s.tokens, end), p.target);
    }
  return total / static_cast<double>(pairs.size() * static_cast<std::size_t>(samples_per_pair));
}

// ---------------------------------------------------------------- MRT training

namespace {

double dev_risk(const Model& model, const std::vector<SentencePair>& dev, const MrtConfig& mrt, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& p : dev) {
    try {
      total += sampled_risk(model, p.source, p.target, mrt.num_samples, mrt.alpha, mrt.max_sample_len, rng);
    } catch (const DegenerateSampleError&) {
      total += 1.0;
    }
    ++counted;
  }
  return total / static_cast<double>(counted);
}

}  // namespace

TrainResult train_mrt(const Model& init, const std::vector<SentencePair>& train, const std::vector<SentencePair>& dev,
                      const TrainConfig& config, EpochCallback on_epoch) {
  config.validate();
  if (train.empty() || dev.empty()) throw std::invalid_argument("train_mrt: empty training or dev set");
  const auto run_dir = prepare_run_dir(config);
  const WallClock clock(config.log_wall_time);
  const std::uint64_t dev_seed = config.seed ^ 0x9E3779B97F4A7C15ull;

  TrainResult result{init, TrainLog(log_header("mrt", init, config), run_dir.empty() ? run_dir : run_dir / "mrt.log")};
  Model model = init;
  AdamState adam = AdamState::for_model(model.config);
  std::mt19937_64 rng(config.seed);
  const double lr = config.mrt.learning_rate;

  result.best_dev = dev_risk(model, dev, config.mrt, dev_seed);
  {
    TrainRecord record;
    record.lr = lr;
    record.expected_error = result.best_dev;
    record.wall_time = clock.now();
    result.log.append(record);
  }
  if (!run_dir.empty()) save_checkpoint(run_dir / "model.ckpt", model);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t seen = 0;
  int epoch = 0;
  while (epoch < config.mrt.epochs) {
    ++epoch;
    shuffle(order, rng);
    double epoch_risk = 0.0;
    std::size_t updates = 0;
    for (std::size_t idx : order) {
      const auto& pair = train[idx];
      ++seen;
      MrtLoss lg;
      try {
        lg = mrt_loss(model, pair.source, pair.target, config.mrt.num_samples, config.mrt.alpha,
                      config.mrt.max_sample_len, rng);
      } catch (const DegenerateSampleError&) {
        continue;
      }
      if (!std::isfinite(lg.value.loss))
        throw NumericalError("non-finite risk at sentence " + std::to_string(seen));
      clip_gradients(lg.value.gradient, config.clip_norm);
      adam_update(model.params, lg.value.gradient, adam, lr);
      epoch_risk += lg.value.loss;
      ++updates;
    }
    const double risk = dev_risk(model, dev, config.mrt, dev_seed);
    TrainRecord record;
    record.sentences_seen = seen;
    record.lr = lr;
    record.train_loss = updates ? epoch_risk / static_cast<double>(updates) : 0.0;
    record.expected_error = risk;
    record.wall_time = clock.now();
    result.log.append(record);
    if (risk < result.best_dev) {
      result.best_dev = risk;
      result.model = model;
      if (!run_dir.empty()) save_checkpoint(run_dir / "model.ckpt", model);
    }
    if (on_epoch && !on_epoch(model, epoch)) break;
  }
  result.sentences_seen = seen;
  result.epochs = epoch;
  result.final_lr = lr;
  return result;
}

}  // namespace lexnmt
