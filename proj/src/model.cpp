#include "lexnmt/model.hpp"

#include "lexnmt/error.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace lexnmt {

std::string to_string(AttentionKind kind) { return kind == AttentionKind::Dot ? "dot" : "mlp"; }

AttentionKind parse_attention_kind(const std::string& name) {
  if (name == "dot") return AttentionKind::Dot;
  if (name == "mlp") return AttentionKind::Mlp;
  throw std::invalid_argument("unknown attention kind '" + name + "' (expected dot or mlp)");
}

// ---------------------------------------------------------------- Parameters

std::vector<std::pair<std::string, Matrix*>> Parameters::tensors() {
  return {
      {"source_embed", &source_embed},
      {"target_embed", &target_embed},
      {"encoder_forward.weight", &encoder_forward.weight},
      {"encoder_forward.bias", &encoder_forward.bias},
      {"encoder_backward.weight", &encoder_backward.weight},
      {"encoder_backward.bias", &encoder_backward.bias},
      {"decoder.weight", &decoder.weight},
      {"decoder.bias", &decoder.bias},
      {"attention.hidden", &attention_hidden},
      {"attention.out", &attention_out},
      {"eta.weight", &eta_weight},
      {"eta.bias", &eta_bias},
      {"output.weight", &output_weight},
      {"output.bias", &output_bias},
  };
}

std::vector<std::pair<std::string, const Matrix*>> Parameters::tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, m] : const_cast<Parameters*>(this)->tensors()) out.emplace_back(std::move(name), m);
  return out;
}

bool Parameters::operator==(const Parameters& other) const {
  auto a = tensors();
  auto b = other.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Matrix& x = *a[i].second;
    const Matrix& y = *b[i].second;
    if (x.rows() != y.rows() || x.cols() != y.cols() || x != y) return false;
  }
  return true;
}

std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> expected_shapes(const ModelConfig& c) {
  const Eigen::Index e = c.embed_dim, h = c.hidden_dim, d = c.decoder_dim(), r = c.annotation_dim(),
                     o = c.output_dim(), a = c.attention == AttentionKind::Mlp ? c.mlp_dim() : 0;
  const auto vf = static_cast<Eigen::Index>(c.source_vocab_size);
  const auto ve = static_cast<Eigen::Index>(c.target_vocab_size);
  return {
      {"source_embed", {e, vf}},
      {"target_embed", {e, ve}},
      {"encoder_forward.weight", {3 * h, e + h}},
      {"encoder_forward.bias", {3 * h, 1}},
      {"encoder_backward.weight", {3 * h, e + h}},
      {"encoder_backward.bias", {3 * h, 1}},
      {"decoder.weight", {3 * d, e + r + d}},
      {"decoder.bias", {3 * d, 1}},
      {"attention.hidden", {a, a > 0 ? d + r : 0}},
      {"attention.out", {a, a > 0 ? 1 : 0}},
      {"eta.weight", {o, d + r}},
      {"eta.bias", {o, 1}},
      {"output.weight", {ve, o}},
      {"output.bias", {ve, 1}},
  };
}

Parameters Parameters::zeros(const ModelConfig& config) {
  Parameters p;
  auto shapes = expected_shapes(config);
  auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) ts[i].second->setZero(shapes[i].second.first, shapes[i].second.second);
  return p;
}

Parameters Parameters::random(const ModelConfig& config, std::uint64_t seed) {
  Parameters p = zeros(config);
  std::mt19937_64 rng(seed);
  for (auto& [name, m] : p.tensors()) {
    const bool is_bias = name.ends_with("bias");
    if (is_bias || m->size() == 0) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(m->rows() + m->cols()));
    for (Eigen::Index j = 0; j < m->cols(); ++j)
      for (Eigen::Index i = 0; i < m->rows(); ++i) (*m)(i, j) = (2.0 * uniform01(rng) - 1.0) * limit;
  }
  return p;
}

Model Model::create(const Vocabulary& source_vocab, const Vocabulary& target_vocab, ModelConfig config,
                    std::uint64_t seed, std::optional<LexiconTable> lexicon) {
  if (config.embed_dim < 1 || config.hidden_dim < 1) throw std::invalid_argument("model dimensions must be positive");
  config.source_vocab_size = source_vocab.size();
  config.target_vocab_size = target_vocab.size();
  config.use_lexicon = lexicon.has_value();
  if (config.use_lexicon && !(config.epsilon > 0.0))
    throw std::invalid_argument("lexicon bias requires epsilon > 0");
  Model m{config, Parameters::random(config, seed), source_vocab, target_vocab, std::move(lexicon)};
  return m;
}

BoundParameters BoundParameters::bind(Tape& tape, const Parameters& p, Parameters* g) {
  auto leaf = [&](const Matrix& value, Matrix Parameters::*member) {
    return tape.parameter(value, g ? &(g->*member) : nullptr);
  };
  auto lstm = [&](const LstmParams& value, LstmParams Parameters::*member) {
    LstmParams* sink = g ? &(g->*member) : nullptr;
    return BoundLstm{tape.parameter(value.weight, sink ? &sink->weight : nullptr),
                     tape.parameter(value.bias, sink ? &sink->bias : nullptr)};
  };
  BoundParameters b;
  b.source_embed = leaf(p.source_embed, &Parameters::source_embed);
  b.target_embed = leaf(p.target_embed, &Parameters::target_embed);
  b.encoder_forward = lstm(p.encoder_forward, &Parameters::encoder_forward);
  b.encoder_backward = lstm(p.encoder_backward, &Parameters::encoder_backward);
  b.decoder = lstm(p.decoder, &Parameters::decoder);
  b.attention_hidden = leaf(p.attention_hidden, &Parameters::attention_hidden);
  b.attention_out = leaf(p.attention_out, &Parameters::attention_out);
  b.eta_weight = leaf(p.eta_weight, &Parameters::eta_weight);
  b.eta_bias = leaf(p.eta_bias, &Parameters::eta_bias);
  b.output_weight = leaf(p.output_weight, &Parameters::output_weight);
  b.output_bias = leaf(p.output_bias, &Parameters::output_bias);
  return b;
}

// ---------------------------------------------------------------- network

LstmState lstm_step(const BoundLstm& lstm, Var input, const LstmState& state) {
  const Eigen::Index h = state.hidden.rows();
  if (lstm.weight.rows() != 3 * h || lstm.weight.cols() != input.rows() + h || state.cell.rows() != h ||
      input.cols() != 1)
    throw std::invalid_argument("lstm_step: dimension mismatch (weight " + std::to_string(lstm.weight.rows()) + "x" +
                                std::to_string(lstm.weight.cols()) + ", input " + std::to_string(input.rows()) +
                                ", hidden " + std::to_string(h) + ")");
  Var gates = ad::product(lstm.weight, ad::vconcat<double>({input, state.hidden})) + lstm.bias;
  Var input_gate = ad::sigmoid(ad::middle_rows(gates, 0, h));
  Var output_gate = ad::sigmoid(ad::middle_rows(gates, h, h));
  Var candidate = ad::tanh(ad::middle_rows(gates, 2 * h, h));
  Var forget_gate = ad::one_minus(input_gate);
  Var cell = ad::cwise_product(forget_gate, state.cell) + ad::cwise_product(input_gate, candidate);
  Var hidden = ad::cwise_product(output_gate, ad::tanh(cell));
  return {hidden, cell};
}

EncoderOutput encode(Tape& tape, const BoundParameters& params, std::span<const TokenId> source) {
  if (source.empty()) throw std::invalid_argument("encode: empty source sentence");
  const Eigen::Index h = params.encoder_forward.bias.rows() / 3;
  const auto n = static_cast<Eigen::Index>(source.size());
  const LstmState zero{tape.constant(Matrix::Zero(h, 1)), tape.constant(Matrix::Zero(h, 1))};
  Var end_embed = ad::column(params.source_embed, Vocabulary::kEndId);

  std::vector<Var> forward(source.size()), backward(source.size());
  LstmState state = zero;
  for (std::size_t j = 0; j < source.size(); ++j) {
    state = lstm_step(params.encoder_forward, ad::column(params.source_embed, source[j]), state);
    forward[j] = state.hidden;
  }
  const LstmState forward_end = lstm_step(params.encoder_forward, end_embed, state);

  state = zero;
  for (std::size_t j = source.size(); j-- > 0;) {
    state = lstm_step(params.encoder_backward, ad::column(params.source_embed, source[j]), state);
    backward[j] = state.hidden;
  }
  const LstmState backward_end = lstm_step(params.encoder_backward, end_embed, state);

  std::vector<Var> columns;
  columns.reserve(source.size());
  for (std::size_t j = 0; j < source.size(); ++j) columns.push_back(ad::vconcat<double>({backward[j], forward[j]}));

  EncoderOutput out;
  out.annotations = ad::hconcat(columns);
  out.final_state = {ad::vconcat<double>({backward_end.hidden, forward_end.hidden}),
                     ad::vconcat<double>({backward_end.cell, forward_end.cell})};
  out.length = n;
  return out;
}

Attention attend(const BoundParameters& params, AttentionKind kind, Var hidden, Var annotations) {
  if (annotations.cols() < 1) throw std::invalid_argument("attend: no source positions");
  Var scores;
  if (kind == AttentionKind::Dot) {
    if (hidden.rows() != annotations.rows())
      throw std::invalid_argument("attend: dot attention needs hidden width " + std::to_string(hidden.rows()) +
                                  " == annotation width " + std::to_string(annotations.rows()));
    scores = ad::transpose_product(annotations, hidden);
  } else {
    Var stacked = ad::vconcat<double>({ad::replicate_cols(hidden, annotations.cols()), annotations});
    Var layer = ad::tanh(ad::product(params.attention_hidden, stacked));
    scores = ad::transpose_product(layer, params.attention_out);
  }
  Var weights = ad::softmax(scores);
  return {weights, ad::product(annotations, weights)};
}

DecoderState initial_decoder_state(Tape& tape, const EncoderOutput& encoded) {
  return {encoded.final_state, tape.constant(Matrix::Zero(encoded.annotations.rows(), 1))};
}

StepOutput decoder_step(const BoundParameters& params, const ModelConfig& config, const EncoderOutput& encoded,
                        const DecoderState& state, TokenId previous, const LexiconBias* bias) {
  if (bias != nullptr && !(bias->epsilon > 0.0))
    throw std::invalid_argument("lexicon bias: epsilon must be > 0 to prevent zero probabilities from becoming -inf");
  Var input = ad::vconcat<double>({ad::column(params.target_embed, previous), state.context});
  LstmState lstm = lstm_step(params.decoder, input, state.lstm);
  Attention att = attend(params, config.attention, lstm.hidden, encoded.annotations);
  Var eta = ad::product(params.eta_weight, ad::vconcat<double>({lstm.hidden, att.context})) + params.eta_bias;
  Var logits = ad::product(params.output_weight, eta) + params.output_bias;
  if (bias != nullptr) {
    if (bias->matrix->rows() != logits.rows() || bias->matrix->cols() != encoded.length)
      throw std::invalid_argument("lexicon bias: matrix shape does not match vocabulary and source length");
    Var prior = ad::sparse_product(bias->matrix, att.weights);
    logits = logits + ad::log(ad::add_scalar(prior, bias->epsilon));
  }
  return {{lstm, att.context}, ad::log_softmax(logits), att.weights};
}

SparseMatrix build_lexicon_matrix(std::span<const TokenId> source, const LexiconTable& table,
                                  std::size_t target_vocab_size) {
  std::vector<Eigen::Triplet<double>> triplets;
  for (std::size_t j = 0; j < source.size(); ++j) {
    const auto* dist = table.find(source[j]);
    if (dist == nullptr) continue;
    for (const auto& [e, p] : *dist) {
      if (e < 0 || static_cast<std::size_t>(e) >= target_vocab_size)
        throw DataError("lexicon: target id " + std::to_string(e) + " outside the target vocabulary");
      triplets.emplace_back(e, static_cast<int>(j), p);
    }
  }
  SparseMatrix m(static_cast<Eigen::Index>(target_vocab_size), static_cast<Eigen::Index>(source.size()));
  m.setFromTriplets(triplets.begin(), triplets.end());
  return m;
}

std::optional<LexiconBias> lexicon_bias_for(const Model& model, std::span<const TokenId> source) {
  if (!model.config.use_lexicon || !model.lexicon) return std::nullopt;
  return LexiconBias{
      std::make_shared<const SparseMatrix>(build_lexicon_matrix(source, *model.lexicon, model.config.target_vocab_size)),
      model.config.epsilon};
}

Var target_log_likelihood(Tape& tape, const BoundParameters& params, const Model& model, const EncoderOutput& encoded,
                          const LexiconBias* bias, std::span<const TokenId> target) {
  if (target.empty()) throw std::invalid_argument("target_log_likelihood: empty target");
  DecoderState state = initial_decoder_state(tape, encoded);
  TokenId previous = model.target_vocab.end_id();
  std::vector<Var> picked;
  picked.reserve(target.size());
  for (TokenId word : target) {
    StepOutput out = decoder_step(params, model.config, encoded, state, previous, bias);
    picked.push_back(ad::element(out.log_probs, word));
    state = out.state;
    previous = word;
  }
  return ad::sum(ad::vconcat(picked));
}

Var sentence_log_likelihood(Tape& tape, const BoundParameters& params, const Model& model,
                            std::span<const TokenId> source, std::span<const TokenId> target) {
  if (target.empty() || target.back() != model.target_vocab.end_id())
    throw std::invalid_argument("sentence_log_likelihood: target must end with the sentence-end id");
  const auto bias = lexicon_bias_for(model, source);
  const EncoderOutput encoded = encode(tape, params, source);
  return target_log_likelihood(tape, params, model, encoded, bias ? &*bias : nullptr, target);
}

// ---------------------------------------------------------------- inference

InferenceSession::InferenceSession(const Model& model, std::span<const TokenId> source)
    : model_(model), bound_(BoundParameters::bind(tape_, model.params)), bias_(lexicon_bias_for(model, source)) {
  encoded_ = encode(tape_, bound_, source);
  initial_ = {encoded_.final_state.hidden.value(), encoded_.final_state.cell.value(),
              Vector::Zero(encoded_.annotations.rows())};
  mark_ = tape_.size();
}

InferenceSession::Step InferenceSession::step(const DecoderSnapshot& state, TokenId previous) {
  DecoderState s{{tape_.constant(state.hidden), tape_.constant(state.cell)}, tape_.constant(state.context)};
  StepOutput out = decoder_step(bound_, model_.config, encoded_, s, previous, bias_ ? &*bias_ : nullptr);
  Step result{out.log_probs.value(),
              {out.state.lstm.hidden.value(), out.state.lstm.cell.value(), out.state.context.value()},
              out.attention.value()};
  tape_.truncate(mark_);
  return result;
}

double sentence_logprob(std::span<const Model* const> models, std::span<const TokenId> source,
                        std::span<const TokenId> target) {
  if (models.empty()) throw std::invalid_argument("sentence_logprob: no models");
  const TokenId end = models.front()->target_vocab.end_id();
  if (target.empty() || target.back() != end)
    throw std::invalid_argument("sentence_logprob: target must end with the sentence-end id");

  std::vector<std::unique_ptr<InferenceSession>> sessions;
  std::vector<DecoderSnapshot> states;
  for (const Model* m : models) {
    if (m->config.target_vocab_size != models.front()->config.target_vocab_size)
      throw std::invalid_argument("sentence_logprob: ensemble members disagree on target vocabulary size");
    sessions.push_back(std::make_unique<InferenceSession>(*m, source));
    states.push_back(sessions.back()->initial_state());
  }

  double total = 0.0;
  TokenId previous = end;
  for (TokenId word : target) {
    double mean_prob = 0.0;
    double single_logprob = 0.0;
    for (std::size_t k = 0; k < sessions.size(); ++k) {
      auto step = sessions[k]->step(states[k], previous);
      single_logprob = step.log_probs(word);
      mean_prob += std::exp(step.log_probs(word));
      states[k] = std::move(step.state);
    }
    total += sessions.size() == 1 ? single_logprob : std::log(mean_prob / static_cast<double>(sessions.size()));
    previous = word;
  }
  return total;
}

double sentence_logprob(const Model& model, std::span<const TokenId> source, std::span<const TokenId> target) {
  const Model* one[] = {&model};
  return sentence_logprob(std::span<const Model* const>(one), source, target);
}

}  // namespace lexnmt
