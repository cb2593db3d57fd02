#ifndef LEXNMT_MODEL_HPP
#define LEXNMT_MODEL_HPP

#include "lexnmt/align.hpp"
#include "lexnmt/autodiff.hpp"
#include "lexnmt/corpus.hpp"
#include "lexnmt/numeric.hpp"

#include <Eigen/SparseCore>

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace lexnmt {

using Tape = ad::Tape<double>;
using Var = ad::Var<double>;
using SparseMatrix = Eigen::SparseMatrix<double>;

enum class AttentionKind { Dot, Mlp };

std::string to_string(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& name);

struct ModelConfig {
  std::size_t source_vocab_size = 0;
  std::size_t target_vocab_size = 0;
  int embed_dim = 64;
  int hidden_dim = 64;     // per encoder direction
  int attention_dim = 0;   // MLP hidden width; 0 means decoder width
  AttentionKind attention = AttentionKind::Dot;
  bool use_lexicon = false;
  double epsilon = 1e-6;

  int decoder_dim() const { return 2 * hidden_dim; }
  int annotation_dim() const { return 2 * hidden_dim; }
  int mlp_dim() const { return attention_dim > 0 ? attention_dim : decoder_dim(); }
  int output_dim() const { return decoder_dim(); }

  bool operator==(const ModelConfig&) const = default;
};

// Gate rows are stacked as [input; output; candidate]. The forget gate is
// 1 - input and has no parameters of its own.
struct LstmParams {
  Matrix weight;  // 3H x (input + H)
  Matrix bias;    // 3H x 1
};

struct Parameters {
  Matrix source_embed;  // E x |V_f|, one column per word
  Matrix target_embed;  // E x |V_e|
  LstmParams encoder_forward;
  LstmParams encoder_backward;
  LstmParams decoder;
  Matrix attention_hidden;  // A x (D + C), MLP attention only
  Matrix attention_out;     // A x 1, MLP attention only
  Matrix eta_weight;        // O x (D + C)
  Matrix eta_bias;          // O x 1
  Matrix output_weight;     // |V_e| x O
  Matrix output_bias;       // |V_e| x 1

  /// Tensors in a fixed order with stable names. Empty tensors (attention
  /// weights of a dot-product model) are included.
  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;

  static Parameters zeros(const ModelConfig& config);
  /// Glorot-uniform weights, zero biases.
  static Parameters random(const ModelConfig& config, std::uint64_t seed);

  bool operator==(const Parameters& other) const;
};

/// Shapes every tensor must have under `config`, in `Parameters::tensors()` order.
std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> expected_shapes(const ModelConfig& config);

/// A trained or trainable translation model with everything needed to run it.
struct Model {
  ModelConfig config;
  Parameters params;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  std::optional<LexiconTable> lexicon;

  static Model create(const Vocabulary& source_vocab, const Vocabulary& target_vocab, ModelConfig config,
                      std::uint64_t seed, std::optional<LexiconTable> lexicon = std::nullopt);
};

// ---------------------------------------------------------------- graph pieces

struct BoundLstm {
  Var weight;
  Var bias;
};

/// Every parameter tensor as a leaf on one tape; adjoints go to `grads` when given.
struct BoundParameters {
  Var source_embed, target_embed;
  BoundLstm encoder_forward, encoder_backward, decoder;
  Var attention_hidden, attention_out;
  Var eta_weight, eta_bias, output_weight, output_bias;

  static BoundParameters bind(Tape& tape, const Parameters& params, Parameters* grads = nullptr);
};

struct LstmState {
  Var hidden;
  Var cell;
};

/// Coupled-gate LSTM: i = s(W_i[x;h]+b_i), f = 1-i, o = s(W_o[x;h]+b_o),
/// c' = f*c + i*tanh(W_c[x;h]+b_c), h' = o*tanh(c').
LstmState lstm_step(const BoundLstm& lstm, Var input, const LstmState& state);

struct EncoderOutput {
  Var annotations;        // 2H x |F|, column j = [backward_j; forward_j]
  LstmState final_state;  // both directions after the trailing <s>
  Eigen::Index length = 0;
};

EncoderOutput encode(Tape& tape, const BoundParameters& params, std::span<const TokenId> source);

struct Attention {
  Var weights;  // |F| x 1
  Var context;  // 2H x 1
};

Attention attend(const BoundParameters& params, AttentionKind kind, Var hidden, Var annotations);

struct DecoderState {
  LstmState lstm;
  Var context;
};

/// h_0 = r_{|F|+1}, c_0 = 0.
DecoderState initial_decoder_state(Tape& tape, const EncoderOutput& encoded);

/// Attention-weighted lexicon prior added to the logits as log(L_F a + epsilon).
struct LexiconBias {
  std::shared_ptr<const SparseMatrix> matrix;  // |V_e| x |F|
  double epsilon = 1e-6;
};

struct StepOutput {
  DecoderState state;
  Var log_probs;  // |V_e| x 1
  Var attention;
};

StepOutput decoder_step(const BoundParameters& params, const ModelConfig& config, const EncoderOutput& encoded,
                        const DecoderState& state, TokenId previous, const LexiconBias* bias);

/// |V_e| x |F| matrix with entry (e, j) = p(e | f_j); unknown source words
/// give an all-zero column.
SparseMatrix build_lexicon_matrix(std::span<const TokenId> source, const LexiconTable& table,
                                  std::size_t target_vocab_size);

/// The lexicon bias `model` uses for `source`, or nullopt without a lexicon.
std::optional<LexiconBias> lexicon_bias_for(const Model& model, std::span<const TokenId> source);

/// Teacher-forced sum of log p(e_i | F, e_<i) over a non-empty target (a
/// full sentence when it ends with the sentence-end id, otherwise a prefix).
Var target_log_likelihood(Tape& tape, const BoundParameters& params, const Model& model, const EncoderOutput& encoded,
                          const LexiconBias* bias, std::span<const TokenId> target);

/// Teacher-forced sum of log p(e_i | F, e_<i) on `tape`. `target` must end
/// with the sentence-end id.
Var sentence_log_likelihood(Tape& tape, const BoundParameters& params, const Model& model,
                            std::span<const TokenId> source, std::span<const TokenId> target);

// ---------------------------------------------------------------- inference

/// Detached decoder state, independent of any tape.
struct DecoderSnapshot {
  Vector hidden;
  Vector cell;
  Vector context;
};

/// One model encoding one source sentence; steps the decoder without
/// recording gradients.
class InferenceSession {
 public:
  InferenceSession(const Model& model, std::span<const TokenId> source);
  InferenceSession(const InferenceSession&) = delete;
  InferenceSession& operator=(const InferenceSession&) = delete;

  const DecoderSnapshot& initial_state() const { return initial_; }

  struct Step {
    Vector log_probs;
    DecoderSnapshot state;
    Vector attention;
  };
  Step step(const DecoderSnapshot& state, TokenId previous);

  std::size_t target_vocab_size() const { return model_.config.target_vocab_size; }
  TokenId end_id() const { return model_.target_vocab.end_id(); }

 private:
  const Model& model_;
  Tape tape_{false};
  BoundParameters bound_;
  EncoderOutput encoded_;
  std::optional<LexiconBias> bias_;
  DecoderSnapshot initial_;
  std::size_t mark_ = 0;
};

/// log p(E | F). With several models the per-step probabilities are
/// arithmetically averaged. `target` must end with the sentence-end id.
double sentence_logprob(std::span<const Model* const> models, std::span<const TokenId> source,
                        std::span<const TokenId> target);
double sentence_logprob(const Model& model, std::span<const TokenId> source, std::span<const TokenId> target);

}  // namespace lexnmt

#endif  // LEXNMT_MODEL_HPP
