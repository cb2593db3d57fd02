#include "lexnmt/cli.hpp"

#include "lexnmt/align.hpp"
#include "lexnmt/checkpoint.hpp"
#include "lexnmt/corpus.hpp"
#include "lexnmt/decode.hpp"
#include "lexnmt/error.hpp"
#include "lexnmt/eval.hpp"
#include "lexnmt/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

namespace lexnmt {

namespace {

namespace fs = std::filesystem;

std::string format_fixed(double value, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << value;
  return s.str();
}

std::string format_precise(double value) {
  std::ostringstream s;
  s << std::setprecision(17) << value;
  return s.str();
}

// Raw text line -> model input tokens: half-width normalization, whitespace
// split and, when a merges file is given, BPE segmentation.
Tokens prepare_line(const std::string& line, const BpeModel* bpe) {
  Tokens tokens = split_whitespace(normalize_halfwidth(line));
  return bpe ? apply_bpe(*bpe, tokens) : tokens;
}

std::string render(const Model& model, const Sentence& ids) {
  return join_tokens(invert_bpe(model.target_vocab.decode(strip_end(ids, model.target_vocab.end_id()))));
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir.string() + "': " + ec.message());
}

// ---------------------------------------------------------------- preprocess

struct PreprocessOptions {
  std::string src, trg, dev_src, dev_trg, out_dir;
  std::size_t merges = 1000;
  std::size_t vocab_size = 30000;
};

std::vector<Tokens> tokenize_all(const std::vector<std::string>& lines) {
  std::vector<Tokens> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(split_whitespace(normalize_halfwidth(l)));
  return out;
}

void write_segmented(const fs::path& path, const BpeModel& bpe, const std::vector<Tokens>& corpus) {
  std::vector<std::string> lines;
  lines.reserve(corpus.size());
  for (const auto& s : corpus) lines.push_back(join_tokens(apply_bpe(bpe, s)));
  write_lines(path, lines);
}

int cmd_preprocess(const PreprocessOptions& o, std::ostream& out) {
  const auto [src_lines, trg_lines] = read_parallel(o.src, o.trg);
  const auto src = tokenize_all(src_lines);
  const auto trg = tokenize_all(trg_lines);
  std::vector<Tokens> joint = src;
  joint.insert(joint.end(), trg.begin(), trg.end());
  const BpeModel bpe = learn_bpe(joint, o.merges);

  const fs::path dir = o.out_dir;
  ensure_dir(dir);
  bpe.save(dir / "bpe.merges");
  write_segmented(dir / "train.src", bpe, src);
  write_segmented(dir / "train.trg", bpe, trg);

  std::vector<Tokens> src_seg, trg_seg;
  for (const auto& s : src) src_seg.push_back(apply_bpe(bpe, s));
  for (const auto& s : trg) trg_seg.push_back(apply_bpe(bpe, s));
  build_vocab(src_seg, o.vocab_size).save(dir / "vocab.src");
  build_vocab(trg_seg, o.vocab_size).save(dir / "vocab.trg");

  if (!o.dev_src.empty() || !o.dev_trg.empty()) {
    if (o.dev_src.empty() || o.dev_trg.empty())
      throw std::invalid_argument("--dev-src and --dev-trg must be given together");
    const auto [dev_src, dev_trg] = read_parallel(o.dev_src, o.dev_trg);
    write_segmented(dir / "dev.src", bpe, tokenize_all(dev_src));
    write_segmented(dir / "dev.trg", bpe, tokenize_all(dev_trg));
  }
  out << "preprocess: " << src.size() << " pairs, " << bpe.size() << " merges -> " << dir.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- align

struct AlignOptions {
  std::string src, trg, src_vocab, trg_vocab, output;
  int iterations = 10;
  double min_prob = 1e-3;
};

int cmd_align(const AlignOptions& o, std::ostream& out) {
  const auto sv = Vocabulary::load(o.src_vocab);
  const auto tv = Vocabulary::load(o.trg_vocab);
  const auto [src, trg] = read_parallel(o.src, o.trg);
  const auto pairs = encode_parallel(src, trg, sv, tv);
  if (pairs.empty()) throw DataError("no usable sentence pairs in '" + o.src + "'");
  const LexiconTable table = prune_lexicon(ibm1_train(pairs, o.iterations), o.min_prob);
  table.save(o.output, sv, tv);
  out << "align: " << pairs.size() << " pairs, " << table.num_entries() << " entries -> " << o.output << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct CorpusOptions {
  std::string src, trg, dev_src, dev_trg;
};

struct TrainOptions {
  CorpusOptions corpus;
  std::string src_vocab, trg_vocab, lexicon, run_dir, attention = "dot";
  double epsilon = 1e-6;
  int embed_dim = 64, hidden_dim = 64, attention_dim = 0;
  double lr = 0.001;
  int lr_stages = 3;
  TrainConfig config;
};

std::pair<std::vector<SentencePair>, std::vector<SentencePair>> load_corpus(const CorpusOptions& o,
                                                                            const Vocabulary& sv,
                                                                            const Vocabulary& tv) {
  const auto [src, trg] = read_parallel(o.src, o.trg);
  const auto [dev_src, dev_trg] = read_parallel(o.dev_src, o.dev_trg);
  auto train = encode_parallel(src, trg, sv, tv);
  auto dev = encode_parallel(dev_src, dev_trg, sv, tv);
  if (train.empty()) throw DataError("no usable training pairs in '" + o.src + "'");
  if (dev.empty()) throw DataError("no usable dev pairs in '" + o.dev_src + "'");
  return {std::move(train), std::move(dev)};
}

int cmd_train(TrainOptions o, std::ostream& out) {
  const auto sv = Vocabulary::load(o.src_vocab);
  const auto tv = Vocabulary::load(o.trg_vocab);
  const auto [train, dev] = load_corpus(o.corpus, sv, tv);

  std::optional<LexiconTable> lexicon;
  if (!o.lexicon.empty()) lexicon = LexiconTable::load(o.lexicon, sv, tv);

  ModelConfig mc;
  mc.embed_dim = o.embed_dim;
  mc.hidden_dim = o.hidden_dim;
  mc.attention_dim = o.attention_dim;
  mc.attention = parse_attention_kind(o.attention);
  mc.epsilon = o.epsilon;
  const Model init = Model::create(sv, tv, mc, o.config.seed, std::move(lexicon));

  if (o.lr_stages < 1) throw std::invalid_argument("--lr-stages must be at least 1");
  o.config.lr_schedule.clear();
  for (int k = 0; k < o.lr_stages; ++k) o.config.lr_schedule.push_back(o.lr / static_cast<double>(1 << k));
  o.config.run_dir = o.run_dir;

  const TrainResult result = train_ml(init, train, dev, o.config);
  save_checkpoint(fs::path(o.run_dir) / "model.ckpt", result.model);
  out << "train: best dev loss " << format_fixed(result.best_dev, 4) << " after " << result.sentences_seen
      << " sentences (" << result.epochs << " epochs, " << result.restarts << " restarts) -> " << o.run_dir << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- mrt-train

struct MrtOptions {
  CorpusOptions corpus;
  std::string init, run_dir;
  TrainConfig config;
};

int cmd_mrt_train(MrtOptions o, std::ostream& out) {
  const Model init = load_checkpoint(o.init);
  const auto [train, dev] = load_corpus(o.corpus, init.source_vocab, init.target_vocab);
  o.config.run_dir = o.run_dir;
  const TrainResult result = train_mrt(init, train, dev, o.config);
  save_checkpoint(fs::path(o.run_dir) / "model.ckpt", result.model);
  out << "mrt-train: best dev expected error " << format_fixed(result.best_dev, 4) << " after " << result.epochs
      << " epochs -> " << o.run_dir << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- decode

struct DecodeOptions {
  std::vector<std::string> models;
  std::string input, output, bpe, scores;
  int beam = 5;
  double word_penalty = 0.0;
  std::size_t max_len = 0;
  unsigned threads = 1;
};

std::vector<Model> load_models(const std::vector<std::string>& paths) {
  std::vector<Model> models;
  for (const auto& p : paths) models.push_back(load_checkpoint(p));
  for (const auto& m : models)
    if (!(m.source_vocab == models.front().source_vocab) || !(m.target_vocab == models.front().target_vocab))
      throw DataError("ensemble members must share source and target vocabularies");
  return models;
}

void write_output(const std::string& path, const std::vector<std::string>& lines, std::ostream& out) {
  if (path.empty() || path == "-") {
    for (const auto& l : lines) out << l << '\n';
  } else {
    write_lines(path, lines);
  }
}

int cmd_decode(const DecodeOptions& o, std::ostream& out, std::ostream& err) {
  const std::vector<Model> models = load_models(o.models);
  std::vector<const Model*> members;
  for (const auto& m : models) members.push_back(&m);
  std::optional<BpeModel> bpe;
  if (!o.bpe.empty()) bpe = BpeModel::load(o.bpe);
  const auto input = read_lines(o.input);
  if (o.threads < 1) throw std::invalid_argument("--threads must be at least 1");

  BeamOptions options;
  options.beam_size = o.beam;
  options.word_penalty = o.word_penalty;
  options.max_len = o.max_len;

  std::vector<std::string> lines(input.size());
  std::vector<double> scores(input.size(), 0.0);
  std::vector<char> truncated(input.size(), 0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&]() {
    for (std::size_t i = next++; i < input.size(); i = next++) {
      try {
        const Sentence source = models.front().source_vocab.encode(prepare_line(input[i], bpe ? &*bpe : nullptr));
        if (source.empty()) continue;  // empty input line -> empty output line
        const Hypothesis best = beam_search(members, source, options);
        lines[i] = render(models.front(), best.tokens);
        scores[i] = best.logprob;
        truncated[i] = !best.complete;
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned n = std::min<unsigned>(o.threads, static_cast<unsigned>(std::max<std::size_t>(input.size(), 1)));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t i = 0; i < input.size(); ++i)
    if (truncated[i]) err << "warning: line " << i + 1 << " reached the length limit without a sentence end\n";
  write_output(o.output, lines, out);
  if (!o.scores.empty()) {
    std::vector<std::string> score_lines;
    for (double s : scores) score_lines.push_back(format_precise(s));
    write_lines(o.scores, score_lines);
  }
  return kExitOk;
}

// ---------------------------------------------------------------- score

struct ScoreOptions {
  std::string hyp, ref, sentence_scores;
};

int cmd_score(const ScoreOptions& o, std::ostream& out) {
  const auto [hyp_lines, ref_lines] = read_parallel(o.hyp, o.ref);
  if (hyp_lines.empty()) throw DataError("'" + o.hyp + "' is empty");
  std::vector<Tokens> hyps, refs;
  for (const auto& l : hyp_lines) hyps.push_back(split_whitespace(l));
  for (const auto& l : ref_lines) refs.push_back(split_whitespace(l));
  out << "BLEU " << format_fixed(bleu(hyps, refs), 1) << " RATIO " << format_fixed(length_ratio(hyps, refs), 1)
      << '\n';
  if (!o.sentence_scores.empty()) {
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < hyps.size(); ++i)
      lines.push_back(std::to_string(i + 1) + '\t' + format_precise(sbleu(hyps[i], refs[i])));
    write_lines(o.sentence_scores, lines);
  }
  return kExitOk;
}

// ---------------------------------------------------------------- sample

struct SampleOptions {
  std::string model, input, output, bpe;
  int samples = 5;
  std::size_t max_len = 0;
  std::uint64_t seed = 1;
};

int cmd_sample(const SampleOptions& o, std::ostream& out) {
  const Model model = load_checkpoint(o.model);
  std::optional<BpeModel> bpe;
  if (!o.bpe.empty()) bpe = BpeModel::load(o.bpe);
  if (o.samples < 1) throw std::invalid_argument("--samples must be at least 1");
  std::mt19937_64 rng(o.seed);
  std::vector<std::string> lines;
  const auto input = read_lines(o.input);
  for (std::size_t i = 0; i < input.size(); ++i) {
    const Sentence source = model.source_vocab.encode(prepare_line(input[i], bpe ? &*bpe : nullptr));
    if (source.empty()) continue;
    const std::size_t max_len = o.max_len ? o.max_len : default_max_len(source.size());
    for (int k = 0; k < o.samples; ++k) {
      const Sample s = sample_translation(model, source, max_len, rng);
      lines.push_back(std::to_string(i + 1) + '\t' + format_precise(s.logprob) + '\t' + render(model, s.tokens));
    }
  }
  write_output(o.output, lines, out);
  return kExitOk;
}

void add_corpus_options(CLI::App* cmd, CorpusOptions& o) {
  cmd->add_option("--src", o.src, "Training source file (BPE-segmented)")->required();
  cmd->add_option("--trg", o.trg, "Training target file (BPE-segmented)")->required();
  cmd->add_option("--dev-src", o.dev_src, "Dev source file")->required();
  cmd->add_option("--dev-trg", o.dev_trg, "Dev target file")->required();
}

void add_common_train_options(CLI::App* cmd, TrainConfig& c) {
  cmd->add_option("--clip-norm", c.clip_norm, "Gradient norm clipping threshold")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_flag("--log-wall-time", c.log_wall_time, "Record elapsed seconds in the training log");
}

}  // namespace

namespace {

// CLI11 only reads config files attached to the top-level app, so a
// subcommand's --config is expanded here into ordinary flags. Flags already
// on the command line win.
void add_config_option(CLI::App* cmd) {
  cmd->add_option("--config", "TOML/INI file with option values (command-line flags take precedence)");
}

std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  if (!std::filesystem::exists(path)) throw DataError("cannot open config file " + path);
  const auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
  };
  std::vector<std::string> extra;
  for (const CLI::ConfigItem& item : CLI::ConfigTOML().from_file(path)) {
    const std::string flag = "--" + item.name;
    if (item.name.empty() || item.name == "config" || given(flag)) continue;
    for (const auto& value : item.inputs) extra.push_back(flag + "=" + value);
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

}  // namespace

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attentional NMT with lexicon-biased softmax, ML and minimum-risk training"};
  app.name("lexnmt");
  app.require_subcommand(1);

  PreprocessOptions pre;
  auto* preprocess = app.add_subcommand("preprocess", "Normalize, learn and apply joint BPE, build vocabularies");
  preprocess->add_option("--src", pre.src, "Raw training source file")->required();
  preprocess->add_option("--trg", pre.trg, "Raw training target file")->required();
  preprocess->add_option("--dev-src", pre.dev_src, "Raw dev source file");
  preprocess->add_option("--dev-trg", pre.dev_trg, "Raw dev target file");
  preprocess->add_option("--out", pre.out_dir, "Output directory")->required();
  preprocess->add_option("--merges", pre.merges, "Number of BPE merge operations")->capture_default_str();
  preprocess->add_option("--vocab-size", pre.vocab_size, "Vocabulary size per side, excluding reserved symbols")
      ->capture_default_str();

  AlignOptions al;
  auto* align = app.add_subcommand("align", "Train an IBM Model 1 lexicon");
  align->add_option("--src", al.src, "Source file (BPE-segmented)")->required();
  align->add_option("--trg", al.trg, "Target file (BPE-segmented)")->required();
  align->add_option("--src-vocab", al.src_vocab, "Source vocabulary")->required();
  align->add_option("--trg-vocab", al.trg_vocab, "Target vocabulary")->required();
  align->add_option("--out", al.output, "Lexicon TSV to write")->required();
  align->add_option("--iterations", al.iterations, "EM iterations")->capture_default_str()->check(CLI::PositiveNumber);
  align->add_option("--min-prob", al.min_prob, "Drop entries below this probability")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));

  TrainOptions tr;
  auto* train = app.add_subcommand("train", "Maximum-likelihood training");
  add_config_option(train);
  add_corpus_options(train, tr.corpus);
  train->add_option("--src-vocab", tr.src_vocab, "Source vocabulary")->required();
  train->add_option("--trg-vocab", tr.trg_vocab, "Target vocabulary")->required();
  train->add_option("--lexicon", tr.lexicon, "Lexicon TSV; enables the lexicon-biased softmax");
  train->add_option("--epsilon", tr.epsilon, "Lexicon bias floor")->capture_default_str();
  train->add_option("--attention", tr.attention, "Attention kind")
      ->capture_default_str()
      ->check(CLI::IsMember({"dot", "mlp"}));
  train->add_option("--emb", tr.embed_dim, "Embedding width")->capture_default_str();
  train->add_option("--hid", tr.hidden_dim, "Encoder width per direction (decoder is twice this)")
      ->capture_default_str();
  train->add_option("--att-hid", tr.attention_dim, "MLP attention width (0: decoder width)")->capture_default_str();
  train->add_option("--lr", tr.lr, "Initial learning rate")->capture_default_str();
  train->add_option("--lr-stages", tr.lr_stages, "Learning rates in the schedule, each half the previous")
      ->capture_default_str();
  train->add_option("--batch-words", tr.config.word_budget, "Minibatch word budget")->capture_default_str();
  train->add_option("--dev-interval", tr.config.dev_check_interval, "Sentences between dev checks")
      ->capture_default_str();
  train->add_option("--patience", tr.config.patience, "Sentences without dev improvement before decay")
      ->capture_default_str();
  train->add_option("--max-epochs", tr.config.max_epochs, "Epoch cap (0: none)")->capture_default_str();
  train->add_option("--run-dir", tr.run_dir, "Directory for the checkpoint and log")->required();
  add_common_train_options(train, tr.config);

  MrtOptions mr;
  auto* mrt = app.add_subcommand("mrt-train", "Minimum-risk fine-tuning");
  add_config_option(mrt);
  add_corpus_options(mrt, mr.corpus);
  mrt->add_option("--init", mr.init, "Starting checkpoint")->required();
  mrt->add_option("--samples", mr.config.mrt.num_samples, "Samples per sentence")->capture_default_str();
  mrt->add_option("--alpha", mr.config.mrt.alpha, "Distribution sharpness")->capture_default_str();
  mrt->add_option("--lr", mr.config.mrt.learning_rate, "Learning rate")->capture_default_str();
  mrt->add_option("--epochs", mr.config.mrt.epochs, "Epochs")->capture_default_str();
  mrt->add_option("--max-sample-len", mr.config.mrt.max_sample_len, "Sample length cap (0: 2|F|+10)")
      ->capture_default_str();
  mrt->add_option("--run-dir", mr.run_dir, "Directory for the checkpoint and log")->required();
  add_common_train_options(mrt, mr.config);

  DecodeOptions de;
  auto* decode = app.add_subcommand("decode", "Beam search translation");
  decode->add_option("--model", de.models, "Checkpoint; repeat for an ensemble")->required();
  decode->add_option("--input", de.input, "Input file, one sentence per line")->required();
  decode->add_option("--output", de.output, "Output file (default: stdout)");
  decode->add_option("--bpe", de.bpe, "BPE merges applied to the input");
  decode->add_option("--scores", de.scores, "Write per-sentence log-probabilities here");
  decode->add_option("--beam", de.beam, "Beam size")->capture_default_str()->check(CLI::PositiveNumber);
  decode->add_option("--word-penalty", de.word_penalty, "Word penalty lambda")->capture_default_str();
  decode->add_option("--max-len", de.max_len, "Length limit (0: 2|F|+10)")->capture_default_str();
  decode->add_option("--threads", de.threads, "Sentences decoded in parallel")->capture_default_str();

  ScoreOptions sc;
  auto* score = app.add_subcommand("score", "Corpus BLEU and length ratio");
  score->add_option("--hyp", sc.hyp, "Hypothesis file")->required();
  score->add_option("--ref", sc.ref, "Reference file")->required();
  score->add_option("--sentence-scores", sc.sentence_scores, "Write per-sentence BLEU+1 here");

  SampleOptions sa;
  auto* sample = app.add_subcommand("sample", "Draw translations from the model distribution");
  sample->add_option("--model", sa.model, "Checkpoint")->required();
  sample->add_option("--input", sa.input, "Input file, one sentence per line")->required();
  sample->add_option("--output", sa.output, "Output file (default: stdout)");
  sample->add_option("--bpe", sa.bpe, "BPE merges applied to the input");
  sample->add_option("--samples", sa.samples, "Samples per sentence")->capture_default_str();
  sample->add_option("--max-len", sa.max_len, "Length limit (0: 2|F|+10)")->capture_default_str();
  sample->add_option("--seed", sa.seed, "Random seed")->capture_default_str();

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = expand_config(std::move(args));
    std::vector<const char*> expanded;
    for (const auto& a : args) expanded.push_back(a.c_str());
    app.parse(static_cast<int>(expanded.size()), expanded.data());
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*preprocess) return cmd_preprocess(pre, out);
    if (*align) return cmd_align(al, out);
    if (*train) return cmd_train(tr, out);
    if (*mrt) return cmd_mrt_train(mr, out);
    if (*decode) return cmd_decode(de, out, err);
    if (*score) return cmd_score(sc, out);
    if (*sample) return cmd_sample(sa, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

int run_command(int argc, const char* const* argv) { return run_command(argc, argv, std::cout, std::cerr); }

}  // namespace lexnmt
