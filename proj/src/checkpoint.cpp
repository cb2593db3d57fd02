#include "lexnmt/checkpoint.hpp"

#include "lexnmt/error.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lexnmt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'L', 'E', 'X', 'N', 'M', 'T', 'C', 'K'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T)))
    throw DataError(std::string("checkpoint truncated while reading ") + what);
  return value;
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"source_vocab_size", c.source_vocab_size},
          {"target_vocab_size", c.target_vocab_size},
          {"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim},
          {"attention_dim", c.attention_dim},
          {"attention", to_string(c.attention)},
          {"use_lexicon", c.use_lexicon},
          {"epsilon", c.epsilon}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.source_vocab_size = j.at("source_vocab_size").get<std::size_t>();
  c.target_vocab_size = j.at("target_vocab_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.attention_dim = j.at("attention_dim").get<int>();
  c.attention = parse_attention_kind(j.at("attention").get<std::string>());
  c.use_lexicon = j.at("use_lexicon").get<bool>();
  c.epsilon = j.at("epsilon").get<double>();
  return c;
}

Vocabulary vocab_from_json(const nlohmann::json& j) {
  auto tokens = j.get<std::vector<std::string>>();
  if (tokens.size() < 2 || tokens[0] != Vocabulary::kEnd || tokens[1] != Vocabulary::kUnknown)
    throw DataError("checkpoint vocabulary does not start with the reserved symbols");
  return Vocabulary(std::vector<std::string>(tokens.begin() + 2, tokens.end()));
}

}  // namespace

void write_checkpoint(std::ostream& out, const Model& model) {
  nlohmann::json header;
  header["config"] = config_to_json(model.config);
  header["source_vocab"] = model.source_vocab.tokens();
  header["target_vocab"] = model.target_vocab.tokens();
  const std::string text = header.dump();

  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  const auto tensors = model.params.tensors();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m->rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m->cols()));
    out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
  }

  const std::uint64_t lex_entries = model.lexicon ? model.lexicon->num_entries() : 0;
  put<std::uint64_t>(out, lex_entries);
  if (model.lexicon)
    for (const auto& [src, dist] : model.lexicon->entries())
      for (const auto& [trg, p] : dist) {
        put<std::int32_t>(out, src);
        put<std::int32_t>(out, trg);
        put<double>(out, p);
      }
  if (!out) throw DataError("checkpoint write failed");
}

Model read_checkpoint(std::istream& in) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw DataError("not a checkpoint file (bad magic)");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));

  const auto header_size = get<std::uint64_t>(in, "header size");
  std::string text(header_size, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_size))) throw DataError("checkpoint truncated in header");

  Model model;
  try {
    const auto header = nlohmann::json::parse(text);
    model.config = config_from_json(header.at("config"));
    model.source_vocab = vocab_from_json(header.at("source_vocab"));
    model.target_vocab = vocab_from_json(header.at("target_vocab"));
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(std::string("checkpoint header is malformed: ") + e.what());
  }
  if (model.source_vocab.size() != model.config.source_vocab_size ||
      model.target_vocab.size() != model.config.target_vocab_size)
    throw DataError("checkpoint vocabulary sizes disagree with the stored configuration");

  const auto shapes = expected_shapes(model.config);
  auto tensors = model.params.tensors();
  const auto count = get<std::uint32_t>(in, "tensor count");
  if (count != tensors.size())
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                    std::to_string(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto name_size = get<std::uint32_t>(in, "tensor name");
    std::string name(name_size, '\0');
    if (!in.read(name.data(), name_size)) throw DataError("checkpoint truncated in tensor name");
    if (name != tensors[i].first)
      throw DataError("checkpoint tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                      tensors[i].first + "'");
    const auto rows = static_cast<Eigen::Index>(get<std::uint64_t>(in, "tensor rows"));
    const auto cols = static_cast<Eigen::Index>(get<std::uint64_t>(in, "tensor cols"));
    const auto [want_rows, want_cols] = shapes[i].second;
    if (rows != want_rows || cols != want_cols)
      throw DataError("checkpoint tensor '" + name + "' has shape " + std::to_string(rows) + "x" +
                      std::to_string(cols) + ", expected " + std::to_string(want_rows) + "x" +
                      std::to_string(want_cols));
    Matrix& m = *tensors[i].second;
    m.resize(rows, cols);
    if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double))))
      throw DataError("checkpoint truncated in tensor '" + name + "'");
    if (!m.allFinite()) throw DataError("checkpoint tensor '" + name + "' contains non-finite values");
  }

  const auto lex_entries = get<std::uint64_t>(in, "lexicon size");
  if (model.config.use_lexicon) {
    LexiconTable table;
    for (std::uint64_t k = 0; k < lex_entries; ++k) {
      const auto src = get<std::int32_t>(in, "lexicon entry");
      const auto trg = get<std::int32_t>(in, "lexicon entry");
      const auto p = get<double>(in, "lexicon entry");
      if (!model.source_vocab.contains(src) || !model.target_vocab.contains(trg))
        throw DataError("checkpoint lexicon entry references an id outside the vocabulary");
      table.set(src, trg, p);
    }
    table.validate();
    model.lexicon = std::move(table);
  } else if (lex_entries != 0) {
    throw DataError("checkpoint has lexicon entries but the model does not use a lexicon");
  }
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  write_checkpoint(out, model);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  try {
    return read_checkpoint(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace lexnmt
