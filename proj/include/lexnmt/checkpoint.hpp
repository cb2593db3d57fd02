#ifndef LEXNMT_CHECKPOINT_HPP
#define LEXNMT_CHECKPOINT_HPP

#include "lexnmt/model.hpp"

#include <filesystem>
#include <iosfwd>

namespace lexnmt {

// Binary container, little-endian:
//   "LEXNMTCK" | u32 version | u64 n | n bytes of JSON header (config, vocabularies)
//   | u32 tensor count | per tensor: u32 name length, name, u64 rows, u64 cols, f64 column-major data
//   | u64 lexicon entries | per entry: i32 source, i32 target, f64 probability
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const Model& model);
Model read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace lexnmt

#endif  // LEXNMT_CHECKPOINT_HPP
