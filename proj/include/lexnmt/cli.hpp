#ifndef LEXNMT_CLI_HPP
#define LEXNMT_CLI_HPP

#include <iosfwd>

namespace lexnmt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

/// Entry point of the `lexnmt` tool. Subcommands: preprocess, align, train,
/// mrt-train, decode, score, sample.
int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_command(int argc, const char* const* argv);

}  // namespace lexnmt

#endif  // LEXNMT_CLI_HPP
