#ifndef LEXNMT_ERROR_HPP
#define LEXNMT_ERROR_HPP

#include <stdexcept>
#include <string>

namespace lexnmt {

// Malformed or inconsistent input data: missing files, misaligned corpora,
// corrupt checkpoints, out-of-vocabulary ids.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf in a loss or gradient.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lexnmt

#endif  // LEXNMT_ERROR_HPP
