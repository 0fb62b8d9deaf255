#pragma once

#include <stdexcept>
#include <string>

namespace gradctrl {

/// Broad failure category. The CLI maps these onto process exit codes.
enum class ErrorKind {
  dimension,
  empty_input,
  index,
  range,
  coverage,
  divergence,
  format,
  lookup,
  vanishing_gradient,
  missing_data,
  degenerate_normalizer,
  usage,
  io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define GRADCTRL_DEFINE_ERROR(Name, Kind)                                     \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

GRADCTRL_DEFINE_ERROR(DimensionError, dimension)
GRADCTRL_DEFINE_ERROR(EmptyInputError, empty_input)
GRADCTRL_DEFINE_ERROR(IndexError, index)
GRADCTRL_DEFINE_ERROR(RangeError, range)
GRADCTRL_DEFINE_ERROR(CoverageError, coverage)
GRADCTRL_DEFINE_ERROR(LookupError, lookup)
GRADCTRL_DEFINE_ERROR(VanishingGradientError, vanishing_gradient)
GRADCTRL_DEFINE_ERROR(MissingDataError, missing_data)
GRADCTRL_DEFINE_ERROR(DegenerateNormalizerError, degenerate_normalizer)
GRADCTRL_DEFINE_ERROR(UsageError, usage)
GRADCTRL_DEFINE_ERROR(IoError, io)

#undef GRADCTRL_DEFINE_ERROR

class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, const std::string& what)
      : Error(ErrorKind::divergence, what), epoch_(epoch) {}

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

/// Raised while decoding a binary blob; carries the byte offset of the fault.
class FormatError : public Error {
 public:
  FormatError(std::size_t offset, const std::string& what)
      : Error(ErrorKind::format, what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace gradctrl
