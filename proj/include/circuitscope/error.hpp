#pragma once

#include <stdexcept>
#include <string>

namespace circuitscope {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map failures to exit codes with a single catch.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CIRCUITSCOPE_DEFINE_ERROR(Name)      \
  class Name : public Error {                \
   public:                                   \
    using Error::Error;                      \
  };

CIRCUITSCOPE_DEFINE_ERROR(DimensionError)  // shape mismatch between operands
CIRCUITSCOPE_DEFINE_ERROR(IndexError)      // id or index outside its range
CIRCUITSCOPE_DEFINE_ERROR(NumericError)    // NaN/Inf produced or consumed
CIRCUITSCOPE_DEFINE_ERROR(InputError)      // malformed caller input
CIRCUITSCOPE_DEFINE_ERROR(AddressError)    // unknown hook location
CIRCUITSCOPE_DEFINE_ERROR(ConfigError)     // invalid or conflicting configuration
CIRCUITSCOPE_DEFINE_ERROR(DataError)       // dataset does not satisfy a precondition
CIRCUITSCOPE_DEFINE_ERROR(FormatError)     // on-disk format violation
CIRCUITSCOPE_DEFINE_ERROR(IoError)         // filesystem failure
CIRCUITSCOPE_DEFINE_ERROR(ProbeError)      // probe cannot be fitted
CIRCUITSCOPE_DEFINE_ERROR(PlanError)       // experiment plan references missing inputs
CIRCUITSCOPE_DEFINE_ERROR(TrainingError)   // training diverged

#undef CIRCUITSCOPE_DEFINE_ERROR

}  // namespace circuitscope
