#pragma once

#include <stdexcept>
#include <string>

namespace bitemp {

// Every failure surfaced by the library derives from Error so the CLI can map
// the category to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
};

#define BITEMP_ERROR_TYPE(Name, Tag)                                  \
  class Name : public Error {                                         \
   public:                                                             \
    using Error::Error;                                                \
    const char* category() const noexcept override { return Tag; }    \
  };

BITEMP_ERROR_TYPE(ConfigError, "config")
BITEMP_ERROR_TYPE(ShapeError, "shape")
BITEMP_ERROR_TYPE(ParseError, "parse")
BITEMP_ERROR_TYPE(ValidationError, "validation")
BITEMP_ERROR_TYPE(IoError, "io")
BITEMP_ERROR_TYPE(VersionError, "version")
BITEMP_ERROR_TYPE(DegenerateBatchError, "degenerate-batch")
BITEMP_ERROR_TYPE(NumericError, "numeric")
BITEMP_ERROR_TYPE(IndexError, "index")

#undef BITEMP_ERROR_TYPE

}  // namespace bitemp
