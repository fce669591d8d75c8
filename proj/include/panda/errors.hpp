#pragma once

#include <stdexcept>
#include <string>

namespace panda {

// Every failure surfaced by the library carries a category so the CLI can
// print a one-line "error[<category>]: <message>" and pick an exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define PANDA_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(tag, what) {}       \
  }

PANDA_DEFINE_ERROR(ShapeError, "shape");
PANDA_DEFINE_ERROR(ParameterError, "parameter");
PANDA_DEFINE_ERROR(ContractError, "contract");
PANDA_DEFINE_ERROR(CheckError, "check");
PANDA_DEFINE_ERROR(ParseError, "parse");
PANDA_DEFINE_ERROR(AlignmentError, "alignment");
PANDA_DEFINE_ERROR(ValidationError, "validation");
PANDA_DEFINE_ERROR(IoError, "io");
PANDA_DEFINE_ERROR(DatasetError, "dataset");
PANDA_DEFINE_ERROR(DivergenceError, "divergence");
PANDA_DEFINE_ERROR(NumericError, "numeric");
PANDA_DEFINE_ERROR(ConfigError, "config");
PANDA_DEFINE_ERROR(InputError, "input");
PANDA_DEFINE_ERROR(LoadError, "load");
PANDA_DEFINE_ERROR(FreezeViolation, "freeze");

#undef PANDA_DEFINE_ERROR

}  // namespace panda
