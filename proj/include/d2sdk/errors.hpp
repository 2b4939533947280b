#pragma once

#include <stdexcept>
#include <string>

namespace d2sdk {

// Base for every error the library raises. `code()` is the short token the
// CLI prints in its one-line error record.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error("dimension", what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct LabelError : Error {
  explicit LabelError(const std::string& what) : Error("label", what) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& what) : Error("index", what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};

}  // namespace d2sdk
