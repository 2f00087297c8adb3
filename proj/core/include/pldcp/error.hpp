#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pldcp {

enum class ErrorKind {
  kShape,
  kNumeric,
  kParse,
  kConfig,
  kData,
  kIo,
  kCheckpoint,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so the CLI can report
/// it as a single machine-parsable line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Parse failure tied to a 1-based line of an input file.
class ParseError : public Error {
 public:
  ParseError(std::string path, std::size_t line, const std::string& message)
      : Error(ErrorKind::kParse,
              path + ":" + std::to_string(line) + ": " + message),
        path_(std::move(path)),
        line_(line) {}

  const std::string& path() const noexcept { return path_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string path_;
  std::size_t line_;
};

}  // namespace pldcp
