#pragma once

#include <stdexcept>
#include <string>

namespace mdlab {

// Exit-code contract of the CLI: 1 config error, 2 missing artifact, 3 numerical failure.
enum class ExitCode : int { ok = 0, config = 1, missing_artifact = 2, numerical = 3 };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mdlab
