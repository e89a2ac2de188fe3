#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "fms/harness.hpp"

namespace fms {

/// Malformed or unknown configuration entry. The message carries the source
/// name and line number.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` text. Blank lines and lines starting with '#' are
/// ignored; lists are comma separated. Stage fields are set for every stage
/// with `stage.<key>` and for one stage with `stage.<i>.<key>`; per-stage
/// entries win regardless of their position in the file. Every key is listed
/// by `write_config`.
TrainConfig parse_config(std::istream& is, const std::string& source = "config");

/// Reads a file; a missing file is a ConfigError naming the path.
TrainConfig load_config(const std::string& path);

/// Writes every key with its current value. The output parses back to an
/// equal configuration.
void write_config(std::ostream& os, const TrainConfig& cfg);

}  // namespace fms
