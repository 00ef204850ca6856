#pragma once

#include "taskaug/trainer.hpp"

#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace taskaug {

inline constexpr int kConfigSchemaVersion = 1;

// Bad config file contents or overrides. Reported as a usage error.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A training config plus the dataset it refers to; this is what config.json holds.
struct RunConfig {
    std::string data;
    TrainConfig train;
};

// JSON text (sorted keys, two-space indent, trailing newline).
std::string dump_config(const RunConfig& config);

// Parses JSON text, applies dotted-key overrides ("sampler.p_max=0.5") and
// checks every key and type against the schema. Absent keys keep their
// defaults. Does not run TrainConfig::validate.
RunConfig parse_config(std::string_view text, std::span<const std::string> overrides = {});

// Default config with overrides applied.
RunConfig default_config(std::span<const std::string> overrides = {});

} // namespace taskaug
