#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aquafuse/backbone.hpp"
#include "aquafuse/water_msr.hpp"

namespace aquafuse {

/// Flat `key = value` settings. Blank lines and lines starting with '#' are ignored.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::istream& in);
KeyValues load_key_values(const std::filesystem::path& path);

/// Comma-separated numbers, e.g. "30,150,300".
std::vector<double> parse_double_list(const std::string& text);
std::vector<std::size_t> parse_size_list(const std::string& text);

struct RunSettings {
  MsrConfig msr;
  BackboneConfig backbone;
  std::optional<int> threads;
};

/// Applies every key to `settings`. Unknown keys and malformed values throw
/// ConfigError. Setting sigmas without weights resets the weights to equal.
void apply_settings(const KeyValues& kv, RunSettings& settings);

/// Every key accepted by apply_settings.
const std::vector<std::string>& known_setting_keys();

}  // namespace aquafuse
