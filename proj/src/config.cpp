#include "aquafuse/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>

#include "aquafuse/errors.hpp"

namespace aquafuse {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    parts.push_back(trim(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return parts;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

std::size_t to_size(const std::string& s) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ConfigError("not a non-negative integer: '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

}  // namespace

KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(t.substr(eq + 1));
  }
  return kv;
}

KeyValues load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  return parse_key_values(in);
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& part : split_commas(text)) out.push_back(to_double(part));
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& part : split_commas(text)) out.push_back(to_size(part));
  return out;
}

const std::vector<std::string>& known_setting_keys() {
  static const std::vector<std::string> keys{
      "sigmas", "weights", "sigma_min", "epsilon", "truncation_factor", "stretch_percentiles", "dim",
      "depths", "heads",   "window",    "patch",   "mlp_ratio",         "seed",                "shared_weights",
      "threads"};
  return keys;
}

void apply_settings(const KeyValues& kv, RunSettings& settings) {
  for (const auto& [key, value] : kv) {
    MsrConfig& m = settings.msr;
    BackboneConfig& b = settings.backbone;
    if (key == "sigmas") {
      m.sigmas = parse_double_list(value);
    } else if (key == "weights") {
      m.weights = parse_double_list(value);
    } else if (key == "sigma_min") {
      m.sigma_min = to_double(value);
    } else if (key == "epsilon") {
      m.epsilon = to_double(value);
    } else if (key == "truncation_factor") {
      m.truncation_factor = to_double(value);
    } else if (key == "stretch_percentiles") {
      const auto p = parse_double_list(value);
      if (p.size() != 2) throw ConfigError("stretch_percentiles needs two values, e.g. 1,99");
      m.stretch_percentiles = {p[0], p[1]};
    } else if (key == "dim") {
      b.dim = to_size(value);
    } else if (key == "depths") {
      b.depths = parse_size_list(value);
    } else if (key == "heads") {
      b.heads = parse_size_list(value);
    } else if (key == "window") {
      b.window = to_size(value);
    } else if (key == "patch") {
      b.patch = to_size(value);
    } else if (key == "mlp_ratio") {
      b.mlp_ratio = to_size(value);
    } else if (key == "seed") {
      b.seed = to_size(value);
    } else if (key == "shared_weights") {
      b.shared_weights = to_bool(value);
    } else if (key == "threads") {
      settings.threads = static_cast<int>(to_size(value));
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  // New scales without explicit weights are weighted equally.
  if (kv.count("sigmas") && !kv.count("weights")) {
    auto& m = settings.msr;
    m.weights.assign(m.sigmas.size(), m.sigmas.empty() ? 0.0 : 1.0 / static_cast<double>(m.sigmas.size()));
  }
}

}  // namespace aquafuse
