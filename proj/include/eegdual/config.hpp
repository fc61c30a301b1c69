#ifndef EEGDUAL_CONFIG_HPP
#define EEGDUAL_CONFIG_HPP

#include <string>
#include <utility>
#include <vector>

namespace eegdual {

inline constexpr const char* kToolVersion = "0.1.0";

// Plain `key = value` configuration file. '#' starts a comment. Keys may not
// repeat. Parsing keeps file order; hashing canonicalizes.
struct KvFile {
  std::vector<std::pair<std::string, std::string>> entries;

  static KvFile parse_file(const std::string& path);
  static KvFile parse_text(const std::string& text, const std::string& origin);

  const std::string* find(const std::string& key) const;
  void set(const std::string& key, const std::string& value);  // insert or overwrite

  double get_double(const std::string& key, double fallback) const;
  long get_long(const std::string& key, long fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
};

// Sorted `key = value` lines; input to the config hash.
std::string canonical_text(const std::vector<std::pair<std::string, std::string>>& kv);
std::string config_hash_hex(const std::string& canonical);

// Deterministic shortest-faithful formatting for doubles in text artifacts.
std::string format_double(double v);

}  // namespace eegdual

#endif
