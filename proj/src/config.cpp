#include "eegdual/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "eegdual/errors.hpp"
#include "eegdual/rng.hpp"

namespace eegdual {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvFile KvFile::parse_text(const std::string& text, const std::string& origin) {
  KvFile kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected `key = value`");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (kv.find(key))
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv.entries.emplace_back(std::move(key), std::move(value));
  }
  return kv;
}

KvFile KvFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path);
}

const std::string* KvFile::find(const std::string& key) const {
  for (const auto& [k, v] : entries)
    if (k == key) return &v;
  return nullptr;
}

void KvFile::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries)
    if (k == key) {
      v = value;
      return;
    }
  entries.emplace_back(key, value);
}

double KvFile::get_double(const std::string& key, double fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    double d = std::stod(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': not a number: '" + *v + "'");
  }
}

long KvFile::get_long(const std::string& key, long fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    long l = std::stol(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("");
    return l;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': not an integer: '" + *v + "'");
  }
}

std::string KvFile::get_string(const std::string& key, const std::string& fallback) const {
  const std::string* v = find(key);
  return v ? *v : fallback;
}

std::string canonical_text(const std::vector<std::pair<std::string, std::string>>& kv) {
  auto sorted = kv;
  std::sort(sorted.begin(), sorted.end());
  std::string out;
  for (const auto& [k, v] : sorted) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  }
  return out;
}

std::string config_hash_hex(const std::string& canonical) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(canonical)));
  return buf;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace eegdual
