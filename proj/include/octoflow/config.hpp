#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

// key = value run configuration with a registered schema: every key has a
// type and a default; unknown keys and malformed values are errors. Units are
// encoded in key names (_mm, _ms, _mls, _mps, _deg).
namespace octoflow::config {

class RunConfig {
 public:
  // All keys present at their defaults.
  static RunConfig defaults();
  // Defaults overlaid with the file's keys. '#' starts a comment.
  static RunConfig load(const std::string& path);
  static RunConfig from_string(const std::string& text);

  // Canonical form: one sorted `key = value` line per key; write -> read ->
  // write is byte-identical.
  std::string to_string() const;
  void save(const std::string& path) const;

  double real(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  const std::string& str(const std::string& key) const;
  std::vector<std::int64_t> int_list(const std::string& key) const;

  // Parses and validates `value` against the key's schema type.
  void set(const std::string& key, const std::string& value);
  void set_real(const std::string& key, double value);
  void set_integer(const std::string& key, std::int64_t value);

 private:
  std::map<std::string, std::string> values_;  // canonical string form
};

}  // namespace octoflow::config
