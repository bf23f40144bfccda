#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dilnas {

// Flat `key = value` configuration with dotted keys and '#' comments. Keys
// are validated against the registry of known tunables so typos fail loudly.
class RunConfig {
 public:
  RunConfig();

  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);

  // "key=value" override, as given to --set.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;
  std::string get_str(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Serialized sorted key = value lines; reproduces the run.
  std::string dump() const;

  static const std::map<std::string, std::string>& defaults();

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace dilnas
