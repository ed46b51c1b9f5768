#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace circuitscope {

// Flat "key = value" text. '#' starts a comment, blank lines are ignored,
// keys may appear once.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& source = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& values() const { return values_; }

  // Every key must be one of `known`; the error names the first offender and
  // the closest known key.
  void require_known(std::span<const std::string> known) const;

  std::string get(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

 private:
  std::string source_ = "<config>";
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;

  std::string where(const std::string& key) const;
};

std::size_t edit_distance(std::string_view a, std::string_view b);

// The candidate closest to `word` by edit distance, if it is within
// max(2, |word| / 3) edits.
std::optional<std::string> closest_match(std::string_view word, std::span<const std::string> candidates);

}  // namespace circuitscope
