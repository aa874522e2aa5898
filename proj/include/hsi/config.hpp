#pragma once

// Sectioned key=value configuration text ("[section]" headers, "key = value"
// lines, ';' or '#' comments). Backed by boost::property_tree's INI reader.

#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <boost/property_tree/ptree.hpp>

#include "hsi/error.hpp"

namespace hsi {

using Ini = boost::property_tree::ptree;

Ini parse_ini(std::string_view text);
Ini read_ini(const std::filesystem::path& path);
std::string write_ini(const Ini& ini);
void save_ini(const Ini& ini, const std::filesystem::path& path);

/// Comma-separated list of numbers ("1, 2.5, 3").
std::vector<double> parse_number_list(std::string_view text);
std::string format_number_list(const std::vector<double>& values);

/// Shortest decimal form that round-trips a double.
std::string format_double(double value);

/// Section lookup that returns an empty tree for a missing section.
const Ini& section(const Ini& ini, const std::string& name);

/// Value of `key` converted to T, or `fallback` when the key is absent. Throws
/// FormatError on text that does not convert (including negative unsigned).
template <typename T>
T value_or(const Ini& sec, const std::string& key, T fallback) {
  const auto child = sec.get_child_optional(key);
  if (!child) return fallback;
  const auto text = child->data();
  if constexpr (std::is_unsigned_v<T>) {
    if (text.find('-') != std::string::npos) throw FormatError("negative value for '" + key + "': " + text);
  }
  const auto v = child->get_value_optional<T>();
  if (!v) throw FormatError("invalid value for '" + key + "': " + text);
  return *v;
}

}  // namespace hsi
