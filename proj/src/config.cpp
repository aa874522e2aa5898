#include "hsi/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>

#include "hsi/error.hpp"

namespace hsi {

Ini parse_ini(std::string_view text) {
  std::istringstream in{std::string(text)};
  Ini ini;
  try {
    boost::property_tree::read_ini(in, ini);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw FormatError(std::string("config parse error: ") + e.what());
  }
  return ini;
}

Ini read_ini(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_ini(buf.str());
}

std::string write_ini(const Ini& ini) {
  std::ostringstream out;
  boost::property_tree::write_ini(out, ini);
  return out.str();
}

void save_ini(const Ini& ini, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config: " + path.string());
  out << write_ini(ini);
}

std::vector<double> parse_number_list(std::string_view text) {
  std::vector<double> out;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto last = item.find_last_not_of(" \t");
    const std::string trimmed = item.substr(first, last - first + 1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(trimmed.data(), trimmed.data() + trimmed.size(), v);
    if (ec != std::errc() || ptr != trimmed.data() + trimmed.size()) {
      throw FormatError("not a number: '" + trimmed + "'");
    }
    out.push_back(v);
  }
  return out;
}

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

std::string format_number_list(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ", ";
    out += format_double(values[i]);
  }
  return out;
}

const Ini& section(const Ini& ini, const std::string& name) {
  static const Ini empty;
  const auto it = ini.find(name);
  return it == ini.not_found() ? empty : it->second;
}

}  // namespace hsi
