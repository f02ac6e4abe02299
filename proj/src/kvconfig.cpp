#include "geoseg/kvconfig.hpp"

#include <charconv>
#include <sstream>

#include "geoseg/errors.hpp"

namespace geoseg::kv {
namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

std::vector<Section> parse(const std::string& text) {
  std::vector<Section> sections(1);
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", line_no);
      sections.push_back({trim(line.substr(1, line.size() - 2)), line_no, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected `key = value`", line_no);
    Entry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), line_no};
    if (e.key.empty()) throw ParseError("empty key", line_no);
    sections.back().entries.push_back(std::move(e));
  }
  return sections;
}

double parse_double(const std::string& token, std::size_t line) {
  double v = 0;
  const char* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, v);
  if (ec != std::errc() || ptr != end || token.empty())
    throw ParseError("not a number: '" + token + "'", line);
  return v;
}

double to_double(const Entry& e) { return parse_double(e.value, e.line); }

long long to_int(const Entry& e) {
  long long v = 0;
  const char* end = e.value.data() + e.value.size();
  auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
  if (ec != std::errc() || ptr != end || e.value.empty())
    throw ParseError("key '" + e.key + "': not an integer: '" + e.value + "'", e.line);
  return v;
}

bool to_bool(const Entry& e) {
  if (e.value == "true" || e.value == "1" || e.value == "on" || e.value == "yes") return true;
  if (e.value == "false" || e.value == "0" || e.value == "off" || e.value == "no") return false;
  throw ParseError("key '" + e.key + "': not a boolean: '" + e.value + "'", e.line);
}

std::vector<double> to_doubles(const Entry& e) {
  std::vector<double> out;
  std::istringstream in(e.value);
  std::string tok;
  while (in >> tok) out.push_back(parse_double(tok, e.line));
  return out;
}

Point3 to_point(const Entry& e) {
  const auto v = to_doubles(e);
  if (v.size() != 3) throw ParseError("key '" + e.key + "': expected 3 numbers", e.line);
  return {v[0], v[1], v[2]};
}

}  // namespace geoseg::kv
