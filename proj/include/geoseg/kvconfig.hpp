#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "geoseg/pointcloud.hpp"

namespace geoseg::kv {

struct Entry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// Entries before the first header land in a section with an empty name.
struct Section {
  std::string name;
  std::size_t line = 0;
  std::vector<Entry> entries;
};

/// Parses `key = value` lines grouped under `[section]` headers. `#` starts a comment.
std::vector<Section> parse(const std::string& text);

double to_double(const Entry& e);
long long to_int(const Entry& e);
bool to_bool(const Entry& e);
Point3 to_point(const Entry& e);
std::vector<double> to_doubles(const Entry& e);

/// Strict numeric parse of a whole token; throws ParseError(line) on failure.
double parse_double(const std::string& token, std::size_t line);

}  // namespace geoseg::kv
