#include "gram/common.hpp"

#include <atomic>
#include <cstdio>
#include <iostream>

namespace gram {

namespace {
std::atomic<int> g_log_level{1};

std::uint32_t parse_prefixed_id(const std::string& s, char prefix) {
  if (s.size() < 2 || s[0] != prefix) {
    throw DataError("malformed id '" + s + "'");
  }
  std::uint64_t v = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') {
      throw DataError("malformed id '" + s + "'");
    }
    v = v * 10 + static_cast<std::uint64_t>(s[i] - '0');
    if (v > 0xffffffffULL) {
      throw DataError("id out of range '" + s + "'");
    }
  }
  return static_cast<std::uint32_t>(v);
}
}  // namespace

std::string format_product_id(ProductId id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "p%06u", id);
  return buf;
}

std::string format_query_id(QueryId id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "q%06u", id);
  return buf;
}

ProductId parse_product_id(const std::string& s) { return parse_prefixed_id(s, 'p'); }
QueryId parse_query_id(const std::string& s) { return parse_prefixed_id(s, 'q'); }

void set_log_level(int level) { g_log_level = level; }
int log_level() { return g_log_level; }

void log_info(const std::string& msg) {
  if (g_log_level >= 1) {
    std::clog << "[gram] " << msg << '\n';
  }
}

void log_warn(const std::string& msg) {
  if (g_log_level >= 0) {
    std::clog << "[gram] warning: " << msg << '\n';
  }
}

}  // namespace gram
