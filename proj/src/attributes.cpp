#include "gram/attributes.hpp"

#include "gram/common.hpp"

#include <algorithm>

namespace gram {

namespace {
constexpr std::array<std::string_view, kNumAttributeTypes> kTypeNames = {
    "category", "brand",           "series",   "model",    "function",
    "material", "style",           "color",    "sales_spec", "tech_spec",
    "applicable_time", "audience", "scenario", "modifier", "marketing",
};
}  // namespace

std::string_view attribute_type_name(AttributeType t) {
  return kTypeNames.at(static_cast<std::size_t>(t));
}

std::optional<AttributeType> parse_attribute_type(std::string_view name) {
  for (std::size_t i = 0; i < kTypeNames.size(); ++i) {
    if (kTypeNames[i] == name) {
      return static_cast<AttributeType>(i);
    }
  }
  return std::nullopt;
}

void canonicalize(AttributeSet& attrs) {
  std::sort(attrs.begin(), attrs.end());
  attrs.erase(std::unique(attrs.begin(), attrs.end()), attrs.end());
}

AttributeSet set_intersection(const AttributeSet& a, const AttributeSet& b) {
  AttributeSet out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

AttributeSet set_union(const AttributeSet& a, const AttributeSet& b) {
  AttributeSet out;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

bool is_subset(const AttributeSet& a, const AttributeSet& of) {
  return std::includes(of.begin(), of.end(), a.begin(), a.end());
}

const AttributeValue* find_type(const AttributeSet& attrs, AttributeType t) {
  for (const auto& a : attrs) {
    if (a.type == t) {
      return &a;
    }
  }
  return nullptr;
}

AttributeLexicon::AttributeLexicon(std::array<std::vector<std::string>, kNumAttributeTypes> values)
    : values_(std::move(values)) {
  for (std::size_t t = 0; t < kNumAttributeTypes; ++t) {
    for (const auto& v : values_[t]) {
      if (v.empty() || v.find_first_of(", \t\n") != std::string::npos) {
        throw ConfigError("invalid attribute value '" + v + "'");
      }
      if (!index_.emplace(v, static_cast<AttributeType>(t)).second) {
        throw ConfigError("attribute value '" + v + "' appears in more than one lexicon slot");
      }
    }
  }
}

std::optional<AttributeType> AttributeLexicon::type_of(std::string_view value) const {
  auto it = index_.find(std::string(value));
  if (it == index_.end()) {
    return std::nullopt;
  }
  return it->second;
}

bool AttributeLexicon::contains(const AttributeValue& v) const {
  auto t = type_of(v.value);
  return t && *t == v.type;
}

}  // namespace gram
