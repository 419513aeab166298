#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace gram {

// Structured attribute classes. The enumerator order is the canonical order
// used inside codes: category first, brand second, then the rest.
enum class AttributeType : std::uint8_t {
  Category = 0,
  Brand,
  Series,
  Model,
  Function,
  Material,
  Style,
  Color,
  SalesSpec,
  TechSpec,
  ApplicableTime,
  Audience,
  Scenario,
  Modifier,
  Marketing,
};

inline constexpr std::size_t kNumAttributeTypes = 15;

std::string_view attribute_type_name(AttributeType t);
std::optional<AttributeType> parse_attribute_type(std::string_view name);

struct AttributeValue {
  AttributeType type;
  std::string value;

  auto operator<=>(const AttributeValue&) const = default;
  bool operator==(const AttributeValue&) const = default;
};

// Sorted, duplicate-free attribute set (canonical order).
using AttributeSet = std::vector<AttributeValue>;

void canonicalize(AttributeSet& attrs);
AttributeSet set_intersection(const AttributeSet& a, const AttributeSet& b);
AttributeSet set_union(const AttributeSet& a, const AttributeSet& b);
bool is_subset(const AttributeSet& a, const AttributeSet& of);
const AttributeValue* find_type(const AttributeSet& attrs, AttributeType t);

// Finite per-type value lexicons. Values are globally unique across types so
// that a bare value string identifies its type.
class AttributeLexicon {
 public:
  AttributeLexicon() = default;
  explicit AttributeLexicon(std::array<std::vector<std::string>, kNumAttributeTypes> values);

  const std::vector<std::string>& values(AttributeType t) const {
    return values_[static_cast<std::size_t>(t)];
  }
  std::optional<AttributeType> type_of(std::string_view value) const;
  bool contains(const AttributeValue& v) const;
  std::size_t size() const { return index_.size(); }

 private:
  std::array<std::vector<std::string>, kNumAttributeTypes> values_;
  std::unordered_map<std::string, AttributeType> index_;
};

}  // namespace gram
