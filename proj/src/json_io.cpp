#include "gram/json_io.hpp"

#include <fstream>

namespace gram {

Json attributes_to_json(const AttributeSet& attrs) {
  Json arr = Json::array();
  for (const auto& a : attrs) {
    arr.push_back({{"type", std::string(attribute_type_name(a.type))}, {"value", a.value}});
  }
  return arr;
}

AttributeSet attributes_from_json(const Json& j, const AttributeLexicon* lexicon) {
  if (!j.is_array()) {
    throw DataError("attributes must be an array");
  }
  AttributeSet out;
  for (const auto& item : j) {
    if (!item.is_object() || !item.contains("type") || !item.contains("value") || !item["type"].is_string() ||
        !item["value"].is_string()) {
      throw DataError("attribute entries must be {\"type\": string, \"value\": string}");
    }
    auto type = parse_attribute_type(item["type"].get<std::string>());
    if (!type) {
      throw DataError("unknown attribute type '" + item["type"].get<std::string>() + "'");
    }
    AttributeValue v{*type, item["value"].get<std::string>()};
    if (v.value.empty() || v.value.find_first_of(", \t\n") != std::string::npos) {
      throw DataError("invalid attribute value '" + v.value + "'");
    }
    if (lexicon != nullptr && !lexicon->contains(v)) {
      throw DataError("attribute value '" + v.value + "' not in the " + std::string(attribute_type_name(v.type)) +
                      " lexicon");
    }
    out.push_back(std::move(v));
  }
  canonicalize(out);
  return out;
}

Json product_to_json(const ProductRecord& p) {
  return {{"product_id", format_product_id(p.product_id)},
          {"title", p.title},
          {"attributes", attributes_to_json(p.attributes)}};
}

ProductRecord product_from_json(const Json& j, const AttributeLexicon* lexicon) {
  if (!j.is_object() || !j.contains("product_id") || !j.contains("title") || !j.contains("attributes") ||
      !j["product_id"].is_string() || !j["title"].is_string()) {
    throw DataError("product record requires product_id, title and attributes");
  }
  ProductRecord p;
  p.product_id = parse_product_id(j["product_id"].get<std::string>());
  p.title = j["title"].get<std::string>();
  p.attributes = attributes_from_json(j["attributes"], lexicon);
  if (p.attributes.empty()) {
    throw DataError("product record has no attributes");
  }
  return p;
}

Json query_to_json(const QueryRecord& q) {
  return {{"query_id", format_query_id(q.query_id)},
          {"text", q.text},
          {"attributes", attributes_to_json(q.attributes)},
          {"source_product", format_product_id(q.source_product)}};
}

QueryRecord query_from_json(const Json& j) {
  QueryRecord q;
  q.query_id = parse_query_id(j.at("query_id").get<std::string>());
  q.text = j.at("text").get<std::string>();
  q.attributes = attributes_from_json(j.at("attributes"));
  if (j.contains("source_product")) {
    q.source_product = parse_product_id(j["source_product"].get<std::string>());
  }
  return q;
}

Json click_to_json(const ClickEvent& c) {
  return {{"query_id", format_query_id(c.query_id)},
          {"product_id", format_product_id(c.product_id)},
          {"count", c.count}};
}

ClickEvent click_from_json(const Json& j) {
  ClickEvent c;
  c.query_id = parse_query_id(j.at("query_id").get<std::string>());
  c.product_id = parse_product_id(j.at("product_id").get<std::string>());
  c.count = j.at("count").get<std::uint32_t>();
  if (c.count < 1) {
    throw DataError("click count must be positive");
  }
  return c;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  for (const auto& r : rows) {
    out << r.dump() << '\n';
  }
}

void for_each_jsonl(const std::filesystem::path& path, const std::function<void(const Json&)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot read " + path.string());
  }
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    try {
      fn(Json::parse(line));
    } catch (const Json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot read " + path.string());
  }
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << j.dump(2) << '\n';
}

void require_known_keys(const Json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) {
    throw ConfigError(std::string(where) + " must be an object");
  }
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) {
      ok = ok || a == key;
    }
    if (!ok) {
      throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

}  // namespace gram
