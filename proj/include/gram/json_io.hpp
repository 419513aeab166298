#pragma once

#include "gram/corpus.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <string>

namespace gram {

using Json = nlohmann::json;

Json attributes_to_json(const AttributeSet& attrs);
// Throws DataError on unknown types, empty values or (when a lexicon is given)
// values absent from the lexicon.
AttributeSet attributes_from_json(const Json& j, const AttributeLexicon* lexicon = nullptr);

Json product_to_json(const ProductRecord& p);
ProductRecord product_from_json(const Json& j, const AttributeLexicon* lexicon = nullptr);
Json query_to_json(const QueryRecord& q);
QueryRecord query_from_json(const Json& j);
Json click_to_json(const ClickEvent& c);
ClickEvent click_from_json(const Json& j);

void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows);
void for_each_jsonl(const std::filesystem::path& path, const std::function<void(const Json&)>& fn);
Json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const Json& j);

// Rejects keys of `j` that are not in `allowed` (config validation).
void require_known_keys(const Json& j, std::initializer_list<std::string_view> allowed, std::string_view where);

}  // namespace gram
