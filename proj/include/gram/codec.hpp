#pragma once

#include "gram/attributes.hpp"
#include "gram/common.hpp"

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace gram {

inline constexpr std::size_t kMaxCodeAttributes = 6;
inline constexpr char kCodeDelimiter = ',';

enum class Granularity : std::uint8_t { Coarse, Medium, Fine };
std::string_view granularity_name(Granularity g);

// An ordered list of 1..6 attribute values. Construction does not reorder;
// use make_canonical_code for the shared query/product ordering.
class Code {
 public:
  Code() = default;
  explicit Code(std::vector<AttributeValue> attributes);

  const std::vector<AttributeValue>& attributes() const { return attributes_; }
  std::size_t size() const { return attributes_.size(); }
  Granularity granularity() const;
  std::string str() const;

  bool operator==(const Code&) const = default;
  auto operator<=>(const Code& o) const { return str() <=> o.str(); }

 private:
  std::vector<AttributeValue> attributes_;
};

Granularity code_granularity(std::size_t n_attributes);
Code make_canonical_code(AttributeSet attrs);
AttributeSet code_attribute_set(const Code& code);

std::string serialize_code(const Code& code);
Code parse_code(std::string_view text, const AttributeLexicon& lexicon);

enum class Side : std::uint8_t { Query, Product };
std::string_view side_name(Side s);
Side parse_side(std::string_view s);

// Token <-> id map. Reserved ids are fixed; content tokens follow in
// lexicographic order.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kPromptQuery = 4;
  static constexpr TokenId kPromptProduct = 5;
  static constexpr TokenId kNumReserved = 6;

  Vocabulary();
  explicit Vocabulary(std::vector<std::string> content_tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id(std::string_view token) const;  // throws DataError when absent
  const std::vector<std::string>& tokens() const { return tokens_; }

  static TokenId prompt_token(Side side) {
    return side == Side::Query ? kPromptQuery : kPromptProduct;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

std::vector<std::string> split_words(std::string_view text);

// Collects every whitespace/delimiter separated token of the corpus strings.
Vocabulary build_vocabulary(std::span<const std::string> corpus);

struct EncodedExample {
  TokenSeq prompt;
  TokenSeq target;
  bool truncated = false;
};

TokenSeq encode_code(const Vocabulary& vocab, const Code& code);
// Inverse of encode_code at the string level: values joined by the delimiter.
// Returns nullopt when the sequence is not value (SEP value)* EOS.
std::optional<std::string> decode_code_tokens(const Vocabulary& vocab, std::span<const TokenId> target);
TokenSeq encode_prompt(const Vocabulary& vocab, Side side, std::string_view input_text,
                       std::size_t* dropped_unknown = nullptr);
EncodedExample encode_example(const Vocabulary& vocab, Side side, std::string_view input_text,
                              const Code& code, std::size_t max_len);

}  // namespace gram
