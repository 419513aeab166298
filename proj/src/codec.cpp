#include "gram/codec.hpp"

#include <algorithm>
#include <set>

namespace gram {

namespace {
const std::array<std::string, Vocabulary::kNumReserved> kReserved = {
    "<pad>", "<bos>", "<eos>", "<sep>", "<prompt_q>", "<prompt_t>",
};
}  // namespace

std::string_view granularity_name(Granularity g) {
  switch (g) {
    case Granularity::Coarse:
      return "coarse";
    case Granularity::Medium:
      return "medium";
    case Granularity::Fine:
      return "fine";
  }
  return "?";
}

Granularity code_granularity(std::size_t n_attributes) {
  if (n_attributes == 0 || n_attributes > kMaxCodeAttributes) {
    throw DataError("invalid code: " + std::to_string(n_attributes) + " attributes");
  }
  if (n_attributes <= 2) {
    return Granularity::Coarse;
  }
  return n_attributes == 3 ? Granularity::Medium : Granularity::Fine;
}

Code::Code(std::vector<AttributeValue> attributes) : attributes_(std::move(attributes)) {
  if (attributes_.empty() || attributes_.size() > kMaxCodeAttributes) {
    throw DataError("invalid code: " + std::to_string(attributes_.size()) + " attributes");
  }
  for (const auto& a : attributes_) {
    if (a.value.empty() || a.value.find(kCodeDelimiter) != std::string::npos) {
      throw DataError("invalid code value '" + a.value + "'");
    }
  }
}

Granularity Code::granularity() const { return code_granularity(attributes_.size()); }

std::string Code::str() const { return serialize_code(*this); }

Code make_canonical_code(AttributeSet attrs) {
  canonicalize(attrs);
  return Code(std::move(attrs));
}

AttributeSet code_attribute_set(const Code& code) {
  AttributeSet s = code.attributes();
  canonicalize(s);
  return s;
}

std::string serialize_code(const Code& code) {
  std::string out;
  for (const auto& a : code.attributes()) {
    if (!out.empty()) {
      out.push_back(kCodeDelimiter);
    }
    out += a.value;
  }
  return out;
}

Code parse_code(std::string_view text, const AttributeLexicon& lexicon) {
  if (text.empty()) {
    throw ParseError("empty code", 0);
  }
  std::vector<AttributeValue> attrs;
  std::set<std::string_view> seen;
  std::size_t start = 0;
  while (true) {
    std::size_t end = text.find(kCodeDelimiter, start);
    std::string_view part = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    if (part.empty()) {
      throw ParseError("empty attribute value", start);
    }
    auto type = lexicon.type_of(part);
    if (!type) {
      throw ParseError("unknown attribute value '" + std::string(part) + "'", start);
    }
    if (!seen.insert(part).second) {
      throw ParseError("duplicate attribute value '" + std::string(part) + "'", start);
    }
    if (attrs.size() == kMaxCodeAttributes) {
      throw ParseError("code exceeds " + std::to_string(kMaxCodeAttributes) + " attributes", start);
    }
    attrs.push_back({*type, std::string(part)});
    if (end == std::string_view::npos) {
      break;
    }
    start = end + 1;
  }
  return Code(std::move(attrs));
}

std::string_view side_name(Side s) { return s == Side::Query ? "query" : "product"; }

Side parse_side(std::string_view s) {
  if (s == "query") {
    return Side::Query;
  }
  if (s == "product") {
    return Side::Product;
  }
  throw DataError("unknown side '" + std::string(s) + "'");
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> content_tokens) {
  std::sort(content_tokens.begin(), content_tokens.end());
  content_tokens.erase(std::unique(content_tokens.begin(), content_tokens.end()), content_tokens.end());
  tokens_.assign(kReserved.begin(), kReserved.end());
  for (auto& t : content_tokens) {
    if (std::find(kReserved.begin(), kReserved.end(), t) != kReserved.end()) {
      continue;
    }
    tokens_.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    ids_.emplace(tokens_[i], static_cast<TokenId>(i));
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " out of vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) {
    return std::nullopt;
  }
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto id = find(token);
  if (!id) {
    throw DataError("token '" + std::string(token) + "' not in vocabulary");
  }
  return *id;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == kCodeDelimiter) {
      if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) {
    out.push_back(std::move(cur));
  }
  return out;
}

Vocabulary build_vocabulary(std::span<const std::string> corpus) {
  if (corpus.empty()) {
    throw DataError("cannot build a vocabulary from an empty corpus");
  }
  std::set<std::string> tokens;
  for (const auto& s : corpus) {
    for (auto& w : split_words(s)) {
      tokens.insert(std::move(w));
    }
  }
  return Vocabulary(std::vector<std::string>(tokens.begin(), tokens.end()));
}

TokenSeq encode_code(const Vocabulary& vocab, const Code& code) {
  if (code.size() == 0) {
    throw DataError("cannot encode an empty code");
  }
  TokenSeq out;
  out.reserve(code.size() * 2);
  for (std::size_t i = 0; i < code.size(); ++i) {
    if (i > 0) {
      out.push_back(Vocabulary::kSep);
    }
    out.push_back(vocab.id(code.attributes()[i].value));
  }
  out.push_back(Vocabulary::kEos);
  return out;
}

std::optional<std::string> decode_code_tokens(const Vocabulary& vocab, std::span<const TokenId> target) {
  if (target.size() < 2 || target.back() != Vocabulary::kEos) {
    return std::nullopt;
  }
  std::string out;
  const std::size_t n = target.size() - 1;
  for (std::size_t i = 0; i < n; ++i) {
    const bool expect_value = (i % 2 == 0);
    const TokenId t = target[i];
    if (expect_value) {
      if (t < Vocabulary::kNumReserved || static_cast<std::size_t>(t) >= vocab.size()) {
        return std::nullopt;
      }
      if (!out.empty()) {
        out.push_back(kCodeDelimiter);
      }
      out += vocab.token(t);
    } else if (t != Vocabulary::kSep) {
      return std::nullopt;
    }
  }
  if (n % 2 == 0) {
    return std::nullopt;  // ends on a separator
  }
  return out;
}

TokenSeq encode_prompt(const Vocabulary& vocab, Side side, std::string_view input_text,
                       std::size_t* dropped_unknown) {
  TokenSeq prompt{Vocabulary::prompt_token(side)};
  for (const auto& w : split_words(input_text)) {
    if (auto id = vocab.find(w)) {
      prompt.push_back(*id);
    } else if (dropped_unknown != nullptr) {
      ++*dropped_unknown;
    }
  }
  return prompt;
}

EncodedExample encode_example(const Vocabulary& vocab, Side side, std::string_view input_text,
                              const Code& code, std::size_t max_len) {
  EncodedExample ex;
  ex.target = encode_code(vocab, code);
  ex.prompt = TokenSeq{Vocabulary::prompt_token(side)};
  for (const auto& w : split_words(input_text)) {
    ex.prompt.push_back(vocab.id(w));
  }
  if (ex.target.size() + 1 > max_len) {
    throw DataError("code target of " + std::to_string(ex.target.size()) +
                    " tokens does not fit max length " + std::to_string(max_len));
  }
  if (ex.prompt.size() + ex.target.size() > max_len) {
    ex.prompt.resize(max_len - ex.target.size());
    ex.truncated = true;
  }
  return ex;
}

}  // namespace gram
