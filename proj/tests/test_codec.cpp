#include <doctest.h>

#include "gram/codec.hpp"

using namespace gram;

namespace {

AttributeLexicon small_lexicon() {
  std::array<std::vector<std::string>, kNumAttributeTypes> v;
  v[static_cast<std::size_t>(AttributeType::Category)] = {"kettle", "lamp"};
  v[static_cast<std::size_t>(AttributeType::Brand)] = {"acme", "zenit"};
  v[static_cast<std::size_t>(AttributeType::Color)] = {"red", "blue"};
  v[static_cast<std::size_t>(AttributeType::Material)] = {"steel"};
  v[static_cast<std::size_t>(AttributeType::Style)] = {"retro"};
  v[static_cast<std::size_t>(AttributeType::Audience)] = {"kids"};
  v[static_cast<std::size_t>(AttributeType::Scenario)] = {"camping"};
  return AttributeLexicon(v);
}

AttributeValue av(AttributeType t, std::string v) { return {t, std::move(v)}; }

}  // namespace

TEST_CASE("granularity follows attribute count") {
  CHECK(code_granularity(1) == Granularity::Coarse);
  CHECK(code_granularity(2) == Granularity::Coarse);
  CHECK(code_granularity(3) == Granularity::Medium);
  for (std::size_t n = 4; n <= 6; ++n) {
    CHECK(code_granularity(n) == Granularity::Fine);
  }
  CHECK_THROWS_AS(code_granularity(0), DataError);
  CHECK_THROWS_AS(code_granularity(7), DataError);
  CHECK_THROWS_AS(Code(std::vector<AttributeValue>{}), DataError);
}

TEST_CASE("serialize and parse round-trip") {
  const auto lex = small_lexicon();
  const Code c = make_canonical_code({av(AttributeType::Brand, "acme"), av(AttributeType::Category, "kettle")});
  CHECK(serialize_code(c) == "kettle,acme");
  CHECK(parse_code(serialize_code(c), lex) == c);

  const Code order_kept({av(AttributeType::Brand, "acme"), av(AttributeType::Category, "kettle")});
  CHECK(serialize_code(order_kept) == "acme,kettle");
  CHECK(parse_code("acme,kettle", lex) == order_kept);
  CHECK(parse_code("acme,kettle", lex).granularity() == Granularity::Coarse);

  const Code six = make_canonical_code({av(AttributeType::Category, "lamp"), av(AttributeType::Brand, "zenit"),
                                        av(AttributeType::Color, "red"), av(AttributeType::Material, "steel"),
                                        av(AttributeType::Style, "retro"), av(AttributeType::Audience, "kids")});
  CHECK(parse_code(six.str(), lex) == six);
  CHECK(six.granularity() == Granularity::Fine);
}

TEST_CASE("parse errors carry positions") {
  const auto lex = small_lexicon();
  auto position_of = [&](std::string_view s) -> std::size_t {
    try {
      (void)parse_code(s, lex);
    } catch (const ParseError& e) {
      return e.position;
    }
    return std::string::npos;
  };
  CHECK(position_of("") == 0);
  CHECK(position_of("acme,,kettle") == 5);
  CHECK(position_of("acme,teapot") == 5);
  CHECK(position_of("acme,acme") == 5);
  CHECK(position_of("acme,") == 5);
  CHECK(position_of("lamp,zenit,red,steel,retro,kids,camping") == 32);
}

TEST_CASE("vocabulary layout") {
  const std::vector<std::string> corpus{"a"};
  const auto v = build_vocabulary(corpus);
  CHECK(v.size() == Vocabulary::kNumReserved + 1);
  CHECK(v.id("a") == Vocabulary::kNumReserved);
  CHECK(v.token(Vocabulary::kEos) == "<eos>");
  CHECK_THROWS_AS(v.id("b"), DataError);
  CHECK_THROWS_AS(build_vocabulary(std::span<const std::string>{}), DataError);

  const std::vector<std::string> c2{"zeta beta", "alpha,beta"};
  const auto v2 = build_vocabulary(c2);
  CHECK(v2 == build_vocabulary(c2));
  CHECK(v2.id("alpha") < v2.id("beta"));
  CHECK(v2.id("beta") < v2.id("zeta"));
  for (TokenId i = 0; i < static_cast<TokenId>(v2.size()); ++i) {
    CHECK(v2.id(v2.token(i)) == i);
  }
}

TEST_CASE("encode_example builds prompt and target") {
  const std::vector<std::string> corpus{"kettle acme"};
  const auto v = build_vocabulary(corpus);
  const Code code({av(AttributeType::Brand, "acme"), av(AttributeType::Category, "kettle")});
  const auto q = encode_example(v, Side::Query, "kettle", code, 40);
  CHECK(q.prompt == TokenSeq{Vocabulary::kPromptQuery, v.id("kettle")});
  CHECK(q.target == TokenSeq{v.id("acme"), Vocabulary::kSep, v.id("kettle"), Vocabulary::kEos});
  CHECK_FALSE(q.truncated);
  const auto t = encode_example(v, Side::Product, "kettle", code, 40);
  CHECK(t.target == q.target);
  CHECK(t.prompt.front() != q.prompt.front());
  CHECK(decode_code_tokens(v, q.target) == std::optional<std::string>("acme,kettle"));

  const auto cut = encode_example(v, Side::Query, "kettle acme kettle acme", code, 6);
  CHECK(cut.truncated);
  CHECK(cut.target == q.target);
  CHECK(cut.prompt.size() + cut.target.size() == 6);
  CHECK_THROWS_AS(encode_example(v, Side::Query, "kettle", code, 4), DataError);
  CHECK_THROWS_AS(encode_example(v, Side::Query, "teapot", code, 40), DataError);
}

TEST_CASE("decode rejects malformed token sequences") {
  const std::vector<std::string> corpus{"x y"};
  const auto v = build_vocabulary(corpus);
  const TokenId x = v.id("x");
  const TokenId y = v.id("y");
  CHECK_FALSE(decode_code_tokens(v, TokenSeq{Vocabulary::kEos}));
  CHECK_FALSE(decode_code_tokens(v, TokenSeq{x, y, Vocabulary::kEos}));
  CHECK_FALSE(decode_code_tokens(v, TokenSeq{x, Vocabulary::kSep, Vocabulary::kEos}));
  CHECK_FALSE(decode_code_tokens(v, TokenSeq{Vocabulary::kSep, x, Vocabulary::kEos}));
  CHECK_FALSE(decode_code_tokens(v, TokenSeq{x}));
  CHECK(decode_code_tokens(v, TokenSeq{y, Vocabulary::kSep, x, Vocabulary::kEos}) ==
        std::optional<std::string>("y,x"));
}

TEST_CASE("unknown prompt words are dropped and counted") {
  const std::vector<std::string> corpus{"kettle"};
  const auto v = build_vocabulary(corpus);
  std::size_t dropped = 0;
  const auto p = encode_prompt(v, Side::Product, "shiny kettle now", &dropped);
  CHECK(p == TokenSeq{Vocabulary::kPromptProduct, v.id("kettle")});
  CHECK(dropped == 2);
}

TEST_CASE("lexicon rejects ambiguous values") {
  std::array<std::vector<std::string>, kNumAttributeTypes> v;
  v[0] = {"kettle"};
  v[1] = {"kettle"};
  CHECK_THROWS_AS(AttributeLexicon{v}, ConfigError);
  v[1] = {"a,b"};
  CHECK_THROWS_AS(AttributeLexicon{v}, ConfigError);
  CHECK(parse_side("query") == Side::Query);
  CHECK(parse_side("product") == Side::Product);
  CHECK_THROWS_AS(parse_side("both"), DataError);
}
