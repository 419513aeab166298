#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gram {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Index = Eigen::Index;
using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;
using ProductId = std::uint32_t;
using QueryId = std::uint32_t;

// Error hierarchy. Everything thrown by the library derives from Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct ParseError : Error {
  ParseError(const std::string& what, std::size_t pos)
      : Error(what + " at position " + std::to_string(pos)), position(pos) {}
  std::size_t position;
};
struct DependencyError : Error {
  using Error::Error;
};

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed and a stream tag.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  return Rng(mix_seed(seed, stream));
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::string format_product_id(ProductId id);
std::string format_query_id(QueryId id);
ProductId parse_product_id(const std::string& s);
QueryId parse_query_id(const std::string& s);

// Verbosity for progress messages written to std::clog. 0 silences them.
void set_log_level(int level);
int log_level();
void log_info(const std::string& msg);
void log_warn(const std::string& msg);

}  // namespace gram
