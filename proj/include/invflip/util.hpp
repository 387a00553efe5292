#ifndef INVFLIP_UTIL_HPP
#define INVFLIP_UTIL_HPP

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace invflip {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when an upstream artifact is missing or no longer matches its manifest.
struct StaleError : Error {
  std::string stage;
  StaleError(std::string stage_, const std::string& msg) : Error(msg), stage(std::move(stage_)) {}
};

struct Token {
  std::string text;
  std::size_t begin = 0, end = 0;
  bool punct = false;
};

// Word runs of [A-Za-z0-9'] plus the scope-closing punctuation marks . , ; ! ?
std::vector<Token> tokenize(std::string_view s);
std::vector<std::string> words(std::string_view s, bool lowercase);
std::string to_lower(std::string_view s);
bool is_word_char(char c);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& p);

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, std::string_view data);

// Linear interpolation between order statistics (numpy's default).
double percentile(std::vector<double> v, double q);

double mean(const std::vector<double>& v);
double stddev(const std::vector<double>& v);  // population
double pearson(const std::vector<double>& a, const std::vector<double>& b);
double spearman(const std::vector<double>& a, const std::vector<double>& b);
std::vector<double> ranks(const std::vector<double>& v);  // average ranks for ties

// mt19937_64 with portable bounded draws: std distributions are not
// specified bit-for-bit across standard libraries.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  std::uint64_t next() { return eng_(); }
  std::uint64_t below(std::uint64_t n);
  double uniform();
  double normal();
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

private:
  std::mt19937_64 eng_;
};

std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

std::string fmt_double(double x, int precision = 17);

}  // namespace invflip

#endif
