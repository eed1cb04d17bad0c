#include "mixsga/synthetic.hpp"

#include <array>
#include <random>
#include <span>
#include <string_view>

namespace mixsga {
namespace {

constexpr std::array<std::string_view, 16> kNouns = {
    "cat", "river", "garden", "teacher", "engine", "market", "window", "letter",
    "forest", "child", "ship", "village", "storm", "lamp", "farmer", "bridge"};
constexpr std::array<std::string_view, 12> kVerbs = {
    "sees", "builds", "follows", "carries", "finds", "paints",
    "opens", "watches", "moves", "keeps", "crosses", "hears"};
constexpr std::array<std::string_view, 12> kAdjectives = {
    "small", "old", "bright", "quiet", "red", "heavy",
    "green", "cold", "gentle", "strange", "busy", "tall"};
constexpr std::array<std::string_view, 8> kPlaces = {
    "near the hill", "by the sea", "in the morning", "after the rain",
    "under the trees", "at the station", "before dinner", "on the road"};
constexpr std::array<std::string_view, 6> kJoiners = {
    "and then", "because", "while", "but", "so", "until"};

class Writer {
 public:
  explicit Writer(std::uint64_t seed) : rng_(seed) {}

  template <std::size_t N>
  std::string_view pick(const std::array<std::string_view, N>& words) {
    std::uniform_int_distribution<std::size_t> d(0, N - 1);
    return words[d(rng_)];
  }
  bool chance(double p) { return std::bernoulli_distribution(p)(rng_); }
  int number() { return std::uniform_int_distribution<int>(2, 99)(rng_); }

  std::string noun_phrase() {
    std::string s = chance(0.6) ? "the " : "a ";
    if (chance(0.5)) {
      s += pick(kAdjectives);
      s += ' ';
    }
    s += pick(kNouns);
    return s;
  }

  std::string clause() {
    std::string s = noun_phrase();
    s += ' ';
    s += pick(kVerbs);
    s += ' ';
    if (chance(0.15)) {
      s += std::to_string(number());
      s += ' ';
      s += pick(kNouns);
      s += 's';
    } else {
      s += noun_phrase();
    }
    if (chance(0.4)) {
      s += ' ';
      s += pick(kPlaces);
    }
    return s;
  }

  std::string sentence() {
    std::string s = clause();
    if (chance(0.3)) {
      s += ' ';
      s += pick(kJoiners);
      s += ' ';
      s += clause();
    }
    s[0] = static_cast<char>(s[0] - 'a' + 'A');
    s += chance(0.1) ? "!" : ".";
    return s;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

std::string synthetic_text(std::size_t bytes, std::uint64_t seed) {
  Writer w(seed);
  std::string out;
  out.reserve(bytes + 128);
  std::size_t in_paragraph = 0;
  while (out.size() < bytes) {
    out += w.sentence();
    if (++in_paragraph >= 6 && w.chance(0.3)) {
      out += '\n';
      in_paragraph = 0;
    } else {
      out += ' ';
    }
  }
  out.resize(bytes);
  return out;
}

}  // namespace mixsga
