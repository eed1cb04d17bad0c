#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mixsga/router.hpp"
#include "cascade_oracle.hpp"
#include "support.hpp"

using namespace mixsga;
using TD = Tensor<double>;

namespace {

using oracle::Milli;
using oracle::random_milli;

}  // namespace

TEST_CASE("zero router weights score one half") {
  RouterParams<double> p{TD::zeros({4, 3}), TD::zeros({3}), {0.3, 0.1, 0.6}};
  std::mt19937_64 rng(1);
  auto s = route_scores(testing::uniform({5, 4}, rng), p);
  for (double v : s.scores.data()) CHECK(v == 0.5);
}

TEST_CASE("scores are the sigmoid of the affine logits") {
  // One token, D=1: logits [2, -2].
  RouterParams<double> p{TD(Shape{1, 2}, {2.0, -2.0}), TD::zeros({2}), {0.5, 0.5}};
  auto s = route_scores(TD(Shape{1, 1}, {1.0}), p);
  CHECK(s.scores.data()[0] == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(s.scores.data()[1] == doctest::Approx(0.1192).epsilon(1e-3));
  CHECK(s.logits.data()[0] == 2.0);
}

TEST_CASE("raising one bias column raises that column for every token") {
  std::mt19937_64 rng(2);
  RouterParams<double> p{testing::uniform({3, 2}, rng), testing::uniform({2}, rng), {0.5, 0.5}};
  auto x = testing::uniform({6, 3}, rng);
  auto before = testing::to_vec(route_scores(x, p).scores.data());
  p.beta.mutable_data()[1] += 0.7;
  auto after = testing::to_vec(route_scores(x, p).scores.data());
  for (std::size_t t = 0; t < 6; ++t) {
    CHECK(after[t * 2 + 1] > before[t * 2 + 1]);
    CHECK(after[t * 2] == before[t * 2]);
  }
}

TEST_CASE("route_scores rejects a width mismatch") {
  RouterParams<double> p{TD::zeros({4, 2}), TD::zeros({2}), {0.5, 0.5}};
  CHECK_THROWS(route_scores(TD::zeros({3, 5}), p));
}

TEST_CASE("prefill cascade examples") {
  SUBCASE("single expert takes everything") {
    std::vector<double> s = {0.2, 0.9, 0.4};
    std::vector<double> r = {1.0};
    auto a = prefill_assign<double>(s, 1, r);
    CHECK(a.expert_of == std::vector<int>{0, 0, 0});
  }
  SUBCASE("two experts, four tokens") {
    std::vector<double> s = {0.9, 0.2, 0.1, 0.8, 0.7, 0.3, 0.4, 0.6};
    std::vector<double> r = {0.5, 0.5};
    auto a = prefill_assign<double>(s, 2, r);
    CHECK(a.expert_of == std::vector<int>{0, 1, 0, 1});
  }
  SUBCASE("ceiling on odd length") {
    std::vector<double> s = {0.1, 0.9, 0.2, 0.8, 0.3, 0.7};
    std::vector<double> r = {0.5, 0.5};
    auto a = prefill_assign<double>(s, 2, r);
    CHECK(a.column_count(0) == 2);
    CHECK(a.column_count(1) == 1);
  }
  SUBCASE("empty sequence") {
    std::vector<double> s;
    std::vector<double> r = {0.5, 0.5};
    auto a = prefill_assign<double>(s, 2, r);
    CHECK(a.length() == 0);
  }
  SUBCASE("equal scores break ties toward low token indices") {
    std::vector<double> s(8, 0.5);
    std::vector<double> r = {0.5, 0.5};
    auto a = prefill_assign<double>(s, 2, r);
    CHECK(a.expert_of == std::vector<int>{0, 0, 1, 1});
  }
  SUBCASE("capacity overflow is absorbed by the cascade") {
    // ceil(0.34 * 5) = 2 for each of three experts: 6 > 5 slots.
    std::vector<double> s(15, 0.5);
    std::vector<double> r = {0.34, 0.33, 0.33};
    auto a = prefill_assign<double>(s, 3, r);
    CHECK(a.column_count(0) == 2);
    CHECK(a.column_count(1) == 2);
    CHECK(a.column_count(2) == 1);
  }
}

TEST_CASE("capacity ignores floating-point noise") {
  // 0.1 * 30 evaluates to 3.0000000000000004.
  CHECK(expert_capacity(0.1, 30) == 3);
  CHECK(expert_capacity(0.3, 10) == 3);
  CHECK(expert_capacity(0.5, 3) == 2);
  CHECK(cascade_counts(std::vector<double>{0.3, 0.1, 0.6}, 10) == std::vector<std::size_t>{3, 1, 6});
}

TEST_CASE("invalid ratios are rejected") {
  CHECK_THROWS_AS(validate_ratios(std::vector<double>{0.5, 0.6}), ConfigError);
  CHECK_THROWS_AS(validate_ratios(std::vector<double>{1.2, -0.2}), ConfigError);
  CHECK_THROWS_AS(validate_ratios(std::vector<double>{}), ConfigError);
  CHECK_NOTHROW(validate_ratios(std::vector<double>{0.3, 0.1, 0.6}));
}

TEST_CASE("prefill cascade matches the selection oracle") {
  std::mt19937_64 rng(20);
  std::uniform_int_distribution<std::size_t> len(0, 64), ex(1, 4);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t L = len(rng), E = ex(rng);
    const auto m = random_milli(E, rng);
    std::vector<double> s(L * E);
    for (auto& v : s) v = u(rng);
    // Coarse scores in some trials to exercise ties.
    if (trial % 3 == 0)
      for (auto& v : s) v = std::round(v * 4.0) / 4.0 * 0.98 + 0.01;
    const auto ratios = m.ratios();
    auto a = prefill_assign<double>(s, E, ratios);
    REQUIRE(a.length() == L);
    for (std::size_t t = 0; t < L; ++t) {
      int ones = 0;
      for (std::size_t e = 0; e < E; ++e) ones += a.masks[t * E + e];
      CHECK(ones == 1);
      CHECK(a.masks[t * E + static_cast<std::size_t>(a.expert_of[t])] == 1);
    }
    CHECK(a.expert_of == oracle::cascade(s, L, E, m));
  }
}

TEST_CASE("a monotone transform of one column keeps the assignment") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t L = 40, E = 3;
    std::vector<double> s(L * E);
    for (auto& v : s) v = u(rng);
    std::vector<double> r = {0.3, 0.1, 0.6};
    auto base = prefill_assign<double>(s, E, r);
    const std::size_t col = static_cast<std::size_t>(trial) % E;
    for (std::size_t t = 0; t < L; ++t) s[t * E + col] = std::pow(s[t * E + col], 3.0) * 0.5;
    CHECK(prefill_assign<double>(s, E, r) == base);
  }
}

TEST_CASE("decode argmax with lowest-index ties") {
  CHECK(decode_assign<double>(std::vector<double>{0.1, 0.9, 0.3}) == 1);
  CHECK(decode_assign<double>(std::vector<double>{0.5, 0.5, 0.5}) == 0);
  CHECK(decode_assign<double>(std::vector<double>{0.2, 0.7, 0.7}) == 1);
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<int> coarse(0, 3);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> row(4);
    for (auto& v : row) v = coarse(rng) * 0.25;
    const int expect = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    CHECK(decode_assign<double>(row) == expect);
  }
}

TEST_CASE("consistency loss values") {
  SUBCASE("equal rows give ln E") {
    TD s(Shape{2, 3}, {0.4, 0.4, 0.4, 0.7, 0.7, 0.7});
    auto a = Assignment::from_experts({0, 2}, 3);
    CHECK(consistency_loss(s, a).item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  }
  SUBCASE("one confident row") {
    TD s(Shape{1, 3}, {5.0, 0.0, 0.0});
    auto a = Assignment::from_experts({0}, 3);
    CHECK(consistency_loss(s, a).item() == doctest::Approx(std::log1p(2.0 * std::exp(-5.0))).epsilon(1e-12));
  }
  SUBCASE("non-negative") {
    std::mt19937_64 rng(23);
    auto s = testing::uniform({10, 4}, rng, 0.0, 1.0);
    auto a = prefill_assign<double>(s.data(), 4, std::vector<double>{0.25, 0.25, 0.25, 0.25});
    CHECK(consistency_loss(s, a).item() >= 0.0);
  }
}

TEST_CASE("gradient descent on scores decreases the consistency loss monotonically") {
  std::mt19937_64 rng(24);
  auto s = testing::uniform({8, 3}, rng, 0.0, 1.0, true);
  auto target = random_assign(8, std::vector<double>{0.3, 0.1, 0.6}, 9);
  double prev = consistency_loss(s, target).item();
  for (int step = 0; step < 100; ++step) {
    s.zero_grad();
    consistency_loss(s, target).backward();
    auto d = s.mutable_data();
    auto g = s.grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= 0.5 * g[i];
    const double cur = consistency_loss(s, target).item();
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("random assignment keeps cascade counts and is seeded") {
  auto one = random_assign(7, std::vector<double>{1.0}, 3);
  CHECK(one.expert_of == std::vector<int>(7, 0));

  const std::vector<double> r = {0.3, 0.1, 0.6};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto a = random_assign(10, r, seed);
    CHECK(a.column_count(0) == 3);
    CHECK(a.column_count(1) == 1);
    CHECK(a.column_count(2) == 6);
  }
  CHECK(random_assign(64, r, 5) == random_assign(64, r, 5));
  CHECK_FALSE(random_assign(64, r, 5) == random_assign(64, r, 6));
}

TEST_CASE("routing trace CSV round trip") {
  auto a = Assignment::from_experts({2, 0, 1, 2}, 3);
  std::stringstream ss;
  write_assignment_csv(ss, a);
  CHECK(ss.str().rfind("position,expert_index\n", 0) == 0);
  auto rows = read_assignment_csv(ss);
  REQUIRE(rows.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(rows[i].first == i);
    CHECK(rows[i].second == a.expert_of[i]);
  }
  std::stringstream dup("position,expert_index\n0,1\n0,2\n");
  CHECK_THROWS(read_assignment_csv(dup));
}
