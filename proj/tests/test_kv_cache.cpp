#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "mixsga/experts.hpp"
#include "mixsga/kv_cache.hpp"
#include "support.hpp"

using namespace mixsga;
using Cache = RaggedKvCache<double>;

namespace {

std::vector<double> random_entry(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

void append_random(Cache& c, std::size_t pos, int expert, std::mt19937_64& rng) {
  const std::size_t n = c.heads_for(expert) * c.head_dim();
  c.append(pos, expert, random_entry(n, rng), random_entry(n, rng));
}

// Positions kept by heavy-hitter eviction, computed by sorting.
std::set<std::size_t> h2o_oracle(const std::vector<std::pair<std::size_t, double>>& live, std::size_t appended,
                                 double keep_ratio, std::size_t window) {
  const auto budget = static_cast<std::size_t>(std::ceil(keep_ratio * static_cast<double>(appended) - 1e-9));
  std::set<std::size_t> keep;
  if (live.size() <= budget) {
    for (auto& [p, m] : live) keep.insert(p);
    return keep;
  }
  auto by_pos = live;
  std::sort(by_pos.begin(), by_pos.end());
  const std::size_t recent = std::min(window, budget);
  for (std::size_t i = 0; i < recent; ++i) keep.insert(by_pos[by_pos.size() - 1 - i].first);
  std::vector<std::pair<std::size_t, double>> rest(by_pos.begin(), by_pos.end() - static_cast<long>(recent));
  std::sort(rest.begin(), rest.end(), [](auto& a, auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first > b.first;
  });
  for (std::size_t i = 0; keep.size() < budget; ++i) keep.insert(rest[i].first);
  return keep;
}

}  // namespace

TEST_CASE("append then gather returns the stored entry") {
  std::mt19937_64 rng(1);
  Cache c(4, 2, 3);
  auto k = random_entry(8, rng), v = random_entry(8, rng);
  c.append(0, 0, k, v);
  auto g = c.gather_expanded(0);
  REQUIRE(g.positions == std::vector<std::size_t>{0});
  REQUIRE(g.keys.shape() == Shape{4, 1, 2});
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(g.keys.data()[i] == k[i]);
    CHECK(g.values.data()[i] == v[i]);
  }
  CHECK(c.grouped_keys(0) == k);
  CHECK(c.grouped_values(0) == v);
}

TEST_CASE("ten tokens on the last expert hold one head each") {
  std::mt19937_64 rng(2);
  Cache c(4, 3, 3);
  for (std::size_t p = 0; p < 10; ++p) append_random(c, p, 2, rng);
  CHECK(c.pool_size(2) == 10);
  CHECK(c.pool_size(0) == 0);
  for (std::size_t p = 0; p < 10; ++p) CHECK(c.grouped_keys(p).size() == 3);
}

TEST_CASE("out-of-order appends gather in position order") {
  std::mt19937_64 rng(3);
  Cache c(2, 2, 2);
  for (std::size_t p : {5, 1, 3, 0}) append_random(c, p, static_cast<int>(p % 2), rng);
  auto g = c.gather_expanded();
  CHECK(g.positions == std::vector<std::size_t>{0, 1, 3, 5});
  CHECK(c.gather_expanded(3).positions == std::vector<std::size_t>{0, 1, 3});
  c.check_consistency();
}

TEST_CASE("gather expands grouped heads like expand_heads") {
  std::mt19937_64 rng(4);
  const std::size_t H = 4, dh = 2;
  Cache c(H, dh, 3);
  auto k0 = random_entry(H * dh, rng), v0 = random_entry(H * dh, rng);
  auto k1 = random_entry(dh, rng), v1 = random_entry(dh, rng);
  c.append(0, 0, k0, v0);
  c.append(1, 2, k1, v1);
  auto g = c.gather_expanded();
  REQUIRE(g.keys.shape() == Shape{H, 2, dh});
  auto expect = expand_heads(Tensor<double>(Shape{1, 1, dh}, k1), 3);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t d = 0; d < dh; ++d) {
      CHECK(g.keys.at({h, 1, d}) == expect.at({h, 0, d}));
      CHECK(g.values.at({h, 1, d}) == v1[d]);
      CHECK(g.keys.at({h, 0, d}) == k0[h * dh + d]);
    }
}

TEST_CASE("append errors") {
  std::mt19937_64 rng(5);
  Cache c(4, 2, 3);
  append_random(c, 0, 1, rng);
  CHECK_THROWS(append_random(c, 0, 1, rng));
  CHECK_THROWS(c.append(1, 1, random_entry(8, rng), random_entry(8, rng)));
  CHECK_THROWS(c.append(1, 3, random_entry(2, rng), random_entry(2, rng)));
  CHECK(c.live_tokens() == 1);
}

TEST_CASE("memory report follows the head-count formula") {
  std::mt19937_64 rng(6);
  SUBCASE("all full heads") {
    Cache c(4, 2, 3);
    for (std::size_t p = 0; p < 6; ++p) append_random(c, p, 0, rng);
    CHECK(c.memory_report().ratio == 1.0);
  }
  SUBCASE("3:1:6 split") {
    Cache c(4, 2, 3);
    std::size_t p = 0;
    for (int e : {0, 0, 0, 1, 2, 2, 2, 2, 2, 2}) append_random(c, p++, e, rng);
    CHECK(c.memory_report().ratio == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("all quarter heads") {
    Cache c(4, 2, 3);
    for (std::size_t p = 0; p < 6; ++p) append_random(c, p, 2, rng);
    CHECK(c.memory_report().ratio == 0.25);
  }
  SUBCASE("bytes and accounting identity on random routing") {
    const std::size_t H = 8, dh = 4;
    RaggedKvCache<double> c(H, dh, 4, 2);  // 2 bytes per scalar
    std::uniform_int_distribution<int> pick(0, 3);
    std::vector<std::size_t> n(4, 0);
    for (std::size_t p = 0; p < 200; ++p) {
      const int e = pick(rng);
      ++n[static_cast<std::size_t>(e)];
      append_random(c, p, e, rng);
    }
    double num = 0.0, den = 0.0;
    std::size_t kv_bytes = 0;
    for (std::size_t e = 0; e < 4; ++e) {
      num += static_cast<double>(n[e]) / std::pow(2.0, static_cast<double>(e));
      den += static_cast<double>(n[e]);
      kv_bytes += n[e] * 2 * (H >> e) * dh * 2;
    }
    auto r = c.memory_report();
    CHECK(std::abs(r.ratio - num / den) < 1e-12);
    CHECK(r.kv_bytes == kv_bytes);
    CHECK(r.index_bytes == 200);
    CHECK(r.bytes == kv_bytes + 200);
    CHECK(r.live_tokens == 200);
  }
  SUBCASE("empty cache") {
    Cache c(4, 2, 3);
    CHECK(c.memory_report().bytes == 0);
  }
}

TEST_CASE("heavy-hitter eviction") {
  std::mt19937_64 rng(7);
  SUBCASE("keep ratio one evicts nothing") {
    Cache c(2, 2, 2);
    for (std::size_t p = 0; p < 8; ++p) append_random(c, p, 0, rng);
    CHECK(c.evict_h2o(1.0, 2).empty());
    CHECK(c.live_tokens() == 8);
  }
  SUBCASE("ten tokens, half kept, window two") {
    Cache c(2, 2, 2);
    std::vector<std::pair<std::size_t, double>> live;
    std::uniform_real_distribution<double> m(0.0, 5.0);
    for (std::size_t p = 0; p < 10; ++p) {
      append_random(c, p, static_cast<int>(p % 2), rng);
      const std::size_t pos[1] = {p};
      const double mass[1] = {m(rng)};
      c.accumulate_attention(pos, mass);
      live.push_back({p, mass[0]});
    }
    auto evicted = c.evict_h2o(0.5, 2);
    CHECK(evicted.size() == 5);
    CHECK(c.live_tokens() == 5);
    CHECK(c.contains(9));
    CHECK(c.contains(8));
    auto kept = h2o_oracle(live, 10, 0.5, 2);
    for (std::size_t p = 0; p < 10; ++p) CHECK(c.contains(p) == (kept.count(p) == 1));
    auto g = c.gather_expanded();
    CHECK(g.positions.size() == 5);
    for (std::size_t p : evicted) CHECK(std::find(g.positions.begin(), g.positions.end(), p) == g.positions.end());
    c.check_consistency();
  }
  SUBCASE("uniform mass keeps the most recent") {
    Cache c(2, 2, 2);
    for (std::size_t p = 0; p < 10; ++p) append_random(c, p, 1, rng);
    c.evict_h2o(0.5, 0);
    CHECK(c.positions() == std::vector<std::size_t>{5, 6, 7, 8, 9});
  }
  SUBCASE("bad keep ratios") {
    Cache c(2, 2, 2);
    CHECK_THROWS(c.evict_h2o(0.0, 1));
    CHECK_THROWS(c.evict_h2o(-0.5, 1));
    CHECK_THROWS(c.evict_h2o(1.5, 1));
  }
}

TEST_CASE("random append and evict sequences stay consistent and match the oracle") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> pick(0, 2);
  std::uniform_real_distribution<double> m(0.0, 1.0);
  const double ratios[] = {0.9, 0.7, 0.5, 0.3};
  for (int trial = 0; trial < 20; ++trial) {
    Cache c(4, 2, 3);
    std::map<std::size_t, double> mass;
    std::map<std::size_t, std::vector<double>> keys;
    const double keep = ratios[trial % 4];
    for (std::size_t p = 0; p < 40; ++p) {
      const int e = pick(rng);
      const std::size_t n = c.heads_for(e) * 2;
      auto k = random_entry(n, rng);
      c.append(p, e, k, random_entry(n, rng));
      keys[p] = k;
      mass[p] = 0.0;
      for (auto& [pos, acc] : mass) {
        const double add = m(rng);
        const std::size_t ps[1] = {pos};
        const double ms[1] = {add};
        c.accumulate_attention(ps, ms);
        acc += add;
      }
      std::vector<std::pair<std::size_t, double>> live(mass.begin(), mass.end());
      auto expect = h2o_oracle(live, p + 1, keep, 3);
      c.evict_h2o(keep, 3);
      c.check_consistency();
      REQUIRE(c.live_tokens() == expect.size());
      for (auto it = mass.begin(); it != mass.end();) {
        if (!expect.count(it->first)) {
          CHECK_FALSE(c.contains(it->first));
          it = mass.erase(it);
        } else {
          CHECK(c.grouped_keys(it->first) == keys[it->first]);
          ++it;
        }
      }
      CHECK(c.live_tokens() ==
            static_cast<std::size_t>(std::ceil(keep * static_cast<double>(p + 1) - 1e-9)));
    }
  }
}
