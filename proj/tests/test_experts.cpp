#include <doctest.h>

#include <random>

#include "mixsga/experts.hpp"
#include "mixsga/gradcheck.hpp"
#include "reference.hpp"
#include "support.hpp"

using namespace mixsga;

namespace {

template <typename T>
ExpertBank<T> random_bank(std::size_t D, std::size_t H, std::size_t E, std::mt19937_64& rng, double sd = 0.4) {
  ExpertBank<T> b;
  b.wq = testing::normal<T>({D, D}, rng, sd);
  b.bq = testing::normal<T>({D}, rng, sd);
  b.wk = testing::normal<T>({D, D}, rng, sd);
  b.bk = testing::normal<T>({D}, rng, sd);
  b.wv = testing::normal<T>({D, D}, rng, sd);
  b.bv = testing::normal<T>({D}, rng, sd);
  b.wo = testing::normal<T>({D, D}, rng, sd);
  b.heads = H;
  b.experts = E;
  return b;
}

template <typename T>
reference::Vec as_vec(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

// [H, L, dh] tensor whose head h is filled with values[h].
Tensor<double> constant_heads(const std::vector<double>& values, std::size_t L, std::size_t dh) {
  std::vector<double> v;
  for (double c : values)
    for (std::size_t i = 0; i < L * dh; ++i) v.push_back(c);
  return Tensor<double>(Shape{values.size(), L, dh}, v);
}

}  // namespace

TEST_CASE("identity key projection with one head is the input") {
  const std::size_t L = 3, D = 4;
  std::mt19937_64 rng(1);
  auto bank = random_bank<double>(D, 1, 1, rng);
  std::vector<double> eye(D * D, 0.0);
  for (std::size_t i = 0; i < D; ++i) eye[i * D + i] = 1.0;
  bank.wk = Tensor<double>(Shape{D, D}, eye);
  bank.bk = Tensor<double>::zeros({D});
  auto x = testing::uniform({L, D}, rng);
  auto k = kv_project(x, bank, KeyValue::key);
  REQUIRE(k.shape() == Shape{1, L, D});
  for (std::size_t i = 0; i < L * D; ++i) CHECK(k.data()[i] == x.data()[i]);
}

TEST_CASE("head h holds its contiguous slice of the flat projection") {
  const std::size_t L = 5, D = 4, H = 2, dh = 2;
  std::mt19937_64 rng(2);
  auto bank = random_bank<double>(D, H, 2, rng);
  auto x = testing::uniform({L, D}, rng);
  auto flat = reference::affine(as_vec(x), L, D, as_vec(bank.wv), nullptr, D);
  auto v = kv_project(x, bank, KeyValue::value);
  REQUIRE(v.shape() == Shape{H, L, dh});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < dh; ++c)
        CHECK(v.at({h, t, c}) == doctest::Approx(flat[t * D + h * dh + c] + bank.bv.data()[h * dh + c]));
}

TEST_CASE("zero projection weights leave the bias slices") {
  const std::size_t L = 3, D = 6, H = 3, dh = 2;
  std::mt19937_64 rng(3);
  auto bank = random_bank<double>(D, H, 1, rng);
  bank.wk = Tensor<double>::zeros({D, D});
  auto k = kv_project(testing::uniform({L, D}, rng), bank, KeyValue::key);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < dh; ++c) CHECK(k.at({h, t, c}) == bank.bk.data()[h * dh + c]);
}

TEST_CASE("grouping averages contiguous heads") {
  auto x = constant_heads({1, 3, 5, 7}, 2, 3);
  auto g1 = group_heads(x, 1);
  CHECK(g1.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(g1.data()[i] == x.data()[i]);

  auto g2 = group_heads(x, 2);
  REQUIRE(g2.shape() == Shape{2, 2, 3});
  for (std::size_t i = 0; i < 6; ++i) CHECK(g2.data()[i] == 2.0);
  for (std::size_t i = 6; i < 12; ++i) CHECK(g2.data()[i] == 6.0);

  auto g3 = group_heads(x, 3);
  REQUIRE(g3.shape() == Shape{1, 2, 3});
  for (double v : g3.data()) CHECK(v == 4.0);

  CHECK_THROWS(group_heads(constant_heads({1, 2, 3}, 1, 1), 2));
}

TEST_CASE("permuting heads inside a group leaves the grouped result unchanged") {
  std::mt19937_64 rng(4);
  auto x = testing::uniform({4, 3, 2}, rng);
  auto perm = concat<double>({slice(x, 0, 1, 1), slice(x, 0, 0, 1), slice(x, 0, 3, 1), slice(x, 0, 2, 1)}, 0);
  auto a = group_heads(x, 2), b = group_heads(perm, 2);
  CHECK(testing::max_abs_diff(a.data(), b.data()) < 1e-15);
  auto rev = concat<double>({slice(x, 0, 3, 1), slice(x, 0, 2, 1), slice(x, 0, 1, 1), slice(x, 0, 0, 1)}, 0);
  CHECK(testing::max_abs_diff(group_heads(x, 3).data(), group_heads(rev, 3).data()) < 1e-15);
}

TEST_CASE("expansion repeats grouped heads") {
  auto g = constant_heads({2, 6}, 1, 2);
  auto e = expand_heads(g, 2);
  REQUIRE(e.shape() == Shape{4, 1, 2});
  const std::vector<double> expect = {2, 2, 2, 2, 6, 6, 6, 6};
  for (std::size_t i = 0; i < 8; ++i) CHECK(e.data()[i] == expect[i]);

  std::mt19937_64 rng(5);
  auto x = testing::uniform({4, 3, 2}, rng);
  auto same = expand_heads(group_heads(x, 1), 1);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.data()[i] == x.data()[i]);

  for (std::size_t e_ = 1; e_ <= 3; ++e_) {
    auto grouped = testing::uniform({4 >> (e_ - 1), 3, 2}, rng);
    auto back = group_heads(expand_heads(grouped, e_), e_);
    CHECK(testing::max_abs_diff(back.data(), grouped.data()) < 1e-15);
  }
}

TEST_CASE("moe_kv stores only each token's own expert") {
  const std::size_t L = 4, D = 8, H = 4, dh = 2;
  std::mt19937_64 rng(6);
  auto bank = random_bank<double>(D, H, 3, rng);
  auto x = testing::uniform({L, D}, rng);

  SUBCASE("all expert 1 equals the full projection") {
    std::vector<int> e(L, 0);
    auto kv = moe_kv(x, std::span<const int>(e), bank);
    auto full = kv_project(x, bank, KeyValue::key);
    for (std::size_t t = 0; t < L; ++t) {
      auto k = kv.entry(t, KeyValue::key);
      REQUIRE(k.size() == H * dh);
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t c = 0; c < dh; ++c) CHECK(k[h * dh + c] == doctest::Approx(full.at({h, t, c})));
    }
  }
  SUBCASE("all last expert stores a quarter of the heads") {
    std::vector<int> e(L, 2);
    auto kv = moe_kv(x, std::span<const int>(e), bank);
    for (std::size_t t = 0; t < L; ++t) CHECK(kv.entry(t, KeyValue::value).size() == dh);
  }
  SUBCASE("mixed routing") {
    std::vector<int> e = {0, 1, 0, 2};
    auto kv = moe_kv(x, std::span<const int>(e), bank);
    std::vector<std::size_t> heads;
    for (std::size_t t = 0; t < L; ++t) heads.push_back(kv.heads_of(t));
    CHECK(heads == std::vector<std::size_t>{4, 2, 4, 1});
    // The grouped entry is the mean of the full heads it covers.
    auto full = kv_project(x, bank, KeyValue::key);
    auto k1 = kv.entry(1, KeyValue::key);
    for (std::size_t g = 0; g < 2; ++g)
      for (std::size_t c = 0; c < dh; ++c)
        CHECK(k1[g * dh + c] ==
              doctest::Approx(0.5 * (full.at({2 * g, 1, c}) + full.at({2 * g + 1, 1, c}))));
    auto expanded = expand_kv(kv, KeyValue::key);
    REQUIRE(expanded.shape() == Shape{L, H, dh});
    for (std::size_t h = 0; h < H; ++h)
      CHECK(expanded.at({3, h, 0}) == doctest::Approx(kv.entry(3, KeyValue::key)[0]));
  }
}

TEST_CASE("forced expert 1 and 2 match multi-head and grouped-query references") {
  const std::size_t L = 9, D = 16, H = 4;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    auto bank = random_bank<float>(D, H, 3, rng);
    auto x = testing::normal<float>({L, D}, rng, 1.0);
    reference::Attention p{as_vec(bank.wq), as_vec(bank.bq), as_vec(bank.wk), as_vec(bank.bk),
                           as_vec(bank.wv), as_vec(bank.bv), as_vec(bank.wo)};
    const double scale = 1.0 / std::sqrt(static_cast<double>(D / H));
    for (int expert : {0, 1}) {
      std::vector<int> e(L, expert);
      auto out = mix_attention(query_project(x, bank), moe_kv(x, std::span<const int>(e), bank), bank);
      auto ref = reference::attention(as_vec(x), L, D, H, std::size_t{1} << expert, p, scale);
      CHECK(testing::max_rel_diff(out.data(), ref) < 1e-5);
    }
  }
}

TEST_CASE("a single token attends only to itself") {
  const std::size_t D = 8, H = 4;
  std::mt19937_64 rng(7);
  auto bank = random_bank<double>(D, H, 3, rng);
  auto x = testing::uniform({1, D}, rng);
  for (int expert : {0, 1, 2}) {
    std::vector<int> e = {expert};
    auto kv = moe_kv(x, std::span<const int>(e), bank);
    Tensor<double> probs;
    auto out = mix_attention(query_project(x, bank), kv, bank, {}, &probs);
    for (double w : probs.data()) CHECK(w == 1.0);
    // Output is the token's expanded value heads through wo.
    auto vals = reshape(expand_kv(kv, KeyValue::value), {1, D});
    auto expect = matmul(vals, bank.wo);
    CHECK(testing::max_abs_diff(out.data(), expect.data()) < 1e-14);
  }
}

TEST_CASE("outputs do not depend on later positions") {
  const std::size_t L = 7, D = 8, H = 4;
  std::mt19937_64 rng(8);
  auto bank = random_bank<double>(D, H, 3, rng);
  auto x = testing::uniform({L, D}, rng);
  std::vector<int> e = {0, 2, 1, 0, 1, 2, 0};
  auto run = [&](const Tensor<double>& in) {
    return mix_attention(query_project(in, bank), moe_kv(in, std::span<const int>(e), bank), bank);
  };
  auto base = run(x);
  const std::size_t t = 3;
  std::vector<double> v(x.data().begin(), x.data().end());
  for (std::size_t i = (t + 1) * D; i < L * D; ++i) v[i] += 3.0;
  auto moved = run(Tensor<double>(Shape{L, D}, v));
  for (std::size_t i = 0; i < (t + 1) * D; ++i) CHECK(moved.data()[i] == base.data()[i]);
  CHECK(testing::max_abs_diff(moved.data(), base.data()) > 1e-3);
}

TEST_CASE("attention gradients pass a finite-difference check") {
  const std::size_t L = 5, D = 8, H = 4;
  std::mt19937_64 rng(9);
  auto bank = random_bank<double>(D, H, 3, rng);
  auto x = testing::uniform({L, D}, rng);
  auto w = testing::uniform({L, D}, rng);
  std::vector<int> e = {2, 0, 1, 1, 0};
  auto loss = [&] {
    return sum(mul(mix_attention(query_project(x, bank), moe_kv(x, std::span<const int>(e), bank), bank), w));
  };
  auto r = gradient_check(loss, {{"wq", bank.wq}, {"bq", bank.bq}, {"wk", bank.wk}, {"bk", bank.bk},
                                 {"wv", bank.wv}, {"bv", bank.bv}, {"wo", bank.wo}, {"x", x}});
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("decode attention over an expanded cache matches the causal last row") {
  const std::size_t L = 6, D = 8, H = 4;
  std::mt19937_64 rng(10);
  auto bank = random_bank<double>(D, H, 3, rng);
  auto x = testing::uniform({L, D}, rng);
  std::vector<int> e = {1, 0, 2, 2, 0, 1};
  auto kv = moe_kv(x, std::span<const int>(e), bank);
  auto full = mix_attention(query_project(x, bank), kv, bank);
  auto keys = transpose(expand_kv(kv, KeyValue::key), 0, 1);  // [H, L, dh]
  auto values = transpose(expand_kv(kv, KeyValue::value), 0, 1);
  auto q = slice(query_project(x, bank), 1, L - 1, 1);
  auto last = decode_attention(q, keys, values, bank, AttentionScale::head_dim);
  for (std::size_t c = 0; c < D; ++c) CHECK(last.data()[c] == doctest::Approx(full.at({L - 1, c})));
  auto empty = Tensor<double>::zeros({H, 0, D / H});
  CHECK_THROWS(decode_attention(q, empty, empty, bank, AttentionScale::head_dim));
}

TEST_CASE("bank validation") {
  std::mt19937_64 rng(11);
  auto bank = random_bank<double>(8, 4, 3, rng);
  CHECK_NOTHROW(bank.validate());
  bank.experts = 4;  // needs 8 | H
  CHECK_THROWS(bank.validate());
  CHECK(ExpertBank<double>::group_size(1) == 1);
  CHECK(ExpertBank<double>::group_size(3) == 4);
}
