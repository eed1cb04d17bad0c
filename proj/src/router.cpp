#include "mixsga/router.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

namespace mixsga {

void validate_ratios(std::span<const double> ratios) {
  if (ratios.empty()) throw ConfigError("expert ratios: at least one expert is required");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0))
      throw ConfigError("expert ratios: every ratio must lie in [0, 1], got " + std::to_string(r));
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    std::ostringstream os;
    os.precision(12);
    os << "expert ratios must sum to 1, got " << total;
    throw ConfigError(os.str());
  }
}

std::size_t expert_capacity(double ratio, std::size_t length) {
  const double exact = ratio * static_cast<double>(length);
  return static_cast<std::size_t>(std::ceil(exact - 1e-9));
}

std::vector<std::size_t> cascade_counts(std::span<const double> ratios, std::size_t length) {
  std::vector<std::size_t> counts(ratios.size(), 0);
  std::size_t remaining = length;
  for (std::size_t e = 0; e + 1 < ratios.size(); ++e) {
    counts[e] = std::min(expert_capacity(ratios[e], length), remaining);
    remaining -= counts[e];
  }
  if (!ratios.empty()) counts.back() = remaining;
  return counts;
}

Assignment Assignment::from_experts(std::vector<int> expert_of, std::size_t experts) {
  Assignment a;
  a.experts = experts;
  a.masks.assign(expert_of.size() * experts, 0);
  for (std::size_t t = 0; t < expert_of.size(); ++t) {
    if (expert_of[t] < 0 || static_cast<std::size_t>(expert_of[t]) >= experts)
      throw std::out_of_range("assignment: expert index " + std::to_string(expert_of[t]) +
                              " out of range for " + std::to_string(experts) + " experts");
    a.masks[t * experts + static_cast<std::size_t>(expert_of[t])] = 1;
  }
  a.expert_of = std::move(expert_of);
  return a;
}

Assignment Assignment::uniform(std::size_t length, int expert, std::size_t experts) {
  return from_experts(std::vector<int>(length, expert), experts);
}

std::size_t Assignment::column_count(std::size_t expert) const {
  return static_cast<std::size_t>(
      std::count(expert_of.begin(), expert_of.end(), static_cast<int>(expert)));
}

void write_assignment_csv(std::ostream& out, const Assignment& a) {
  out << "position,expert_index\n";
  for (std::size_t t = 0; t < a.length(); ++t) out << t << ',' << a.expert_of[t] << '\n';
}

std::vector<std::pair<std::size_t, int>> read_assignment_csv(std::istream& in) {
  std::vector<std::pair<std::size_t, int>> rows;
  std::set<std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line == "position,expert_index") continue;
    std::istringstream fields(line);
    long long pos = -1, expert = -1;
    char comma = 0;
    if (!(fields >> pos >> comma >> expert) || comma != ',' || pos < 0 || expert < 0)
      throw std::invalid_argument("routing trace line " + std::to_string(line_no) +
                                  ": expected 'position,expert_index', got '" + line + "'");
    if (!seen.insert(static_cast<std::size_t>(pos)).second)
      throw std::invalid_argument("routing trace line " + std::to_string(line_no) +
                                  ": duplicate position " + std::to_string(pos));
    rows.emplace_back(static_cast<std::size_t>(pos), static_cast<int>(expert));
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

template <typename T>
void RouterParams<T>::validate() const {
  if (phi.rank() != 2 || beta.rank() != 1 || phi.dim(1) != beta.dim(0))
    throw ShapeError("router: phi " + shape_str(phi.shape()) + " and beta " +
                     shape_str(beta.shape()) + " do not agree");
  if (ratios.size() != beta.numel())
    throw ConfigError("router: " + std::to_string(ratios.size()) + " ratios for " +
                      std::to_string(beta.numel()) + " experts");
  validate_ratios(ratios);
}

template <typename T>
RouterScores<T> route_scores(const Tensor<T>& x, const RouterParams<T>& params) {
  if (x.rank() < 2 || x.shape().back() != params.phi.dim(0))
    throw ShapeError("route_scores: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(params.phi.shape()));
  auto logits = add(matmul(x, params.phi), params.beta);
  auto scores = sigmoid(logits);
  return {std::move(logits), std::move(scores)};
}

template <typename T>
Assignment prefill_assign(std::span<const T> scores, std::size_t experts,
                          std::span<const double> ratios) {
  if (experts == 0 || ratios.size() != experts)
    throw ConfigError("prefill_assign: " + std::to_string(ratios.size()) + " ratios for " +
                      std::to_string(experts) + " experts");
  if (scores.size() % experts != 0)
    throw ShapeError("prefill_assign: " + std::to_string(scores.size()) +
                     " scores do not form rows of " + std::to_string(experts));
  const std::size_t length = scores.size() / experts;
  std::vector<int> expert_of(length, static_cast<int>(experts - 1));
  std::vector<std::size_t> open(length);
  std::iota(open.begin(), open.end(), std::size_t{0});

  for (std::size_t e = 0; e + 1 < experts && !open.empty(); ++e) {
    const std::size_t take = std::min(expert_capacity(ratios[e], length), open.size());
    if (take == 0) continue;
    // Highest score first; equal scores keep ascending token order.
    std::stable_sort(open.begin(), open.end(), [&](std::size_t a, std::size_t b) {
      return scores[a * experts + e] > scores[b * experts + e];
    });
    for (std::size_t i = 0; i < take; ++i) expert_of[open[i]] = static_cast<int>(e);
    open.erase(open.begin(), open.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(open.begin(), open.end());
  }
  return Assignment::from_experts(std::move(expert_of), experts);
}

template <typename T>
int decode_assign(std::span<const T> score_row) {
  if (score_row.empty()) throw std::invalid_argument("decode_assign: empty score row");
  std::size_t best = 0;
  for (std::size_t e = 1; e < score_row.size(); ++e)
    if (score_row[e] > score_row[best]) best = e;
  return static_cast<int>(best);
}

template <typename T>
Tensor<T> consistency_loss(const Tensor<T>& scores, const Assignment& assignment) {
  return cross_entropy(scores, std::span<const int>(assignment.expert_of));
}

Assignment random_assign(std::size_t length, std::span<const double> ratios, std::uint64_t seed) {
  validate_ratios(ratios);
  const auto counts = cascade_counts(ratios, length);
  std::vector<int> expert_of;
  expert_of.reserve(length);
  for (std::size_t e = 0; e < counts.size(); ++e)
    expert_of.insert(expert_of.end(), counts[e], static_cast<int>(e));
  std::mt19937_64 rng(seed);
  std::shuffle(expert_of.begin(), expert_of.end(), rng);
  return Assignment::from_experts(std::move(expert_of), ratios.size());
}

template struct RouterParams<float>;
template struct RouterParams<double>;
template RouterScores<float> route_scores(const Tensor<float>&, const RouterParams<float>&);
template RouterScores<double> route_scores(const Tensor<double>&, const RouterParams<double>&);
template Assignment prefill_assign(std::span<const float>, std::size_t, std::span<const double>);
template Assignment prefill_assign(std::span<const double>, std::size_t, std::span<const double>);
template int decode_assign(std::span<const float>);
template int decode_assign(std::span<const double>);
template Tensor<float> consistency_loss(const Tensor<float>&, const Assignment&);
template Tensor<double> consistency_loss(const Tensor<double>&, const Assignment&);

}  // namespace mixsga
