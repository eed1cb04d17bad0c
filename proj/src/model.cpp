#include "mixsga/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mixsga/checkpoint.hpp"

namespace mixsga {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(base) ^ a) ^ b);
}

template <typename T>
Tensor<T> normal_param(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> values(numel_of(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
Tensor<T> const_param(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value, true);
}

template <typename T>
int argmax(std::span<const T> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <typename T>
std::vector<T> row_of(const Tensor<T>& m, std::size_t row) {
  const std::size_t w = m.shape().back();
  return {m.data().begin() + static_cast<std::ptrdiff_t>(row * w),
          m.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * w)};
}

template <typename T>
Tensor<T> mlp(const Block<T>& b, const Tensor<T>& x) {
  auto h = layer_norm(x, b.ln2_gamma, b.ln2_beta);
  return add(matmul(gelu(add(matmul(h, b.w1), b.b1)), b.w2), b.b2);
}

// Windows of at most seq_len inputs with their shifted targets.
struct Window {
  std::size_t start = 0;
  std::size_t length = 0;
};

std::vector<Window> windows_of(std::size_t n_tokens, std::size_t seq_len) {
  std::vector<Window> out;
  for (std::size_t s = 0; s + 1 < n_tokens; s += seq_len)
    out.push_back({s, std::min(seq_len, n_tokens - 1 - s)});
  return out;
}

template <typename T>
double row_cross_entropy(std::span<const T> logits, int target) {
  const double mx = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  double z = 0.0;
  for (T v : logits) z += std::exp(static_cast<double>(v) - mx);
  return std::log(z) + mx - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

}  // namespace

template <typename T>
Tensor<T> total_loss(const Tensor<T>& lm_loss, const std::vector<Tensor<T>>& aux_losses,
                     double alpha, std::size_t n_layers) {
  if (aux_losses.size() != n_layers)
    throw std::invalid_argument("total_loss: " + std::to_string(aux_losses.size()) +
                                " aux losses for " + std::to_string(n_layers) + " layers");
  if (alpha == 0.0 || aux_losses.empty()) return lm_loss;
  auto aux_sum = aux_losses.front();
  for (std::size_t i = 1; i < aux_losses.size(); ++i) aux_sum = add(aux_sum, aux_losses[i]);
  return add(lm_loss, scale(aux_sum, static_cast<T>(alpha / static_cast<double>(n_layers))));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, std::span<const int> targets,
                     const std::vector<Tensor<T>>& aux_losses, double alpha, std::size_t n_layers) {
  return total_loss(cross_entropy(logits, targets), aux_losses, alpha, n_layers);
}

template <typename T>
Model<T>::Model(RunConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t d = cfg_.d_model, v = cfg_.vocab_size, e = cfg_.experts;
  const std::size_t hidden = d * cfg_.mlp_ratio;
  const double std_w = 0.02;
  const double std_out = std_w / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));

  tok_emb_ = normal_param<T>({v, d}, std_w, rng);
  pos_emb_ = normal_param<T>({cfg_.seq_len, d}, std_w, rng);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    Block<T> b;
    b.ln1_gamma = const_param<T>({d}, T(1));
    b.ln1_beta = const_param<T>({d}, T(0));
    // He initialization for the newly added routing weights, zero bias.
    b.router.phi = normal_param<T>({d, e}, std::sqrt(2.0 / static_cast<double>(d)), rng);
    b.router.beta = const_param<T>({e}, T(0));
    b.router.ratios = cfg_.ratios;
    b.bank.heads = cfg_.heads;
    b.bank.experts = e;
    b.bank.wq = normal_param<T>({d, d}, std_w, rng);
    b.bank.bq = const_param<T>({d}, T(0));
    b.bank.wk = normal_param<T>({d, d}, std_w, rng);
    b.bank.bk = const_param<T>({d}, T(0));
    b.bank.wv = normal_param<T>({d, d}, std_w, rng);
    b.bank.bv = const_param<T>({d}, T(0));
    b.bank.wo = normal_param<T>({d, d}, std_out, rng);
    b.ln2_gamma = const_param<T>({d}, T(1));
    b.ln2_beta = const_param<T>({d}, T(0));
    b.w1 = normal_param<T>({d, hidden}, std_w, rng);
    b.b1 = const_param<T>({hidden}, T(0));
    b.w2 = normal_param<T>({hidden, d}, std_out, rng);
    b.b2 = const_param<T>({d}, T(0));
    b.router.validate();
    b.bank.validate();
    blocks_.push_back(std::move(b));
  }
  lnf_gamma_ = const_param<T>({d}, T(1));
  lnf_beta_ = const_param<T>({d}, T(0));
  head_w_ = normal_param<T>({d, v}, std_w, rng);
  head_b_ = const_param<T>({v}, T(0));
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("tok_emb", tok_emb_);
  out.emplace_back("pos_emb", pos_emb_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gamma", b.ln1_gamma);
    out.emplace_back(p + "ln1.beta", b.ln1_beta);
    out.emplace_back(p + "router.phi", b.router.phi);
    out.emplace_back(p + "router.beta", b.router.beta);
    out.emplace_back(p + "attn.wq", b.bank.wq);
    out.emplace_back(p + "attn.bq", b.bank.bq);
    out.emplace_back(p + "attn.wk", b.bank.wk);
    out.emplace_back(p + "attn.bk", b.bank.bk);
    out.emplace_back(p + "attn.wv", b.bank.wv);
    out.emplace_back(p + "attn.bv", b.bank.bv);
    out.emplace_back(p + "attn.wo", b.bank.wo);
    out.emplace_back(p + "ln2.gamma", b.ln2_gamma);
    out.emplace_back(p + "ln2.beta", b.ln2_beta);
    out.emplace_back(p + "mlp.w1", b.w1);
    out.emplace_back(p + "mlp.b1", b.b1);
    out.emplace_back(p + "mlp.w2", b.w2);
    out.emplace_back(p + "mlp.b2", b.b2);
  }
  out.emplace_back("lnf.gamma", lnf_gamma_);
  out.emplace_back("lnf.beta", lnf_beta_);
  out.emplace_back("head.w", head_w_);
  out.emplace_back("head.b", head_b_);
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

template <typename T>
Assignment Model<T>::route(const Block<T>& block, std::span<const T> scores, std::size_t length,
                           std::uint64_t seed) const {
  switch (cfg_.routing_mode) {
    case RoutingMode::learned: return prefill_assign(scores, cfg_.experts, block.router.ratios);
    case RoutingMode::random: return random_assign(length, block.router.ratios, seed);
    case RoutingMode::gqa_baseline: return Assignment::uniform(length, 1, cfg_.experts);
    case RoutingMode::mha_baseline: return Assignment::uniform(length, 0, cfg_.experts);
  }
  throw std::logic_error("unhandled routing mode");
}

template <typename T>
int Model<T>::route_one(const Block<T>& block, std::span<const T> score_row,
                        std::mt19937_64& rng) const {
  switch (cfg_.routing_mode) {
    case RoutingMode::learned: return decode_assign(score_row);
    case RoutingMode::random: {
      std::discrete_distribution<int> pick(block.router.ratios.begin(), block.router.ratios.end());
      return pick(rng);
    }
    case RoutingMode::gqa_baseline: return 1;
    case RoutingMode::mha_baseline: return 0;
  }
  throw std::logic_error("unhandled routing mode");
}

template <typename T>
ForwardResult<T> Model<T>::forward(const std::vector<std::vector<int>>& batch,
                                   const ForwardOptions& options) const {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  const std::size_t b = batch.size(), l = batch.front().size();
  const std::size_t d = cfg_.d_model, e = cfg_.experts;
  if (l == 0) throw std::invalid_argument("forward: empty sequence");
  if (l > cfg_.seq_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(l) +
                                " exceeds seq_len " + std::to_string(cfg_.seq_len));
  std::vector<int> ids, positions;
  ids.reserve(b * l);
  positions.reserve(b * l);
  for (const auto& seq : batch) {
    if (seq.size() != l) throw std::invalid_argument("forward: sequences differ in length");
    for (std::size_t t = 0; t < l; ++t) {
      if (seq[t] < 0 || static_cast<std::size_t>(seq[t]) >= cfg_.vocab_size)
        throw std::invalid_argument("forward: token id " + std::to_string(seq[t]) +
                                    " outside vocab of " + std::to_string(cfg_.vocab_size));
      ids.push_back(seq[t]);
      positions.push_back(static_cast<int>(t));
    }
  }

  ForwardResult<T> result;
  result.traces.resize(blocks_.size());
  std::size_t agree = 0;
  auto x = add(embedding(tok_emb_, std::span<const int>(ids)),
               embedding(pos_emb_, std::span<const int>(positions)));  // [B*L, D]

  for (std::size_t li = 0; li < blocks_.size(); ++li) {
    const Block<T>& blk = blocks_[li];
    auto h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    auto rs = route_scores(h, blk.router);
    auto scores = rs.scores.data();

    std::vector<int> expert_of;
    expert_of.reserve(b * l);
    for (std::size_t s = 0; s < b; ++s) {
      auto a = route(blk, scores.subspan(s * l * e, l * e), l,
                     mix_seed(options.routing_seed, li, s));
      expert_of.insert(expert_of.end(), a.expert_of.begin(), a.expert_of.end());
      result.traces[li].push_back(std::move(a));
    }
    for (std::size_t r = 0; r < b * l; ++r)
      agree += decode_assign(scores.subspan(r * e, e)) == expert_of[r];

    const auto& aux_input =
        cfg_.consistency_logits_mode == ConsistencyLogits::sigmoid_scores ? rs.scores : rs.logits;
    result.aux_losses.push_back(cross_entropy(aux_input, std::span<const int>(expert_of)));

    auto kv = moe_kv(h, std::span<const int>(expert_of), blk.bank);
    auto q = query_project(reshape(h, {b, l, d}), blk.bank);
    Tensor<T> probs;
    auto attn = mix_attention(q, kv, blk.bank, {true, cfg_.attention_scale_mode},
                              options.capture ? &probs : nullptr);
    if (options.capture) result.captures.push_back({std::move(kv), probs});
    x = add(x, reshape(attn, {b * l, d}));
    x = add(x, mlp(blk, x));
  }

  auto xf = layer_norm(x, lnf_gamma_, lnf_beta_);
  result.logits = add(matmul(xf, head_w_), head_b_);
  result.router_agreement =
      static_cast<double>(agree) / static_cast<double>(b * l * std::max<std::size_t>(1, blocks_.size()));
  return result;
}

template <typename T>
ForwardResult<T> Model<T>::forward(std::span<const int> tokens, const ForwardOptions& options) const {
  return forward(std::vector<std::vector<int>>{{tokens.begin(), tokens.end()}}, options);
}

template <typename T>
DecodeState<T> Model<T>::start_decode(std::uint64_t routing_seed) const {
  DecodeState<T> state;
  for (std::size_t l = 0; l < blocks_.size(); ++l)
    state.caches.emplace_back(cfg_.heads, cfg_.head_dim(), cfg_.experts);
  state.rng.seed(routing_seed);
  return state;
}

template <typename T>
DecodeStep<T> Model<T>::decode_step(DecodeState<T>& state, int token) const {
  NoGradGuard no_grad;
  const std::size_t pos = state.next_pos;
  if (pos >= cfg_.seq_len)
    throw std::invalid_argument("decode: position " + std::to_string(pos) +
                                " exceeds seq_len " + std::to_string(cfg_.seq_len));
  const std::size_t h = cfg_.heads, dh = cfg_.head_dim();
  const int ids[1] = {token};
  const int pos_ids[1] = {static_cast<int>(pos)};
  if (token < 0 || static_cast<std::size_t>(token) >= cfg_.vocab_size)
    throw std::invalid_argument("decode: token id " + std::to_string(token) + " outside vocab");
  auto x = add(embedding(tok_emb_, std::span<const int>(ids)),
               embedding(pos_emb_, std::span<const int>(pos_ids)));  // [1, D]

  DecodeStep<T> step;
  for (std::size_t li = 0; li < blocks_.size(); ++li) {
    const Block<T>& blk = blocks_[li];
    auto& cache = state.caches[li];
    auto hn = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    auto rs = route_scores(hn, blk.router);
    const int expert = route_one(blk, rs.scores.data(), state.rng);
    step.experts.push_back(expert);

    const std::size_t group = ExpertBank<T>::group_size(static_cast<std::size_t>(expert) + 1);
    auto k = group_mean(reshape(add(matmul(hn, blk.bank.wk), blk.bank.bk), {1, h, dh}), 1, group);
    auto v = group_mean(reshape(add(matmul(hn, blk.bank.wv), blk.bank.bv), {1, h, dh}), 1, group);
    cache.append(pos, expert, k.data(), v.data());

    auto ctx = cache.gather_expanded(pos);
    std::vector<T> weights;
    auto attn = decode_attention(query_project(hn, blk.bank), ctx.keys, ctx.values, blk.bank,
                                 cfg_.attention_scale_mode, &weights);
    const std::size_t n = ctx.positions.size();
    std::vector<T> mass(n, T(0));
    for (std::size_t head = 0; head < h; ++head)
      for (std::size_t t = 0; t < n; ++t) mass[t] += weights[head * n + t];
    cache.accumulate_attention(ctx.positions, mass);

    x = add(x, attn);
    x = add(x, mlp(blk, x));
  }
  auto logits = add(matmul(layer_norm(x, lnf_gamma_, lnf_beta_), head_w_), head_b_);
  step.logits.assign(logits.data().begin(), logits.data().end());
  ++state.next_pos;
  return step;
}

template <typename T>
DecodeStep<T> Model<T>::prefill(DecodeState<T>& state, std::span<const int> prompt) const {
  if (prompt.empty()) throw std::invalid_argument("prefill: empty prompt");
  if (state.next_pos != 0) throw std::logic_error("prefill: decode state already holds tokens");
  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.routing_seed = state.rng();
  opts.capture = true;
  auto fwd = forward(prompt, opts);
  const std::size_t l = prompt.size(), h = cfg_.heads;

  DecodeStep<T> step;
  for (std::size_t li = 0; li < blocks_.size(); ++li) {
    auto& cache = state.caches[li];
    const auto& cap = fwd.captures[li];
    for (const auto& pool : cap.kv.pools) {
      const std::size_t width = cache.heads_for(static_cast<int>(pool.expert - 1)) * cache.head_dim();
      for (std::size_t i = 0; i < pool.rows.size(); ++i)
        cache.append(pool.rows[i], static_cast<int>(pool.expert - 1),
                     pool.keys.data().subspan(i * width, width),
                     pool.values.data().subspan(i * width, width));
    }
    // Column sums of the attention weights over heads and query rows.
    std::vector<T> mass(l, T(0));
    auto p = cap.probs.data();
    for (std::size_t head = 0; head < h; ++head)
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j <= i; ++j) mass[j] += p[(head * l + i) * l + j];
    std::vector<std::size_t> positions(l);
    for (std::size_t t = 0; t < l; ++t) positions[t] = t;
    cache.accumulate_attention(positions, mass);
    step.experts.push_back(fwd.traces[li][0].expert_of.back());
  }
  step.logits = row_of(fwd.logits, l - 1);
  state.next_pos = l;
  return step;
}

template <typename T>
void Model<T>::apply_eviction(DecodeState<T>& state, const EvictionPolicy& policy) const {
  for (auto& cache : state.caches) cache.evict_h2o(policy.keep_ratio, policy.recent_window);
}

template <typename T>
GenerateResult<T> Model<T>::generate(std::span<const int> prompt, std::size_t n_tokens,
                                     std::optional<EvictionPolicy> eviction,
                                     std::uint64_t routing_seed) const {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
  if (prompt.size() + (n_tokens ? n_tokens - 1 : 0) > cfg_.seq_len)
    throw std::invalid_argument("generate: prompt of " + std::to_string(prompt.size()) + " plus " +
                                std::to_string(n_tokens) + " tokens exceeds seq_len " +
                                std::to_string(cfg_.seq_len));
  GenerateResult<T> out;
  out.tokens.assign(prompt.begin(), prompt.end());
  out.experts.resize(blocks_.size());
  if (n_tokens == 0) return out;

  auto state = start_decode(routing_seed);
  auto step = prefill(state, prompt);
  auto fwd_experts = [&](std::size_t li) {
    std::vector<int> e;
    for (std::size_t t = 0; t < prompt.size(); ++t) e.push_back(state.caches[li].expert_at(t));
    return e;
  };
  for (std::size_t li = 0; li < blocks_.size(); ++li) out.experts[li] = fwd_experts(li);
  auto record = [&] {
    if (eviction) apply_eviction(state, *eviction);
    out.kv_trace.push_back(state.caches.front().memory_report());
    out.live_tokens.push_back(state.caches.front().live_tokens());
  };
  record();

  for (std::size_t i = 0; i < n_tokens; ++i) {
    const int next = argmax(std::span<const T>(step.logits));
    out.step_logits.push_back(step.logits);
    out.tokens.push_back(next);
    if (i + 1 == n_tokens) break;
    step = decode_step(state, next);
    for (std::size_t li = 0; li < blocks_.size(); ++li) out.experts[li].push_back(step.experts[li]);
    record();
  }
  return out;
}

template <typename T>
SequenceDecode<T> Model<T>::decode_sequence(std::span<const int> tokens,
                                            std::optional<EvictionPolicy> eviction,
                                            std::uint64_t routing_seed) const {
  SequenceDecode<T> out;
  out.experts.resize(blocks_.size());
  auto state = start_decode(routing_seed);
  for (int token : tokens) {
    auto step = decode_step(state, token);
    for (std::size_t li = 0; li < blocks_.size(); ++li) out.experts[li].push_back(step.experts[li]);
    out.logits.push_back(std::move(step.logits));
    if (eviction) apply_eviction(state, *eviction);
    out.live_tokens.push_back(state.caches.front().live_tokens());
    out.kv_trace.push_back(state.caches.front().memory_report());
  }
  return out;
}

template <typename T>
std::filesystem::path Model<T>::config_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  return p.replace_extension(".config.json");
}

template <typename T>
void Model<T>::save(const std::filesystem::path& checkpoint) const {
  save_checkpoint<T>(checkpoint, named_parameters(),
                     {{"format", "mixsga-checkpoint"}, {"config", nlohmann::json(cfg_).dump()}});
  save_config(config_path(checkpoint), cfg_);
}

template <typename T>
Model<T> Model<T>::load(const std::filesystem::path& checkpoint) {
  if (!std::filesystem::exists(checkpoint))
    throw CheckpointError("checkpoint '" + checkpoint.string() + "' does not exist");
  const auto sidecar = config_path(checkpoint);
  if (!std::filesystem::exists(sidecar))
    throw CheckpointError("config sidecar '" + sidecar.string() + "' does not exist");
  Model model(load_config(sidecar));
  const auto ck = load_checkpoint(checkpoint);
  for (auto& [name, t] : model.named_parameters()) {
    const auto& stored = ck.get(name);
    if (stored.shape != t.shape())
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(stored.shape) +
                            ", model expects " + shape_str(t.shape()));
    auto values = stored.template values<T>();
    auto dst = Tensor<T>(t).mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
  return model;
}

template <typename T>
double perplexity(const Model<T>& model, std::span<const int> tokens, std::uint64_t routing_seed) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const auto windows = windows_of(tokens.size(), cfg.seq_len);
  if (windows.empty()) throw std::invalid_argument("perplexity: need at least two tokens");
  double nll = 0.0;
  std::size_t count = 0;
  std::size_t i = 0, batch_index = 0;
  while (i < windows.size()) {
    // Batch consecutive windows of equal length.
    std::vector<std::vector<int>> inputs;
    std::vector<int> targets;
    const std::size_t len = windows[i].length;
    while (i < windows.size() && windows[i].length == len && inputs.size() < cfg.batch_size) {
      const auto s = windows[i].start;
      inputs.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(s),
                          tokens.begin() + static_cast<std::ptrdiff_t>(s + len));
      targets.insert(targets.end(), tokens.begin() + static_cast<std::ptrdiff_t>(s + 1),
                     tokens.begin() + static_cast<std::ptrdiff_t>(s + len + 1));
      ++i;
    }
    ForwardOptions opts;
    opts.routing_seed = mix_seed(routing_seed, 0x7e57, batch_index++);
    auto fwd = model.forward(inputs, opts);
    auto ce = cross_entropy(fwd.logits, std::span<const int>(targets));
    nll += static_cast<double>(ce.item()) * static_cast<double>(targets.size());
    count += targets.size();
  }
  return std::exp(nll / static_cast<double>(count));
}

template <typename T>
double streaming_perplexity(const Model<T>& model, std::span<const int> tokens,
                            std::optional<EvictionPolicy> eviction, std::size_t max_windows,
                            std::uint64_t routing_seed) {
  auto windows = windows_of(tokens.size(), model.config().seq_len);
  if (windows.empty()) throw std::invalid_argument("streaming_perplexity: need at least two tokens");
  if (max_windows && windows.size() > max_windows) windows.resize(max_windows);
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto [s, len] = windows[w];
    auto dec = model.decode_sequence(tokens.subspan(s, len), eviction, mix_seed(routing_seed, 0xdec, w));
    for (std::size_t t = 0; t < len; ++t) {
      nll += row_cross_entropy(std::span<const T>(dec.logits[t]), tokens[s + t + 1]);
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

template <typename T>
AgreementReport prefill_decode_agreement(const Model<T>& model, std::span<const int> tokens,
                                         std::size_t max_windows) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  AgreementReport r;
  r.decode_frequency.assign(cfg.experts, 0.0);
  r.prefill_frequency.assign(cfg.experts, 0.0);
  std::size_t matches = 0, windows = 0;
  for (std::size_t s = 0; s + cfg.seq_len <= tokens.size(); s += cfg.seq_len) {
    if (max_windows && windows == max_windows) break;
    ++windows;
    auto window = tokens.subspan(s, cfg.seq_len);
    auto fwd = model.forward(window);
    auto dec = model.decode_sequence(window);
    for (std::size_t li = 0; li < cfg.n_layers; ++li)
      for (std::size_t t = 0; t < cfg.seq_len; ++t) {
        const int pre = fwd.traces[li][0].expert_of[t];
        const int post = dec.experts[li][t];
        matches += pre == post;
        r.prefill_frequency[static_cast<std::size_t>(pre)] += 1.0;
        r.decode_frequency[static_cast<std::size_t>(post)] += 1.0;
        ++r.tokens;
      }
  }
  if (r.tokens == 0) throw std::invalid_argument("agreement: corpus shorter than one window");
  r.agreement = static_cast<double>(matches) / static_cast<double>(r.tokens);
  for (auto& f : r.decode_frequency) f /= static_cast<double>(r.tokens);
  for (auto& f : r.prefill_frequency) f /= static_cast<double>(r.tokens);
  return r;
}

#define MIXSGA_INSTANTIATE(T)                                                                     \
  template class Model<T>;                                                                        \
  template Tensor<T> total_loss(const Tensor<T>&, std::span<const int>,                           \
                                const std::vector<Tensor<T>>&, double, std::size_t);              \
  template Tensor<T> total_loss(const Tensor<T>&, const std::vector<Tensor<T>>&, double,          \
                                std::size_t);                                                     \
  template double perplexity(const Model<T>&, std::span<const int>, std::uint64_t);               \
  template double streaming_perplexity(const Model<T>&, std::span<const int>,                     \
                                       std::optional<EvictionPolicy>, std::size_t, std::uint64_t); \
  template AgreementReport prefill_decode_agreement(const Model<T>&, std::span<const int>,        \
                                                    std::size_t);

MIXSGA_INSTANTIATE(float)
MIXSGA_INSTANTIATE(double)

#undef MIXSGA_INSTANTIATE

}  // namespace mixsga
