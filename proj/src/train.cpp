#include "mixsga/train.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

namespace mixsga {

bool is_valid_utf8(const std::string& bytes) {
  std::size_t i = 0;
  const std::size_t n = bytes.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(bytes[i]);
    std::size_t extra = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xe0) == 0xc0) {
      extra = 1;
      cp = c & 0x1f;
    } else if ((c & 0xf0) == 0xe0) {
      extra = 2;
      cp = c & 0x0f;
    } else if ((c & 0xf8) == 0xf0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= n) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(bytes[i + k]);
      if ((cc & 0xc0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3f);
    }
    // Overlong forms, surrogates, out-of-range code points.
    if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000) ||
        (cp >= 0xd800 && cp <= 0xdfff) || cp > 0x10ffff)
      return false;
    i += extra + 1;
  }
  return true;
}

Corpus Corpus::from_text(const std::string& text) {
  Corpus c;
  c.tokens.reserve(text.size());
  for (unsigned char ch : text) c.tokens.push_back(ch);
  return c;
}

Corpus Corpus::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("corpus: cannot open '" + path.string() + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (!is_valid_utf8(text)) throw std::runtime_error("corpus: '" + path.string() + "' is not valid UTF-8");
  return from_text(text);
}

BatchSampler::BatchSampler(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len,
                           std::uint64_t seed)
    : corpus_(corpus), batch_size_(batch_size), seq_len_(seq_len), rng_(seed) {
  if (corpus.size() < seq_len + 1)
    throw std::invalid_argument("corpus of " + std::to_string(corpus.size()) +
                                " tokens is smaller than one batch window of " +
                                std::to_string(seq_len + 1));
}

Batch BatchSampler::next() {
  std::uniform_int_distribution<std::size_t> start(0, corpus_.size() - seq_len_ - 1);
  Batch b;
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const auto s = static_cast<std::ptrdiff_t>(start(rng_));
    const auto& tok = corpus_.tokens;
    b.inputs.emplace_back(tok.begin() + s, tok.begin() + s + static_cast<std::ptrdiff_t>(seq_len_));
    b.targets.insert(b.targets.end(), tok.begin() + s + 1,
                     tok.begin() + s + 1 + static_cast<std::ptrdiff_t>(seq_len_));
  }
  return b;
}

template <typename T>
AdamW<T>::AdamW(std::vector<Group> params, double beta1, double beta2, double weight_decay, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
  for (const auto& g : params_) {
    m_.emplace_back(g.param.numel(), 0.0);
    v_.emplace_back(g.param.numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& g : params_) g.param.zero_grad();
}

template <typename T>
double AdamW<T>::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (auto& g : params_)
    for (T v : g.param.grad()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& g : params_)
      for (T& v : g.param.mutable_grad()) v *= factor;
  }
  return norm;
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& g = params_[i];
    auto values = g.param.mutable_data();
    auto grads = g.param.mutable_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = g.decay ? lr * weight_decay_ : 0.0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double gj = static_cast<double>(grads[j]);
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      double p = static_cast<double>(values[j]);
      p -= decay * p;
      p -= lr * update;
      values[j] = static_cast<T>(p);
    }
  }
}

std::size_t total_steps(const RunConfig& cfg, std::size_t corpus_tokens) {
  if (cfg.steps) return cfg.steps;
  const std::size_t per_epoch = std::max<std::size_t>(1, (corpus_tokens - 1) / (cfg.batch_size * cfg.seq_len));
  return per_epoch * std::max<std::size_t>(1, cfg.epochs);
}

double learning_rate_at(const RunConfig& cfg, std::size_t step, std::size_t total) {
  const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_ratio * static_cast<double>(total)));
  if (step < warmup) return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::size_t>(1, total - warmup));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return cfg.learning_rate * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

template <typename T>
std::vector<StepMetrics> train(Model<T>& model, const Corpus& corpus, const MetricsSink& sink) {
  const RunConfig& cfg = model.config();
  BatchSampler sampler(corpus, cfg.batch_size, cfg.seq_len, cfg.seed ^ 0x5eed5eedULL);

  // Router weights only learn through the consistency loss; without it they
  // stay frozen. Weight decay applies to weight matrices other than the router.
  std::vector<typename AdamW<T>::Group> groups;
  for (auto& [name, p] : model.named_parameters()) {
    const bool is_router = name.find(".router.") != std::string::npos;
    if (is_router && !cfg.aux_loss_enabled) continue;
    const bool decay = p.rank() == 2 && !is_router && name != "tok_emb" && name != "pos_emb";
    groups.push_back({p, decay});
  }
  AdamW<T> opt(std::move(groups), cfg.beta1, cfg.beta2, cfg.weight_decay);

  const std::size_t total = total_steps(cfg, corpus.size());
  const double alpha = cfg.aux_loss_enabled ? cfg.alpha : 0.0;
  std::vector<StepMetrics> history;
  history.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    auto batch = sampler.next();
    ForwardOptions opts;
    opts.routing_seed = cfg.seed * 1000003ULL + step;
    auto fwd = model.forward(batch.inputs, opts);
    auto lm = cross_entropy(fwd.logits, std::span<const int>(batch.targets));
    auto loss = total_loss(lm, fwd.aux_losses, alpha, cfg.n_layers);

    opt.zero_grad();
    loss.backward();
    const double norm = opt.clip_grad_norm(cfg.grad_clip);
    const double lr = learning_rate_at(cfg, step, total);
    opt.step(lr);

    StepMetrics m;
    m.step = step;
    m.lm_loss = static_cast<double>(lm.item());
    for (const auto& a : fwd.aux_losses) m.aux_loss += static_cast<double>(a.item());
    m.aux_loss /= static_cast<double>(fwd.aux_losses.size());
    m.prefill_decode_agreement = fwd.router_agreement;
    m.learning_rate = lr;
    m.grad_norm = norm;
    if (sink) sink(m);
    history.push_back(m);
  }
  return history;
}

template class AdamW<float>;
template class AdamW<double>;
template std::vector<StepMetrics> train(Model<float>&, const Corpus&, const MetricsSink&);
template std::vector<StepMetrics> train(Model<double>&, const Corpus&, const MetricsSink&);

}  // namespace mixsga
