#include "sb/losses.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace sb::losses {

namespace {

using model::TapedActivations;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

ad::Var accumulate(ad::Tape& t, std::optional<ad::Var> acc, ad::Var term) {
  return acc ? ad::add(t, *acc, term) : term;
}

struct RowSoftmax {
  Eigen::RowVectorXd p, logp;
};

RowSoftmax softmax_prefix(const Mat& m, Eigen::Index row) {
  const Eigen::Index n = row + 1;
  Eigen::RowVectorXd x = m.row(row).head(n);
  const double mx = x.maxCoeff();
  const double lse = mx + std::log((x.array() - mx).exp().sum());
  RowSoftmax out;
  out.logp = x.array() - lse;
  out.p = out.logp.array().exp();
  return out;
}

// KL rows between softmax(A) and softmax(target) restricted to the causal triangle.
// Returns the scalar and fills dKL/dA (direct path) and dKL/dtarget.
double kl_rows(const Mat& a, const Mat& target, Mat* grad_a, Mat* grad_target) {
  const Eigen::Index n = a.rows();
  double total = 0.0;
  if (grad_a) *grad_a = Mat::Zero(n, n);
  if (grad_target) *grad_target = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowSoftmax p = softmax_prefix(a, i);
    const RowSoftmax q = softmax_prefix(target, i);
    const Eigen::RowVectorXd diff = p.logp - q.logp;
    const double kl = (p.p.array() * diff.array()).sum();
    total += kl;
    if (grad_a) grad_a->row(i).head(i + 1) = p.p.array() * (diff.array() - kl);
    if (grad_target) grad_target->row(i).head(i + 1) = q.p - p.p;
  }
  return total;
}

void check_square(const Mat& m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("attention logits must be square");
}

}  // namespace

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::neg_lm: return "neg_lm";
    case LossKind::encoder_cos: return "encoder_cos";
    case LossKind::vision_att: return "vision_att";
    case LossKind::audio_att: return "audio_att";
    case LossKind::rand_att: return "rand_att";
    case LossKind::hidden_cos: return "hidden_cos";
    case LossKind::combined: return "combined";
  }
  return "unknown";
}

LossKind parse_loss_kind(const std::string& name) {
  for (LossKind k : kAllKinds) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown loss kind '" + name + "'");
}

LayerSubset LayerSubset::all() { return band(1, model::kLayers); }

LayerSubset LayerSubset::band(std::size_t first, std::size_t last) {
  std::vector<std::size_t> v;
  for (std::size_t l = first; l <= last; ++l) v.push_back(l);
  return of(std::move(v));
}

LayerSubset LayerSubset::of(std::vector<std::size_t> layers) {
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  if (layers.empty()) throw ValidationError("layer subset is empty");
  if (layers.front() < 1 || layers.back() > model::kLayers) {
    throw ValidationError("layer index outside 1.." + std::to_string(model::kLayers));
  }
  return LayerSubset{std::move(layers)};
}

std::string LayerSubset::label() const {
  if (is_all()) return "all";
  bool contiguous = true;
  for (std::size_t i = 1; i < layers.size(); ++i) contiguous = contiguous && layers[i] == layers[i - 1] + 1;
  if (contiguous && layers.size() > 1) return std::to_string(layers.front()) + "-" + std::to_string(layers.back());
  std::string out;
  for (std::size_t l : layers) out += (out.empty() ? "" : ",") + std::to_string(l);
  return out;
}

Requirements requirements(LossKind kind) {
  switch (kind) {
    case LossKind::encoder_cos: return {true, false};
    case LossKind::hidden_cos:
    case LossKind::combined: return {true, true};
    default: return {};
  }
}

Mat RandTarget::uniform(std::size_t layer, std::size_t head, Eigen::Index n) const {
  std::uint64_t key = splitmix(seed);
  key = splitmix(key ^ step);
  key = splitmix(key ^ (static_cast<std::uint64_t>(layer) << 32 | head));
  std::mt19937_64 rng(key);
  Mat u(n, n);
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return u;
}

ad::Var neg_lm(ad::Tape& t, const TapedActivations& adv, const std::vector<int>& answer) {
  const Mat& logits = t.value(adv.output_logits);
  if (answer.empty() || static_cast<Eigen::Index>(answer.size()) != logits.rows()) {
    throw std::invalid_argument("answer length does not match output logits");
  }
  Mat onehot = Mat::Zero(logits.rows(), logits.cols());
  for (std::size_t j = 0; j < answer.size(); ++j) onehot(static_cast<Eigen::Index>(j), answer[j]) = 1.0;
  return ad::sum(t, ad::mul(t, ad::log_softmax(t, adv.output_logits), t.constant(std::move(onehot))));
}

ad::Var encoder_cos(ad::Tape& t, ad::Var clean_embeddings, ad::Var adv_embeddings) {
  return ad::mean_row_cosine(t, adv_embeddings, clean_embeddings, "degenerate embedding");
}

ad::Var column_attention_sum(ad::Tape& t, const TapedActivations& adv, const LayerSubset& subset,
                             model::Range columns) {
  std::optional<ad::Var> acc;
  for (std::size_t layer : subset.layers) {
    for (std::size_t h = 0; h < model::kHeads; ++h) {
      ad::Var a = adv.attention_logits.at(layer - 1)[h];
      const Mat& m = t.value(a);
      check_square(m);
      Mat sel = Mat::Zero(m.rows(), m.cols());
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (std::size_t j = columns.begin; j < columns.end() && static_cast<Eigen::Index>(j) <= i; ++j) {
          sel(i, static_cast<Eigen::Index>(j)) = 1.0;
        }
      }
      const double value = (sel.array() > 0).select(m.array(), 0.0).sum();
      Mat out(1, 1);
      out(0, 0) = value;
      acc = accumulate(t, acc, t.record(std::move(out), {a}, [a, sel](ad::Tape& tp, const Mat& g) {
        tp.grad_buffer(a) += g(0, 0) * sel;
      }));
    }
  }
  return *acc;
}

ad::Var vision_att(ad::Tape& t, const TapedActivations& adv, const LayerSubset& subset) {
  return column_attention_sum(t, adv, subset, adv.layout.video);
}

ad::Var audio_att(ad::Tape& t, const TapedActivations& adv, const LayerSubset& subset) {
  return ad::scale(t, column_attention_sum(t, adv, subset, adv.layout.audio), -1.0);
}

ad::Var randomized_kl(ad::Tape& t, ad::Var logits, const Mat& uniform) {
  const Mat& a = t.value(logits);
  check_square(a);
  const Eigen::Index n = a.rows();
  Eigen::Index max_i = 0, max_j = 0, min_i = 0, min_j = 0;
  double hi = a(0, 0), lo = a(0, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      if (a(i, j) > hi) hi = a(i, j), max_i = i, max_j = j;
      if (a(i, j) < lo) lo = a(i, j), min_i = i, min_j = j;
    }
  }
  Mat target = Mat::Constant(n, n, kMasked);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) target(i, j) = (hi - lo) * uniform(i, j) + lo;
  }
  Mat grad_a, grad_target;
  Mat out(1, 1);
  out(0, 0) = kl_rows(a, target, &grad_a, &grad_target);
  return t.record(std::move(out), {logits},
                  [logits, grad_a = std::move(grad_a), grad_target = std::move(grad_target), uniform, n, max_i,
                   max_j, min_i, min_j](ad::Tape& tp, const Mat& g) {
                    double d_hi = 0.0, d_lo = 0.0;
                    for (Eigen::Index i = 0; i < n; ++i) {
                      for (Eigen::Index j = 0; j <= i; ++j) {
                        d_hi += grad_target(i, j) * uniform(i, j);
                        d_lo += grad_target(i, j) * (1.0 - uniform(i, j));
                      }
                    }
                    Mat& ga = tp.grad_buffer(logits);
                    ga += g(0, 0) * grad_a;
                    ga(max_i, max_j) += g(0, 0) * d_hi;
                    ga(min_i, min_j) += g(0, 0) * d_lo;
                  });
}

ad::Var fixed_target_kl(ad::Tape& t, ad::Var logits, const Mat& target) {
  const Mat& a = t.value(logits);
  check_square(a);
  if (target.rows() != a.rows() || target.cols() != a.cols()) throw std::invalid_argument("target shape mismatch");
  Mat grad_a;
  Mat out(1, 1);
  out(0, 0) = kl_rows(a, target, &grad_a, nullptr);
  return t.record(std::move(out), {logits}, [logits, grad_a = std::move(grad_a)](ad::Tape& tp, const Mat& g) {
    tp.grad_buffer(logits) += g(0, 0) * grad_a;
  });
}

ad::Var rand_att(ad::Tape& t, const TapedActivations& adv, const LayerSubset& subset, const RandTarget& target) {
  std::optional<ad::Var> acc;
  for (std::size_t layer : subset.layers) {
    for (std::size_t h = 0; h < model::kHeads; ++h) {
      ad::Var a = adv.attention_logits.at(layer - 1)[h];
      const Mat& m = t.value(a);
      ad::Var term = target.override_target ? fixed_target_kl(t, a, target.override_target(layer, h, m))
                                            : randomized_kl(t, a, target.uniform(layer, h, m.rows()));
      acc = accumulate(t, acc, term);
    }
  }
  return *acc;
}

ad::Var hidden_cos(ad::Tape& t, const TapedActivations& clean, const TapedActivations& adv,
                   const LayerSubset& subset) {
  if (!(clean.layout == adv.layout)) throw std::invalid_argument("clean and adversarial layouts differ");
  std::optional<ad::Var> acc;
  for (std::size_t layer : subset.layers) {
    acc = accumulate(t, acc,
                     ad::mean_row_cosine(t, adv.hidden_states.at(layer - 1), clean.hidden_states.at(layer - 1),
                                         "degenerate hidden state"));
  }
  return ad::scale(t, *acc, 1.0 / static_cast<double>(subset.layers.size()));
}

ad::Var combined(ad::Tape& t, const TapedActivations& clean, const TapedActivations& adv,
                 const std::vector<int>& answer, const RandTarget& target) {
  const LayerSubset all = LayerSubset::all();
  ad::Var s = neg_lm(t, adv, answer);
  s = ad::add(t, s, encoder_cos(t, clean.audio_embeddings, adv.audio_embeddings));
  s = ad::add(t, s, vision_att(t, adv, all));
  s = ad::add(t, s, audio_att(t, adv, all));
  s = ad::add(t, s, rand_att(t, adv, all, target));
  return ad::add(t, s, hidden_cos(t, clean, adv, all));
}

ad::Var build(ad::Tape& t, const LossSelector& sel, const TapedActivations* clean, const TapedActivations& adv,
              const std::vector<int>& answer, std::uint64_t step) {
  if (requirements(sel.kind).any_clean() && clean == nullptr) {
    throw std::invalid_argument(to_string(sel.kind) + " needs clean activations");
  }
  const RandTarget target{sel.rand_seed, step, {}};
  switch (sel.kind) {
    case LossKind::neg_lm: return neg_lm(t, adv, answer);
    case LossKind::encoder_cos: return encoder_cos(t, clean->audio_embeddings, adv.audio_embeddings);
    case LossKind::vision_att: return vision_att(t, adv, sel.layer_subset);
    case LossKind::audio_att: return audio_att(t, adv, sel.layer_subset);
    case LossKind::rand_att: return rand_att(t, adv, sel.layer_subset, target);
    case LossKind::hidden_cos: return hidden_cos(t, *clean, adv, sel.layer_subset);
    case LossKind::combined: return combined(t, *clean, adv, answer, target);
  }
  throw std::logic_error("unreachable loss kind");
}

model::LossBuilder make_builder(const LossSelector& sel, const model::ModelActivations* clean,
                                const std::vector<int>& answer, std::uint64_t step) {
  return [sel, clean, answer, step](ad::Tape& t, const TapedActivations& adv) {
    std::optional<TapedActivations> c;
    if (clean != nullptr) {
      if (requirements(sel.kind).clean_activations) {
        c = clean->load(t);
      } else if (requirements(sel.kind).clean_embeddings) {
        c.emplace();
        c->audio_embeddings = t.constant(clean->audio_embeddings);
        c->layout = clean->layout;
      }
    }
    return build(t, sel, c ? &*c : nullptr, adv, answer, step);
  };
}

double evaluate(const LossSelector& sel, const model::ModelActivations* clean, const model::ModelActivations& adv,
                const std::vector<int>& answer, std::uint64_t step) {
  ad::Tape t;
  const TapedActivations a = adv.load(t);
  return t.scalar(make_builder(sel, clean, answer, step)(t, a));
}

}  // namespace sb::losses
