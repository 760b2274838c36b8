#include "sb/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sb::model {

namespace {

Mat random_normal(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Mat zeros(std::size_t rows, std::size_t cols) {
  return Mat::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Mat ones(std::size_t rows, std::size_t cols) {
  return Mat::Ones(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Mat as_row(const std::vector<double>& v) {
  return Eigen::Map<const Mat>(v.data(), 1, static_cast<Eigen::Index>(v.size()));
}

// Standardize then mean-pool consecutive windows of kPoolFactor frames; the last
// window may be partial.
Mat pool_rows(const Mat& frames) {
  const Eigen::Index n = frames.rows();
  const Eigen::Index windows = (n + static_cast<Eigen::Index>(kPoolFactor) - 1) / static_cast<Eigen::Index>(kPoolFactor);
  Mat out(windows, frames.cols());
  for (Eigen::Index w = 0; w < windows; ++w) {
    const Eigen::Index begin = w * static_cast<Eigen::Index>(kPoolFactor);
    const Eigen::Index count = std::min<Eigen::Index>(static_cast<Eigen::Index>(kPoolFactor), n - begin);
    out.row(w) = (frames.middleRows(begin, count).colwise().mean().array() - kFeatureOffset) * kFeatureScale;
  }
  return out;
}

ad::Var linear(ad::Tape& t, ad::Var x, ad::Var w, ad::Var b) { return ad::add_row(t, ad::matmul(t, x, w), b); }

ad::Var encode(ad::Tape& t, ad::Var pooled, const ParamTensors<ad::Var>& p) {
  ad::Var h = ad::gelu(t, linear(t, pooled, p.enc_w1, p.enc_b1));
  ad::Var f = linear(t, h, p.enc_w2, p.enc_b2);
  return linear(t, f, p.audio_proj_w, p.audio_proj_b);
}

std::vector<std::size_t> to_indices(const std::vector<int>& tokens) {
  std::vector<std::size_t> out;
  out.reserve(tokens.size());
  for (int tok : tokens) out.push_back(static_cast<std::size_t>(tok));
  return out;
}

}  // namespace

bool operator==(const Range& a, const Range& b) { return a.begin == b.begin && a.count == b.count; }

ModelParams ModelParams::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double d = static_cast<double>(kModelDim);
  const double residual = 0.5;
  ModelParams p;
  p.enc_w1 = random_normal(rng, audio::kMelBins, kEncoderHidden, 1.0 / std::sqrt(double(audio::kMelBins)));
  p.enc_b1 = zeros(1, kEncoderHidden);
  p.enc_w2 = random_normal(rng, kEncoderHidden, kEncoderDim, 1.0 / std::sqrt(double(kEncoderHidden)));
  p.enc_b2 = zeros(1, kEncoderDim);
  p.audio_proj_w = random_normal(rng, kEncoderDim, kModelDim, 1.0 / std::sqrt(double(kEncoderDim)));
  p.audio_proj_b = zeros(1, kModelDim);
  p.video_proj_w = random_normal(rng, kVideoDim, kModelDim, 1.0 / std::sqrt(double(kVideoDim)));
  p.video_proj_b = zeros(1, kModelDim);
  p.token_embedding = random_normal(rng, kVocab, kModelDim, 1.0);
  p.position_embedding = random_normal(rng, kMaxPositions, kModelDim, 0.1);
  p.layers.resize(kLayers);
  for (auto& layer : p.layers) {
    layer.ln1_gain = ones(1, kModelDim);
    layer.ln1_bias = zeros(1, kModelDim);
    for (std::size_t h = 0; h < kHeads; ++h) {
      layer.wq[h] = random_normal(rng, kModelDim, kHeadDim, 1.0 / std::sqrt(d));
      layer.wk[h] = random_normal(rng, kModelDim, kHeadDim, 1.0 / std::sqrt(d));
      layer.wv[h] = random_normal(rng, kModelDim, kHeadDim, 1.0 / std::sqrt(d));
      layer.wo[h] = random_normal(rng, kHeadDim, kModelDim, residual / std::sqrt(double(kModelDim)));
    }
    layer.ln2_gain = ones(1, kModelDim);
    layer.ln2_bias = zeros(1, kModelDim);
    layer.ff_w1 = random_normal(rng, kModelDim, kFfnDim, 1.0 / std::sqrt(d));
    layer.ff_b1 = zeros(1, kFfnDim);
    layer.ff_w2 = random_normal(rng, kFfnDim, kModelDim, residual / std::sqrt(double(kFfnDim)));
    layer.ff_b2 = zeros(1, kModelDim);
  }
  p.final_gain = ones(1, kModelDim);
  p.final_bias = zeros(1, kModelDim);
  p.output_head = random_normal(rng, kModelDim, kVocab, 1.0 / std::sqrt(d));
  return p;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  visit([&](const std::string&, const Mat& m) { ok = ok && m.allFinite(); });
  return ok;
}

ModelActivations ModelActivations::snapshot(const ad::Tape& tape, const TapedActivations& acts) {
  ModelActivations out;
  out.audio_embeddings = tape.value(acts.audio_embeddings);
  out.attention_logits.resize(acts.attention_logits.size());
  for (std::size_t l = 0; l < acts.attention_logits.size(); ++l) {
    for (std::size_t h = 0; h < kHeads; ++h) out.attention_logits[l][h] = tape.value(acts.attention_logits[l][h]);
  }
  for (ad::Var v : acts.hidden_states) out.hidden_states.push_back(tape.value(v));
  out.output_logits = tape.value(acts.output_logits);
  out.layout = acts.layout;
  return out;
}

TapedActivations ModelActivations::load(ad::Tape& tape) const {
  TapedActivations out;
  out.audio_embeddings = tape.constant(audio_embeddings);
  out.attention_logits.resize(attention_logits.size());
  for (std::size_t l = 0; l < attention_logits.size(); ++l) {
    for (std::size_t h = 0; h < kHeads; ++h) out.attention_logits[l][h] = tape.constant(attention_logits[l][h]);
  }
  for (const Mat& m : hidden_states) out.hidden_states.push_back(tape.constant(m));
  out.output_logits = tape.constant(output_logits);
  out.layout = layout;
  return out;
}

Mat pool_features(const audio::FilterbankFeatures& features) { return pool_rows(features.frames); }

ad::Var pool_features(ad::Tape& t, ad::Var features) {
  Mat out = pool_rows(t.value(features));
  return t.record(std::move(out), {features}, [features](ad::Tape& tp, const Mat& g) {
    Mat& gf = tp.grad_buffer(features);
    const Eigen::Index n = gf.rows();
    for (Eigen::Index w = 0; w < g.rows(); ++w) {
      const Eigen::Index begin = w * static_cast<Eigen::Index>(kPoolFactor);
      const Eigen::Index count = std::min<Eigen::Index>(static_cast<Eigen::Index>(kPoolFactor), n - begin);
      const double s = kFeatureScale / static_cast<double>(count);
      for (Eigen::Index r = begin; r < begin + count; ++r) gf.row(r) += s * g.row(w);
    }
  });
}

Mat encode_audio(const audio::FilterbankFeatures& features, const ModelParams& params) {
  ad::Tape t;
  const auto p = bind(t, params, false);
  return t.value(encode(t, t.constant(pool_features(features)), p));
}

ParamTensors<ad::Var> bind(ad::Tape& t, const ModelParams& params, bool requires_grad) {
  ParamTensors<ad::Var> out;
  out.layers.resize(params.layers.size());
  std::vector<const Mat*> mats;
  params.visit([&](const std::string&, const Mat& m) { mats.push_back(&m); });
  std::size_t i = 0;
  out.visit([&](const std::string&, ad::Var& v) { v = t.external(*mats[i++], requires_grad); });
  return out;
}

void validate_example(const TrimodalExample& ex) {
  auto check = [](const std::vector<int>& tokens) {
    for (int tok : tokens) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= kVocab) throw ValidationError("vocabulary overflow");
    }
  };
  check(ex.question_tokens);
  check(ex.answer_tokens);
  if (ex.answer_tokens.empty()) throw ValidationError("example has no answer tokens");
  if (ex.video_features.cols() != static_cast<Eigen::Index>(kVideoDim)) {
    throw ValidationError("video features must have " + std::to_string(kVideoDim) + " columns");
  }
}

TapedActivations forward_pooled(ad::Tape& t, const TrimodalExample& ex, ad::Var pooled_audio,
                                const ParamTensors<ad::Var>& p) {
  validate_example(ex);
  TapedActivations acts;
  acts.audio_embeddings = encode(t, pooled_audio, p);

  const std::size_t n_video = static_cast<std::size_t>(ex.video_features.rows());
  const std::size_t n_audio = static_cast<std::size_t>(t.value(acts.audio_embeddings).rows());
  const std::size_t n_question = ex.question_tokens.size();
  const std::size_t n_answer = ex.answer_tokens.size();
  TokenLayout& layout = acts.layout;
  layout.video = {0, n_video};
  layout.audio = {layout.video.end(), n_audio};
  layout.question = {layout.audio.end(), n_question};
  layout.answer = {layout.question.end(), n_answer};
  const std::size_t total = layout.total();
  if (total > kMaxPositions) throw ValidationError("sequence longer than the position table");
  if (layout.answer.begin == 0) throw ValidationError("answer needs at least one preceding token");

  ad::Var video = linear(t, t.constant(ex.video_features), p.video_proj_w, p.video_proj_b);
  ad::Var question = ad::gather_rows(t, p.token_embedding, to_indices(ex.question_tokens));
  ad::Var answer = ad::gather_rows(t, p.token_embedding, to_indices(ex.answer_tokens));
  std::vector<ad::Var> parts;
  if (n_video > 0) parts.push_back(video);
  parts.push_back(acts.audio_embeddings);
  if (n_question > 0) parts.push_back(question);
  parts.push_back(answer);
  std::vector<std::size_t> positions(total);
  for (std::size_t i = 0; i < total; ++i) positions[i] = i;
  ad::Var x = ad::add(t, ad::concat_rows(t, parts), ad::gather_rows(t, p.position_embedding, positions));

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(kHeadDim));
  acts.attention_logits.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    ad::Var a = ad::layer_norm(t, x, layer.ln1_gain, layer.ln1_bias);
    ad::Var attn_out{};
    for (std::size_t h = 0; h < kHeads; ++h) {
      ad::Var q = ad::matmul(t, a, layer.wq[h]);
      ad::Var k = ad::matmul(t, a, layer.wk[h]);
      ad::Var v = ad::matmul(t, a, layer.wv[h]);
      ad::Var logits = ad::causal_mask(t, ad::scale(t, ad::matmul_nt(t, q, k), inv_sqrt_dh));
      acts.attention_logits[l][h] = logits;
      ad::Var head = ad::matmul(t, ad::matmul(t, ad::softmax_causal(t, logits), v), layer.wo[h]);
      attn_out = h == 0 ? head : ad::add(t, attn_out, head);
    }
    x = ad::add(t, x, attn_out);
    ad::Var b = ad::layer_norm(t, x, layer.ln2_gain, layer.ln2_bias);
    ad::Var ff = linear(t, ad::gelu(t, linear(t, b, layer.ff_w1, layer.ff_b1)), layer.ff_w2, layer.ff_b2);
    x = ad::add(t, x, ff);
    acts.hidden_states.push_back(x);
  }

  ad::Var final = ad::layer_norm(t, x, p.final_gain, p.final_bias);
  // Row for answer token j is read at the position just before it.
  ad::Var predictors = ad::slice_rows(t, final, layout.answer.begin - 1, n_answer);
  acts.output_logits = ad::matmul(t, predictors, p.output_head);
  return acts;
}

TapedActivations forward_taped(ad::Tape& t, const TrimodalExample& ex, ad::Var delta,
                               const ParamTensors<ad::Var>& p) {
  ad::Var feats = audio::taped::preprocess(t, ex.audio, delta);
  return forward_pooled(t, ex, pool_features(t, feats), p);
}

ModelActivations forward(const TrimodalExample& ex, const audio::Perturbation* delta, const ModelParams& params) {
  ad::Tape t;
  const auto p = bind(t, params, false);
  TapedActivations acts;
  if (delta != nullptr) {
    acts = forward_taped(t, ex, t.constant(as_row(delta->values)), p);
  } else {
    ad::Var feats = t.constant(audio::preprocess(ex.audio, nullptr).frames);
    acts = forward_pooled(t, ex, pool_features(t, feats), p);
  }
  return ModelActivations::snapshot(t, acts);
}

GradientResult grad_wrt_perturbation(const TrimodalExample& ex, const audio::Perturbation& delta,
                                     const ModelParams& params, const LossBuilder& loss,
                                     const std::string& context) {
  ad::Tape t;
  const auto p = bind(t, params, false);
  ad::Var d = t.leaf(as_row(delta.values));
  const TapedActivations acts = forward_taped(t, ex, d, p);
  ad::Var l = loss(t, acts);
  GradientResult out;
  out.loss_value = t.scalar(l);
  if (!std::isfinite(out.loss_value)) {
    throw DivergenceError(context.empty() ? "example " + ex.id : context, out.loss_value);
  }
  out.grad_wrt_delta.assign(delta.size(), 0.0);
  if (t.requires_grad(l)) {
    t.backward(l);
    const Mat g = t.grad(d);
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double v = g(0, static_cast<Eigen::Index>(i));
      out.grad_wrt_delta[i] = std::isnan(v) ? 0.0 : v;
    }
  }
  return out;
}

Prediction decode_greedy(const Mat& output_logits) {
  Prediction pred;
  for (Eigen::Index j = 0; j < output_logits.rows(); ++j) {
    const auto row = output_logits.row(j);
    Eigen::Index best = 0;
    row.maxCoeff(&best);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    pred.tokens.push_back(static_cast<int>(best));
    pred.log_probs.push_back(row(best) - lse);
  }
  double mean_lp = 0.0;
  for (double lp : pred.log_probs) mean_lp += lp;
  mean_lp /= static_cast<double>(std::max<std::size_t>(pred.log_probs.size(), 1));
  pred.confidence = std::exp(mean_lp);
  return pred;
}

Prediction predict_answer(const TrimodalExample& ex, const audio::Perturbation* delta, const ModelParams& params) {
  return decode_greedy(forward(ex, delta, params).output_logits);
}

PreparedExample prepare(const TrimodalExample& ex) {
  PreparedExample out;
  out.pooled_audio = pool_features(audio::preprocess(ex.audio, nullptr));
  out.meta.id = ex.id;
  out.meta.video_features = ex.video_features;
  out.meta.question_tokens = ex.question_tokens;
  out.meta.answer_tokens = ex.answer_tokens;
  return out;
}

}  // namespace sb::model
