#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "oracles.hpp"
#include "support.hpp"

using namespace sb;
using namespace sb::losses;
using sbtest::causal;
using sbtest::kl_oracle;

namespace {

struct Fixture {
  model::TrimodalExample ex;
  model::ModelParams params = model::ModelParams::initialize(12);
  model::ModelActivations clean, adv;
  audio::Perturbation delta;
  Fixture() {
    ex = sbtest::small_examples(1)[0];
    std::mt19937_64 rng(6);
    delta = audio::Perturbation(sbtest::uniform_vector(rng, 4000, -0.5, 0.5), 0.5);
    clean = model::forward(ex, nullptr, params);
    adv = model::forward(ex, &delta, params);
  }
  double value(LossKind k, const LayerSubset& s = LayerSubset::all(), std::uint64_t step = 0) const {
    return evaluate({k, s, 7}, &clean, adv, ex.answer_tokens, step);
  }
  std::vector<double> grad(const model::LossBuilder& b) const {
    return model::grad_wrt_perturbation(ex, delta, params, b).grad_wrt_delta;
  }
};

}  // namespace

TEST_CASE("randomized KL matches a two-loop oracle on 4x4 logits") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat a = causal(sbtest::uniform_matrix(rng, 4, 4, -3, 3));
    const Mat u = sbtest::uniform_matrix(rng, 4, 4, 0, 1);
    ad::Tape t;
    const double got = t.scalar(randomized_kl(t, t.constant(a), u));
    CHECK(std::abs(got - kl_oracle(a, u)) < 1e-12);
    CHECK(got >= 0.0);
  }
}

TEST_CASE("randomized KL gradient flows through the extreme entries") {
  std::mt19937_64 rng(32);
  const Mat a0 = causal(sbtest::uniform_matrix(rng, 5, 5, -2, 2));
  const Mat u = sbtest::uniform_matrix(rng, 5, 5, 0, 1);
  ad::Tape t;
  ad::Var a = t.leaf(a0);
  t.backward(randomized_kl(t, a, u));
  const Mat g = t.grad(a);
  for (Eigen::Index i = 0; i < 5; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double fd = sbtest::central_difference([&](double h) {
        Mat ap = a0;
        ap(i, j) += h;
        return kl_oracle(ap, u);
      }, 1e-6);
      CHECK(g(i, j) == doctest::Approx(fd).epsilon(1e-6).scale(1e-8));
    }
  }
}

TEST_CASE("fixed-target KL vanishes at the target") {
  std::mt19937_64 rng(33);
  const Mat a = causal(sbtest::uniform_matrix(rng, 6, 6, -1, 1));
  ad::Tape t;
  CHECK(std::abs(t.scalar(fixed_target_kl(t, t.constant(a), a))) < 1e-15);
  Mat shifted = a;
  shifted.array() += 2.5;  // softmax is shift invariant per row
  CHECK(std::abs(t.scalar(fixed_target_kl(t, t.constant(a), shifted))) < 1e-12);
}

TEST_CASE("uniform target stream is keyed by seed, step, layer and head") {
  RandTarget r{5, 2, {}};
  const Mat u = r.uniform(3, 1, 10);
  CHECK(u == r.uniform(3, 1, 10));
  CHECK(u.minCoeff() >= 0.0);
  CHECK(u.maxCoeff() < 1.0);
  CHECK(u != r.uniform(3, 0, 10));
  CHECK(u != r.uniform(4, 1, 10));
  CHECK(u != RandTarget{5, 3, {}}.uniform(3, 1, 10));
  CHECK(u != RandTarget{6, 2, {}}.uniform(3, 1, 10));
}

TEST_CASE("column sums match an explicit mask") {
  Fixture f;
  ad::Tape t;
  const auto acts = f.adv.load(t);
  const auto L = f.adv.layout;
  double video = 0.0, audio = 0.0;
  for (const auto& heads : f.adv.attention_logits) {
    for (const Mat& m : heads) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
          if (L.video.contains(static_cast<std::size_t>(j))) video += m(i, j);
          if (L.audio.contains(static_cast<std::size_t>(j))) audio += m(i, j);
        }
      }
    }
  }
  CHECK(t.scalar(vision_att(t, acts, LayerSubset::all())) == doctest::Approx(video).epsilon(1e-12));
  CHECK(t.scalar(audio_att(t, acts, LayerSubset::all())) == doctest::Approx(-audio).epsilon(1e-12));
}

TEST_CASE("bounded losses stay in range and are deterministic") {
  Fixture f;
  CHECK(f.value(LossKind::encoder_cos) >= -1.0);
  CHECK(f.value(LossKind::encoder_cos) <= 1.0);
  CHECK(f.value(LossKind::hidden_cos) >= -1.0);
  CHECK(f.value(LossKind::hidden_cos) <= 1.0);
  CHECK(f.value(LossKind::rand_att) >= 0.0);
  CHECK(f.value(LossKind::neg_lm) <= 0.0);
  for (LossKind k : kAllKinds) CHECK(f.value(k, LayerSubset::all(), 4) == f.value(k, LayerSubset::all(), 4));
  CHECK(f.value(LossKind::rand_att, LayerSubset::all(), 4) != f.value(LossKind::rand_att, LayerSubset::all(), 5));
  // Unperturbed input: cosines are exactly aligned.
  CHECK(evaluate({LossKind::encoder_cos, LayerSubset::all(), 0}, &f.clean, f.clean, f.ex.answer_tokens, 0) ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(evaluate({LossKind::hidden_cos, LayerSubset::all(), 0}, &f.clean, f.clean, f.ex.answer_tokens, 0) ==
        doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer-subset additivity") {
  Fixture f;
  std::mt19937_64 rng(40);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> a, b;
    for (std::size_t l = 1; l <= model::kLayers; ++l) (rng() & 1 ? a : b).push_back(l);
    if (a.empty() || b.empty()) continue;
    const auto A = LayerSubset::of(a), B = LayerSubset::of(b), all = LayerSubset::all();
    for (LossKind k : {LossKind::vision_att, LossKind::audio_att, LossKind::rand_att}) {
      CHECK(f.value(k, all) == doctest::Approx(f.value(k, A) + f.value(k, B)).epsilon(1e-12));
    }
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    CHECK(6.0 * f.value(LossKind::hidden_cos, all) ==
          doctest::Approx(na * f.value(LossKind::hidden_cos, A) + nb * f.value(LossKind::hidden_cos, B)).epsilon(1e-12));
  }
}

TEST_CASE("combined loss is the plain sum of its components, in value and gradient") {
  Fixture f;
  const std::uint64_t step = 9;
  double parts = 0.0;
  for (LossKind k : {LossKind::neg_lm, LossKind::encoder_cos, LossKind::vision_att, LossKind::audio_att,
                     LossKind::rand_att, LossKind::hidden_cos}) {
    parts += f.value(k, LayerSubset::all(), step);
  }
  CHECK(std::abs(f.value(LossKind::combined, LayerSubset::all(), step) - parts) < 1e-10);

  const auto whole = f.grad(make_builder({LossKind::combined, LayerSubset::all(), 7}, &f.clean, f.ex.answer_tokens, step));
  std::vector<double> sum(whole.size(), 0.0);
  for (LossKind k : {LossKind::neg_lm, LossKind::encoder_cos, LossKind::vision_att, LossKind::audio_att,
                     LossKind::rand_att, LossKind::hidden_cos}) {
    const auto g = f.grad(make_builder({k, LayerSubset::all(), 7}, &f.clean, f.ex.answer_tokens, step));
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < sum.size(); ++i) worst = std::max(worst, std::abs(whole[i] - sum[i]));
  CHECK(worst < 1e-8);
}

TEST_CASE("combined loss is zero on a constructed all-zero fixture") {
  // Four tokens of width 2: gold logit dominates, embeddings and hidden states are
  // orthogonal between passes, all attention logits are equal.
  model::ModelActivations clean, adv;
  clean.layout = adv.layout = {{0, 1}, {1, 1}, {2, 1}, {3, 1}};
  const Mat e1 = (Mat(4, 2) << 1, 0, 1, 0, 1, 0, 1, 0).finished();
  const Mat e2 = (Mat(4, 2) << 0, 1, 0, 1, 0, 1, 0, 1).finished();
  clean.audio_embeddings = (Mat(1, 2) << 1, 0).finished();
  adv.audio_embeddings = (Mat(1, 2) << 0, 1).finished();
  for (std::size_t l = 0; l < model::kLayers; ++l) {
    clean.hidden_states.push_back(e1);
    adv.hidden_states.push_back(e2);
    clean.attention_logits.push_back({causal(Mat::Zero(4, 4)), causal(Mat::Zero(4, 4))});
    adv.attention_logits.push_back(clean.attention_logits.back());
  }
  Mat logits = Mat::Zero(1, model::kVocab);
  logits(0, 40) = 1000.0;
  clean.output_logits = adv.output_logits = logits;
  CHECK(evaluate({LossKind::combined, LayerSubset::all(), 1}, &clean, adv, {40}, 0) == 0.0);
}

TEST_CASE("every loss gradient matches central differences") {
  Fixture f;
  std::mt19937_64 rng(50);
  for (LossKind k : kAllKinds) {
    sbtest::FdStats stats;
    sbtest::fd_check_loss(stats, {k, LayerSubset::all(), 7}, f.ex, f.params, f.delta, rng, 20);
    INFO(to_string(k));
    CHECK(stats.worst < 1e-4);
  }
}

TEST_CASE("names, subsets and requirements") {
  for (LossKind k : kAllKinds) CHECK(parse_loss_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_loss_kind("nope"), ValidationError);
  CHECK(LayerSubset::all().label() == "all");
  CHECK(LayerSubset::band(3, 4).label() == "3-4");
  CHECK(LayerSubset::of({5, 1, 3, 3}).label() == "1,3,5");
  CHECK_THROWS_AS(LayerSubset::of({0}), ValidationError);
  CHECK_THROWS_AS(LayerSubset::of({7}), ValidationError);
  CHECK(requirements(LossKind::encoder_cos).clean_embeddings);
  CHECK(!requirements(LossKind::encoder_cos).clean_activations);
  CHECK(requirements(LossKind::combined).clean_activations);
  CHECK(!requirements(LossKind::neg_lm).any_clean());
  Fixture f;
  ad::Tape t;
  const auto acts = f.adv.load(t);
  CHECK_THROWS(build(t, {LossKind::hidden_cos, LayerSubset::all(), 0}, nullptr, acts, f.ex.answer_tokens, 0));
}
