#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sb/model.hpp"

namespace sb::model {

namespace {

std::vector<Mat*> tensor_list(ModelParams& p) {
  std::vector<Mat*> out;
  p.visit([&](const std::string&, Mat& m) { out.push_back(&m); });
  return out;
}

std::vector<ad::Var> var_list(const ParamTensors<ad::Var>& p) {
  std::vector<ad::Var> out;
  p.visit([&](const std::string&, const ad::Var& v) { out.push_back(v); });
  return out;
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  z.visit([](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

ad::Var answer_cross_entropy(ad::Tape& t, const TapedActivations& acts, const std::vector<int>& answer) {
  const Mat& logits = t.value(acts.output_logits);
  Mat onehot = Mat::Zero(logits.rows(), logits.cols());
  for (std::size_t j = 0; j < answer.size(); ++j) onehot(static_cast<Eigen::Index>(j), answer[j]) = 1.0;
  ad::Var picked = ad::mul(t, ad::log_softmax(t, acts.output_logits), t.constant(std::move(onehot)));
  return ad::scale(t, ad::sum(t, picked), -1.0);
}

bool predicts_correctly(const PreparedExample& ex, const ModelParams& params) {
  ad::Tape t;
  const auto p = bind(t, params, false);
  const auto acts = forward_pooled(t, ex.meta, t.constant(ex.pooled_audio), p);
  return decode_greedy(t.value(acts.output_logits)).tokens == ex.meta.answer_tokens;
}

}  // namespace

double answer_accuracy(const std::vector<PreparedExample>& data, const ModelParams& params) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : data) correct += predicts_correctly(ex, params) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainingResult train_toy_model(const std::vector<PreparedExample>& train, const std::vector<PreparedExample>& val,
                               const TrainingConfig& config, std::uint64_t seed) {
  if (train.empty()) throw ValidationError("training set is empty");
  if (config.batch_size == 0 || config.max_epochs == 0) throw ValidationError("bad training config");

  TrainingResult result;
  result.params = ModelParams::initialize(seed);
  ModelParams& params = result.params;
  ModelParams velocity = zeros_like(params);
  ModelParams grad_sum = zeros_like(params);
  const auto param_ptrs = tensor_list(params);
  const auto vel_ptrs = tensor_list(velocity);
  const auto grad_ptrs = tensor_list(grad_sum);

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  result.initial_val_accuracy = answer_accuracy(val, params);
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      for (Mat* g : grad_ptrs) g->setZero();
      for (std::size_t i = start; i < stop; ++i) {
        const PreparedExample& ex = train[order[i]];
        ad::Tape t;
        const auto bound = bind(t, params, true);
        const auto acts = forward_pooled(t, ex.meta, t.constant(ex.pooled_audio), bound);
        ad::Var loss = answer_cross_entropy(t, acts, ex.meta.answer_tokens);
        epoch_loss += t.scalar(loss);
        t.backward(loss);
        const auto vars = var_list(bound);
        for (std::size_t k = 0; k < vars.size(); ++k) *grad_ptrs[k] += t.grad(vars[k]);
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (std::size_t k = 0; k < param_ptrs.size(); ++k) {
        *vel_ptrs[k] = config.momentum * *vel_ptrs[k] + inv * *grad_ptrs[k];
        *param_ptrs[k] -= config.learning_rate * *vel_ptrs[k];
      }
    }
    result.train_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    const double acc = answer_accuracy(val, params);
    result.val_accuracy.push_back(acc);
    if (acc >= config.stop_accuracy) break;
  }
  result.final_val_accuracy = result.val_accuracy.back();
  if (result.final_val_accuracy < config.required_accuracy) {
    throw ModelUnderfit(result.final_val_accuracy, std::move(result));
  }
  return result;
}

}  // namespace sb::model
