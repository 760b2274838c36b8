#include "sb/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace sb::ad {

Var Tape::constant(Mat value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf(Mat value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::external(const Mat& value, bool requires_grad) {
  Node n;
  n.alias = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::record(Mat value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::record(Mat value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  for (Var in : inputs) {
    if (nodes_[in.id].requires_grad) {
      n.requires_grad = true;
      break;
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Mat& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.alias != nullptr ? *n.alias : n.owned;
}

double Tape::scalar(Var v) const {
  const Mat& m = value(v);
  if (m.size() != 1) throw std::logic_error("tape: scalar() on a non-scalar node");
  return m(0, 0);
}

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(value(v).rows(), value(v).cols());
  return n.grad;
}

Mat& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.size() == 0) {
    const Mat& val = value(v);
    n.grad = Mat::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

void Tape::backward(Var out) {
  if (value(out).size() != 1) throw std::logic_error("tape: backward() needs a scalar output");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  grad_buffer(out)(0, 0) = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string("tape: shape mismatch in ") + op);
  }
}

void accumulate(Tape& t, Var v, const Mat& g) {
  if (t.requires_grad(v)) t.grad_buffer(v) += g;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var add(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "add");
  return t.record(t.value(a) + t.value(b), {a, b}, [a, b](Tape& tp, const Mat& g) {
    accumulate(tp, a, g);
    accumulate(tp, b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "sub");
  return t.record(t.value(a) - t.value(b), {a, b}, [a, b](Tape& tp, const Mat& g) {
    accumulate(tp, a, g);
    if (tp.requires_grad(b)) tp.grad_buffer(b) -= g;
  });
}

Var mul(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "mul");
  return t.record(t.value(a).cwiseProduct(t.value(b)), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad_buffer(a) += g.cwiseProduct(tp.value(b));
    if (tp.requires_grad(b)) tp.grad_buffer(b) += g.cwiseProduct(tp.value(a));
  });
}

Var scale(Tape& t, Var a, double s) {
  return t.record(t.value(a) * s, {a}, [a, s](Tape& tp, const Mat& g) { accumulate(tp, a, g * s); });
}

Var add_scalar(Tape& t, Var a, double s) {
  Mat out = t.value(a).array() + s;
  return t.record(std::move(out), {a}, [a](Tape& tp, const Mat& g) { accumulate(tp, a, g); });
}

Var add_row(Tape& t, Var a, Var row) {
  const Mat& av = t.value(a);
  const Mat& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw std::invalid_argument("tape: add_row shape mismatch");
  Mat out = av.rowwise() + rv.row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& tp, const Mat& g) {
    accumulate(tp, a, g);
    if (tp.requires_grad(row)) tp.grad_buffer(row) += g.colwise().sum();
  });
}

Var matmul(Tape& t, Var a, Var b) {
  const Mat& av = t.value(a);
  const Mat& bv = t.value(b);
  if (av.cols() != bv.rows()) throw std::invalid_argument("tape: matmul shape mismatch");
  return t.record(av * bv, {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad_buffer(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad_buffer(b).noalias() += tp.value(a).transpose() * g;
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  const Mat& av = t.value(a);
  const Mat& bv = t.value(b);
  if (av.cols() != bv.cols()) throw std::invalid_argument("tape: matmul_nt shape mismatch");
  return t.record(av * bv.transpose(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad_buffer(a).noalias() += g * tp.value(b);
    if (tp.requires_grad(b)) tp.grad_buffer(b).noalias() += g.transpose() * tp.value(a);
  });
}

Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t count) {
  const Mat& av = t.value(a);
  if (begin + count > static_cast<std::size_t>(av.rows())) throw std::out_of_range("tape: slice_rows");
  Mat out = av.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  return t.record(std::move(out), {a}, [a, begin, count](Tape& tp, const Mat& g) {
    if (!tp.requires_grad(a)) return;
    tp.grad_buffer(a).middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) += g;
  });
}

Var concat_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("tape: concat_rows of nothing");
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts.front()).cols();
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw std::invalid_argument("tape: concat_rows width mismatch");
    rows += t.value(p).rows();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    const Mat& pv = t.value(p);
    out.middleRows(at, pv.rows()) = pv;
    at += pv.rows();
  }
  return t.record(std::move(out), parts, [parts](Tape& tp, const Mat& g) {
    Eigen::Index off = 0;
    for (Var p : parts) {
      const Eigen::Index r = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.grad_buffer(p) += g.middleRows(off, r);
      off += r;
    }
  });
}

Var gather_rows(Tape& t, Var table, const std::vector<std::size_t>& rows) {
  const Mat& tv = t.value(table);
  Mat out(static_cast<Eigen::Index>(rows.size()), tv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= static_cast<std::size_t>(tv.rows())) throw std::out_of_range("tape: gather_rows index");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(static_cast<Eigen::Index>(rows[i]));
  }
  return t.record(std::move(out), {table}, [table, rows](Tape& tp, const Mat& g) {
    Mat& gt = tp.grad_buffer(table);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      gt.row(static_cast<Eigen::Index>(rows[i])) += g.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var sum(Tape& t, Var a) {
  Mat out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.record(std::move(out), {a}, [a](Tape& tp, const Mat& g) {
    tp.grad_buffer(a).array() += g(0, 0);
  });
}

Var mean(Tape& t, Var a) {
  const double n = static_cast<double>(t.value(a).size());
  Mat out(1, 1);
  out(0, 0) = t.value(a).sum() / n;
  return t.record(std::move(out), {a}, [a, n](Tape& tp, const Mat& g) {
    tp.grad_buffer(a).array() += g(0, 0) / n;
  });
}

Var gelu(Tape& t, Var a) {
  const Mat& x = t.value(a);
  Mat out = x.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  });
  return t.record(std::move(out), {a}, [a](Tape& tp, const Mat& g) {
    const Mat& xv = tp.value(a);
    Mat d = xv.unaryExpr([](double v) {
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    });
    tp.grad_buffer(a) += g.cwiseProduct(d);
  });
}

Var tanh(Tape& t, Var a) {
  Mat out = t.value(a).array().tanh().matrix();
  return t.record(std::move(out), {a}, [a](Tape& tp, const Mat& g) {
    // Recompute rather than capture the output.
    Mat y = tp.value(a).array().tanh().matrix();
    tp.grad_buffer(a).array() += g.array() * (1.0 - y.array().square());
  });
}

Var log_floor(Tape& t, Var a, double floor) {
  Mat out = t.value(a).unaryExpr([floor](double v) { return std::log(std::max(v, floor)); });
  return t.record(std::move(out), {a}, [a, floor](Tape& tp, const Mat& g) {
    const Mat& xv = tp.value(a);
    Mat& ga = tp.grad_buffer(a);
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      if (v > floor) ga.data()[i] += g.data()[i] / v;
    }
  });
}

Var layer_norm(Tape& t, Var a, Var gain, Var bias, double eps) {
  const Mat& x = t.value(a);
  const Mat& gv = t.value(gain);
  const Mat& bv = t.value(bias);
  if (gv.cols() != x.cols() || bv.cols() != x.cols()) throw std::invalid_argument("tape: layer_norm shape");
  const Eigen::Index n = x.rows();
  const double m = static_cast<double>(x.cols());
  Mat xhat(n, x.cols());
  Vec inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().sum() / m;
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  Mat out = xhat.array().rowwise() * gv.row(0).array();
  out.rowwise() += bv.row(0);
  return t.record(std::move(out), {a, gain, bias},
                  [a, gain, bias, xhat, inv_std, m](Tape& tp, const Mat& g) {
                    if (tp.requires_grad(gain)) tp.grad_buffer(gain) += g.cwiseProduct(xhat).colwise().sum();
                    if (tp.requires_grad(bias)) tp.grad_buffer(bias) += g.colwise().sum();
                    if (!tp.requires_grad(a)) return;
                    const Mat& gv2 = tp.value(gain);
                    Mat gx = g.array().rowwise() * gv2.row(0).array();
                    Mat& ga = tp.grad_buffer(a);
                    for (Eigen::Index i = 0; i < gx.rows(); ++i) {
                      const double mean_g = gx.row(i).sum() / m;
                      const double mean_gx = gx.row(i).dot(xhat.row(i)) / m;
                      ga.row(i).array() +=
                          inv_std(i) * (gx.row(i).array() - mean_g - xhat.row(i).array() * mean_gx);
                    }
                  });
}

Var causal_mask(Tape& t, Var a) {
  Mat out = t.value(a);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < out.cols(); ++j) out(i, j) = kMasked;
  }
  return t.record(std::move(out), {a}, [a](Tape& tp, const Mat& g) {
    Mat& ga = tp.grad_buffer(a);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const Eigen::Index upto = std::min<Eigen::Index>(i + 1, g.cols());
      ga.row(i).head(upto) += g.row(i).head(upto);
    }
  });
}

Var softmax_causal(Tape& t, Var a) {
  const Mat& x = t.value(a);
  Mat p = Mat::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index len = std::min<Eigen::Index>(i + 1, x.cols());
    const double mx = x.row(i).head(len).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < len; ++j) {
      p(i, j) = std::exp(x(i, j) - mx);
      z += p(i, j);
    }
    p.row(i).head(len) /= z;
  }
  Mat pv = p;
  return t.record(std::move(p), {a}, [a, pv](Tape& tp, const Mat& g) {
    Mat& ga = tp.grad_buffer(a);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const Eigen::Index len = std::min<Eigen::Index>(i + 1, g.cols());
      const double dot = pv.row(i).head(len).dot(g.row(i).head(len));
      ga.row(i).head(len).array() += pv.row(i).head(len).array() * (g.row(i).head(len).array() - dot);
    }
  });
}

Var log_softmax(Tape& t, Var a) {
  const Mat& x = t.value(a);
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    // log1p keeps the argmax entry accurate when it holds nearly all the mass
    Eigen::Index am = 0;
    const double mx = x.row(i).maxCoeff(&am);
    double rest = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (j != am) rest += std::exp(x(i, j) - mx);
    }
    out.row(i) = (x.row(i).array() - mx) - std::log1p(rest);
  }
  Mat probs = out.array().exp().matrix();
  return t.record(std::move(out), {a}, [a, probs](Tape& tp, const Mat& g) {
    Mat& ga = tp.grad_buffer(a);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      ga.row(i) += g.row(i) - probs.row(i) * g.row(i).sum();
    }
  });
}

Var mean_row_cosine(Tape& t, Var a, Var b, const char* what) {
  const Mat& av = t.value(a);
  const Mat& bv = t.value(b);
  check_same_shape(av, bv, "mean_row_cosine");
  const Eigen::Index n = av.rows();
  Vec na(n), nb(n), cos(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    na(i) = av.row(i).norm();
    nb(i) = bv.row(i).norm();
    if (na(i) == 0.0 || nb(i) == 0.0) throw std::domain_error(what);
    cos(i) = av.row(i).dot(bv.row(i)) / (na(i) * nb(i));
  }
  Mat out(1, 1);
  out(0, 0) = cos.mean();
  return t.record(std::move(out), {a, b}, [a, b, na, nb, cos](Tape& tp, const Mat& g) {
    const Mat& av2 = tp.value(a);
    const Mat& bv2 = tp.value(b);
    const double s = g(0, 0) / static_cast<double>(av2.rows());
    for (Eigen::Index i = 0; i < av2.rows(); ++i) {
      if (tp.requires_grad(a)) {
        tp.grad_buffer(a).row(i) +=
            s * (bv2.row(i) / (na(i) * nb(i)) - cos(i) * av2.row(i) / (na(i) * na(i)));
      }
      if (tp.requires_grad(b)) {
        tp.grad_buffer(b).row(i) +=
            s * (av2.row(i) / (na(i) * nb(i)) - cos(i) * bv2.row(i) / (nb(i) * nb(i)));
      }
    }
  });
}

}  // namespace sb::ad
