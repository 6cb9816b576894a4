#include "hdt/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <stdexcept>

#include "hdt/kernels.hpp"

namespace hdt {

namespace {

constexpr double kGeluAlpha = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

void check_all_finite(const Tensor& t, const char* where) {
  for (double x : t.v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string("non-finite value in ") + where);
    }
  }
}

}  // namespace

Graph::Id Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Tensor& Graph::grad_buf(Id id) {
  Node& n = at(id);
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

Tensor Graph::grad(Id id) const {
  const Node& n = at(id);
  if (n.grad.empty()) return Tensor::zeros_like(n.value);
  return n.grad;
}

Graph::Id Graph::constant(Tensor t) {
  if (check_finite_) check_all_finite(t, "constant");
  Node n;
  n.op = Op::kConst;
  n.value = std::move(t);
  return push(std::move(n));
}

Graph::Id Graph::param(const Tensor& t) {
  if (check_finite_) check_all_finite(t, "param");
  Node n;
  n.op = Op::kParam;
  n.value = t;
  n.needs_grad = true;
  return push(std::move(n));
}

Graph::Id Graph::matmul(Id a, Id b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (tb.shape.size() != 2 || ta.cols() != tb.shape[0]) {
    throw std::invalid_argument("matmul: shapes " + Tensor::shape_str(ta.shape) + " x " +
                                Tensor::shape_str(tb.shape));
  }
  const int64_t r = ta.rows(), k = ta.cols(), nn = tb.shape[1];
  std::vector<int64_t> out_shape(ta.shape.begin(), ta.shape.end() - 1);
  out_shape.push_back(nn);
  Node n;
  n.op = Op::kMatmul;
  n.a = a;
  n.b = b;
  n.needs_grad = wants(a) || wants(b);
  n.value = Tensor(out_shape);
  kernels::mm(ta.v.data(), tb.v.data(), n.value.v.data(), r, k, nn);
  if (check_finite_) check_all_finite(n.value, "matmul");
  return push(std::move(n));
}

Graph::Id Graph::bmm(Id a, Id b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (ta.shape.size() != 3 || tb.shape.size() != 3 || ta.shape[0] != tb.shape[0] ||
      ta.shape[2] != tb.shape[1]) {
    throw std::invalid_argument("bmm: shapes " + Tensor::shape_str(ta.shape) + " x " +
                                Tensor::shape_str(tb.shape));
  }
  const int64_t g = ta.shape[0], m = ta.shape[1], k = ta.shape[2], nn = tb.shape[2];
  Node n;
  n.op = Op::kBmm;
  n.a = a;
  n.b = b;
  n.needs_grad = wants(a) || wants(b);
  n.value = Tensor({g, m, nn});
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < g; ++i) {
    kernels::mm(ta.v.data() + i * m * k, tb.v.data() + i * k * nn, n.value.v.data() + i * m * nn,
                m, k, nn, false, false);
  }
  if (check_finite_) check_all_finite(n.value, "bmm");
  return push(std::move(n));
}

Graph::Id Graph::bmm_nt(Id a, Id b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (ta.shape.size() != 3 || tb.shape.size() != 3 || ta.shape[0] != tb.shape[0] ||
      ta.shape[2] != tb.shape[2]) {
    throw std::invalid_argument("bmm_nt: shapes " + Tensor::shape_str(ta.shape) + " x " +
                                Tensor::shape_str(tb.shape));
  }
  const int64_t g = ta.shape[0], m = ta.shape[1], k = ta.shape[2], nn = tb.shape[1];
  Node n;
  n.op = Op::kBmmNT;
  n.a = a;
  n.b = b;
  n.needs_grad = wants(a) || wants(b);
  n.value = Tensor({g, m, nn});
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < g; ++i) {
    kernels::mm_nt(ta.v.data() + i * m * k, tb.v.data() + i * nn * k,
                   n.value.v.data() + i * m * nn, m, k, nn, false, false);
  }
  if (check_finite_) check_all_finite(n.value, "bmm_nt");
  return push(std::move(n));
}

Graph::Id Graph::add(Id a, Id b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (!same_shape(ta, tb)) {
    throw std::invalid_argument("add: shapes " + Tensor::shape_str(ta.shape) + " vs " +
                                Tensor::shape_str(tb.shape));
  }
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.needs_grad = wants(a) || wants(b);
  n.value = Tensor::zeros_like(ta);
  for (int64_t i = 0; i < ta.size(); ++i) n.value.v[i] = ta.v[i] + tb.v[i];
  if (check_finite_) check_all_finite(n.value, "add");
  return push(std::move(n));
}

Graph::Id Graph::add_bias(Id x, Id bias) {
  const Tensor& tx = at(x).value;
  const Tensor& tb = at(bias).value;
  if (tb.shape.size() != 1 || tb.shape[0] != tx.cols()) {
    throw std::invalid_argument("add_bias: bias " + Tensor::shape_str(tb.shape) + " for " +
                                Tensor::shape_str(tx.shape));
  }
  const int64_t r = tx.rows(), d = tx.cols();
  Node n;
  n.op = Op::kAddBias;
  n.a = x;
  n.b = bias;
  n.needs_grad = wants(x) || wants(bias);
  n.value = Tensor::zeros_like(tx);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < d; ++j) n.value.v[i * d + j] = tx.v[i * d + j] + tb.v[j];
  if (check_finite_) check_all_finite(n.value, "add_bias");
  return push(std::move(n));
}

Graph::Id Graph::scale(Id x, double c) {
  const Tensor& tx = at(x).value;
  Node n;
  n.op = Op::kScale;
  n.a = x;
  n.scalar = c;
  n.needs_grad = wants(x);
  n.value = Tensor::zeros_like(tx);
  for (int64_t i = 0; i < tx.size(); ++i) n.value.v[i] = c * tx.v[i];
  if (check_finite_) check_all_finite(n.value, "scale");
  return push(std::move(n));
}

Graph::Id Graph::layer_norm(Id x, Id gamma, Id beta) {
  const Tensor& tx = at(x).value;
  const Tensor& tg = at(gamma).value;
  const Tensor& tb = at(beta).value;
  const int64_t d = tx.cols(), r = tx.rows();
  if (tg.size() != d || tb.size() != d) {
    throw std::invalid_argument("layer_norm: affine params must have width " + std::to_string(d));
  }
  Node n;
  n.op = Op::kLayerNorm;
  n.a = x;
  n.b = gamma;
  n.c = beta;
  n.needs_grad = wants(x) || wants(gamma) || wants(beta);
  n.value = Tensor::zeros_like(tx);
  n.aux = Tensor({r, 2});  // per-row mean, rstd
  for (int64_t i = 0; i < r; ++i) {
    const double* xi = tx.v.data() + i * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    n.aux.v[i * 2] = mu;
    n.aux.v[i * 2 + 1] = rstd;
    for (int64_t j = 0; j < d; ++j) {
      n.value.v[i * d + j] = (xi[j] - mu) * rstd * tg.v[j] + tb.v[j];
    }
  }
  if (check_finite_) check_all_finite(n.value, "layer_norm");
  return push(std::move(n));
}

Graph::Id Graph::softmax_lastdim(Id x) {
  const Tensor& tx = at(x).value;
  const int64_t d = tx.cols(), r = tx.rows();
  Node n;
  n.op = Op::kSoftmax;
  n.a = x;
  n.needs_grad = wants(x);
  n.value = Tensor::zeros_like(tx);
  for (int64_t i = 0; i < r; ++i) {
    const double* xi = tx.v.data() + i * d;
    double* yi = n.value.v.data() + i * d;
    double m = xi[0];
    for (int64_t j = 1; j < d; ++j) m = std::max(m, xi[j]);
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      yi[j] = std::exp(xi[j] - m);
      s += yi[j];
    }
    for (int64_t j = 0; j < d; ++j) yi[j] /= s;
  }
  if (check_finite_) check_all_finite(n.value, "softmax_lastdim");
  return push(std::move(n));
}

Graph::Id Graph::gelu(Id x) {
  const Tensor& tx = at(x).value;
  Node n;
  n.op = Op::kGelu;
  n.a = x;
  n.needs_grad = wants(x);
  n.value = Tensor::zeros_like(tx);
  for (int64_t i = 0; i < tx.size(); ++i) {
    const double xv = tx.v[i];
    const double u = kGeluAlpha * (xv + kGeluCubic * xv * xv * xv);
    n.value.v[i] = 0.5 * xv * (1.0 + std::tanh(u));
  }
  if (check_finite_) check_all_finite(n.value, "gelu");
  return push(std::move(n));
}

Graph::Id Graph::tanh_act(Id x) {
  const Tensor& tx = at(x).value;
  Node n;
  n.op = Op::kTanh;
  n.a = x;
  n.needs_grad = wants(x);
  n.value = Tensor::zeros_like(tx);
  for (int64_t i = 0; i < tx.size(); ++i) n.value.v[i] = std::tanh(tx.v[i]);
  if (check_finite_) check_all_finite(n.value, "tanh");
  return push(std::move(n));
}

Graph::Id Graph::embedding_lookup(Id table, const std::vector<int64_t>& ids,
                                  std::vector<int64_t> lead_shape) {
  const Tensor& tt = at(table).value;
  if (tt.shape.size() != 2) throw std::invalid_argument("embedding_lookup: table must be 2-d");
  const int64_t v = tt.shape[0], e = tt.shape[1];
  if (Tensor::count(lead_shape) != static_cast<int64_t>(ids.size())) {
    throw std::invalid_argument("embedding_lookup: lead shape does not match id count");
  }
  for (int64_t id : ids) {
    if (id < 0 || id >= v) {
      throw std::out_of_range("embedding_lookup: index " + std::to_string(id) +
                              " outside table of " + std::to_string(v));
    }
  }
  Node n;
  n.op = Op::kEmbed;
  n.a = table;
  n.ints = ids;
  n.needs_grad = wants(table);
  lead_shape.push_back(e);
  n.value = Tensor(lead_shape);
  for (size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(n.value.v.data() + static_cast<int64_t>(i) * e, tt.v.data() + ids[i] * e,
                sizeof(double) * static_cast<size_t>(e));
  }
  if (check_finite_) check_all_finite(n.value, "embedding_lookup");
  return push(std::move(n));
}

Graph::Id Graph::concat_lastdim(Id a, Id b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (ta.rows() != tb.rows() ||
      !std::equal(ta.shape.begin(), ta.shape.end() - 1, tb.shape.begin(), tb.shape.end() - 1)) {
    throw std::invalid_argument("concat_lastdim: lead dims differ");
  }
  const int64_t r = ta.rows(), d1 = ta.cols(), d2 = tb.cols();
  std::vector<int64_t> out_shape(ta.shape.begin(), ta.shape.end() - 1);
  out_shape.push_back(d1 + d2);
  Node n;
  n.op = Op::kConcat;
  n.a = a;
  n.b = b;
  n.needs_grad = wants(a) || wants(b);
  n.value = Tensor(out_shape);
  for (int64_t i = 0; i < r; ++i) {
    std::memcpy(n.value.v.data() + i * (d1 + d2), ta.v.data() + i * d1,
                sizeof(double) * static_cast<size_t>(d1));
    std::memcpy(n.value.v.data() + i * (d1 + d2) + d1, tb.v.data() + i * d2,
                sizeof(double) * static_cast<size_t>(d2));
  }
  return push(std::move(n));
}

Graph::Id Graph::slice_positions(Id x, int64_t offset, int64_t stride) {
  const Tensor& tx = at(x).value;
  if (tx.shape.size() != 3) throw std::invalid_argument("slice_positions: expected (b, t, e)");
  const int64_t b = tx.shape[0], t = tx.shape[1], e = tx.shape[2];
  if (offset < 0 || offset >= t || stride <= 0) {
    throw std::invalid_argument("slice_positions: bad offset/stride");
  }
  const int64_t count = (t - 1 - offset) / stride + 1;
  Node n;
  n.op = Op::kSlicePos;
  n.a = x;
  n.ints = {offset, stride};
  n.needs_grad = wants(x);
  n.value = Tensor({b, count, e});
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t j = 0; j < count; ++j) {
      std::memcpy(n.value.v.data() + (bi * count + j) * e,
                  tx.v.data() + (bi * t + offset + j * stride) * e,
                  sizeof(double) * static_cast<size_t>(e));
    }
  }
  return push(std::move(n));
}

Graph::Id Graph::interleave_positions(const std::vector<Id>& xs) {
  if (xs.empty()) throw std::invalid_argument("interleave_positions: no inputs");
  const Tensor& t0 = at(xs[0]).value;
  if (t0.shape.size() != 3) throw std::invalid_argument("interleave_positions: expected (b, k, e)");
  for (Id id : xs) {
    if (!same_shape(at(id).value, t0)) {
      throw std::invalid_argument("interleave_positions: mismatched input shapes");
    }
  }
  const int64_t b = t0.shape[0], k = t0.shape[1], e = t0.shape[2];
  const int64_t p = static_cast<int64_t>(xs.size());
  Node n;
  n.op = Op::kInterleave;
  n.list = xs;
  n.needs_grad = false;
  for (Id id : xs) n.needs_grad = n.needs_grad || wants(id);
  n.value = Tensor({b, k * p, e});
  for (int64_t pi = 0; pi < p; ++pi) {
    const Tensor& src = at(xs[static_cast<size_t>(pi)]).value;
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t ki = 0; ki < k; ++ki) {
        std::memcpy(n.value.v.data() + (bi * k * p + ki * p + pi) * e,
                    src.v.data() + (bi * k + ki) * e, sizeof(double) * static_cast<size_t>(e));
      }
    }
  }
  return push(std::move(n));
}

Graph::Id Graph::masked_fill(Id x, Tensor mask) {
  const Tensor& tx = at(x).value;
  int64_t rep = 1;
  if (!same_shape(tx, mask)) {
    if (tx.shape.size() == 3 && mask.shape.size() == 3 && tx.shape[1] == mask.shape[1] &&
        tx.shape[2] == mask.shape[2] && tx.shape[0] % mask.shape[0] == 0) {
      rep = tx.shape[0] / mask.shape[0];
    } else {
      throw std::invalid_argument("masked_fill: mask " + Tensor::shape_str(mask.shape) +
                                  " does not broadcast to " + Tensor::shape_str(tx.shape));
    }
  }
  Node n;
  n.op = Op::kMaskedFill;
  n.a = x;
  n.needs_grad = wants(x);
  n.value = Tensor::zeros_like(tx);
  const int64_t block = mask.size() / (mask.shape.empty() ? 1 : mask.shape[0]);
  const int64_t groups = tx.shape.empty() ? 1 : tx.shape[0];
  for (int64_t gi = 0; gi < groups; ++gi) {
    const double* mrow = mask.v.data() + (gi / rep) * block;
    const double* xrow = tx.v.data() + gi * block;
    double* yrow = n.value.v.data() + gi * block;
    for (int64_t j = 0; j < block; ++j) {
      yrow[j] = xrow[j] + (mrow[j] == 0.0 ? kMaskFill : 0.0);
    }
  }
  n.aux2 = std::move(mask);
  return push(std::move(n));
}

Graph::Id Graph::split_heads(Id x, int64_t n_heads) {
  const Tensor& tx = at(x).value;
  if (tx.shape.size() != 3 || tx.shape[2] % n_heads != 0) {
    throw std::invalid_argument("split_heads: embed dim not divisible by heads");
  }
  const int64_t b = tx.shape[0], t = tx.shape[1], e = tx.shape[2], d = e / n_heads;
  Node n;
  n.op = Op::kSplitHeads;
  n.a = x;
  n.ints = {n_heads};
  n.needs_grad = wants(x);
  n.value = Tensor({b * n_heads, t, d});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t h = 0; h < n_heads; ++h)
      for (int64_t ti = 0; ti < t; ++ti)
        std::memcpy(n.value.v.data() + (((bi * n_heads + h) * t) + ti) * d,
                    tx.v.data() + (bi * t + ti) * e + h * d,
                    sizeof(double) * static_cast<size_t>(d));
  return push(std::move(n));
}

Graph::Id Graph::merge_heads(Id x, int64_t n_heads) {
  const Tensor& tx = at(x).value;
  if (tx.shape.size() != 3 || tx.shape[0] % n_heads != 0) {
    throw std::invalid_argument("merge_heads: leading dim not divisible by heads");
  }
  const int64_t b = tx.shape[0] / n_heads, t = tx.shape[1], d = tx.shape[2];
  Node n;
  n.op = Op::kMergeHeads;
  n.a = x;
  n.ints = {n_heads};
  n.needs_grad = wants(x);
  n.value = Tensor({b, t, n_heads * d});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t h = 0; h < n_heads; ++h)
      for (int64_t ti = 0; ti < t; ++ti)
        std::memcpy(n.value.v.data() + (bi * t + ti) * n_heads * d + h * d,
                    tx.v.data() + ((bi * n_heads + h) * t + ti) * d,
                    sizeof(double) * static_cast<size_t>(d));
  return push(std::move(n));
}

Graph::Id Graph::dropout(Id x, double rate, Prng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  const Tensor& tx = at(x).value;
  Node n;
  n.op = Op::kDropout;
  n.a = x;
  n.needs_grad = wants(x);
  n.aux = Tensor::zeros_like(tx);
  n.value = Tensor::zeros_like(tx);
  const double keep = 1.0 - rate;
  for (int64_t i = 0; i < tx.size(); ++i) {
    const double m = rng.uniform01() < rate ? 0.0 : 1.0 / keep;
    n.aux.v[i] = m;
    n.value.v[i] = tx.v[i] * m;
  }
  return push(std::move(n));
}

Graph::Id Graph::mean_squared_error(Id pred, Tensor target, Tensor weight) {
  const Tensor& tp = at(pred).value;
  if (!same_shape(tp, target) || !same_shape(tp, weight)) {
    throw std::invalid_argument("mean_squared_error: pred/target/weight shapes differ");
  }
  double sumw = 0.0;
  double acc = 0.0;
  for (int64_t i = 0; i < tp.size(); ++i) {
    const double d = tp.v[i] - target.v[i];
    acc += weight.v[i] * d * d;
    sumw += weight.v[i];
  }
  Node n;
  n.op = Op::kMse;
  n.a = pred;
  n.needs_grad = wants(pred);
  n.scalar = sumw;
  n.aux = std::move(target);
  n.aux2 = std::move(weight);
  n.value = Tensor({1});
  n.value.v[0] = sumw > 0.0 ? acc / sumw : 0.0;
  if (check_finite_) check_all_finite(n.value, "mean_squared_error");
  return push(std::move(n));
}

void Graph::backward(Id loss) {
  if (at(loss).value.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar");
  }
  if (!at(loss).needs_grad) return;
  grad_buf(loss).v[0] = 1.0;
  for (Id id = loss; id >= 0; --id) {
    Node& n = at(id);
    if (!n.needs_grad || n.grad.empty()) continue;
    backprop(id);
  }
}

void Graph::backprop(Id id) {
  Node& n = at(id);
  const Tensor& g = n.grad;
  switch (n.op) {
    case Op::kConst:
    case Op::kParam:
      break;
    case Op::kMatmul: {
      const Tensor& ta = at(n.a).value;
      const Tensor& tb = at(n.b).value;
      const int64_t r = ta.rows(), k = ta.cols(), nn = tb.shape[1];
      if (wants(n.a)) {
        kernels::mm_nt(g.v.data(), tb.v.data(), grad_buf(n.a).v.data(), r, nn, k, true);
      }
      if (wants(n.b)) {
        kernels::mm_tn(ta.v.data(), g.v.data(), grad_buf(n.b).v.data(), r, k, nn, true);
      }
      break;
    }
    case Op::kBmm: {
      const Tensor& ta = at(n.a).value;
      const Tensor& tb = at(n.b).value;
      const int64_t gg = ta.shape[0], m = ta.shape[1], k = ta.shape[2], nn = tb.shape[2];
      if (wants(n.a)) {
        double* da = grad_buf(n.a).v.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < gg; ++i)
          kernels::mm_nt(g.v.data() + i * m * nn, tb.v.data() + i * k * nn, da + i * m * k, m, nn,
                         k, true, false);
      }
      if (wants(n.b)) {
        double* db = grad_buf(n.b).v.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < gg; ++i)
          kernels::mm_tn(ta.v.data() + i * m * k, g.v.data() + i * m * nn, db + i * k * nn, m, k,
                         nn, true, false);
      }
      break;
    }
    case Op::kBmmNT: {
      const Tensor& ta = at(n.a).value;
      const Tensor& tb = at(n.b).value;
      const int64_t gg = ta.shape[0], m = ta.shape[1], k = ta.shape[2], nn = tb.shape[1];
      if (wants(n.a)) {
        double* da = grad_buf(n.a).v.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < gg; ++i)
          kernels::mm(g.v.data() + i * m * nn, tb.v.data() + i * nn * k, da + i * m * k, m, nn, k,
                      true, false);
      }
      if (wants(n.b)) {
        double* db = grad_buf(n.b).v.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < gg; ++i)
          kernels::mm_tn(g.v.data() + i * m * nn, ta.v.data() + i * m * k, db + i * nn * k, m, nn,
                         k, true, false);
      }
      break;
    }
    case Op::kAdd: {
      if (wants(n.a)) {
        Tensor& da = grad_buf(n.a);
        for (int64_t i = 0; i < g.size(); ++i) da.v[i] += g.v[i];
      }
      if (wants(n.b)) {
        Tensor& db = grad_buf(n.b);
        for (int64_t i = 0; i < g.size(); ++i) db.v[i] += g.v[i];
      }
      break;
    }
    case Op::kAddBias: {
      const int64_t r = g.rows(), d = g.cols();
      if (wants(n.a)) {
        Tensor& dx = grad_buf(n.a);
        for (int64_t i = 0; i < g.size(); ++i) dx.v[i] += g.v[i];
      }
      if (wants(n.b)) {
        Tensor& db = grad_buf(n.b);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < d; ++j) db.v[j] += g.v[i * d + j];
      }
      break;
    }
    case Op::kScale: {
      if (wants(n.a)) {
        Tensor& dx = grad_buf(n.a);
        for (int64_t i = 0; i < g.size(); ++i) dx.v[i] += n.scalar * g.v[i];
      }
      break;
    }
    case Op::kLayerNorm: {
      const Tensor& tx = at(n.a).value;
      const Tensor& tg = at(n.b).value;
      const int64_t r = tx.rows(), d = tx.cols();
      Tensor* dx = wants(n.a) ? &grad_buf(n.a) : nullptr;
      Tensor* dgm = wants(n.b) ? &grad_buf(n.b) : nullptr;
      Tensor* dbt = wants(n.c) ? &grad_buf(n.c) : nullptr;
      for (int64_t i = 0; i < r; ++i) {
        const double mu = n.aux.v[i * 2];
        const double rstd = n.aux.v[i * 2 + 1];
        const double* xi = tx.v.data() + i * d;
        const double* gi = g.v.data() + i * d;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          const double h = (xi[j] - mu) * rstd;
          const double dh = gi[j] * tg.v[j];
          s1 += dh;
          s2 += dh * h;
          if (dgm) dgm->v[j] += gi[j] * h;
          if (dbt) dbt->v[j] += gi[j];
        }
        if (dx) {
          const double inv_d = 1.0 / static_cast<double>(d);
          for (int64_t j = 0; j < d; ++j) {
            const double h = (xi[j] - mu) * rstd;
            const double dh = gi[j] * tg.v[j];
            dx->v[i * d + j] += rstd * (dh - s1 * inv_d - h * s2 * inv_d);
          }
        }
      }
      break;
    }
    case Op::kSoftmax: {
      if (!wants(n.a)) break;
      Tensor& dx = grad_buf(n.a);
      const int64_t r = g.rows(), d = g.cols();
      for (int64_t i = 0; i < r; ++i) {
        const double* yi = n.value.v.data() + i * d;
        const double* gi = g.v.data() + i * d;
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += gi[j] * yi[j];
        for (int64_t j = 0; j < d; ++j) dx.v[i * d + j] += yi[j] * (gi[j] - dot);
      }
      break;
    }
    case Op::kGelu: {
      if (!wants(n.a)) break;
      Tensor& dx = grad_buf(n.a);
      const Tensor& tx = at(n.a).value;
      for (int64_t i = 0; i < g.size(); ++i) {
        const double xv = tx.v[i];
        const double u = kGeluAlpha * (xv + kGeluCubic * xv * xv * xv);
        const double t = std::tanh(u);
        const double du = kGeluAlpha * (1.0 + 3.0 * kGeluCubic * xv * xv);
        dx.v[i] += g.v[i] * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
      }
      break;
    }
    case Op::kTanh: {
      if (!wants(n.a)) break;
      Tensor& dx = grad_buf(n.a);
      for (int64_t i = 0; i < g.size(); ++i) {
        const double y = n.value.v[i];
        dx.v[i] += g.v[i] * (1.0 - y * y);
      }
      break;
    }
    case Op::kEmbed: {
      if (!wants(n.a)) break;
      Tensor& dt = grad_buf(n.a);
      const int64_t e = at(n.a).value.shape[1];
      for (size_t i = 0; i < n.ints.size(); ++i) {
        const double* gi = g.v.data() + static_cast<int64_t>(i) * e;
        double* trow = dt.v.data() + n.ints[i] * e;
        for (int64_t j = 0; j < e; ++j) trow[j] += gi[j];
      }
      break;
    }
    case Op::kConcat: {
      const int64_t d1 = at(n.a).value.cols(), d2 = at(n.b).value.cols();
      const int64_t r = g.rows();
      if (wants(n.a)) {
        Tensor& da = grad_buf(n.a);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < d1; ++j) da.v[i * d1 + j] += g.v[i * (d1 + d2) + j];
      }
      if (wants(n.b)) {
        Tensor& db = grad_buf(n.b);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < d2; ++j) db.v[i * d2 + j] += g.v[i * (d1 + d2) + d1 + j];
      }
      break;
    }
    case Op::kSlicePos: {
      if (!wants(n.a)) break;
      Tensor& dx = grad_buf(n.a);
      const Tensor& tx = at(n.a).value;
      const int64_t b = tx.shape[0], t = tx.shape[1], e = tx.shape[2];
      const int64_t offset = n.ints[0], stride = n.ints[1];
      const int64_t count = n.value.shape[1];
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t j = 0; j < count; ++j) {
          const double* gi = g.v.data() + (bi * count + j) * e;
          double* di = dx.v.data() + (bi * t + offset + j * stride) * e;
          for (int64_t x = 0; x < e; ++x) di[x] += gi[x];
        }
      break;
    }
    case Op::kInterleave: {
      const int64_t p = static_cast<int64_t>(n.list.size());
      const Tensor& t0 = at(n.list[0]).value;
      const int64_t b = t0.shape[0], k = t0.shape[1], e = t0.shape[2];
      for (int64_t pi = 0; pi < p; ++pi) {
        if (!wants(n.list[static_cast<size_t>(pi)])) continue;
        Tensor& dxi = grad_buf(n.list[static_cast<size_t>(pi)]);
        for (int64_t bi = 0; bi < b; ++bi)
          for (int64_t ki = 0; ki < k; ++ki) {
            const double* gi = g.v.data() + (bi * k * p + ki * p + pi) * e;
            double* di = dxi.v.data() + (bi * k + ki) * e;
            for (int64_t x = 0; x < e; ++x) di[x] += gi[x];
          }
      }
      break;
    }
    case Op::kMaskedFill: {
      if (!wants(n.a)) break;
      Tensor& dx = grad_buf(n.a);
      for (int64_t i = 0; i < g.size(); ++i) dx.v[i] += g.v[i];
      break;
    }
    case Op::kSplitHeads: {
      if (!wants(n.a)) break;
      Tensor& dx = grad_buf(n.a);
      const Tensor& tx = at(n.a).value;
      const int64_t h = n.ints[0];
      const int64_t b = tx.shape[0], t = tx.shape[1], e = tx.shape[2], d = e / h;
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < h; ++hi)
          for (int64_t ti = 0; ti < t; ++ti) {
            const double* gi = g.v.data() + ((bi * h + hi) * t + ti) * d;
            double* di = dx.v.data() + (bi * t + ti) * e + hi * d;
            for (int64_t x = 0; x < d; ++x) di[x] += gi[x];
          }
      break;
    }
    case Op::kMergeHeads: {
      if (!wants(n.a)) break;
      Tensor& dx = grad_buf(n.a);
      const Tensor& tx = at(n.a).value;
      const int64_t h = n.ints[0];
      const int64_t b = tx.shape[0] / h, t = tx.shape[1], d = tx.shape[2];
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < h; ++hi)
          for (int64_t ti = 0; ti < t; ++ti) {
            const double* gi = g.v.data() + (bi * t + ti) * h * d + hi * d;
            double* di = dx.v.data() + ((bi * h + hi) * t + ti) * d;
            for (int64_t x = 0; x < d; ++x) di[x] += gi[x];
          }
      break;
    }
    case Op::kDropout: {
      if (!wants(n.a)) break;
      Tensor& dx = grad_buf(n.a);
      for (int64_t i = 0; i < g.size(); ++i) dx.v[i] += g.v[i] * n.aux.v[i];
      break;
    }
    case Op::kMse: {
      if (!wants(n.a)) break;
      if (n.scalar <= 0.0) break;
      Tensor& dp = grad_buf(n.a);
      const Tensor& tp = at(n.a).value;
      const double go = g.v[0];
      const double inv = 2.0 / n.scalar;
      for (int64_t i = 0; i < tp.size(); ++i) {
        dp.v[i] += go * inv * n.aux2.v[i] * (tp.v[i] - n.aux.v[i]);
      }
      break;
    }
  }
}

GradCheckReport grad_check(
    const std::function<Graph::Id(Graph&, std::vector<Graph::Id>&)>& build,
    const std::vector<Tensor*>& params, double eps, int64_t subsample, uint64_t seed,
    bool full_sweep) {
  std::vector<Tensor> analytic;
  {
    Graph g(true);
    std::vector<Graph::Id> ids;
    const Graph::Id loss = build(g, ids);
    if (ids.size() != params.size()) {
      throw std::invalid_argument("grad_check: build registered wrong number of params");
    }
    g.backward(loss);
    for (Graph::Id id : ids) analytic.push_back(g.grad(id));
  }

  auto eval = [&]() {
    Graph g(false);
    std::vector<Graph::Id> ids;
    const Graph::Id loss = build(g, ids);
    return g.val(loss).v[0];
  };

  int64_t total = 0;
  for (const Tensor* t : params) total += t->size();
  std::vector<std::pair<size_t, int64_t>> coords;
  if (full_sweep || total <= subsample) {
    for (size_t ti = 0; ti < params.size(); ++ti)
      for (int64_t j = 0; j < params[ti]->size(); ++j) coords.emplace_back(ti, j);
  } else {
    Prng rng(derive_seed(seed, 0x6772616463686bull));
    std::set<int64_t> picked;
    while (static_cast<int64_t>(picked.size()) < subsample) picked.insert(rng.randint(total));
    for (int64_t flat : picked) {
      int64_t rem = flat;
      for (size_t ti = 0; ti < params.size(); ++ti) {
        if (rem < params[ti]->size()) {
          coords.emplace_back(ti, rem);
          break;
        }
        rem -= params[ti]->size();
      }
    }
  }

  GradCheckReport rep;
  rep.checked = static_cast<int64_t>(coords.size());
  for (auto [ti, j] : coords) {
    double& slot = params[ti]->v[static_cast<size_t>(j)];
    const double orig = slot;
    slot = orig + eps;
    const double fp = eval();
    slot = orig - eps;
    const double fm = eval();
    slot = orig;
    const double fd = (fp - fm) / (2.0 * eps);
    const double an = analytic[ti].v[static_cast<size_t>(j)];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst = "tensor#" + std::to_string(ti) + "[" + std::to_string(j) + "]";
    }
  }
  return rep;
}

}  // namespace hdt
