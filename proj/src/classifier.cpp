// SPDX-License-Identifier: Apache-2.0
#include "gridshed/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "gridshed/error.hpp"
#include "gridshed/trajectory_io.hpp"

namespace gridshed {

namespace fs = std::filesystem;
using nlohmann::json;
using Eigen::Index;
using Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Architecture and parameter table

void Architecture::validate() const {
  if (C == 0 || T == 0) throw Error("architecture needs C > 0 and T > 0");
  if (F1 == 0 || F2 == 0 || K1 == 0 || K2 == 0) throw Error("convolution sizes must be positive");
  if (pool == 0 || T < pool) throw Error("pool window must be in [1, T]");
  if (H == 0 || E == 0 || head1 == 0 || head2 == 0 || n_classes != 2) throw Error("invalid head sizes");
  if (n_loads == 0) throw Error("n_loads must be positive");
  if (!(dropout >= 0 && dropout < 1)) throw Error("dropout must be in [0, 1)");
}

void to_json(json& j, const Architecture& a) {
  j = {{"C", a.C},         {"T", a.T},         {"F1", a.F1},       {"K1", a.K1},           {"F2", a.F2},
       {"K2", a.K2},       {"pool", a.pool},   {"H", a.H},         {"E", a.E},             {"head1", a.head1},
       {"head2", a.head2}, {"n_classes", a.n_classes}, {"n_loads", a.n_loads}, {"dropout", a.dropout}};
}

void from_json(const json& j, Architecture& a) {
  a.C = j.value("C", a.C);
  a.T = j.value("T", a.T);
  a.F1 = j.value("F1", a.F1);
  a.K1 = j.value("K1", a.K1);
  a.F2 = j.value("F2", a.F2);
  a.K2 = j.value("K2", a.K2);
  a.pool = j.value("pool", a.pool);
  a.H = j.value("H", a.H);
  a.E = j.value("E", a.E);
  a.head1 = j.value("head1", a.head1);
  a.head2 = j.value("head2", a.head2);
  a.n_classes = j.value("n_classes", a.n_classes);
  a.n_loads = j.value("n_loads", a.n_loads);
  a.dropout = j.value("dropout", a.dropout);
}

std::size_t TensorInfo::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<TensorInfo> tensor_layout(const Architecture& a) {
  std::vector<TensorInfo> t;
  auto add = [&](std::string name, std::vector<std::size_t> shape) { t.push_back({std::move(name), std::move(shape), 0}); };
  add("conv1.weight", {a.F1, a.C, a.K1});
  add("conv1.bias", {a.F1});
  add("conv2.weight", {a.F2, a.F1, a.K2});
  add("conv2.bias", {a.F2});
  for (const char* dir : {"fwd", "bwd"}) {
    const std::string p = std::string("gru.") + dir + ".";
    add(p + "weight_ih", {3 * a.H, a.F2});
    add(p + "weight_hh", {3 * a.H, a.H});
    add(p + "bias_ih", {3 * a.H});
    add(p + "bias_hh", {3 * a.H});
  }
  add("embed.weight", {a.E, 1});
  add("embed.bias", {a.E});
  add("fc1.weight", {a.head1, 2 * a.H + a.E});
  add("fc1.bias", {a.head1});
  add("fc2.weight", {a.head2, a.head1});
  add("fc2.bias", {a.head2});
  add("fc3.weight", {a.n_classes, a.head2});
  add("fc3.bias", {a.n_classes});
  std::size_t off = 0;
  for (auto& x : t) {
    x.offset = off;
    off += x.size();
  }
  return t;
}

std::size_t count_params(const Architecture& a) {
  const std::size_t conv1 = a.F1 * a.C * a.K1 + a.F1;
  const std::size_t conv2 = a.F2 * a.F1 * a.K2 + a.F2;
  const std::size_t gru = 2 * (3 * a.H * a.F2 + 3 * a.H * a.H + 2 * 3 * a.H);
  const std::size_t embed = a.E + a.E;
  const std::size_t fc1 = (2 * a.H + a.E) * a.head1 + a.head1;
  const std::size_t fc2 = a.head1 * a.head2 + a.head2;
  const std::size_t fc3 = a.head2 * a.n_classes + a.n_classes;
  return conv1 + conv2 + gru + embed + fc1 + fc2 + fc3;
}

const TensorInfo& ClassifierParams::info(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw Error("no tensor named " + name);
}

Eigen::Map<RowMat> ClassifierParams::matrix(const std::string& name) {
  const auto& t = info(name);
  return {values.data() + t.offset, static_cast<Index>(t.shape[0]), static_cast<Index>(t.size() / t.shape[0])};
}

Eigen::Map<const RowMat> ClassifierParams::matrix(const std::string& name) const {
  const auto& t = info(name);
  return {values.data() + t.offset, static_cast<Index>(t.shape[0]), static_cast<Index>(t.size() / t.shape[0])};
}

Eigen::Map<const Eigen::VectorXd> ClassifierParams::vector(const std::string& name) const {
  const auto& t = info(name);
  return {values.data() + t.offset, static_cast<Index>(t.size())};
}

ClassifierParams zero_params(const Architecture& arch) {
  arch.validate();
  ClassifierParams p;
  p.arch = arch;
  p.tensors = tensor_layout(arch);
  p.values = Eigen::VectorXd::Zero(static_cast<Index>(count_params(arch)));
  return p;
}

ClassifierParams init_params(const Architecture& arch, std::uint64_t seed) {
  ClassifierParams p = zero_params(arch);
  p.seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& t : p.tensors) {
    double fan_in = 1.0;
    if (t.name.rfind("gru.", 0) == 0) {
      fan_in = static_cast<double>(arch.H);
    } else {
      // Biases share their layer's fan-in.
      const std::string layer = t.name.substr(0, t.name.find('.'));
      const auto& w = p.info(layer + ".weight");
      fan_in = static_cast<double>(w.size() / w.shape[0]);
    }
    const double bound = 1.0 / std::sqrt(fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < t.size(); ++i) p.values[static_cast<Index>(t.offset + i)] = dist(rng);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Batches

Batch make_batch(const SplitData& split, const std::vector<std::size_t>& indices, std::size_t C, std::size_t T) {
  Batch b;
  const std::size_t D = C * T;
  b.x.resize(static_cast<Index>(D), static_cast<Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const std::size_t i = indices[j];
    if (i >= split.size()) throw Error("batch index out of range");
    const float* src = split.x.data() + i * D;
    for (std::size_t k = 0; k < D; ++k) b.x(static_cast<Index>(k), static_cast<Index>(j)) = src[k];
    b.load_index.push_back(split.load_index[i]);
    b.label.push_back(split.label[i]);
  }
  return b;
}

Batch make_batch(const SplitData& split, std::size_t C, std::size_t T) {
  std::vector<std::size_t> all(split.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batch(split, all, C, T);
}

// ---------------------------------------------------------------------------
// Forward and backward passes

namespace {

// (Cin, T*B) with column b*T + t  ->  (Cin*K, T*B) patches, zero padded.
MatrixXd im2col(const MatrixXd& in, Index Cin, Index T, Index B, Index K) {
  const Index pad = (K - 1) / 2;
  MatrixXd out = MatrixXd::Zero(Cin * K, T * B);
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index k = 0; k < K; ++k) {
        const Index src = t + k - pad;
        if (src < 0 || src >= T) continue;
        for (Index c = 0; c < Cin; ++c) out(c * K + k, b * T + t) = in(c, b * T + src);
      }
  return out;
}

MatrixXd col2im(const MatrixXd& cols, Index Cin, Index T, Index B, Index K) {
  const Index pad = (K - 1) / 2;
  MatrixXd out = MatrixXd::Zero(Cin, T * B);
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index k = 0; k < K; ++k) {
        const Index src = t + k - pad;
        if (src < 0 || src >= T) continue;
        for (Index c = 0; c < Cin; ++c) out(c, b * T + src) += cols(c * K + k, b * T + t);
      }
  return out;
}

MatrixXd relu(const MatrixXd& x) { return x.cwiseMax(0.0); }
MatrixXd relu_mask(const MatrixXd& pre) { return (pre.array() > 0.0).cast<double>(); }
MatrixXd sigmoid(const MatrixXd& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

struct GruCache {
  MatrixXd gi;     // 3H x (T2*B), input projections by time
  MatrixXd hprev;  // H x (T2*B), by processing step
  MatrixXd r, z, n, ghn;
  MatrixXd h_final;
};

struct Cache {
  Index B = 0, T = 0, T2 = 0;
  MatrixXd col1, pre1, col2, pre2;
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> pool_src;  // F2 x (T2*B) source column in pre2
  MatrixXd pooled;  // F2 x (T2*B), column s*B + b
  GruCache gru[2];
  MatrixXd u, pre_e, z0, pre_h1, a_h1, mask1, pre_h2, a_h2, mask2, logits;
};

void gru_forward(const ClassifierParams& p, const std::string& prefix, bool reverse, const MatrixXd& pooled, Index T2,
                 Index B, GruCache& g) {
  const Index H = static_cast<Index>(p.arch.H);
  const auto Wih = p.matrix(prefix + "weight_ih");
  const auto Whh = p.matrix(prefix + "weight_hh");
  const auto bih = p.vector(prefix + "bias_ih");
  const auto bhh = p.vector(prefix + "bias_hh");
  g.gi = Wih * pooled;
  g.gi.colwise() += bih;
  g.hprev.resize(H, T2 * B);
  g.r.resize(H, T2 * B);
  g.z.resize(H, T2 * B);
  g.n.resize(H, T2 * B);
  g.ghn.resize(H, T2 * B);
  MatrixXd h = MatrixXd::Zero(H, B);
  MatrixXd gh(3 * H, B);
  for (Index i = 0; i < T2; ++i) {
    const Index s = reverse ? T2 - 1 - i : i;
    const auto gi = g.gi.middleCols(s * B, B);
    gh.noalias() = Whh * h;
    gh.colwise() += bhh;
    const MatrixXd r = sigmoid(gi.topRows(H) + gh.topRows(H));
    const MatrixXd z = sigmoid(gi.middleRows(H, H) + gh.middleRows(H, H));
    const MatrixXd n = (gi.bottomRows(H).array() + r.array() * gh.bottomRows(H).array()).tanh().matrix();
    g.hprev.middleCols(i * B, B) = h;
    g.r.middleCols(i * B, B) = r;
    g.z.middleCols(i * B, B) = z;
    g.n.middleCols(i * B, B) = n;
    g.ghn.middleCols(i * B, B) = gh.bottomRows(H);
    h = ((1.0 - z.array()) * n.array() + z.array() * h.array()).matrix();
  }
  g.h_final = h;
}

void run_forward(const ClassifierParams& p, const Batch& batch, std::mt19937_64* rng, Cache& c) {
  const Architecture& a = p.arch;
  const Index C = static_cast<Index>(a.C), T = static_cast<Index>(a.T), B = static_cast<Index>(batch.size());
  if (batch.x.rows() != C * T) throw Error("classifier input has the wrong size");
  if (batch.load_index.size() != batch.size()) throw Error("classifier batch needs one load index per sample");
  if (B == 0) throw Error("empty batch");
  c.B = B;
  c.T = T;
  c.T2 = T / static_cast<Index>(a.pool);

  MatrixXd in0(C, T * B);
  for (Index b = 0; b < B; ++b)
    for (Index ch = 0; ch < C; ++ch) in0.block(ch, b * T, 1, T) = batch.x.block(ch * T, b, T, 1).transpose();

  c.col1 = im2col(in0, C, T, B, static_cast<Index>(a.K1));
  c.pre1 = p.matrix("conv1.weight") * c.col1;
  c.pre1.colwise() += p.vector("conv1.bias");
  const MatrixXd a1 = relu(c.pre1);
  c.col2 = im2col(a1, static_cast<Index>(a.F1), T, B, static_cast<Index>(a.K2));
  c.pre2 = p.matrix("conv2.weight") * c.col2;
  c.pre2.colwise() += p.vector("conv2.bias");

  const Index F2 = static_cast<Index>(a.F2), P = static_cast<Index>(a.pool), T2 = c.T2;
  c.pooled.resize(F2, T2 * B);
  c.pool_src.resize(F2, T2 * B);
  for (Index b = 0; b < B; ++b)
    for (Index s = 0; s < T2; ++s)
      for (Index f = 0; f < F2; ++f) {
        Index best = b * T + s * P;
        double v = std::max(c.pre2(f, best), 0.0);
        for (Index j = 1; j < P; ++j) {
          const double w = std::max(c.pre2(f, b * T + s * P + j), 0.0);
          if (w > v) {
            v = w;
            best = b * T + s * P + j;
          }
        }
        c.pooled(f, s * B + b) = v;
        c.pool_src(f, s * B + b) = best;
      }

  gru_forward(p, "gru.fwd.", false, c.pooled, T2, B, c.gru[0]);
  gru_forward(p, "gru.bwd.", true, c.pooled, T2, B, c.gru[1]);

  const Index H = static_cast<Index>(a.H), E = static_cast<Index>(a.E);
  c.u.resize(1, B);
  const double scale = a.n_loads > 1 ? 1.0 / static_cast<double>(a.n_loads - 1) : 0.0;
  for (Index b = 0; b < B; ++b) c.u(0, b) = static_cast<double>(batch.load_index[static_cast<std::size_t>(b)]) * scale;
  c.pre_e = p.matrix("embed.weight") * c.u;
  c.pre_e.colwise() += p.vector("embed.bias");

  c.z0.resize(2 * H + E, B);
  c.z0.topRows(H) = c.gru[0].h_final;
  c.z0.middleRows(H, H) = c.gru[1].h_final;
  c.z0.bottomRows(E) = relu(c.pre_e);

  auto dropout_mask = [&](Index rows) {
    MatrixXd m = MatrixXd::Ones(rows, B);
    if (rng && a.dropout > 0) {
      std::bernoulli_distribution keep(1.0 - a.dropout);
      const double s = 1.0 / (1.0 - a.dropout);
      for (Index j = 0; j < B; ++j)
        for (Index i = 0; i < rows; ++i) m(i, j) = keep(*rng) ? s : 0.0;
    }
    return m;
  };

  c.pre_h1 = p.matrix("fc1.weight") * c.z0;
  c.pre_h1.colwise() += p.vector("fc1.bias");
  c.mask1 = dropout_mask(c.pre_h1.rows());
  c.a_h1 = relu(c.pre_h1).cwiseProduct(c.mask1);
  c.pre_h2 = p.matrix("fc2.weight") * c.a_h1;
  c.pre_h2.colwise() += p.vector("fc2.bias");
  c.mask2 = dropout_mask(c.pre_h2.rows());
  c.a_h2 = relu(c.pre_h2).cwiseProduct(c.mask2);
  c.logits = p.matrix("fc3.weight") * c.a_h2;
  c.logits.colwise() += p.vector("fc3.bias");
  if (!c.logits.allFinite()) throw Error("classifier produced non-finite activations");
}

MatrixXd softmax(const MatrixXd& logits) {
  MatrixXd out(logits.rows(), logits.cols());
  for (Index j = 0; j < logits.cols(); ++j) {
    const double m = logits.col(j).maxCoeff();
    const Eigen::ArrayXd e = (logits.col(j).array() - m).exp();
    out.col(j) = e / e.sum();
  }
  return out;
}

class GradView {
 public:
  GradView(const ClassifierParams& p, Eigen::VectorXd& g) : p_(p), g_(g) {}
  Eigen::Map<RowMat> matrix(const std::string& name) {
    const auto& t = p_.info(name);
    return {g_.data() + t.offset, static_cast<Index>(t.shape[0]), static_cast<Index>(t.size() / t.shape[0])};
  }
  Eigen::Map<Eigen::VectorXd> vector(const std::string& name) {
    const auto& t = p_.info(name);
    return {g_.data() + t.offset, static_cast<Index>(t.size())};
  }

 private:
  const ClassifierParams& p_;
  Eigen::VectorXd& g_;
};

// Returns the gradient with respect to the pooled GRU input.
MatrixXd gru_backward(const ClassifierParams& p, const std::string& prefix, bool reverse, const MatrixXd& pooled,
                      const GruCache& g, MatrixXd dh, Index T2, Index B, GradView& grad) {
  const Index H = static_cast<Index>(p.arch.H);
  const auto Wih = p.matrix(prefix + "weight_ih");
  const auto Whh = p.matrix(prefix + "weight_hh");
  MatrixXd dgi(3 * H, T2 * B);   // by time
  MatrixXd dgh(3 * H, T2 * B);   // by processing step, aligned with hprev
  for (Index i = T2 - 1; i >= 0; --i) {
    const Index s = reverse ? T2 - 1 - i : i;
    const auto hp = g.hprev.middleCols(i * B, B).array();
    const auto r = g.r.middleCols(i * B, B).array();
    const auto z = g.z.middleCols(i * B, B).array();
    const auto n = g.n.middleCols(i * B, B).array();
    const auto ghn = g.ghn.middleCols(i * B, B).array();
    const Eigen::ArrayXXd dn = dh.array() * (1.0 - z);
    const Eigen::ArrayXXd dz = dh.array() * (hp - n);
    const Eigen::ArrayXXd dan = dn * (1.0 - n * n);
    const Eigen::ArrayXXd dar = dan * ghn * r * (1.0 - r);
    const Eigen::ArrayXXd daz = dz * z * (1.0 - z);
    auto gi = dgi.middleCols(s * B, B);
    gi.topRows(H) = dar.matrix();
    gi.middleRows(H, H) = daz.matrix();
    gi.bottomRows(H) = dan.matrix();
    auto gh = dgh.middleCols(i * B, B);
    gh.topRows(H) = dar.matrix();
    gh.middleRows(H, H) = daz.matrix();
    gh.bottomRows(H) = (dan * r).matrix();
    dh = (dh.array() * z).matrix();
    dh.noalias() += Whh.transpose() * gh;
  }
  grad.matrix(prefix + "weight_hh").noalias() += dgh * g.hprev.transpose();
  grad.vector(prefix + "bias_hh") += dgh.rowwise().sum();
  grad.matrix(prefix + "weight_ih").noalias() += dgi * pooled.transpose();
  grad.vector(prefix + "bias_ih") += dgi.rowwise().sum();
  return Wih.transpose() * dgi;
}

}  // namespace

ForwardResult forward(const ClassifierParams& params, const Batch& batch) {
  Cache c;
  run_forward(params, batch, nullptr, c);
  return {c.logits, softmax(c.logits)};
}

LossAndGrads loss_and_grads(const ClassifierParams& params, const Batch& batch, std::mt19937_64* rng) {
  if (batch.size() == 0) throw Error("loss needs a non-empty batch");
  if (batch.label.size() != batch.size()) throw Error("loss needs a label per sample");
  const Architecture& a = params.arch;
  Cache c;
  run_forward(params, batch, rng, c);
  const Index B = c.B, T = c.T, T2 = c.T2;
  const Index H = static_cast<Index>(a.H), E = static_cast<Index>(a.E);

  const MatrixXd prob = softmax(c.logits);
  LossAndGrads out;
  out.grads = Eigen::VectorXd::Zero(params.values.size());
  MatrixXd dlogits = prob;
  for (Index b = 0; b < B; ++b) {
    const int y = batch.label[static_cast<std::size_t>(b)];
    if (y < 0 || y > 1) throw Error("labels must be 0 or 1");
    const double m = c.logits.col(b).maxCoeff();
    const double lse = m + std::log((c.logits.col(b).array() - m).exp().sum());
    out.loss += lse - c.logits(y, b);
    dlogits(y, b) -= 1.0;
  }
  out.loss /= static_cast<double>(B);
  if (!std::isfinite(out.loss)) throw Error("non-finite loss");
  dlogits /= static_cast<double>(B);

  GradView g(params, out.grads);
  g.matrix("fc3.weight").noalias() = dlogits * c.a_h2.transpose();
  g.vector("fc3.bias") = dlogits.rowwise().sum();
  MatrixXd d = params.matrix("fc3.weight").transpose() * dlogits;
  d = d.cwiseProduct(c.mask2).cwiseProduct(relu_mask(c.pre_h2));
  g.matrix("fc2.weight").noalias() = d * c.a_h1.transpose();
  g.vector("fc2.bias") = d.rowwise().sum();
  d = params.matrix("fc2.weight").transpose() * d;
  d = d.cwiseProduct(c.mask1).cwiseProduct(relu_mask(c.pre_h1));
  g.matrix("fc1.weight").noalias() = d * c.z0.transpose();
  g.vector("fc1.bias") = d.rowwise().sum();
  const MatrixXd dz0 = params.matrix("fc1.weight").transpose() * d;

  const MatrixXd de = dz0.bottomRows(E).cwiseProduct(relu_mask(c.pre_e));
  g.matrix("embed.weight").noalias() = de * c.u.transpose();
  g.vector("embed.bias") = de.rowwise().sum();

  MatrixXd dpooled = gru_backward(params, "gru.fwd.", false, c.pooled, c.gru[0], dz0.topRows(H), T2, B, g);
  dpooled += gru_backward(params, "gru.bwd.", true, c.pooled, c.gru[1], dz0.middleRows(H, H), T2, B, g);

  const Index F2 = static_cast<Index>(a.F2);
  MatrixXd dpre2 = MatrixXd::Zero(F2, T * B);
  for (Index col = 0; col < T2 * B; ++col)
    for (Index f = 0; f < F2; ++f) {
      const Index src = c.pool_src(f, col);
      if (c.pre2(f, src) > 0.0) dpre2(f, src) += dpooled(f, col);
    }
  g.matrix("conv2.weight").noalias() = dpre2 * c.col2.transpose();
  g.vector("conv2.bias") = dpre2.rowwise().sum();
  MatrixXd da1 = col2im(params.matrix("conv2.weight").transpose() * dpre2, static_cast<Index>(a.F1), T, B,
                        static_cast<Index>(a.K2));
  da1 = da1.cwiseProduct(relu_mask(c.pre1));
  g.matrix("conv1.weight").noalias() = da1 * c.col1.transpose();
  g.vector("conv1.bias") = da1.rowwise().sum();
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

Verdict predict(double p_unstable, double tau) { return p_unstable < tau ? Verdict::stable : Verdict::unstable; }

std::vector<double> predict_unstable_probability(const ClassifierParams& params, const SplitData& split,
                                                 std::size_t batch_size) {
  std::vector<double> out;
  out.reserve(split.size());
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) idx.push_back(i);
    const auto r = forward(params, make_batch(split, idx, params.arch.C, params.arch.T));
    for (Index j = 0; j < r.probabilities.cols(); ++j) out.push_back(r.probabilities(1, j));
  }
  return out;
}

EvalReport report_from_predictions(const std::vector<int>& truth, const std::vector<int>& predicted, double tau) {
  if (truth.empty()) throw Error("cannot evaluate an empty split");
  if (truth.size() != predicted.size()) throw Error("prediction count does not match labels");
  EvalReport r;
  r.tau = tau;
  for (std::size_t i = 0; i < truth.size(); ++i) r.confusion[truth[i]][predicted[i]]++;
  auto metrics = [&](int k) {
    ClassMetrics m;
    const double tp = static_cast<double>(r.confusion[k][k]);
    const double pred = static_cast<double>(r.confusion[0][k] + r.confusion[1][k]);
    m.support = r.confusion[k][0] + r.confusion[k][1];
    m.precision = pred > 0 ? tp / pred : 0.0;
    m.recall = m.support > 0 ? tp / static_cast<double>(m.support) : 0.0;
    m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
  };
  r.stable = metrics(0);
  r.unstable = metrics(1);
  const double n = static_cast<double>(truth.size());
  r.accuracy = static_cast<double>(r.confusion[0][0] + r.confusion[1][1]) / n;
  r.macro_avg = {(r.stable.precision + r.unstable.precision) / 2, (r.stable.recall + r.unstable.recall) / 2,
                 (r.stable.f1 + r.unstable.f1) / 2, truth.size()};
  const double ws = static_cast<double>(r.stable.support) / n, wu = static_cast<double>(r.unstable.support) / n;
  r.weighted_avg = {ws * r.stable.precision + wu * r.unstable.precision, ws * r.stable.recall + wu * r.unstable.recall,
                    ws * r.stable.f1 + wu * r.unstable.f1, truth.size()};
  return r;
}

EvalReport evaluate(const std::vector<double>& p_unstable, const std::vector<int>& truth, double tau) {
  std::vector<int> predicted;
  for (double p : p_unstable) predicted.push_back(predict(p, tau) == Verdict::stable ? 0 : 1);
  return report_from_predictions(truth, predicted, tau);
}

EvalReport evaluate(const ClassifierParams& params, const SplitData& split, double tau) {
  return evaluate(predict_unstable_probability(params, split), split.label, tau);
}

json to_json(const EvalReport& r) {
  auto m = [](const ClassMetrics& c) {
    return json{{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}};
  };
  return {{"tau", r.tau},
          {"STABLE", m(r.stable)},
          {"UNSTABLE", m(r.unstable)},
          {"accuracy", r.accuracy},
          {"macro_avg", m(r.macro_avg)},
          {"weighted_avg", m(r.weighted_avg)},
          {"support", r.total()},
          {"confusion", {{"labels", {"STABLE", "UNSTABLE"}},
                         {"matrix", {{r.confusion[0][0], r.confusion[0][1]}, {r.confusion[1][0], r.confusion[1][1]}}}}}};
}

std::string format_report(const EvalReport& r) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "Classification Report, tau = %g\n", r.tau);
  out << line;
  std::snprintf(line, sizeof line, "%-14s %10s %10s %10s %16s\n", "", "Precision", "Recall", "F1-score",
                "Number of Cases");
  out << line;
  auto row = [&](const char* name, const ClassMetrics& m) {
    std::snprintf(line, sizeof line, "%-14s %10.2f %10.2f %10.2f %16zu\n", name, m.precision, m.recall, m.f1,
                  m.support);
    out << line;
  };
  row("STABLE", r.stable);
  row("UNSTABLE", r.unstable);
  std::snprintf(line, sizeof line, "%-14s %10s %10s %10.2f %16zu\n", "Accuracy", "", "", r.accuracy, r.total());
  out << line;
  row("Macro avg", r.macro_avg);
  row("Weighted avg", r.weighted_avg);
  return out.str();
}

std::vector<double> default_tau_grid(std::size_t n) {
  // Log-spaced from 1e-4 to 0.999.
  std::vector<double> g;
  const double lo = std::log(1e-4), hi = std::log(0.999);
  for (std::size_t i = 0; i < n; ++i)
    g.push_back(std::exp(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(n - 1, 1))));
  return g;
}

ThresholdSweep sweep_threshold(const std::vector<double>& p_unstable, const std::vector<int>& truth,
                               double target_precision, const std::vector<double>& grid) {
  if (truth.empty() || truth.size() != p_unstable.size()) throw Error("threshold sweep needs labeled predictions");
  ThresholdSweep s;
  s.target_precision = target_precision;
  std::size_t stable_total = 0;
  for (int y : truth) stable_total += y == 0;
  for (double tau : grid) {
    ThresholdPoint pt;
    pt.tau = tau;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
      if (predict(p_unstable[i], tau) == Verdict::stable) {
        ++pt.predicted_stable;
        tp += truth[i] == 0;
      }
    pt.precision = pt.predicted_stable ? static_cast<double>(tp) / static_cast<double>(pt.predicted_stable) : 0.0;
    pt.recall = stable_total ? static_cast<double>(tp) / static_cast<double>(stable_total) : 0.0;
    if (pt.predicted_stable > 0 && pt.precision >= target_precision && (!s.tau || tau > *s.tau)) s.tau = tau;
    s.curve.push_back(pt);
  }
  return s;
}

ThresholdSweep sweep_threshold(const ClassifierParams& params, const SplitData& val, double target_precision,
                               const std::vector<double>& grid) {
  return sweep_threshold(predict_unstable_probability(params, val), val.label, target_precision, grid);
}

json to_json(const ThresholdSweep& s) {
  json curve = json::array();
  for (const auto& p : s.curve)
    curve.push_back(
        {{"tau", p.tau}, {"precision", p.precision}, {"recall", p.recall}, {"predicted_stable", p.predicted_stable}});
  return {{"tau", s.tau ? json(*s.tau) : json(nullptr)},
          {"target_precision", s.target_precision},
          {"reached", s.tau.has_value()},
          {"curve", curve}};
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error("batch size must be at least 1");
  if (patience < 1) throw Error("patience must be at least 1");
  if (max_epochs < 1) throw Error("max_epochs must be at least 1");
  if (!(learning_rate > 0)) throw Error("learning rate must be positive");
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
       {"patience", c.patience},           {"seed", c.seed},             {"beta1", c.beta1},
       {"beta2", c.beta2},                 {"eps", c.eps},               {"grad_clip", c.grad_clip},
       {"early_stopping", c.early_stopping}};
}

void from_json(const json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.early_stopping = j.value("early_stopping", c.early_stopping);
}

TrainResult train(const SplitData& train_split, const SplitData& val_split, const Architecture& arch,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  arch.validate();
  if (train_split.size() == 0) throw Error("training split is empty");
  if (config.early_stopping && val_split.size() == 0) throw Error("early stopping needs a validation split");

  TrainResult result;
  ClassifierParams params = init_params(arch, config.seed);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const Index P = params.values.size();
  Eigen::VectorXd m = Eigen::VectorXd::Zero(P), v = Eigen::VectorXd::Zero(P);
  long step = 0;
  double best_f1 = -1.0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(order.size(), start + config.batch_size)));
      const Batch batch = make_batch(train_split, idx, arch.C, arch.T);
      LossAndGrads lg = loss_and_grads(params, batch, &rng);
      loss_sum += lg.loss * static_cast<double>(idx.size());
      if (config.grad_clip > 0) {
        const double norm = lg.grads.norm();
        if (norm > config.grad_clip) lg.grads *= config.grad_clip / norm;
      }
      ++step;
      m = config.beta1 * m + (1.0 - config.beta1) * lg.grads;
      v = config.beta2 * v + (1.0 - config.beta2) * lg.grads.cwiseAbs2();
      const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      params.values.array() -=
          config.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + config.eps);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    if (val_split.size() > 0) {
      const auto p = predict_unstable_probability(params, val_split);
      double vl = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = val_split.label[i] == 1 ? p[i] : 1.0 - p[i];
        vl -= std::log(std::max(q, 1e-300));
      }
      rec.val_loss = vl / static_cast<double>(p.size());
      const EvalReport r = evaluate(p, val_split.label, 0.5);
      rec.val_macro_f1 = r.macro_avg.f1;
      rec.val_accuracy = r.accuracy;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (config.early_stopping) {
      if (rec.val_macro_f1 > best_f1) {
        best_f1 = rec.val_macro_f1;
        result.params = params;
        result.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= config.patience) {
        break;
      }
    }
  }
  if (!config.early_stopping) {
    result.params = params;
    result.best_epoch = result.history.size();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Weights files

void save_weights(const fs::path& path, const ModelBundle& bundle) {
  const ClassifierParams& p = bundle.params;
  std::string blob(static_cast<std::size_t>(p.values.size()) * sizeof(float), '\0');
  for (Index i = 0; i < p.values.size(); ++i) {
    const float f = static_cast<float>(p.values[i]);
    std::memcpy(blob.data() + static_cast<std::size_t>(i) * sizeof(float), &f, sizeof f);
  }
  json tensors = json::array();
  for (const auto& t : p.tensors)
    tensors.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"dtype", "float32"},
                       {"offset", t.offset * sizeof(float)},
                       {"bytes", t.size() * sizeof(float)}});
  json manifest = {{"format", "gridshed-weights-1"},
                   {"blob", path.filename().string()},
                   {"byte_order", "little"},
                   {"dtype", "float32"},
                   {"parameter_count", p.values.size()},
                   {"architecture", p.arch},
                   {"seed", p.seed},
                   {"tensors", tensors},
                   {"normalization",
                    {{"channels", bundle.channels},
                     {"mean", std::vector<double>(bundle.mean.data(), bundle.mean.data() + bundle.mean.size())},
                     {"std", std::vector<double>(bundle.stddev.data(), bundle.stddev.data() + bundle.stddev.size())}}},
                   {"tau", bundle.tau},
                   {"extra", bundle.extra}};
  write_file_atomic(path, blob);
  write_file_atomic(fs::path(path.string() + ".json"), manifest.dump(2) + "\n");
}

ModelBundle load_weights(const fs::path& path) {
  ModelBundle b;
  try {
    const json m = json::parse(read_file(fs::path(path.string() + ".json")));
    const Architecture arch = m.at("architecture").get<Architecture>();
    b.params = zero_params(arch);
    b.params.seed = m.value("seed", std::uint64_t{0});
    const std::string blob = read_file(path);
    for (const auto& t : m.at("tensors")) {
      const auto& info = b.params.info(t.at("name").get<std::string>());
      if (t.at("shape").get<std::vector<std::size_t>>() != info.shape)
        throw Error("tensor " + info.name + " has an unexpected shape");
      const std::size_t off = t.at("offset").get<std::size_t>();
      if (off + info.size() * sizeof(float) > blob.size()) throw Error("weights blob is truncated");
      for (std::size_t i = 0; i < info.size(); ++i) {
        float f;
        std::memcpy(&f, blob.data() + off + i * sizeof(float), sizeof f);
        b.params.values[static_cast<Index>(info.offset + i)] = f;
      }
    }
    const auto& norm = m.at("normalization");
    b.channels = norm.at("channels").get<std::vector<std::string>>();
    const auto mean = norm.at("mean").get<std::vector<double>>();
    const auto sd = norm.at("std").get<std::vector<double>>();
    b.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Index>(mean.size()));
    b.stddev = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Index>(sd.size()));
    b.tau = m.value("tau", 0.5);
    b.extra = m.value("extra", json::object());
  } catch (const json::exception& e) {
    throw Error(std::string("malformed weights manifest: ") + e.what());
  }
  return b;
}

}  // namespace gridshed
