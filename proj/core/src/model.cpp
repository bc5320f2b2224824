#include "icdyn/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "icdyn/errors.hpp"
#include "icdyn/parallel.hpp"
#include "icdyn/rng.hpp"

namespace icdyn {

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || d_k < 1 || n_layers < 1 || ffn_mult < 1 || block_size < 1) {
    throw InvalidArgument("ModelConfig: all sizes must be positive");
  }
  if (d_k > d_model) throw InvalidArgument("ModelConfig: d_k must not exceed d_model");
  if (!std::isfinite(alibi_slope) || alibi_slope < 0.0) {
    throw InvalidArgument("ModelConfig: alibi_slope must be finite and non-negative");
  }
}

namespace {

enum Slot { kLn1Gain, kLn1Bias, kWq, kWk, kWv, kLn2Gain, kLn2Bias, kW1, kB1, kW2, kB2 };

constexpr double kLayerNormEps = 1e-5;

}  // namespace

ParamLayout::ParamLayout(const ModelConfig& config) {
  config.validate();
  auto add = [&](std::string name, int rows, int cols) {
    index_.push_back(tensors_.size());
    tensors_.push_back({std::move(name), rows, cols, total_});
    total_ += static_cast<std::size_t>(rows) * cols;
  };
  const int d = config.d_model;
  add("tok_emb", config.rows(), d);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "ln1.gain", 1, d);
    add(p + "ln1.bias", 1, d);
    add(p + "attn.wq", d, config.d_k);
    add(p + "attn.wk", d, config.d_k);
    add(p + "attn.wv", d, d);
    add(p + "ln2.gain", 1, d);
    add(p + "ln2.bias", 1, d);
    add(p + "ffn.w1", d, config.d_ff());
    add(p + "ffn.b1", 1, config.d_ff());
    add(p + "ffn.w2", config.d_ff(), d);
    add(p + "ffn.b2", 1, d);
  }
  add("ln_f.gain", 1, d);
  add("ln_f.bias", 1, d);
}

const TensorInfo& ParamLayout::at(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw InvalidArgument("ParamLayout: no tensor named '" + name + "'");
}

template <class Real>
ModelParams<Real> ModelParams<Real>::zeros(const ModelConfig& config) {
  ParamLayout layout(config);
  return {config, ParamVector<Real>(layout.total(), Real(0))};
}

template <class Real>
ModelParams<Real> init_params(const ModelConfig& config, std::uint64_t seed) {
  ParamLayout layout(config);
  ModelParams<Real> params{config, ParamVector<Real>(layout.total(), Real(0))};
  Rng rng(seed);
  for (const auto& t : layout.tensors()) {
    const bool is_gain = t.name.ends_with(".gain");
    const bool is_bias = t.name.ends_with(".bias") || t.name.ends_with(".b1") ||
                         t.name.ends_with(".b2");
    for (std::size_t i = 0; i < t.size(); ++i) {
      Real& x = params.values[t.offset + i];
      if (is_gain) {
        x = Real(1);
      } else if (is_bias) {
        x = Real(0);
      } else {
        x = static_cast<Real>(0.02 * rng.normal());
      }
    }
  }
  return params;
}

RowMatrix<double> alibi_bias(int T, double alpha) {
  if (T < 1) throw InvalidArgument("alibi_bias: T must be >= 1");
  RowMatrix<double> bias(T, T);
  for (int i = 0; i < T; ++i) {
    for (int j = 0; j < T; ++j) {
      bias(i, j) = j > i ? -std::numeric_limits<double>::infinity()
                         : -alpha * static_cast<double>(i - j);
    }
  }
  return bias;
}

namespace {

template <class Real>
using Mat = RowMatrix<Real>;
template <class Real>
using Col = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
template <class Real>
using CMap = Eigen::Map<const RowMatrix<Real>>;
template <class Real>
using MMap = Eigen::Map<RowMatrix<Real>>;

template <class Real>
void layer_norm(const Mat<Real>& x, const CMap<Real>& gain, const CMap<Real>& bias, Mat<Real>& xhat,
                Col<Real>& rstd, Mat<Real>& out) {
  const auto T = x.rows();
  const auto d = x.cols();
  xhat.resize(T, d);
  out.resize(T, d);
  rstd.resize(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const Real mean = x.row(t).mean();
    const Real var = (x.row(t).array() - mean).square().mean();
    const Real r = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    rstd(t) = r;
    xhat.row(t) = (x.row(t).array() - mean) * r;
    out.row(t) = xhat.row(t).cwiseProduct(gain.row(0)) + bias.row(0);
  }
}

// Returns dL/dx and accumulates gain/bias gradients.
template <class Real>
Mat<Real> layer_norm_backward(const Mat<Real>& dy, const Mat<Real>& xhat, const Col<Real>& rstd,
                              const CMap<Real>& gain, MMap<Real> dgain, MMap<Real> dbias) {
  dgain.row(0) += dy.cwiseProduct(xhat).colwise().sum();
  dbias.row(0) += dy.colwise().sum();
  Mat<Real> dx(dy.rows(), dy.cols());
  for (Eigen::Index t = 0; t < dy.rows(); ++t) {
    const auto dxhat = dy.row(t).cwiseProduct(gain.row(0));
    const Real m1 = dxhat.mean();
    const Real m2 = dxhat.cwiseProduct(xhat.row(t)).mean();
    dx.row(t) = rstd(t) * (dxhat.array() - m1 - xhat.row(t).array() * m2);
  }
  return dx;
}

template <class Real>
struct Views {
  const ModelParams<Real>& params;
  const ParamLayout& layout;
  CMap<Real> get(std::size_t index) const { return params.tensor(layout.tensors()[index]); }
  CMap<Real> layer(int l, int slot) const { return get(layout.layer_tensor(l, slot)); }
};

template <class Real>
MMap<Real> grad_view(ParamVector<Real>& grads, const ParamLayout& layout, std::size_t index) {
  const auto& info = layout.tensors()[index];
  return {grads.data() + info.offset, info.rows, info.cols};
}

void check_tokens(std::span<const Token> tokens, const ModelConfig& config) {
  if (tokens.empty()) throw InvalidArgument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > config.block_size) {
    throw InvalidArgument("forward: sequence length " + std::to_string(tokens.size()) +
                          " exceeds block size " + std::to_string(config.block_size));
  }
  for (Token t : tokens) {
    if (t < 0 || t > config.vocab_size) {
      throw InvalidArgument("forward: token " + std::to_string(t) + " outside vocabulary");
    }
  }
}

template <class Real>
ForwardTrace<Real> forward_impl(std::span<const Token> tokens, const ModelParams<Real>& params,
                                const ParamLayout& layout) {
  const ModelConfig& cfg = params.config;
  check_tokens(tokens, cfg);
  const Views<Real> w{params, layout};
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const Real inv_sqrt_dk = Real(1) / std::sqrt(static_cast<Real>(cfg.d_k));
  const Real slope = static_cast<Real>(cfg.alibi_slope);

  ForwardTrace<Real> tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  const auto E = w.get(layout.embedding());
  Mat<Real> h(T, cfg.d_model);
  for (Eigen::Index t = 0; t < T; ++t) h.row(t) = E.row(tokens[t]);

  tr.layers.resize(cfg.n_layers);
  tr.attentions.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& c = tr.layers[l];
    c.input = h;
    layer_norm<Real>(h, w.layer(l, kLn1Gain), w.layer(l, kLn1Bias), c.xhat1, c.rstd1, c.ln1);
    c.q.noalias() = c.ln1 * w.layer(l, kWq);
    c.k.noalias() = c.ln1 * w.layer(l, kWk);
    c.v.noalias() = c.ln1 * w.layer(l, kWv);

    Mat<Real>& A = tr.attentions[l];
    A.noalias() = c.q * c.k.transpose();
    for (Eigen::Index i = 0; i < T; ++i) {
      Real m = -std::numeric_limits<Real>::infinity();
      for (Eigen::Index j = 0; j <= i; ++j) {
        A(i, j) = A(i, j) * inv_sqrt_dk - slope * static_cast<Real>(i - j);
        m = std::max(m, A(i, j));
      }
      Real sum = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        A(i, j) = std::exp(A(i, j) - m);
        sum += A(i, j);
      }
      const Real inv = Real(1) / sum;
      for (Eigen::Index j = 0; j <= i; ++j) A(i, j) *= inv;
      for (Eigen::Index j = i + 1; j < T; ++j) A(i, j) = Real(0);
    }
    c.attn.noalias() = A * c.v;
    c.mid = h + c.attn;

    layer_norm<Real>(c.mid, w.layer(l, kLn2Gain), w.layer(l, kLn2Bias), c.xhat2, c.rstd2, c.ln2);
    c.ffn_pre.noalias() = c.ln2 * w.layer(l, kW1);
    c.ffn_pre.rowwise() += w.layer(l, kB1).row(0);
    c.ffn_act = c.ffn_pre.cwiseMax(Real(0));
    h = c.mid;
    h.noalias() += c.ffn_act * w.layer(l, kW2);
    h.rowwise() += w.layer(l, kB2).row(0);
  }
  tr.final_input = h;
  layer_norm<Real>(h, w.get(layout.final_gain()), w.get(layout.final_bias()), tr.final_xhat,
                   tr.final_rstd, tr.final_out);
  tr.logits.noalias() = tr.final_out * E.transpose();
  return tr;
}

// Accumulates parameter gradients for one sequence given dL/dlogits.
template <class Real>
void backward_impl(const ForwardTrace<Real>& tr, const Mat<Real>& dlogits,
                   const ModelParams<Real>& params, const ParamLayout& layout,
                   ParamVector<Real>& grads) {
  const ModelConfig& cfg = params.config;
  const Views<Real> w{params, layout};
  const Real inv_sqrt_dk = Real(1) / std::sqrt(static_cast<Real>(cfg.d_k));
  const auto E = w.get(layout.embedding());
  auto dE = grad_view(grads, layout, layout.embedding());

  dE.noalias() += dlogits.transpose() * tr.final_out;
  Mat<Real> dz = dlogits * E;
  Mat<Real> dh = layer_norm_backward<Real>(dz, tr.final_xhat, tr.final_rstd,
                                           w.get(layout.final_gain()),
                                           grad_view(grads, layout, layout.final_gain()),
                                           grad_view(grads, layout, layout.final_bias()));

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& c = tr.layers[l];
    const auto& A = tr.attentions[l];
    auto g = [&](int slot) { return grad_view(grads, layout, layout.layer_tensor(l, slot)); };

    // h_out = mid + relu(ln2 W1 + b1) W2 + b2
    g(kW2).noalias() += c.ffn_act.transpose() * dh;
    g(kB2).row(0) += dh.colwise().sum();
    Mat<Real> dpre = dh * w.layer(l, kW2).transpose();
    dpre = dpre.cwiseProduct((c.ffn_pre.array() > Real(0)).template cast<Real>().matrix());
    g(kW1).noalias() += c.ln2.transpose() * dpre;
    g(kB1).row(0) += dpre.colwise().sum();
    Mat<Real> dln2 = dpre * w.layer(l, kW1).transpose();
    Mat<Real> dmid = dh + layer_norm_backward<Real>(dln2, c.xhat2, c.rstd2, w.layer(l, kLn2Gain),
                                                    g(kLn2Gain), g(kLn2Bias));

    // mid = input + softmax(q k^T / sqrt(d_k) + bias) v
    Mat<Real> dA = dmid * c.v.transpose();
    Mat<Real> dv = A.transpose() * dmid;
    Mat<Real> dS(A.rows(), A.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      Real dot = 0;
      for (Eigen::Index j = 0; j <= i; ++j) dot += A(i, j) * dA(i, j);
      for (Eigen::Index j = 0; j <= i; ++j) dS(i, j) = A(i, j) * (dA(i, j) - dot) * inv_sqrt_dk;
      for (Eigen::Index j = i + 1; j < A.cols(); ++j) dS(i, j) = Real(0);
    }
    Mat<Real> dq = dS * c.k;
    Mat<Real> dk = dS.transpose() * c.q;
    g(kWq).noalias() += c.ln1.transpose() * dq;
    g(kWk).noalias() += c.ln1.transpose() * dk;
    g(kWv).noalias() += c.ln1.transpose() * dv;
    Mat<Real> dln1 = dq * w.layer(l, kWq).transpose();
    dln1.noalias() += dk * w.layer(l, kWk).transpose();
    dln1.noalias() += dv * w.layer(l, kWv).transpose();
    dh = dmid + layer_norm_backward<Real>(dln1, c.xhat1, c.rstd1, w.layer(l, kLn1Gain),
                                          g(kLn1Gain), g(kLn1Bias));
  }
  for (std::size_t t = 0; t < tr.tokens.size(); ++t) {
    dE.row(tr.tokens[t]) += dh.row(static_cast<Eigen::Index>(t));
  }
}

// Sum over counted positions of weight * CE; fills dlogits if requested.
template <class Real>
double cross_entropy(const Mat<Real>& logits, std::span<const Token> targets, double weight,
                     Mat<Real>* dlogits) {
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const Token y = targets[t];
    if (y == kPaddingToken) continue;
    const Real m = logits.row(t).maxCoeff();
    const auto shifted = (logits.row(t).array() - m).exp();
    const Real sum = shifted.sum();
    const double lse = static_cast<double>(m) + std::log(static_cast<double>(sum));
    total += weight * (lse - static_cast<double>(logits(t, y)));
    if (dlogits) {
      dlogits->row(t) = (shifted / sum * static_cast<Real>(weight)).matrix();
      (*dlogits)(t, y) -= static_cast<Real>(weight);
    }
  }
  return total;
}

void check_pair(const TrainingPair& pair, const ModelConfig& config) {
  if (pair.input.size() != pair.target.size()) {
    throw InvalidArgument("loss_and_gradients: input and target lengths differ");
  }
  check_tokens(pair.target, config);
}

long count_targets(const TrainingPair& pair) {
  return static_cast<long>(
      std::count_if(pair.target.begin(), pair.target.end(), [](Token t) { return t != kPaddingToken; }));
}

constexpr std::size_t kMaxSlots = 8;

}  // namespace

template <class Real>
ForwardTrace<Real> forward(std::span<const Token> tokens, const ModelParams<Real>& params) {
  const ParamLayout layout(params.config);
  if (params.values.size() != layout.total()) {
    throw InvalidArgument("forward: parameter buffer does not match config");
  }
  return forward_impl(tokens, params, layout);
}

template <class Real>
LossAndGradients<Real> loss_and_gradients(std::span<const TrainingPair> batch,
                                          const ModelParams<Real>& params, int micro_batches,
                                          int threads) {
  if (batch.empty()) throw InvalidArgument("loss_and_gradients: empty batch");
  const ParamLayout layout(params.config);
  if (params.values.size() != layout.total()) {
    throw InvalidArgument("loss_and_gradients: parameter buffer does not match config");
  }
  const std::size_t n = batch.size();
  const std::size_t groups = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(micro_batches, 1)), 1, n);
  std::vector<long> group_counts(groups, 0);
  std::vector<double> weights(n);
  for (std::size_t i = 0; i < n; ++i) {
    check_pair(batch[i], params.config);
    group_counts[i * groups / n] += count_targets(batch[i]);
  }
  long counted = 0;
  for (long c : group_counts) {
    if (c == 0) throw InvalidArgument("loss_and_gradients: a micro-batch has no non-padding targets");
    counted += c;
  }
  for (std::size_t i = 0; i < n; ++i) {
    weights[i] = 1.0 / (static_cast<double>(groups) * static_cast<double>(group_counts[i * groups / n]));
  }

  const std::size_t slots = std::min(n, kMaxSlots);
  std::vector<ParamVector<Real>> slot_grads(slots);
  std::vector<double> slot_loss(slots, 0.0);
  parallel_for(slots, threads, [&](std::size_t s) {
    slot_grads[s].assign(layout.total(), Real(0));
    Mat<Real> dlogits;
    for (std::size_t i = s; i < n; i += slots) {
      const auto tr = forward_impl<Real>(batch[i].input, params, layout);
      slot_loss[s] += cross_entropy<Real>(tr.logits, batch[i].target, weights[i], &dlogits);
      backward_impl<Real>(tr, dlogits, params, layout, slot_grads[s]);
    }
  });

  LossAndGradients<Real> out;
  out.counted_targets = counted;
  out.grads = std::move(slot_grads[0]);
  out.loss = slot_loss[0];
  for (std::size_t s = 1; s < slots; ++s) {
    for (std::size_t k = 0; k < out.grads.size(); ++k) out.grads[k] += slot_grads[s][k];
    out.loss += slot_loss[s];
  }
  return out;
}

template <class Real>
double batch_loss(std::span<const TrainingPair> batch, const ModelParams<Real>& params, int threads) {
  if (batch.empty()) throw InvalidArgument("batch_loss: empty batch");
  const ParamLayout layout(params.config);
  long counted = 0;
  for (const auto& pair : batch) {
    check_pair(pair, params.config);
    counted += count_targets(pair);
  }
  if (counted == 0) throw InvalidArgument("batch_loss: no non-padding targets");
  std::vector<double> per(batch.size(), 0.0);
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    const auto tr = forward_impl<Real>(batch[i].input, params, layout);
    per[i] = cross_entropy<Real>(tr.logits, batch[i].target, 1.0, nullptr);
  });
  double total = 0.0;
  for (double x : per) total += x;
  return total / static_cast<double>(counted);
}

#define ICDYN_INSTANTIATE(Real)                                                               \
  template struct ModelParams<Real>;                                                          \
  template ModelParams<Real> init_params<Real>(const ModelConfig&, std::uint64_t);            \
  template ForwardTrace<Real> forward<Real>(std::span<const Token>, const ModelParams<Real>&); \
  template LossAndGradients<Real> loss_and_gradients<Real>(std::span<const TrainingPair>,     \
                                                           const ModelParams<Real>&, int, int); \
  template double batch_loss<Real>(std::span<const TrainingPair>, const ModelParams<Real>&, int);

ICDYN_INSTANTIATE(float)
ICDYN_INSTANTIATE(double)

}  // namespace icdyn
