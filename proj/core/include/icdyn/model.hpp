#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

#include "icdyn/quant.hpp"

namespace icdyn {

// Parameter-sized buffers are aligned so Eigen's vectorized reductions take
// the same path for every allocation, keeping results bitwise reproducible.
template <class Real>
using ParamVector = std::vector<Real, Eigen::aligned_allocator<Real>>;

struct ModelConfig {
  int vocab_size = 100;  // V bins; the embedding has V + 1 rows (row 0 = padding)
  int d_model = 256;
  int d_k = 128;
  int n_layers = 2;
  int ffn_mult = 2;
  int block_size = 512;
  double alibi_slope = 1.0;

  int rows() const { return vocab_size + 1; }
  int d_ff() const { return ffn_mult * d_model; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Flat parameter layout. Order: tok_emb, then per layer
// ln1.gain ln1.bias attn.wq attn.wk attn.wv ln2.gain ln2.bias ffn.w1 ffn.b1
// ffn.w2 ffn.b2, then ln_f.gain ln_f.bias. The output projection is tok_emb^T.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& at(const std::string& name) const;
  std::size_t total() const { return total_; }

  std::size_t embedding() const { return index_[0]; }
  // Index into tensors() for tensor `slot` (0..10) of layer `layer`.
  std::size_t layer_tensor(int layer, int slot) const { return index_[1 + layer * 11 + slot]; }
  std::size_t final_gain() const { return index_[index_.size() - 2]; }
  std::size_t final_bias() const { return index_.back(); }

 private:
  std::vector<TensorInfo> tensors_;
  std::vector<std::size_t> index_;
  std::size_t total_ = 0;
};

template <class Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Real>
struct ModelParams {
  ModelConfig config;
  ParamVector<Real> values;

  static ModelParams zeros(const ModelConfig& config);

  std::size_t size() const { return values.size(); }
  Eigen::Map<RowMatrix<Real>> tensor(const TensorInfo& info) {
    return {values.data() + info.offset, info.rows, info.cols};
  }
  Eigen::Map<const RowMatrix<Real>> tensor(const TensorInfo& info) const {
    return {values.data() + info.offset, info.rows, info.cols};
  }

  template <class Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out{config, ParamVector<Other>(values.size())};
    for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<Other>(values[i]);
    return out;
  }
};

// Gaussian(0, 0.02) for embeddings and projections, LayerNorm gains 1, biases 0.
template <class Real>
ModelParams<Real> init_params(const ModelConfig& config, std::uint64_t seed);

// Entry (i, j) = -alpha (i - j) for i >= j, -infinity above the diagonal.
RowMatrix<double> alibi_bias(int T, double alpha);

template <class Real>
struct LayerCache {
  RowMatrix<Real> input, xhat1, ln1, q, k, v, attn, mid, xhat2, ln2, ffn_pre, ffn_act;
  Eigen::Matrix<Real, Eigen::Dynamic, 1> rstd1, rstd2;
};

template <class Real>
struct ForwardTrace {
  RowMatrix<Real> logits;                    // T x (V + 1)
  std::vector<RowMatrix<Real>> attentions;   // per layer, T x T row-stochastic
  std::vector<LayerCache<Real>> layers;
  RowMatrix<Real> final_input, final_xhat, final_out;
  Eigen::Matrix<Real, Eigen::Dynamic, 1> final_rstd;
  std::vector<Token> tokens;
};

template <class Real>
ForwardTrace<Real> forward(std::span<const Token> tokens, const ModelParams<Real>& params);

struct TrainingPair {
  std::vector<Token> input;
  std::vector<Token> target;
};

template <class Real>
struct LossAndGradients {
  double loss = 0.0;
  ParamVector<Real> grads;  // same layout as ModelParams::values
  long counted_targets = 0;
};

// Mean cross-entropy over non-padding targets. With micro_batches > 1 the
// batch is split into that many contiguous groups and the group losses are
// averaged. Sequences are processed on up to `threads` workers; gradient
// summation order is fixed, so results do not depend on the thread count.
template <class Real>
LossAndGradients<Real> loss_and_gradients(std::span<const TrainingPair> batch,
                                          const ModelParams<Real>& params, int micro_batches = 1,
                                          int threads = 0);

// Loss only (no backward pass).
template <class Real>
double batch_loss(std::span<const TrainingPair> batch, const ModelParams<Real>& params,
                  int threads = 0);

}  // namespace icdyn
