#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "radmae/random.hpp"

// Small reverse-mode building blocks for transformer encoders. Each layer is a
// stateless view onto a ParameterSet; forward passes fill an explicit cache
// and backward passes accumulate into a Gradients buffer, so one set of
// weights can be evaluated from several threads at once.
namespace radmae::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
  int layer = 0;      // layer index for layer-wise learning-rate decay
  bool decay = true;  // subject to weight decay
};

class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix init, int layer, bool decay);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  const Matrix& value(std::size_t i) const { return params_[i].value; }
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t scalar_count() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ParameterSet& params);

  Matrix& operator[](std::size_t i) { return grads_[i]; }
  const Matrix& operator[](std::size_t i) const { return grads_[i]; }
  std::size_t size() const { return grads_.size(); }
  void zero();
  void scale(double s);
  Gradients& operator+=(const Gradients& other);
  bool all_finite() const;

 private:
  std::vector<Matrix> grads_;
};

// Glorot-scaled normal truncated at two standard deviations.
Matrix truncated_normal(int rows, int cols, double stddev, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& ps, const std::string& name, int in, int out, int layer, Rng& rng);

  Matrix forward(const ParameterSet& ps, const Matrix& x) const;
  // Accumulates weight/bias gradients; returns dL/dx.
  Matrix backward(const ParameterSet& ps, const Matrix& x, const Matrix& dy, Gradients& g) const;

  std::size_t weight = 0;  // in x out
  std::size_t bias = 0;    // 1 x out
  int in = 0, out = 0;
};

class LayerNorm {
 public:
  struct Cache {
    Matrix xhat;
    Eigen::VectorXd inv_std;
  };

  LayerNorm() = default;
  LayerNorm(ParameterSet& ps, const std::string& name, int dim, int layer);

  Matrix forward(const ParameterSet& ps, const Matrix& x, Cache& cache) const;
  Matrix backward(const ParameterSet& ps, const Cache& cache, const Matrix& dy, Gradients& g) const;

  std::size_t gamma = 0, beta = 0;
  int dim = 0;
  double eps = 1e-6;
};

double gelu(double x);
double gelu_grad(double x);

class Mlp {
 public:
  struct Cache {
    Matrix x, pre, act;
  };

  Mlp() = default;
  Mlp(ParameterSet& ps, const std::string& name, int dim, int hidden, int layer, Rng& rng);

  Matrix forward(const ParameterSet& ps, const Matrix& x, Cache& cache) const;
  Matrix backward(const ParameterSet& ps, const Cache& cache, const Matrix& dy, Gradients& g) const;

  Linear fc1, fc2;
};

class Attention {
 public:
  struct Cache {
    Matrix x, qkv, context;
    std::vector<Matrix> probs;  // per head, T x T
  };

  Attention() = default;
  Attention(ParameterSet& ps, const std::string& name, int dim, int heads, int layer, Rng& rng);

  Matrix forward(const ParameterSet& ps, const Matrix& x, Cache& cache) const;
  Matrix backward(const ParameterSet& ps, const Cache& cache, const Matrix& dy, Gradients& g) const;

  Linear qkv, proj;
  int dim = 0, heads = 0;
};

/// Pre-norm transformer block: x + attn(ln(x)), then + mlp(ln(.)).
class Block {
 public:
  struct Cache {
    LayerNorm::Cache ln1, ln2;
    Attention::Cache attn;
    Mlp::Cache mlp;
  };

  Block() = default;
  Block(ParameterSet& ps, const std::string& name, int dim, int heads, double mlp_ratio, int layer, Rng& rng);

  Matrix forward(const ParameterSet& ps, const Matrix& x, Cache& cache) const;
  Matrix backward(const ParameterSet& ps, const Cache& cache, const Matrix& dy, Gradients& g) const;

  LayerNorm norm1, norm2;
  Attention attn;
  Mlp mlp;
};

/// Fixed 2-D sine/cosine position table for a rows x cols patch grid with a
/// leading all-zero row for the class token. `dim` must be divisible by 4.
Matrix sincos_position_table(int dim, int rows, int cols);

/// Row-wise softmax, numerically stabilised.
Matrix softmax_rows(const Matrix& logits);

}  // namespace radmae::nn
