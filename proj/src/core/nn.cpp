#include "radmae/nn.hpp"

#include <cmath>
#include <numbers>

#include "radmae/error.hpp"

namespace radmae::nn {

std::size_t ParameterSet::add(std::string name, Matrix init, int layer, bool decay) {
  if (find(name)) fail("duplicate parameter name " + name);
  params_.push_back(Parameter{std::move(name), std::move(init), layer, decay});
  return params_.size() - 1;
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return std::nullopt;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Gradients::Gradients(const ParameterSet& params) {
  grads_.reserve(params.size());
  for (const auto& p : params) grads_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
}

void Gradients::zero() {
  for (auto& g : grads_) g.setZero();
}

void Gradients::scale(double s) {
  for (auto& g : grads_) g *= s;
}

Gradients& Gradients::operator+=(const Gradients& other) {
  for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += other.grads_[i];
  return *this;
}

bool Gradients::all_finite() const {
  for (const auto& g : grads_)
    if (!g.allFinite()) return false;
  return true;
}

Matrix truncated_normal(int rows, int cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.truncated_normal();
  return m;
}

// ---------------------------------------------------------------------------

Linear::Linear(ParameterSet& ps, const std::string& name, int in_dim, int out_dim, int layer, Rng& rng)
    : in(in_dim), out(out_dim) {
  const double std = std::sqrt(2.0 / (in_dim + out_dim));
  weight = ps.add(name + ".weight", truncated_normal(in_dim, out_dim, std, rng), layer, true);
  bias = ps.add(name + ".bias", Matrix::Zero(1, out_dim), layer, false);
}

Matrix Linear::forward(const ParameterSet& ps, const Matrix& x) const {
  Matrix y = x * ps.value(weight);
  y.rowwise() += ps.value(bias).row(0);
  return y;
}

Matrix Linear::backward(const ParameterSet& ps, const Matrix& x, const Matrix& dy, Gradients& g) const {
  g[weight].noalias() += x.transpose() * dy;
  g[bias] += dy.colwise().sum();
  return dy * ps.value(weight).transpose();
}

// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(ParameterSet& ps, const std::string& name, int d, int layer) : dim(d) {
  gamma = ps.add(name + ".weight", Matrix::Ones(1, d), layer, false);
  beta = ps.add(name + ".bias", Matrix::Zero(1, d), layer, false);
}

Matrix LayerNorm::forward(const ParameterSet& ps, const Matrix& x, Cache& cache) const {
  const auto rows = x.rows();
  cache.xhat.resize(rows, x.cols());
  cache.inv_std.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = (x.row(r).array() - mean) * inv;
  }
  Matrix y = cache.xhat.array().rowwise() * ps.value(gamma).row(0).array();
  y.rowwise() += ps.value(beta).row(0);
  return y;
}

Matrix LayerNorm::backward(const ParameterSet& ps, const Cache& cache, const Matrix& dy, Gradients& g) const {
  g[gamma] += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  g[beta] += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * ps.value(gamma).row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  const double n = static_cast<double>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dxhat.row(r).mean();
    const double mean_dx = (dxhat.row(r).array() * cache.xhat.row(r).array()).sum() / n;
    dx.row(r) = cache.inv_std(r) * (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx);
  }
  return dx;
}

// ---------------------------------------------------------------------------

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Mlp::Mlp(ParameterSet& ps, const std::string& name, int dim, int hidden, int layer, Rng& rng)
    : fc1(ps, name + ".fc1", dim, hidden, layer, rng), fc2(ps, name + ".fc2", hidden, dim, layer, rng) {}

Matrix Mlp::forward(const ParameterSet& ps, const Matrix& x, Cache& cache) const {
  cache.x = x;
  cache.pre = fc1.forward(ps, x);
  cache.act = cache.pre.unaryExpr([](double v) { return gelu(v); });
  return fc2.forward(ps, cache.act);
}

Matrix Mlp::backward(const ParameterSet& ps, const Cache& cache, const Matrix& dy, Gradients& g) const {
  Matrix dact = fc2.backward(ps, cache.act, dy, g);
  dact.array() *= cache.pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
  return fc1.backward(ps, cache.x, dact, g);
}

// ---------------------------------------------------------------------------

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

Attention::Attention(ParameterSet& ps, const std::string& name, int d, int h, int layer, Rng& rng)
    : qkv(ps, name + ".qkv", d, 3 * d, layer, rng), proj(ps, name + ".proj", d, d, layer, rng), dim(d), heads(h) {
  if (h <= 0 || d % h != 0) fail("attention dim " + std::to_string(d) + " not divisible by " + std::to_string(h) + " heads");
}

Matrix Attention::forward(const ParameterSet& ps, const Matrix& x, Cache& cache) const {
  const auto tokens = x.rows();
  const int dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  cache.x = x;
  cache.qkv = qkv.forward(ps, x);
  cache.context.resize(tokens, dim);
  cache.probs.resize(heads);
  for (int h = 0; h < heads; ++h) {
    const auto q = cache.qkv.middleCols(h * dh, dh);
    const auto k = cache.qkv.middleCols(dim + h * dh, dh);
    const auto v = cache.qkv.middleCols(2 * dim + h * dh, dh);
    Matrix scores = (q * k.transpose()) * scale;
    cache.probs[h] = softmax_rows(scores);
    cache.context.middleCols(h * dh, dh).noalias() = cache.probs[h] * v;
  }
  return proj.forward(ps, cache.context);
}

Matrix Attention::backward(const ParameterSet& ps, const Cache& cache, const Matrix& dy, Gradients& g) const {
  const int dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix dcontext = proj.backward(ps, cache.context, dy, g);
  Matrix dqkv(cache.qkv.rows(), cache.qkv.cols());
  for (int h = 0; h < heads; ++h) {
    const auto q = cache.qkv.middleCols(h * dh, dh);
    const auto k = cache.qkv.middleCols(dim + h * dh, dh);
    const auto v = cache.qkv.middleCols(2 * dim + h * dh, dh);
    const Matrix& p = cache.probs[h];
    const auto dout = dcontext.middleCols(h * dh, dh);
    const Matrix dp = dout * v.transpose();
    dqkv.middleCols(2 * dim + h * dh, dh).noalias() = p.transpose() * dout;
    Matrix ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
    ds *= scale;
    dqkv.middleCols(h * dh, dh).noalias() = ds * k;
    dqkv.middleCols(dim + h * dh, dh).noalias() = ds.transpose() * q;
  }
  return qkv.backward(ps, cache.x, dqkv, g);
}

// ---------------------------------------------------------------------------

Block::Block(ParameterSet& ps, const std::string& name, int dim, int heads, double mlp_ratio, int layer, Rng& rng)
    : norm1(ps, name + ".norm1", dim, layer),
      norm2(ps, name + ".norm2", dim, layer),
      attn(ps, name + ".attn", dim, heads, layer, rng),
      mlp(ps, name + ".mlp", dim, static_cast<int>(std::lround(dim * mlp_ratio)), layer, rng) {}

Matrix Block::forward(const ParameterSet& ps, const Matrix& x, Cache& cache) const {
  Matrix x1 = x + attn.forward(ps, norm1.forward(ps, x, cache.ln1), cache.attn);
  return x1 + mlp.forward(ps, norm2.forward(ps, x1, cache.ln2), cache.mlp);
}

Matrix Block::backward(const ParameterSet& ps, const Cache& cache, const Matrix& dy, Gradients& g) const {
  Matrix dx1 = dy + norm2.backward(ps, cache.ln2, mlp.backward(ps, cache.mlp, dy, g), g);
  return dx1 + norm1.backward(ps, cache.ln1, attn.backward(ps, cache.attn, dx1, g), g);
}

// ---------------------------------------------------------------------------

Matrix sincos_position_table(int dim, int rows, int cols) {
  if (dim % 4 != 0) fail("position embedding dim must be divisible by 4");
  const int quarter = dim / 4;
  Matrix table = Matrix::Zero(1 + rows * cols, dim);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const auto t = 1 + r * cols + c;
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
        table(t, k) = std::sin(r * omega);
        table(t, quarter + k) = std::cos(r * omega);
        table(t, 2 * quarter + k) = std::sin(c * omega);
        table(t, 3 * quarter + k) = std::cos(c * omega);
      }
    }
  }
  return table;
}

}  // namespace radmae::nn
