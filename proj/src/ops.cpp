// Copyright (c) 2026, The mst-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "mst/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mst::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

using detail::make_result;
using detail::Node;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_matrix(const Tensor& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected matrix, got " +
                             shape_to_string(t.shape()));
}

ConstMapMat cmat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MapMat mmat(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dims " + shape_to_string(a.shape()) +
                             " x " + shape_to_string(b.shape()));
  std::vector<double> out(m * n);
  mmat(out, m, n).noalias() = cmat(a.node()->value, m, k) * cmat(b.node()->value, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    auto g = cmat(self.grad, m, n);
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      mmat(pa.ensure_grad(), m, k).noalias() += g * cmat(pb.value, k, n).transpose();
    }
    if (pb.requires_grad) {
      mmat(pb.ensure_grad(), k, n).noalias() += cmat(pa.value, m, k).transpose() * g;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  const std::size_t m = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  require(w.dim(0) == in, "linear: input width " + std::to_string(in) +
                              " vs weight " + shape_to_string(w.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == out_dim, "linear: bias size");
  std::vector<double> out(m * out_dim);
  auto o = mmat(out, m, out_dim);
  o.noalias() = cmat(x.node()->value, m, in) * cmat(w.node()->value, in, out_dim);
  if (has_bias) {
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.node()->value.data(), static_cast<Eigen::Index>(out_dim));
  }
  std::vector<Tensor> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return make_result({m, out_dim}, std::move(out), std::move(parents),
                     [m, in, out_dim, has_bias](Node& self) {
                       auto g = cmat(self.grad, m, out_dim);
                       Node& px = parent(self, 0);
                       Node& pw = parent(self, 1);
                       if (px.requires_grad) {
                         mmat(px.ensure_grad(), m, in).noalias() +=
                             g * cmat(pw.value, in, out_dim).transpose();
                       }
                       if (pw.requires_grad) {
                         mmat(pw.ensure_grad(), in, out_dim).noalias() +=
                             cmat(px.value, m, in).transpose() * g;
                       }
                       if (has_bias) {
                         Node& pb = parent(self, 2);
                         if (pb.requires_grad) {
                           mmat(pb.ensure_grad(), 1, out_dim) += g.colwise().sum();
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape " + shape_to_string(a.shape()) +
                                      " vs " + shape_to_string(b.shape()));
  std::vector<double> out(a.numel());
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      Node& pn = parent(self, p);
      if (!pn.requires_grad) continue;
      auto& g = pn.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<double> out(a.numel());
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  const auto& av = a.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_matrix(x, "add_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  require(row.numel() == n, "add_row: row length");
  std::vector<double> out(x.node()->value);
  const auto& rv = row.node()->value;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  return make_result(x.shape(), std::move(out), {x, row}, [m, n](Node& self) {
    Node& px = parent(self, 0);
    Node& pr = parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pr.requires_grad) {
      auto& g = pr.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor mean_of(std::span<const Tensor> terms) {
  require(!terms.empty(), "mean_of: no terms");
  const Shape shape = terms[0].shape();
  const std::size_t count = terms.size();
  std::vector<double> out(terms[0].numel(), 0.0);
  std::vector<Tensor> parents;
  for (const auto& t : terms) {
    require(t.shape() == shape, "mean_of: shape mismatch");
    const auto& v = t.node()->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    parents.push_back(t);
  }
  for (auto& v : out) v /= static_cast<double>(count);
  return make_result(shape, std::move(out), std::move(parents), [count](Node& self) {
    const double w = 1.0 / static_cast<double>(count);
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += w * self.grad[i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape: " + shape_to_string(x.shape()) +
                                               " -> " + shape_to_string(shape));
  return make_result(std::move(shape), x.node()->value, {x}, [](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  require(gamma.numel() == n && beta.numel() == n, "layer_norm: affine size");
  const auto& xv = x.node()->value;
  const auto& gv = gamma.node()->value;
  const auto& bv = beta.node()->value;
  std::vector<double> out(m * n);
  std::vector<double> xhat(m * n);
  std::vector<double> rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &xv[i * n];
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * rstd[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        Node& px = parent(self, 0);
        Node& pg = parent(self, 1);
        Node& pb = parent(self, 2);
        const auto& gv = pg.value;
        if (pg.requires_grad || pb.requires_grad) {
          auto& dg = pg.ensure_grad();
          auto& db = pb.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              dg[j] += self.grad[i * n + j] * xhat[i * n + j];
              db[j] += self.grad[i * n + j];
            }
        }
        if (px.requires_grad) {
          auto& dx = px.ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = self.grad[i * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double d = self.grad[i * n + j] * gv[j];
              dx[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      });
}

Tensor gelu(const Tensor& x) {
  const auto& xv = x.node()->value;
  std::vector<double> out(xv.size());
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& px = parent(self, 0);
    auto& g = px.ensure_grad();
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = px.value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor relu(const Tensor& x) {
  const auto& xv = x.node()->value;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& px = parent(self, 0);
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (px.value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor self_attention(const Tensor& qkv, std::size_t batch, std::size_t tokens,
                      std::size_t heads) {
  require_matrix(qkv, "self_attention");
  require(qkv.dim(0) == batch * tokens, "self_attention: row count");
  require(qkv.dim(1) % 3 == 0, "self_attention: qkv width");
  const std::size_t d = qkv.dim(1) / 3;
  require(heads >= 1 && d % heads == 0, "self_attention: heads must divide width");
  const std::size_t dh = d / heads;
  const std::size_t width = 3 * d;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& in = qkv.node()->value;

  std::vector<double> out(batch * tokens * d);
  // Softmax probabilities per (image, head), kept for the reverse pass.
  std::vector<double> probs(batch * heads * tokens * tokens);
  const auto T = static_cast<Eigen::Index>(tokens);
  const auto DH = static_cast<Eigen::Index>(dh);
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(width));
  using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using StridedOut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = in.data() + b * tokens * width;
    for (std::size_t h = 0; h < heads; ++h) {
      Strided q(base + h * dh, T, DH, stride);
      Strided k(base + d + h * dh, T, DH, stride);
      Strided v(base + 2 * d + h * dh, T, DH, stride);
      MapMat p(probs.data() + (b * heads + h) * tokens * tokens, T, T);
      p.noalias() = (q * k.transpose()) * s;
      for (Eigen::Index r = 0; r < T; ++r) {
        const double mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
      }
      StridedOut o(out.data() + b * tokens * d + h * dh, T, DH,
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
      o.noalias() = p * v;
    }
  }

  return make_result(
      {batch * tokens, d}, std::move(out), {qkv},
      [batch, tokens, heads, d, dh, width, s, probs = std::move(probs)](Node& self) {
        Node& px = parent(self, 0);
        auto& gin = px.ensure_grad();
        const auto& in = px.value;
        const auto T = static_cast<Eigen::Index>(tokens);
        const auto DH = static_cast<Eigen::Index>(dh);
        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(width));
        const auto ostride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
        RowMat dp(T, T);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* base = in.data() + b * tokens * width;
          double* gbase = gin.data() + b * tokens * width;
          for (std::size_t h = 0; h < heads; ++h) {
            Strided q(base + h * dh, T, DH, stride);
            Strided k(base + d + h * dh, T, DH, stride);
            Strided v(base + 2 * d + h * dh, T, DH, stride);
            StridedOut gq(gbase + h * dh, T, DH, stride);
            StridedOut gk(gbase + d + h * dh, T, DH, stride);
            StridedOut gv(gbase + 2 * d + h * dh, T, DH, stride);
            Strided go(self.grad.data() + b * tokens * d + h * dh, T, DH, ostride);
            ConstMapMat p(probs.data() + (b * heads + h) * tokens * tokens, T, T);
            gv.noalias() += p.transpose() * go;
            dp.noalias() = go * v.transpose();
            for (Eigen::Index r = 0; r < T; ++r) {
              const double dot = dp.row(r).dot(p.row(r));
              dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
            }
            gq.noalias() += (dp * k) * s;
            gk.noalias() += (dp.transpose() * q) * s;
          }
        }
      });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const std::size_t cols = parts[0].shape().size() == 2 ? parts[0].dim(1) : parts[0].numel();
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  std::vector<Tensor> parents;
  for (const auto& p : parts) {
    const std::size_t pc = p.rank() == 2 ? p.dim(1) : p.numel();
    require(pc == cols, "concat_rows: column mismatch");
    offsets.push_back(rows * cols);
    rows += p.numel() / cols;
    parents.push_back(p);
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) {
    const auto& v = p.node()->value;
    out.insert(out.end(), v.begin(), v.end());
  }
  return make_result({rows, cols}, std::move(out), std::move(parents),
                     [offsets = std::move(offsets)](Node& self) {
                       for (std::size_t i = 0; i < self.parents.size(); ++i) {
                         Node& p = *self.parents[i];
                         if (!p.requires_grad) continue;
                         auto& g = p.ensure_grad();
                         for (std::size_t j = 0; j < g.size(); ++j) {
                           g[j] += self.grad[offsets[i] + j];
                         }
                       }
                     });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "select_rows");
  const std::size_t cols = x.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * cols);
  const auto& xv = x.node()->value;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < x.dim(0), "select_rows: index out of range");
    std::copy_n(&xv[idx[r] * cols], cols, &out[r * cols]);
  }
  const std::size_t count = idx.size();
  return make_result({count, cols}, std::move(out), {x},
                     [cols, idx = std::move(idx)](Node& self) {
                       auto& g = parent(self, 0).ensure_grad();
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < cols; ++j)
                           g[idx[r] * cols + j] += self.grad[r * cols + j];
                     });
}

Tensor replace_rows(const Tensor& x, std::span<const std::uint8_t> replace,
                    const Tensor& replacement) {
  require_matrix(x, "replace_rows");
  require(replacement.shape() == x.shape(), "replace_rows: replacement shape");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(replace.size() == rows, "replace_rows: mask length " +
                                      std::to_string(replace.size()) + " vs " +
                                      std::to_string(rows) + " rows");
  std::vector<std::uint8_t> sel(replace.begin(), replace.end());
  std::vector<double> out(x.node()->value);
  const auto& rv = replacement.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    if (sel[r]) std::copy_n(&rv[r * cols], cols, &out[r * cols]);
  }
  return make_result(x.shape(), std::move(out), {x, replacement},
                     [cols, sel = std::move(sel)](Node& self) {
                       for (std::size_t p = 0; p < 2; ++p) {
                         Node& pn = parent(self, p);
                         if (!pn.requires_grad) continue;
                         auto& g = pn.ensure_grad();
                         const bool want = p == 1;
                         for (std::size_t r = 0; r < sel.size(); ++r) {
                           if ((sel[r] != 0) != want) continue;
                           for (std::size_t j = 0; j < cols; ++j)
                             g[r * cols + j] += self.grad[r * cols + j];
                         }
                       }
                     });
}

Tensor tokens_to_map(const Tensor& x, std::size_t batch, std::size_t rows,
                     std::size_t cols) {
  require_matrix(x, "tokens_to_map");
  const std::size_t n = rows * cols;
  require(x.dim(0) == batch * n, "tokens_to_map: token count");
  const std::size_t d = x.dim(1);
  const auto& xv = x.node()->value;
  std::vector<double> out(batch * d * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < d; ++c)
        out[(b * d + c) * n + t] = xv[(b * n + t) * d + c];
  return make_result({batch, d, rows, cols}, std::move(out), {x},
                     [batch, n, d](Node& self) {
                       auto& g = parent(self, 0).ensure_grad();
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t t = 0; t < n; ++t)
                           for (std::size_t c = 0; c < d; ++c)
                             g[(b * n + t) * d + c] += self.grad[(b * d + c) * n + t];
                     });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormBuffers& buffers, NormStats stats, bool update_running,
                  double momentum, double eps) {
  require(x.rank() == 2 || x.rank() == 4,
          "batch_norm: expected [B,C] or [B,C,H,W], got " + shape_to_string(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t S = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  require(gamma.numel() == C && beta.numel() == C, "batch_norm: affine size");
  require(buffers.running_mean.size() == C, "batch_norm: buffer size");
  const std::size_t count = B * S;
  const auto& xv = x.node()->value;
  const auto& gv = gamma.node()->value;
  const auto& bv = beta.node()->value;

  std::vector<double> mean(C, 0.0), var(C, 0.0);
  if (stats == NormStats::batch) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < S; ++s) mean[c] += xv[(b * C + c) * S + s];
    for (auto& m : mean) m /= static_cast<double>(count);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < S; ++s) {
          const double dv = xv[(b * C + c) * S + s] - mean[c];
          var[c] += dv * dv;
        }
    for (auto& v : var) v /= static_cast<double>(count);
    if (update_running) {
      const double unbias =
          count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
      for (std::size_t c = 0; c < C; ++c) {
        buffers.running_mean[c] = (1.0 - momentum) * buffers.running_mean[c] + momentum * mean[c];
        buffers.running_var[c] =
            (1.0 - momentum) * buffers.running_var[c] + momentum * var[c] * unbias;
      }
    }
  } else {
    mean = buffers.running_mean;
    var = buffers.running_var;
  }

  std::vector<double> rstd(C);
  for (std::size_t c = 0; c < C; ++c) rstd[c] = 1.0 / std::sqrt(var[c] + eps);
  std::vector<double> xhat(xv.size());
  std::vector<double> out(xv.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = (b * C + c) * S + s;
        xhat[i] = (xv[i] - mean[c]) * rstd[c];
        out[i] = xhat[i] * gv[c] + bv[c];
      }

  const bool batch_stats = stats == NormStats::batch;
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [B, C, S, count, batch_stats, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        Node& px = parent(self, 0);
        Node& pg = parent(self, 1);
        Node& pb = parent(self, 2);
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s) {
              const std::size_t i = (b * C + c) * S + s;
              sum_g[c] += self.grad[i];
              sum_gx[c] += self.grad[i] * xhat[i];
            }
        if (pg.requires_grad) {
          auto& dg = pg.ensure_grad();
          for (std::size_t c = 0; c < C; ++c) dg[c] += sum_gx[c];
        }
        if (pb.requires_grad) {
          auto& db = pb.ensure_grad();
          for (std::size_t c = 0; c < C; ++c) db[c] += sum_g[c];
        }
        if (!px.requires_grad) return;
        auto& dx = px.ensure_grad();
        const auto& gv = pg.value;
        const double inv_n = 1.0 / static_cast<double>(count);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s) {
              const std::size_t i = (b * C + c) * S + s;
              if (batch_stats) {
                dx[i] += gv[c] * rstd[c] *
                         (self.grad[i] - inv_n * sum_g[c] - xhat[i] * inv_n * sum_gx[c]);
              } else {
                dx[i] += gv[c] * rstd[c] * self.grad[i];
              }
            }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t pad) {
  require(x.rank() == 4, "conv2d: input must be [B,C,H,W]");
  require(w.rank() == 4 && w.dim(2) == w.dim(3), "conv2d: weight must be [O,C,k,k]");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2);
  require(w.dim(1) == C, "conv2d: channel mismatch " + shape_to_string(x.shape()) +
                             " vs " + shape_to_string(w.shape()));
  require(H + 2 * pad >= k && W + 2 * pad >= k, "conv2d: kernel larger than input");
  const std::size_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
  const std::size_t patch = C * k * k, npix = OH * OW;
  const bool has_bias = bias.defined();

  const auto& xv = x.node()->value;
  // im2col per image: [C*k*k, OH*OW]
  std::vector<double> cols(B * patch * npix, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double* cb = cols.data() + b * patch * npix;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          double* row = cb + ((c * k + ky) * k + kx) * npix;
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t ox = 0; ox < OW; ++ox) {
              const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              row[oy * OW + ox] = xv[((b * C + c) * H + iy) * W + ix];
            }
          }
        }
  }
  std::vector<double> out(B * O * npix);
  const auto wm = cmat(w.node()->value, O, patch);
  for (std::size_t b = 0; b < B; ++b) {
    MapMat ob(out.data() + b * O * npix, static_cast<Eigen::Index>(O),
              static_cast<Eigen::Index>(npix));
    ConstMapMat cb(cols.data() + b * patch * npix, static_cast<Eigen::Index>(patch),
                   static_cast<Eigen::Index>(npix));
    ob.noalias() = wm * cb;
    if (has_bias) {
      const auto& bv = bias.node()->value;
      for (std::size_t o = 0; o < O; ++o) ob.row(static_cast<Eigen::Index>(o)).array() += bv[o];
    }
  }
  std::vector<Tensor> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return make_result(
      {B, O, OH, OW}, std::move(out), std::move(parents),
      [B, C, H, W, O, k, pad, OH, OW, patch, npix, has_bias,
       cols = std::move(cols)](Node& self) {
        Node& px = parent(self, 0);
        Node& pw = parent(self, 1);
        const auto wm = cmat(pw.value, O, patch);
        RowMat dcols(static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(npix));
        for (std::size_t b = 0; b < B; ++b) {
          ConstMapMat g(self.grad.data() + b * O * npix, static_cast<Eigen::Index>(O),
                        static_cast<Eigen::Index>(npix));
          ConstMapMat cb(cols.data() + b * patch * npix, static_cast<Eigen::Index>(patch),
                         static_cast<Eigen::Index>(npix));
          if (pw.requires_grad) {
            mmat(pw.ensure_grad(), O, patch).noalias() += g * cb.transpose();
          }
          if (has_bias) {
            Node& pb = parent(self, 2);
            if (pb.requires_grad) {
              auto& db = pb.ensure_grad();
              for (std::size_t o = 0; o < O; ++o) db[o] += g.row(static_cast<Eigen::Index>(o)).sum();
            }
          }
          if (!px.requires_grad) continue;
          dcols.noalias() = wm.transpose() * g;
          auto& dx = px.ensure_grad();
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = dcols.data() + ((c * k + ky) * k + kx) * npix;
                for (std::size_t oy = 0; oy < OH; ++oy) {
                  const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  for (std::size_t ox = 0; ox < OW; ++ox) {
                    const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    dx[((b * C + c) * H + iy) * W + ix] += row[oy * OW + ox];
                  }
                }
              }
        }
      });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require(x.rank() == 4, "upsample_nearest2x: input must be [B,C,H,W]");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = 2 * H, OW = 2 * W;
  const auto& xv = x.node()->value;
  std::vector<double> out(B * C * OH * OW);
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t xx = 0; xx < OW; ++xx)
        out[(bc * OH + y) * OW + xx] = xv[(bc * H + y / 2) * W + xx / 2];
  return make_result({B, C, OH, OW}, std::move(out), {x}, [B, C, H, W](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    const std::size_t OH = 2 * H, OW = 2 * W;
    for (std::size_t bc = 0; bc < B * C; ++bc)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t xx = 0; xx < OW; ++xx)
          g[(bc * H + y / 2) * W + xx / 2] += self.grad[(bc * OH + y) * OW + xx];
  });
}

Tensor l1_loss(const Tensor& pred, std::span<const double> target) {
  require(pred.numel() == target.size() && !target.empty(),
          "l1_loss: " + std::to_string(pred.numel()) + " predictions vs " +
              std::to_string(target.size()) + " targets");
  const auto& pv = pred.node()->value;
  std::vector<double> sign(pv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double diff = pv[i] - target[i];
    total += std::abs(diff);
    sign[i] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
  }
  const double inv = 1.0 / static_cast<double>(pv.size());
  return make_result({}, {total * inv}, {pred}, [inv, sign = std::move(sign)](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    const double go = self.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * sign[i];
  });
}

std::vector<double> softmax_rows(std::span<const double> values, std::size_t cols,
                                 double temp) {
  require(cols > 0 && values.size() % cols == 0, "softmax_rows: width");
  require(temp > 0.0, "softmax_rows: temperature must be positive");
  std::vector<double> out(values.size());
  const std::size_t rows = values.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = values.data() + r * cols;
    double* o = out.data() + r * cols;
    double mx = in[0] / temp;
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j] / temp);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] / temp - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
  }
  return out;
}

Tensor soft_cross_entropy(const Tensor& logits, std::span<const double> target,
                          double temp) {
  require_matrix(logits, "soft_cross_entropy");
  require(target.size() == logits.numel(), "soft_cross_entropy: target shape");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto& lv = logits.node()->value;
  for (double v : lv) {
    if (!std::isfinite(v)) throw std::domain_error("soft_cross_entropy: non-finite logits");
  }
  auto probs = softmax_rows(lv, cols, temp);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = lv.data() + r * cols;
    double mx = in[0] / temp;
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j] / temp);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(in[j] / temp - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) {
      const double t = target[r * cols + j];
      if (t != 0.0) total -= t * (in[j] / temp - log_z);
    }
  }
  std::vector<double> tgt(target.begin(), target.end());
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return make_result({}, {total * inv_rows}, {logits},
                     [rows, cols, temp, inv_rows, probs = std::move(probs),
                      tgt = std::move(tgt)](Node& self) {
                       auto& g = parent(self, 0).ensure_grad();
                       const double go = self.grad[0] * inv_rows / temp;
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mass = 0.0;
                         for (std::size_t j = 0; j < cols; ++j) mass += tgt[r * cols + j];
                         for (std::size_t j = 0; j < cols; ++j) {
                           const std::size_t i = r * cols + j;
                           g[i] += go * (mass * probs[i] - tgt[i]);
                         }
                       }
                     });
}

}  // namespace mst::ops
