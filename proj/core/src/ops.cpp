#include "unimask/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace unimask::ops {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMajor>;
using CMapM = Eigen::Map<const RowMajor>;

MapM map(Tensor& t) { return {t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }
CMapM map(const Tensor& t) {
  return {t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())};
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_rank2(const char* op, const Tensor& t, const char* which) {
  if (t.rank() != 2) {
    shape_fail(op, std::string(which) + " must be 2-D, got " + shape_string(t.shape()));
  }
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "extents differ " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void accumulate(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

NodeId matmul(Graph& g, NodeId a, NodeId b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_rank2("matmul", A, "lhs");
  require_rank2("matmul", B, "rhs");
  if (A.cols() != B.rows()) {
    shape_fail("matmul", "inner extents differ " + shape_string(A.shape()) + " * " +
                             shape_string(B.shape()));
  }
  Tensor C = Tensor::matrix(A.rows(), B.cols());
  if (!C.empty() && A.cols() > 0) map(C).noalias() = map(A) * map(B);
  return g.record("matmul", std::move(C), {a, b}, [a, b](Graph& g, NodeId self) {
    const Tensor& dC = g.grad(self);
    if (dC.empty()) return;
    if (g.requires_grad(a) && g.value(a).cols() > 0) {
      map(g.grad(a)).noalias() += map(dC) * map(g.value(b)).transpose();
    }
    if (g.requires_grad(b) && g.value(a).rows() > 0) {
      map(g.grad(b)).noalias() += map(g.value(a)).transpose() * map(dC);
    }
  });
}

NodeId transpose(Graph& g, NodeId a) {
  const Tensor& A = g.value(a);
  require_rank2("transpose", A, "input");
  Tensor out = Tensor::matrix(A.cols(), A.rows());
  if (!out.empty()) map(out) = map(A).transpose();
  return g.record("transpose", std::move(out), {a}, [a](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    if (d.empty()) return;
    map(g.grad(a)) += map(d).transpose();
  });
}

NodeId add(Graph& g, NodeId a, NodeId b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_same("add", A, B);
  Tensor out = A;
  accumulate(out, B);
  return g.record("add", std::move(out), {a, b}, [a, b](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    if (g.requires_grad(a)) accumulate(g.grad(a), d);
    if (g.requires_grad(b)) accumulate(g.grad(b), d);
  });
}

NodeId add_bias(Graph& g, NodeId a, NodeId bias) {
  const Tensor& A = g.value(a);
  const Tensor& b = g.value(bias);
  require_rank2("add_bias", A, "input");
  if (b.rank() != 1 || b.dim(0) != A.cols()) {
    shape_fail("add_bias", "bias " + shape_string(b.shape()) + " does not match columns of " +
                               shape_string(A.shape()));
  }
  Tensor out = A;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  return g.record("add_bias", std::move(out), {a, bias}, [a, bias](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    if (g.requires_grad(a)) accumulate(g.grad(a), d);
    if (g.requires_grad(bias)) {
      Tensor& db = g.grad(bias);
      for (std::size_t r = 0; r < d.rows(); ++r) {
        auto row = d.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) db[c] += row[c];
      }
    }
  });
}

NodeId mul(Graph& g, NodeId a, NodeId b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_same("mul", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return g.record("mul", std::move(out), {a, b}, [a, b](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    if (g.requires_grad(a)) {
      Tensor& da = g.grad(a);
      const Tensor& B = g.value(b);
      for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i] * B[i];
    }
    if (g.requires_grad(b)) {
      Tensor& db = g.grad(b);
      const Tensor& A = g.value(a);
      for (std::size_t i = 0; i < d.size(); ++i) db[i] += d[i] * A[i];
    }
  });
}

NodeId scale(Graph& g, NodeId a, double factor) {
  Tensor out = g.value(a);
  for (double& v : out.storage()) v *= factor;
  return g.record("scale", std::move(out), {a}, [a, factor](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    Tensor& da = g.grad(a);
    for (std::size_t i = 0; i < d.size(); ++i) da[i] += factor * d[i];
  });
}

NodeId sum(Graph& g, NodeId a) {
  double s = 0.0;
  for (double v : g.value(a).data()) s += v;
  return g.record("sum", Tensor::scalar(s), {a}, [a](Graph& g, NodeId self) {
    const double d = g.grad(self)[0];
    for (double& v : g.grad(a).storage()) v += d;
  });
}

NodeId layer_norm(Graph& g, NodeId x, NodeId gamma, NodeId beta, double eps) {
  const Tensor& X = g.value(x);
  const Tensor& G = g.value(gamma);
  const Tensor& B = g.value(beta);
  require_rank2("layer_norm", X, "input");
  const std::size_t n = X.cols();
  if (G.shape() != Shape{n} || B.shape() != Shape{n}) {
    shape_fail("layer_norm", "affine terms " + shape_string(G.shape()) + "/" +
                                 shape_string(B.shape()) + " do not match " +
                                 shape_string(X.shape()));
  }
  Tensor xhat(X.shape());
  std::vector<double> inv_std(X.rows());
  Tensor out(X.shape());
  for (std::size_t r = 0; r < X.rows(); ++r) {
    auto in = X.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= double(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    auto xh = xhat.row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      xh[c] = (in[c] - mean) * inv_std[r];
      o[c] = G[c] * xh[c] + B[c];
    }
  }
  return g.record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g,
                                                                             NodeId self) {
        const Tensor& d = g.grad(self);
        const Tensor& G = g.value(gamma);
        const std::size_t n = G.size();
        if (g.requires_grad(gamma) || g.requires_grad(beta)) {
          Tensor& dg = g.grad(gamma);
          Tensor& db = g.grad(beta);
          for (std::size_t r = 0; r < d.rows(); ++r) {
            auto dr = d.row(r);
            auto xh = xhat.row(r);
            for (std::size_t c = 0; c < n; ++c) {
              dg[c] += dr[c] * xh[c];
              db[c] += dr[c];
            }
          }
        }
        if (!g.requires_grad(x)) return;
        Tensor& dx = g.grad(x);
        std::vector<double> dxhat(n);
        for (std::size_t r = 0; r < d.rows(); ++r) {
          auto dr = d.row(r);
          auto xh = xhat.row(r);
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            dxhat[c] = dr[c] * G[c];
            s1 += dxhat[c];
            s2 += dxhat[c] * xh[c];
          }
          auto out = dx.row(r);
          const double k = inv_std[r] / double(n);
          for (std::size_t c = 0; c < n; ++c) {
            out[c] += k * (double(n) * dxhat[c] - s1 - xh[c] * s2);
          }
        }
      });
}

double logsumexp(std::span<const double> row) {
  if (row.empty()) return -INFINITY;
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

NodeId softmax(Graph& g, NodeId x) {
  const Tensor& X = g.value(x);
  require_rank2("softmax", X, "input");
  Tensor out(X.shape());
  for (std::size_t r = 0; r < X.rows(); ++r) {
    auto in = X.row(r);
    auto o = out.row(r);
    const double m = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) s += (o[c] = std::exp(in[c] - m));
    for (double& v : o) v /= s;
  }
  return g.record("softmax", std::move(out), {x}, [x](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    const Tensor& y = g.value(self);
    Tensor& dx = g.grad(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto dr = d.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += dr[c] * yr[c];
      auto o = dx.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) o[c] += yr[c] * (dr[c] - dot);
    }
  });
}

NodeId log_softmax(Graph& g, NodeId x) {
  const Tensor& X = g.value(x);
  require_rank2("log_softmax", X, "input");
  Tensor out(X.shape());
  for (std::size_t r = 0; r < X.rows(); ++r) {
    auto in = X.row(r);
    const double lse = logsumexp(in);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
  }
  return g.record("log_softmax", std::move(out), {x}, [x](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    const Tensor& y = g.value(self);
    Tensor& dx = g.grad(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto dr = d.row(r);
      double s = 0.0;
      for (double v : dr) s += v;
      auto o = dx.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) o[c] += dr[c] - std::exp(yr[c]) * s;
    }
  });
}

NodeId gelu(Graph& g, NodeId x) {
  Tensor out = g.value(x);
  for (double& v : out.storage()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  return g.record("gelu", std::move(out), {x}, [x](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    const Tensor& X = g.value(x);
    Tensor& dx = g.grad(x);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double v = X[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      dx[i] += d[i] * (cdf + v * pdf);
    }
  });
}

NodeId embedding_lookup(Graph& g, NodeId table, std::span<const int> ids) {
  const Tensor& W = g.value(table);
  require_rank2("embedding_lookup", W, "table");
  Tensor out = Tensor::matrix(ids.size(), W.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || std::size_t(ids[i]) >= W.rows()) {
      shape_fail("embedding_lookup", "id " + std::to_string(ids[i]) + " outside table " +
                                         shape_string(W.shape()));
    }
    auto src = W.row(std::size_t(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return g.record("embedding_lookup", std::move(out), {table},
                  [table, idx = std::move(idx)](Graph& g, NodeId self) {
                    const Tensor& d = g.grad(self);
                    Tensor& dw = g.grad(table);
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      auto src = d.row(i);
                      auto dst = dw.row(std::size_t(idx[i]));
                      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                    }
                  });
}

NodeId concat_lastdim(Graph& g, NodeId a, NodeId b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_rank2("concat_lastdim", A, "lhs");
  require_rank2("concat_lastdim", B, "rhs");
  if (A.rows() != B.rows()) {
    shape_fail("concat_lastdim", "row extents differ " + shape_string(A.shape()) + " vs " +
                                     shape_string(B.shape()));
  }
  const std::size_t p = A.cols(), q = B.cols();
  Tensor out = Tensor::matrix(A.rows(), p + q);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    auto o = out.row(r);
    std::copy(A.row(r).begin(), A.row(r).end(), o.begin());
    std::copy(B.row(r).begin(), B.row(r).end(), o.begin() + long(p));
  }
  return g.record("concat_lastdim", std::move(out), {a, b}, [a, b, p, q](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    for (std::size_t r = 0; r < d.rows(); ++r) {
      auto dr = d.row(r);
      if (g.requires_grad(a)) {
        auto da = g.grad(a).row(r);
        for (std::size_t c = 0; c < p; ++c) da[c] += dr[c];
      }
      if (g.requires_grad(b)) {
        auto db = g.grad(b).row(r);
        for (std::size_t c = 0; c < q; ++c) db[c] += dr[p + c];
      }
    }
  });
}

NodeId slice_lastdim(Graph& g, NodeId a, std::size_t start, std::size_t len) {
  const Tensor& A = g.value(a);
  require_rank2("slice_lastdim", A, "input");
  if (start + len > A.cols()) {
    shape_fail("slice_lastdim", "columns [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") exceed " +
                                    shape_string(A.shape()));
  }
  Tensor out = Tensor::matrix(A.rows(), len);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    auto src = A.row(r).subspan(start, len);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return g.record("slice_lastdim", std::move(out), {a}, [a, start, len](Graph& g, NodeId self) {
    const Tensor& d = g.grad(self);
    Tensor& da = g.grad(a);
    for (std::size_t r = 0; r < d.rows(); ++r) {
      auto dst = da.row(r).subspan(start, len);
      auto src = d.row(r);
      for (std::size_t c = 0; c < len; ++c) dst[c] += src[c];
    }
  });
}

NodeId replace_rows(Graph& g, NodeId x, std::span<const std::size_t> rows, NodeId fill) {
  const Tensor& X = g.value(x);
  const Tensor& F = g.value(fill);
  require_rank2("replace_rows", X, "input");
  if (F.shape() != Shape{X.cols()}) {
    shape_fail("replace_rows", "fill " + shape_string(F.shape()) + " does not match rows of " +
                                   shape_string(X.shape()));
  }
  std::vector<char> replaced(X.rows(), 0);
  for (std::size_t r : rows) {
    if (r >= X.rows()) {
      shape_fail("replace_rows", "row " + std::to_string(r) + " outside " + shape_string(X.shape()));
    }
    replaced[r] = 1;
  }
  Tensor out = X;
  for (std::size_t r = 0; r < X.rows(); ++r) {
    if (replaced[r]) std::copy(F.data().begin(), F.data().end(), out.row(r).begin());
  }
  return g.record("replace_rows", std::move(out), {x, fill},
                  [x, fill, replaced = std::move(replaced)](Graph& g, NodeId self) {
                    const Tensor& d = g.grad(self);
                    for (std::size_t r = 0; r < d.rows(); ++r) {
                      auto dr = d.row(r);
                      if (replaced[r]) {
                        if (!g.requires_grad(fill)) continue;
                        Tensor& df = g.grad(fill);
                        for (std::size_t c = 0; c < dr.size(); ++c) df[c] += dr[c];
                      } else if (g.requires_grad(x)) {
                        auto dx = g.grad(x).row(r);
                        for (std::size_t c = 0; c < dr.size(); ++c) dx[c] += dr[c];
                      }
                    }
                  });
}

NodeId cross_entropy(Graph& g, NodeId logits, std::span<const int> targets,
                     std::span<const double> weights) {
  const Tensor& Z = g.value(logits);
  require_rank2("cross_entropy", Z, "logits");
  if (targets.size() != Z.rows()) {
    shape_fail("cross_entropy", std::to_string(targets.size()) + " targets for logits " +
                                    shape_string(Z.shape()));
  }
  if (!weights.empty() && weights.size() != Z.rows()) {
    shape_fail("cross_entropy", std::to_string(weights.size()) + " weights for logits " +
                                    shape_string(Z.shape()));
  }
  std::vector<double> w(Z.rows(), 1.0);
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  double total_w = 0.0;
  for (double v : w) total_w += v;
  if (!(total_w > 0.0)) throw std::invalid_argument("cross_entropy: total weight must be positive");

  Tensor probs(Z.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < Z.rows(); ++r) {
    const int t = targets[r];
    if (t < 0 || std::size_t(t) >= Z.cols()) {
      shape_fail("cross_entropy", "target " + std::to_string(t) + " outside " +
                                      std::to_string(Z.cols()) + " classes");
    }
    auto z = Z.row(r);
    const double lse = logsumexp(z);
    auto p = probs.row(r);
    for (std::size_t c = 0; c < z.size(); ++c) p[c] = std::exp(z[c] - lse);
    if (w[r] != 0.0) loss += w[r] * (lse - z[std::size_t(t)]);
  }
  loss /= total_w;
  std::vector<int> tgt(targets.begin(), targets.end());
  return g.record("cross_entropy", Tensor::scalar(loss), {logits},
                  [logits, tgt = std::move(tgt), w = std::move(w), probs = std::move(probs),
                   total_w](Graph& g, NodeId self) {
                    const double d = g.grad(self)[0] / total_w;
                    Tensor& dz = g.grad(logits);
                    for (std::size_t r = 0; r < probs.rows(); ++r) {
                      if (w[r] == 0.0) continue;
                      auto p = probs.row(r);
                      auto o = dz.row(r);
                      const double k = d * w[r];
                      for (std::size_t c = 0; c < p.size(); ++c) o[c] += k * p[c];
                      o[std::size_t(tgt[r])] -= k;
                    }
                  });
}

}  // namespace unimask::ops
