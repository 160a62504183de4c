#include "mvar/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "mvar/error.hpp"

namespace mvar {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

using detail::make_result;
using detail::Node;

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(t.shape()));
  }
}

// Right operand must match a suffix of the left operand's shape.
std::size_t broadcast_inner(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) {
    ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  }
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(sb) + " onto " +
                         shape_string(sa));
  }
  return b.numel();
}

bool wants_grad(const Node& out, std::size_t i) { return out.parents[i]->requires_grad; }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t inner = broadcast_inner(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % inner];
  return make_result("add", a.shape(), std::move(out), {a, b}, [inner](Node& o) {
    if (wants_grad(o, 0)) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(o, 1)) {
      auto& g = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % inner] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t inner = broadcast_inner(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i % inner];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [inner](Node& o) {
    if (wants_grad(o, 0)) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(o, 1)) {
      auto& g = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % inner] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t inner = broadcast_inner(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i % inner];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [inner](Node& o) {
    const auto& ad = o.parents[0]->data;
    const auto& bd = o.parents[1]->data;
    if (wants_grad(o, 0)) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bd[i % inner];
    }
    if (wants_grad(o, 1)) {
      auto& g = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % inner] += o.grad[i] * ad[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result("scale", a.shape(), std::move(out), {a}, [s](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o.grad[i];
  });
}

Tensor silu(const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * sigmoid(ad[i]);
  return make_result("silu", a.shape(), std::move(out), {a}, [](Node& o) {
    const auto& x = o.parents[0]->data;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = sigmoid(x[i]);
      g[i] += o.grad[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result("sum", {}, {total}, {a}, [](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& o) {
    ConstMatMap dc(o.grad.data(), m, n);
    if (wants_grad(o, 0)) {
      MatMap(o.parents[0]->grad_buffer().data(), m, k).noalias() +=
          dc * ConstMatMap(o.parents[1]->data.data(), k, n).transpose();
    }
    if (wants_grad(o, 1)) {
      MatMap(o.parents[1]->grad_buffer().data(), k, n).noalias() +=
          ConstMatMap(o.parents[0]->data.data(), m, k).transpose() * dc;
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
  const std::size_t n = x.dim(axis);
  if (n == 0) throw DimensionError("softmax over an empty axis");
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.numel() / (n * inner);

  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < n; ++t) mx = std::max(mx, xd[base + t * inner]);
      double total = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const double e = std::exp(xd[base + t * inner] - mx);
        out[base + t * inner] = e;
        total += e;
      }
      for (std::size_t t = 0; t < n; ++t) out[base + t * inner] /= total;
    }
  }
  return make_result("softmax", x.shape(), out, {x}, [out, n, inner, outer](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t ob = 0; ob < outer; ++ob) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = ob * n * inner + in;
        double dot = 0.0;
        for (std::size_t t = 0; t < n; ++t) dot += o.grad[base + t * inner] * out[base + t * inner];
        for (std::size_t t = 0; t < n; ++t) {
          const std::size_t i = base + t * inner;
          g[i] += out[i] * (o.grad[i] - dot);
        }
      }
    }
  });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  if (x.rank() == 0) throw DimensionError("rmsnorm of a scalar");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d) {
    throw DimensionError("rmsnorm: gain " + shape_string(gain.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto gd = gain.data();
  std::vector<double> inv(rows);
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xd[r * d + j] * xd[r * d + j];
    inv[r] = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] * inv[r] * gd[j];
  }
  return make_result("rmsnorm", x.shape(), std::move(out), {x, gain},
                     [inv = std::move(inv), rows, d](Node& o) {
                       const auto& xv = o.parents[0]->data;
                       const auto& gv = o.parents[1]->data;
                       if (wants_grad(o, 0)) {
                         auto& g = o.parents[0]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           double dot = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             dot += gv[j] * o.grad[r * d + j] * xv[r * d + j];
                           }
                           const double ir = inv[r];
                           const double coef = ir * ir * ir * dot / static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                             g[r * d + j] += ir * gv[j] * o.grad[r * d + j] - coef * xv[r * d + j];
                           }
                         }
                       }
                       if (wants_grad(o, 1)) {
                         auto& g = o.parents[1]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) {
                             g[j] += o.grad[r * d + j] * xv[r * d + j] * inv[r];
                           }
                         }
                       }
                     });
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_vec) {
  require_rank(x, 2, "modulate");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (shift.numel() != d || scale_vec.numel() != d) {
    throw DimensionError("modulate: shift/scale must have " + std::to_string(d) + " entries");
  }
  auto xd = x.data();
  auto sh = shift.data();
  auto sc = scale_vec.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] * (1.0 + sc[j]) + sh[j];
  }
  return make_result("modulate", x.shape(), std::move(out), {x, shift, scale_vec},
                     [rows, d](Node& o) {
                       const auto& xv = o.parents[0]->data;
                       const auto& scv = o.parents[2]->data;
                       if (wants_grad(o, 0)) {
                         auto& g = o.parents[0]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) {
                             g[r * d + j] += o.grad[r * d + j] * (1.0 + scv[j]);
                           }
                         }
                       }
                       if (wants_grad(o, 1)) {
                         auto& g = o.parents[1]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
                         }
                       }
                       if (wants_grad(o, 2)) {
                         auto& g = o.parents[2]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) {
                             g[j] += o.grad[r * d + j] * xv[r * d + j];
                           }
                         }
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<std::int64_t> rows(ids.begin(), ids.end());
  std::vector<double> out(rows.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= vocab) {
      throw ContractError("embedding id " + std::to_string(rows[i]) + " outside [0, " +
                          std::to_string(vocab) + ")");
    }
    std::copy_n(td.begin() + rows[i] * d, d, out.begin() + i * d);
  }
  const std::size_t n = rows.size();
  return make_result("embedding", {n, d}, std::move(out), {table},
                     [rows = std::move(rows), d](Node& o) {
                       auto& g = o.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         for (std::size_t j = 0; j < d; ++j) g[rows[i] * d + j] += o.grad[i * d + j];
                       }
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t d = parts.front().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != d) throw DimensionError("concat_rows: column count differs");
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * d);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_result("concat_rows", {rows, d}, std::move(out), std::move(parents),
                     [offsets = std::move(offsets)](Node& o) {
                       for (std::size_t i = 0; i < o.parents.size(); ++i) {
                         if (!wants_grad(o, i)) continue;
                         auto& g = o.parents[i]->grad_buffer();
                         for (std::size_t j = 0; j < g.size(); ++j) g[j] += o.grad[offsets[i] + j];
                       }
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_rows");
  if (begin > end || end > x.dim(0)) throw DimensionError("slice_rows out of range");
  const std::size_t d = x.dim(1);
  std::vector<double> out(x.data().begin() + begin * d, x.data().begin() + end * d);
  return make_result("slice_rows", {end - begin, d}, std::move(out), {x}, [begin, d](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < o.grad.size(); ++j) g[begin * d + j] += o.grad[j];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  if (begin > end || end > x.dim(1)) throw DimensionError("slice_cols out of range");
  const std::size_t rows = x.dim(0), d = x.dim(1), w = end - begin;
  std::vector<double> out(rows * w);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xd.begin() + r * d + begin, w, out.begin() + r * w);
  }
  return make_result("slice_cols", {rows, w}, std::move(out), {x}, [rows, d, w, begin](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) g[r * d + begin + j] += o.grad[r * w + j];
    }
  });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows_in) {
  require_rank(x, 2, "select_rows");
  const std::size_t d = x.dim(1);
  std::vector<std::size_t> rows(rows_in.begin(), rows_in.end());
  std::vector<double> out(rows.size() * d);
  auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw DimensionError("select_rows index out of range");
    std::copy_n(xd.begin() + rows[i] * d, d, out.begin() + i * d);
  }
  const std::size_t n = rows.size();
  return make_result("select_rows", {n, d}, std::move(out), {x},
                     [rows = std::move(rows), d](Node& o) {
                       auto& g = o.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         for (std::size_t j = 0; j < d; ++j) g[rows[i] * d + j] += o.grad[i * d + j];
                       }
                     });
}

Tensor zero_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "zero_rows");
  if (begin > end || end > x.dim(0)) throw DimensionError("zero_rows out of range");
  const std::size_t d = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  std::fill(out.begin() + begin * d, out.begin() + end * d, 0.0);
  return make_result("zero_rows", x.shape(), std::move(out), {x}, [begin, end, d](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < g.size(); ++j) {
      const std::size_t r = j / d;
      if (r < begin || r >= end) g[j] += o.grad[j];
    }
  });
}

Tensor scatter_rows(const Tensor& y, std::span<const std::size_t> rows_in, std::size_t total_rows) {
  require_rank(y, 2, "scatter_rows");
  if (rows_in.size() != y.dim(0)) throw DimensionError("scatter_rows: row count mismatch");
  const std::size_t d = y.dim(1);
  std::vector<std::size_t> rows(rows_in.begin(), rows_in.end());
  std::vector<double> out(total_rows * d, 0.0);
  auto yd = y.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total_rows) throw DimensionError("scatter_rows index out of range");
    for (std::size_t j = 0; j < d; ++j) out[rows[i] * d + j] += yd[i * d + j];
  }
  return make_result("scatter_rows", {total_rows, d}, std::move(out), {y},
                     [rows = std::move(rows), d](Node& o) {
                       auto& g = o.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         for (std::size_t j = 0; j < d; ++j) g[i * d + j] += o.grad[rows[i] * d + j];
                       }
                     });
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (rows == 0) throw DimensionError("mean_rows of zero rows");
  std::vector<double> out(d, 0.0);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[j] += xd[r * d + j];
  }
  for (auto& v : out) v /= static_cast<double>(rows);
  return make_result("mean_rows", {d}, std::move(out), {x}, [rows, d](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += o.grad[j] * inv;
    }
  });
}

Tensor max_rows(const Tensor& x) {
  require_rank(x, 2, "max_rows");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (rows == 0) throw DimensionError("max_rows of zero rows");
  auto xd = x.data();
  std::vector<double> out(xd.begin(), xd.begin() + d);
  std::vector<std::size_t> arg(d, 0);
  for (std::size_t r = 1; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      if (xd[r * d + j] > out[j]) {
        out[j] = xd[r * d + j];
        arg[j] = r;
      }
    }
  }
  return make_result("max_rows", {d}, std::move(out), {x}, [arg = std::move(arg), d](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < d; ++j) g[arg[j] * d + j] += o.grad[j];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets_in) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets_in.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets_in.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  std::vector<std::int64_t> targets(targets_in.begin(), targets_in.end());
  auto ld = logits.data();
  std::vector<double> probs(ld.size());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int64_t t = targets[r];
    if (t != kIgnoreTarget && (t < 0 || static_cast<std::size_t>(t) >= vocab)) {
      throw ContractError("target " + std::to_string(t) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
    const double* row = ld.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - mx);
      z += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    if (t == kIgnoreTarget) continue;
    total += (mx + std::log(z)) - row[t];
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy with every target ignored");
  const double loss = total / static_cast<double>(count);
  return make_result("cross_entropy", {}, {loss}, {logits},
                     [probs = std::move(probs), targets = std::move(targets), vocab, count](Node& o) {
                       auto& g = o.parents[0]->grad_buffer();
                       const double s = o.grad[0] / static_cast<double>(count);
                       for (std::size_t r = 0; r < targets.size(); ++r) {
                         if (targets[r] == kIgnoreTarget) continue;
                         for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += s * probs[r * vocab + j];
                         g[r * vocab + targets[r]] -= s;
                       }
                     });
}

}  // namespace mvar
