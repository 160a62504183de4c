#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <memory>

#include "mvar/error.hpp"
#include "mvar/ops.hpp"

namespace mvar {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;
using HeadMap = Eigen::Map<RowMat, 0, Strided>;
using ConstHeadMap = Eigen::Map<const RowMat, 0, Strided>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

}  // namespace

bool AttentionMask::allowed(std::size_t query_pos, std::size_t key_pos) const {
  if (!key_valid.empty() && !key_valid[key_pos]) return false;
  if (kind == Kind::kFull) return true;
  if (query_pos < prefix_len && key_pos < prefix_len) return true;
  return key_pos <= query_pos;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask& mask) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("attention expects rank-2 q, k, v");
  }
  const std::size_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != tk) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (!mask.key_valid.empty() && mask.key_valid.size() != tk) {
    throw DimensionError("attention: key mask length differs from key count");
  }
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // 0/1 mask plus, per query row, one past the last visible key.
  RowMat allowed(tq, tk);
  std::vector<std::size_t> row_end(tq, 0);
  for (std::size_t i = 0; i < tq; ++i) {
    for (std::size_t j = 0; j < tk; ++j) {
      const bool ok = mask.allowed(mask.query_offset + i, j);
      allowed(i, j) = ok ? 1.0 : 0.0;
      if (ok) row_end[i] = j + 1;
    }
  }

  auto probs = std::make_shared<std::vector<double>>(heads * tq * tk, 0.0);
  std::vector<double> out(tq * d, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();

  for (std::size_t h = 0; h < heads; ++h) {
    ConstHeadMap qh(qd + h * dh, tq, dh, Strided(d));
    ConstHeadMap kh(kd + h * dh, tk, dh, Strided(d));
    ConstHeadMap vh(vd + h * dh, tk, dh, Strided(d));
    MatMap p(probs->data() + h * tq * tk, tq, tk);
    p.noalias() = (qh * kh.transpose()) * scale;
    for (std::size_t i = 0; i < tq; ++i) {
      const Eigen::Index n = static_cast<Eigen::Index>(row_end[i]);
      auto row = p.row(i);
      if (n == 0) {
        row.setZero();
        continue;
      }
      auto live = row.head(n);
      const auto m = allowed.row(i).head(n);
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (m(j) != 0.0) mx = std::max(mx, live(j));
      }
      live = ((live.array() - mx).min(0.0).exp() * m.array()).matrix();
      live /= live.sum();
      row.tail(static_cast<Eigen::Index>(tk) - n).setZero();
    }
    HeadMap oh(out.data() + h * dh, tq, dh, Strided(d));
    oh.noalias() = p * vh;
  }

  return detail::make_result(
      "attention", {tq, d}, std::move(out), {q, k, v},
      [probs, heads, tq, tk, d, dh, scale](detail::Node& o) {
        auto& pq = *o.parents[0];
        auto& pk = *o.parents[1];
        auto& pv = *o.parents[2];
        double* gq = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
        double* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
        double* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
        RowMat dp(tq, tk);
        for (std::size_t h = 0; h < heads; ++h) {
          ConstMatMap p(probs->data() + h * tq * tk, tq, tk);
          ConstHeadMap dout(o.grad.data() + h * dh, tq, dh, Strided(d));
          ConstHeadMap qh(pq.data.data() + h * dh, tq, dh, Strided(d));
          ConstHeadMap kh(pk.data.data() + h * dh, tk, dh, Strided(d));
          ConstHeadMap vh(pv.data.data() + h * dh, tk, dh, Strided(d));
          if (gv) HeadMap(gv + h * dh, tk, dh, Strided(d)).noalias() += p.transpose() * dout;
          if (!gq && !gk) continue;
          dp.noalias() = dout * vh.transpose();
          // d(scores) = P * (dP - rowsum(dP * P)), masked entries have P = 0.
          const Eigen::VectorXd rowdot = (dp.cwiseProduct(p)).rowwise().sum();
          dp = p.cwiseProduct(dp.colwise() - rowdot) * scale;
          if (gq) HeadMap(gq + h * dh, tq, dh, Strided(d)).noalias() += dp * kh;
          if (gk) HeadMap(gk + h * dh, tk, dh, Strided(d)).noalias() += dp.transpose() * qh;
        }
      });
}

}  // namespace mvar
