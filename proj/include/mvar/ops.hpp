#pragma once

// Differentiable operations over mvar::Tensor.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mvar/tensor.hpp"

namespace mvar {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor silu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// [m, k] x [k, n] -> [m, n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Numerically stable softmax along `axis` (max subtracted first).
Tensor softmax(const Tensor& x, std::size_t axis);

// x / sqrt(mean(x^2) + eps) * gain over the last axis.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// x * (1 + scale) + shift with [D] shift/scale broadcast over rows of [T, D].
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale);

// Rows of `table` [V, D] selected by ids -> [ids.size(), D].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);

// Row-wise structure ops on rank-2 tensors.
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
// Copy of x with rows [begin, end) set to exactly zero.
Tensor zero_rows(const Tensor& x, std::size_t begin, std::size_t end);
// Scatter y's rows into a [total_rows, D] zero tensor at `rows`.
Tensor scatter_rows(const Tensor& y, std::span<const std::size_t> rows, std::size_t total_rows);
Tensor mean_rows(const Tensor& x);  // [T, D] -> [D]
Tensor max_rows(const Tensor& x);   // [T, D] -> [D]

// Which (query, key) pairs may attend. Query row i has absolute position
// query_offset + i; key column j has absolute position j. Keys below
// prefix_len are visible to every query below prefix_len; otherwise a query
// sees keys at positions <= its own. Keys flagged invalid are never visible.
struct AttentionMask {
  enum class Kind { kFull, kPrefixCausal };
  Kind kind = Kind::kFull;
  std::size_t query_offset = 0;
  std::size_t prefix_len = 0;
  std::vector<std::uint8_t> key_valid;  // empty: every key valid

  static AttentionMask full() { return {}; }
  static AttentionMask prefix_causal(std::size_t prefix_len, std::size_t query_offset = 0) {
    AttentionMask m;
    m.kind = Kind::kPrefixCausal;
    m.prefix_len = prefix_len;
    m.query_offset = query_offset;
    return m;
  }
  bool allowed(std::size_t query_pos, std::size_t key_pos) const;
};

// Multi-head scaled dot-product attention, q: [Tq, D], k/v: [Tk, D].
// Query rows with no visible key produce zeros.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask& mask);

// Mean over positions with target >= 0 of -log softmax(logits)[target].
inline constexpr std::int64_t kIgnoreTarget = -1;
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);

}  // namespace mvar
