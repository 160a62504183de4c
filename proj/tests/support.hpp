#pragma once

// Shared helpers for the test executables.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mvar/dataset.hpp"
#include "mvar/model.hpp"
#include "mvar/ops.hpp"
#include "mvar/trainer.hpp"
#include "mvar/rng.hpp"
#include "mvar/tensor.hpp"

namespace mvar::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Scalar probe of an arbitrary tensor: sum(x * weights) with fixed random weights,
// so no gradient component cancels by symmetry.
inline Tensor probe(const Tensor& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  const Tensor w = random_tensor(x.shape(), rng);
  return sum(mul(x, w));
}

struct GradCheck {
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
};

// Central differences (h = 1e-5) on up to `per_tensor` entries of each leaf.
// The error of a leaf is ||analytic - numeric|| / max(||analytic||, ||numeric||)
// over the sampled entries; `worst` is the largest over all leaves.
inline GradCheck grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                            std::vector<std::string> names = {}, std::size_t per_tensor = 24,
                            std::uint64_t seed = 5) {
  constexpr double h = 1e-5;
  for (auto& t : leaves) t.zero_grad();
  loss_fn().backward();
  GradCheck out;
  Rng rng(seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& t = leaves[li];
    const std::size_t n = t.numel();
    std::vector<std::size_t> idx;
    if (n <= per_tensor) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < per_tensor; ++i) idx.push_back(rng.uniform_int(n));
    }
    std::vector<double> analytic(idx.size(), 0.0), numeric(idx.size(), 0.0);
    const auto g = t.grad();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      analytic[k] = g.empty() ? 0.0 : g[idx[k]];
      NoGradGuard guard;
      auto d = t.mutable_data();
      const double orig = d[idx[k]];
      d[idx[k]] = orig + h;
      const double up = loss_fn().item();
      d[idx[k]] = orig - h;
      const double down = loss_fn().item();
      d[idx[k]] = orig;
      numeric[k] = (up - down) / (2 * h);
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      diff += (analytic[k] - numeric[k]) * (analytic[k] - numeric[k]);
      na += analytic[k] * analytic[k];
      nn += numeric[k] * numeric[k];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    const double err = std::sqrt(diff) / denom;
    out.checked += idx.size();
    if (err > out.worst || out.where.empty()) {
      out.worst = std::max(out.worst, err);
      if (err >= out.worst) out.where = li < names.size() ? names[li] : "leaf " + std::to_string(li);
    }
  }
  return out;
}

// D=16, L=2 model over 2 views of 2x2 tokens.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.D = 16;
  c.L = 2;
  c.H = 2;
  c.N = 2;
  c.h = c.w = 2;
  c.L_text = 12;
  c.m = 3;
  return c;
}

inline DatasetConfig data_for(const ModelConfig& c) {
  DatasetConfig d;
  d.views = c.N;
  d.res = c.h * kDefaultPatch;
  d.points = 48;
  return d;
}

inline TrainingSequence sequence_for(const ModelConfig& c, std::uint64_t seed, ConditionSet cond,
                                     ViewOrder order = {}) {
  if (order.slots.empty()) order = ViewOrder::identity(c.N);
  const SceneSample s = make_sample(seed, data_for(c));
  return make_sequence(s, cond, order, c);
}

inline DecodeRequest request_for(const TrainingSequence& seq) {
  DecodeRequest r;
  r.context = seq.context;
  r.shape = seq.shape;
  r.rays = seq.rays;
  if (seq.conditions.image) {
    r.reference_codes = std::vector<std::int64_t>(
        seq.image_codes.begin(), seq.image_codes.begin() + static_cast<std::ptrdiff_t>(seq.tokens_per_view()));
  }
  return r;
}

// Largest |a - b| over two equally shaped tensors, restricted to rows [0, rows).
inline double max_row_diff(const Tensor& a, const Tensor& b, std::size_t rows) {
  const std::size_t d = a.dim(1);
  double worst = 0.0;
  for (std::size_t i = 0; i < rows * d; ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

// Teacher-forced logits of a DecodeSession fed the sequence's own codes.
inline std::vector<std::vector<double>> cached_logits(const ModelState& state, const TrainingSequence& seq) {
  NoGradGuard guard;
  DecodeSession session(state, request_for(seq));
  std::vector<std::vector<double>> out;
  for (std::int64_t code : seq.image_codes) {
    out.push_back(session.logits());
    session.push(code);
  }
  return out;
}

// Parameter groups named after the model's sub-blocks.
inline std::string parameter_group(const std::string& name) {
  auto has = [&](const char* s) { return name.find(s) != std::string::npos; };
  if (name.rfind("iwc.", 0) == 0) return "iwc";
  if (name.rfind("shape.", 0) == 0) return "shape_encoder";
  if (name == "spe_proj") return "spe";
  if (has(".ada")) return "adaln";
  if (has(".ffn")) return "ffn";
  if (has(".attn")) return "ssa_attention";
  if (name == "head" || name == "final_norm") return "head";
  return "embeddings";
}

// Finite-difference check of the full model on one sequence with every
// conditioning path live; worst relative error per parameter group.
inline std::vector<std::pair<std::string, double>> model_grad_check(std::uint64_t seed = 3) {
  ModelConfig c = tiny_config();
  ModelState st = ModelState::init(c, seed);
  Rng rng(seed + 1);
  randomize_identity_paths(st, rng, 0.03);
  for (auto& nt : st.named_parameters()) {
    if (nt.tensor.rank() < 2) continue;
    for (auto& v : nt.tensor.mutable_data()) v *= 10.0;
  }
  const TrainingSequence seq = sequence_for(c, seed + 7, {false, true, true}, ViewOrder{{2, 1}});
  const TrainingSequence text_seq = sequence_for(c, seed + 8, {true, false, false});
  auto loss = [&] {
    return add(cross_entropy(forward(st, seq), seq.image_codes),
               cross_entropy(forward(st, text_seq), text_seq.image_codes));
  };
  std::vector<std::pair<std::string, double>> groups;
  for (const auto& nt : st.named_parameters()) {
    const auto r = grad_check(loss, {nt.tensor}, {nt.name}, 12, seed);
    const std::string g = parameter_group(nt.name);
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& p) { return p.first == g; });
    if (it == groups.end()) groups.emplace_back(g, r.worst);
    else it->second = std::max(it->second, r.worst);
  }
  return groups;
}

}  // namespace mvar::testing
