#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "mvar/error.hpp"
#include "mvar/model.hpp"
#include "support.hpp"

using namespace mvar;
using namespace mvar::testing;

namespace {

AttentionWeights random_attention(std::size_t d, Rng& rng, bool grad = false) {
  return {random_tensor({d, d}, rng, 0.3, grad), random_tensor({d, d}, rng, 0.3, grad),
          random_tensor({d, d}, rng, 0.3, grad), random_tensor({d, d}, rng, 0.3, grad)};
}

FfnWeights random_ffn(std::size_t d, std::size_t hidden, Rng& rng, bool grad = false) {
  return {random_tensor({d, hidden}, rng, 0.3, grad), random_tensor({d, hidden}, rng, 0.3, grad),
          random_tensor({hidden, d}, rng, 0.3, grad)};
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  return select_rows(x, perm);
}

ModelState live_model(const ModelConfig& c, std::uint64_t seed) {
  ModelState st = ModelState::init(c, seed);
  Rng rng(seed + 100);
  randomize_identity_paths(st, rng, 0.2);
  return st;
}

}  // namespace

TEST_CASE("config validation and FFN width") {
  ModelConfig c;
  CHECK(c.ffn_hidden() % 8 == 0);
  CHECK(c.ffn_hidden() >= 8 * c.D / 3);
  CHECK(c.ffn_hidden() < 8 * c.D / 3 + 8);
  c.H = 5;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = ModelConfig{};
  c.V = 100;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("initialisation: identity paths are zero and the rest is small noise") {
  const ModelState st = ModelState::init(tiny_config(), 1);
  for (double v : st.spe_proj.data()) CHECK(v == 0.0);
  for (double v : st.iwc.out.data()) CHECK(v == 0.0);
  for (const auto& b : st.blocks) {
    for (double v : b.ada.data()) CHECK(v == 0.0);
    for (double v : b.attn_norm.data()) CHECK(v == 1.0);
  }
  double s2 = 0;
  for (double v : st.tok_emb.data()) s2 += v * v;
  CHECK(std::sqrt(s2 / st.tok_emb.numel()) == doctest::Approx(0.02).epsilon(0.1));
  CHECK(ModelState::init(tiny_config(), 1).tok_emb.data()[5] == st.tok_emb.data()[5]);
}

TEST_CASE("swiglu examples and gradient") {
  Rng rng(1);
  const FfnWeights w = random_ffn(8, 24, rng, true);
  const Tensor zero = swiglu_ffn(Tensor::zeros({3, 8}), w);
  CHECK(zero.shape() == Shape{3, 8});
  for (double v : zero.data()) CHECK(v == 0.0);
  Tensor x = random_tensor({3, 8}, rng, 1.0, true);
  const auto r = grad_check([&] { return probe(swiglu_ffn(x, w)); }, {x, w.w1, w.w3, w.w2});
  CHECK(r.worst <= 1e-4);
}

TEST_CASE("ssa passes the split rows through bit-exactly") {
  Rng rng(2);
  const AttentionWeights w = random_attention(8, rng);
  const Tensor x = random_tensor({9, 8}, rng);
  const AttentionMask mask = AttentionMask::prefix_causal(4);
  const Tensor out = ssa(x, w, 2, mask, 4);
  for (std::size_t i = 0; i < 4 * 8; ++i) CHECK(out.data()[i] == x.data()[i]);

  const Tensor plain = add(x, self_attention(x, w, 2, mask));
  for (std::size_t i = 4 * 8; i < 9 * 8; ++i) CHECK(std::abs(out.data()[i] - plain.data()[i]) <= 1e-12);
  const Tensor none = ssa(x, w, 2, mask, 0);
  for (std::size_t i = 0; i < none.numel(); ++i) CHECK(none.data()[i] == plain.data()[i]);
  CHECK_THROWS(ssa(x, w, 2, mask, 10));
}

TEST_CASE("ssa text rows ignore the image rows") {
  Rng rng(3);
  const AttentionWeights w = random_attention(8, rng);
  const Tensor a = random_tensor({10, 8}, rng);
  std::vector<double> other(a.data().begin(), a.data().end());
  for (std::size_t i = 5 * 8; i < other.size(); ++i) other[i] += rng.normal();
  const Tensor b = Tensor::from_data({10, 8}, other);
  const Tensor oa = ssa(a, w, 2, AttentionMask::full(), 5), ob = ssa(b, w, 2, AttentionMask::full(), 5);
  for (std::size_t i = 0; i < 5 * 8; ++i) CHECK(oa.data()[i] == ob.data()[i]);
}

TEST_CASE("ssa gradients pass a finite-difference check") {
  Rng rng(4);
  const AttentionWeights w = random_attention(8, rng, true);
  Tensor x = random_tensor({7, 8}, rng, 1.0, true);
  const AttentionMask mask = AttentionMask::prefix_causal(3);
  const auto r = grad_check([&] { return probe(ssa(x, w, 2, mask, 3)); }, {x, w.wq, w.wk, w.wv, w.wo});
  CHECK(r.worst <= 1e-4);
}

TEST_CASE("adaln gradients pass a finite-difference check") {
  Rng rng(5);
  Tensor cond = random_tensor({8}, rng, 1.0, true);
  Tensor ada = random_tensor({8, 32}, rng, 0.3, true);
  const Tensor x = random_tensor({4, 8}, rng);
  auto loss = [&] {
    const Modulation m = adaln(cond, ada);
    return add(probe(modulate(x, m.attn_shift, m.attn_scale)), probe(modulate(x, m.ffn_shift, m.ffn_scale), 3));
  };
  CHECK(grad_check(loss, {cond, ada}).worst <= 1e-4);
  const Modulation zero = adaln(cond, Tensor::zeros({8, 32}));
  for (double v : zero.attn_scale.data()) CHECK(v == 0.0);
}

TEST_CASE("token-wise blocks commute with row permutations") {
  Rng rng(6);
  const FfnWeights f = random_ffn(8, 16, rng);
  const AttentionWeights w = random_attention(8, rng);
  const Tensor x = random_tensor({6, 8}, rng);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  const Tensor a = permute_rows(swiglu_ffn(x, f), perm), b = swiglu_ffn(permute_rows(x, perm), f);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-9);
  const Tensor c = permute_rows(self_attention(x, w, 2, AttentionMask::full()), perm);
  const Tensor d = self_attention(permute_rows(x, perm), w, 2, AttentionMask::full());
  for (std::size_t i = 0; i < c.numel(); ++i) CHECK(std::abs(c.data()[i] - d.data()[i]) <= 1e-9);
}

TEST_CASE("iwc output shape and gradients") {
  const ModelConfig c = tiny_config();
  ModelState st = live_model(c, 7);
  const SceneSample s = make_sample(4, data_for(c));
  const Tensor feats = code_features(st.codebook, s.tokens[0].codes);
  std::vector<Ray6> own;
  for (const auto& r : s.rays[0].rays) own.push_back(r.as_array());
  const Tensor ref_rays = rays_tensor(own);
  const Tensor out = iwc(st.iwc, feats, ref_rays, ref_rays, c.H);
  CHECK(out.shape() == Shape{c.h * c.w, c.D});

  std::vector<Ray6> target;
  for (const auto& r : s.rays[1].rays) target.push_back(r.as_array());
  const Tensor tr = rays_tensor(target);
  const IwcParams& p = st.iwc;
  const auto r = grad_check([&] { return probe(iwc(p, feats, ref_rays, tr, c.H)); },
                            {p.ref_in, p.ref_ray, p.sa_norm, p.sa.wq, p.sa.wk, p.sa.wv, p.sa.wo, p.query_ray,
                             p.ca_q_norm, p.ca_kv_norm, p.ca.wq, p.ca.wk, p.ca.wv, p.ca.wo, p.ffn_norm,
                             p.ffn.w1, p.ffn.w3, p.ffn.w2, p.out});
  CHECK_MESSAGE(r.worst <= 1e-4, r.where << " " << r.worst);
}

TEST_CASE("iwc with a zero output projection adds nothing") {
  const ModelConfig c = tiny_config();
  ModelState st = live_model(c, 8);
  const SceneSample s = make_sample(4, data_for(c));
  for (auto& v : st.iwc.out.mutable_data()) v = 0.0;
  std::vector<Ray6> rays;
  for (const auto& r : s.rays[1].rays) rays.push_back(r.as_array());
  const Tensor out = iwc(st.iwc, code_features(st.codebook, s.tokens[0].codes), rays_tensor(rays),
                         rays_tensor(rays), c.H);
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("shape encoder is permutation invariant and separates scenes") {
  const ModelConfig c = tiny_config();
  const ModelState st = live_model(c, 9);
  PointCloud pc = sample_points(make_scene(3), 64, 3);
  const Tensor a = encode_shape(st.shape, pc, c.m);
  CHECK(a.shape() == Shape{c.m, c.D});
  std::vector<std::size_t> perm(pc.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(1);
  rng.shuffle(std::span<std::size_t>(perm));
  PointCloud shuffled;
  for (std::size_t i : perm) {
    shuffled.points.push_back(pc.points[i]);
    shuffled.normals.push_back(pc.normals[i]);
  }
  const Tensor b = encode_shape(st.shape, shuffled, c.m);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-9);
  CHECK(encode_shape(st.shape, sample_points(make_scene(3), 10, 3), c.m).shape() == Shape{c.m, c.D});
  CHECK_THROWS(encode_shape(st.shape, PointCloud{}, c.m));

  std::size_t collisions = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor x = encode_shape(st.shape, sample_points(make_scene(seed), 64, seed), c.m);
    const Tensor y = encode_shape(st.shape, sample_points(make_scene(seed + 1000), 64, seed), c.m);
    collisions += max_row_diff(x, y, c.m) < 1e-9;
  }
  CHECK(collisions == 0);
}

TEST_CASE("shape encoder gradients pass a finite-difference check") {
  const ModelConfig c = tiny_config();
  const ModelState st = live_model(c, 10);
  const PointCloud pc = sample_points(make_scene(12), 32, 1);
  const auto& p = st.shape;
  const auto r = grad_check([&] { return probe(encode_shape(p, pc, c.m)); },
                            {p.w1, p.b1, p.w2, p.b2, p.slot_w, p.slot_q});
  CHECK_MESSAGE(r.worst <= 1e-4, r.where << " " << r.worst);
}

TEST_CASE("forward produces one logit row per image token") {
  const ModelConfig c = tiny_config();
  const ModelState st = ModelState::init(c, 11);
  for (ConditionSet cond : {ConditionSet{true, false, false}, ConditionSet{false, true, true},
                            ConditionSet{false, false, false}}) {
    const Tensor logits = forward(st, sequence_for(c, 2, cond));
    CHECK(logits.shape() == Shape{c.N * c.h * c.w, c.V});
  }
}

TEST_CASE("an unconditioned sequence is the instruction-caption text path") {
  const ModelConfig c = tiny_config();
  const ModelState st = live_model(c, 12);
  const TrainingSequence none = sequence_for(c, 5, {false, false, false});
  TrainingSequence text = none;
  text.conditions = {true, false, false};
  text.context = pack_context(instruction_caption(false, false), text.conditions, c.budget());
  const Tensor a = forward(st, none), b = forward(st, text);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("zeroed mechanism projections reproduce the disabled baselines exactly") {
  ModelConfig c = tiny_config();
  const TrainingSequence seq = sequence_for(c, 6, {false, true, true}, ViewOrder{{2, 1}});

  ModelState on = ModelState::init(c, 13);
  ModelConfig off_cfg = c;
  off_cfg.spe_enabled = false;
  off_cfg.iwc_enabled = false;
  ModelState off = on;
  off.config = off_cfg;
  const Tensor a = forward(on, seq), b = forward(off, seq);
  for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(a.data()[i] == b.data()[i]);

  Rng rng(1);
  randomize_identity_paths(on, rng, 0.2);
  ModelState changed = on;
  changed.config = off_cfg;
  CHECK(max_row_diff(forward(on, seq), forward(changed, seq), seq.image_codes.size()) > 1e-6);
}

TEST_CASE("ssa flag scopes") {
  ModelConfig c = tiny_config();
  const ModelState st = live_model(c, 14);
  const TrainingSequence seq = sequence_for(c, 7, {true, false, true});
  ModelState text_only = st;
  text_only.config.ssa_text_only = true;
  ModelState first = st;
  first.config.ssa_first_block_only = true;
  ModelState off = st;
  off.config.ssa_enabled = false;
  const Tensor base = forward(st, seq);
  const std::size_t rows = seq.image_codes.size();
  CHECK(max_row_diff(base, forward(text_only, seq), rows) > 0.0);
  CHECK(max_row_diff(base, forward(off, seq), rows) > 0.0);
  // the last block's context outputs are never read
  CHECK(max_row_diff(base, forward(first, seq), rows) == 0.0);

  c.L = 3;
  const ModelState deep = live_model(c, 14);
  ModelState deep_first = deep;
  deep_first.config.ssa_first_block_only = true;
  CHECK(max_row_diff(forward(deep, seq), forward(deep_first, seq), rows) > 0.0);
}

TEST_CASE("perturbing an image token leaves earlier logits unchanged") {
  ModelConfig c = tiny_config();
  c.N = 3;
  const ModelState st = live_model(c, 15);
  Rng rng(2);
  for (ConditionSet cond : {ConditionSet{true, false, false}, ConditionSet{false, true, true}}) {
    const TrainingSequence seq = sequence_for(c, 8, cond, ViewOrder{{3, 1, 2}});
    const Tensor base = forward(st, seq);
    for (int k = 0; k < 10; ++k) {
      const std::size_t t = rng.uniform_int(seq.image_codes.size());
      TrainingSequence p = seq;
      p.image_codes[t] = (p.image_codes[t] + 1 + static_cast<std::int64_t>(rng.uniform_int(500))) % 512;
      const Tensor pert = forward(st, p);
      CHECK(max_row_diff(base, pert, t + 1) <= 1e-9);
      if (t + 1 < seq.image_codes.size()) CHECK(max_row_diff(base, pert, seq.image_codes.size()) > 0.0);
    }
  }
}

TEST_CASE("cached decode matches the full forward") {
  ModelConfig c = tiny_config();
  c.N = 3;
  c.h = c.w = 3;
  const ModelState st = live_model(c, 16);
  for (ConditionSet cond : {ConditionSet{true, false, false}, ConditionSet{false, true, true},
                            ConditionSet{true, false, true}}) {
    for (bool shift : {true, false}) {
      ModelState s2 = st;
      s2.config.spe_shift = shift;
      const TrainingSequence seq = sequence_for(c, 9, cond);
      const Tensor full = forward(s2, seq);
      const auto cached = cached_logits(s2, seq);
      double worst = 0;
      for (std::size_t r = 0; r < cached.size(); ++r) {
        for (std::size_t v = 0; v < c.V; ++v) worst = std::max(worst, std::abs(cached[r][v] - full.at(r, v)));
      }
      CHECK(worst <= 1e-9);
    }
  }
}

TEST_CASE("decode session bookkeeping") {
  const ModelConfig c = tiny_config();
  const ModelState st = ModelState::init(c, 17);
  const TrainingSequence seq = sequence_for(c, 1, {true, false, false});
  DecodeSession s(st, request_for(seq));
  CHECK(s.capacity() == seq.image_codes.size());
  for (auto code : seq.image_codes) s.push(code);
  CHECK(s.position() == s.capacity());
  CHECK_THROWS(s.push(0));
}

TEST_CASE("every sub-block passes the end-to-end gradient check") {
  for (const auto& [group, worst] : model_grad_check()) {
    CHECK_MESSAGE(worst <= 1e-4, group << " " << worst);
  }
}
