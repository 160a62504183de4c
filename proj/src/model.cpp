#include "mvar/model.hpp"

#include <cmath>
#include <numbers>

#include "mvar/error.hpp"

namespace mvar {

std::size_t ModelConfig::ffn_hidden() const {
  const std::size_t raw = 8 * D / 3;
  return (raw + 7) / 8 * 8;
}

void ModelConfig::validate() const {
  if (D == 0 || H == 0 || D % H != 0) {
    throw ContractError("model width " + std::to_string(D) + " not divisible by " +
                        std::to_string(H) + " heads");
  }
  if (V < kPaletteCodes + 2) {
    throw ContractError("vocabulary of " + std::to_string(V) + " cannot hold 512 codes plus start/pad");
  }
  if (L == 0 || N == 0 || h == 0 || w == 0 || L_text == 0 || m == 0 || text_vocab < 2) {
    throw ContractError("model config has a zero extent");
  }
}

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, double stddev) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = stddev * rng.normal();
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }

AttentionWeights init_attention(std::size_t d, Rng& rng) {
  return {normal_tensor({d, d}, rng, 0.02), normal_tensor({d, d}, rng, 0.02),
          normal_tensor({d, d}, rng, 0.02), normal_tensor({d, d}, rng, 0.02)};
}

FfnWeights init_ffn(std::size_t d, std::size_t hidden, Rng& rng) {
  return {normal_tensor({d, hidden}, rng, 0.02), normal_tensor({d, hidden}, rng, 0.02),
          normal_tensor({hidden, d}, rng, 0.02)};
}

void push_attention(std::vector<NamedTensor>& out, const std::string& prefix, const AttentionWeights& a) {
  out.push_back({prefix + "wq", a.wq});
  out.push_back({prefix + "wk", a.wk});
  out.push_back({prefix + "wv", a.wv});
  out.push_back({prefix + "wo", a.wo});
}

void push_ffn(std::vector<NamedTensor>& out, const std::string& prefix, const FfnWeights& f) {
  out.push_back({prefix + "w1", f.w1});
  out.push_back({prefix + "w3", f.w3});
  out.push_back({prefix + "w2", f.w2});
}

Tensor row_vector(const Tensor& v) { return reshape(v, {1, v.numel()}); }

Tensor flat(const Tensor& row) { return reshape(row, {row.numel()}); }

}  // namespace

ModelState ModelState::init(const ModelConfig& config, std::uint64_t seed, Codebook codebook) {
  config.validate();
  codebook.validate();
  Rng rng(seed);
  const std::size_t D = config.D;
  const std::size_t hidden = config.ffn_hidden();

  ModelState s;
  s.config = config;
  s.codebook = std::move(codebook);
  s.tok_emb = normal_tensor({config.V, D}, rng, 0.02);
  s.text_emb = normal_tensor({config.text_vocab, D}, rng, 0.02);
  s.ctx_pos = normal_tensor({config.L_text + config.m, D}, rng, 0.02);
  s.spe_proj = Tensor::zeros({6, D}, true);
  s.null_cond = normal_tensor({D}, rng, 0.02);

  s.shape.w1 = normal_tensor({kShapeFeatureDim, D}, rng, 0.02);
  s.shape.b1 = Tensor::zeros({D}, true);
  s.shape.w2 = normal_tensor({D, D}, rng, 0.02);
  s.shape.b2 = Tensor::zeros({D}, true);
  s.shape.slot_w = normal_tensor({D, config.m * D}, rng, 0.02);
  s.shape.slot_q = normal_tensor({config.m, D}, rng, 0.02);

  s.blocks.resize(config.L);
  for (auto& b : s.blocks) {
    b.attn_norm = ones(D);
    b.attn = init_attention(D, rng);
    b.ffn_norm = ones(D);
    b.ffn = init_ffn(D, hidden, rng);
    b.ada = Tensor::zeros({D, 4 * D}, true);
  }

  auto& iwc = s.iwc;
  iwc.ref_in = normal_tensor({s.codebook.dim, D}, rng, 0.02);
  iwc.ref_ray = normal_tensor({6, D}, rng, 0.02);
  iwc.sa_norm = ones(D);
  iwc.sa = init_attention(D, rng);
  iwc.query_ray = normal_tensor({6, D}, rng, 0.02);
  iwc.ca_q_norm = ones(D);
  iwc.ca_kv_norm = ones(D);
  iwc.ca = init_attention(D, rng);
  iwc.ffn_norm = ones(D);
  iwc.ffn = init_ffn(D, hidden, rng);
  iwc.out = Tensor::zeros({D, D}, true);

  s.final_norm = ones(D);
  s.head = normal_tensor({D, config.V}, rng, 0.02);
  return s;
}

std::vector<NamedTensor> ModelState::named_parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"tok_emb", tok_emb});
  out.push_back({"text_emb", text_emb});
  out.push_back({"ctx_pos", ctx_pos});
  out.push_back({"spe_proj", spe_proj});
  out.push_back({"null_cond", null_cond});
  out.push_back({"shape.w1", shape.w1});
  out.push_back({"shape.b1", shape.b1});
  out.push_back({"shape.w2", shape.w2});
  out.push_back({"shape.b2", shape.b2});
  out.push_back({"shape.slot_w", shape.slot_w});
  out.push_back({"shape.slot_q", shape.slot_q});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    const auto& b = blocks[i];
    out.push_back({p + "attn_norm", b.attn_norm});
    push_attention(out, p + "attn.", b.attn);
    out.push_back({p + "ffn_norm", b.ffn_norm});
    push_ffn(out, p + "ffn.", b.ffn);
    out.push_back({p + "ada", b.ada});
  }
  out.push_back({"iwc.ref_in", iwc.ref_in});
  out.push_back({"iwc.ref_ray", iwc.ref_ray});
  out.push_back({"iwc.sa_norm", iwc.sa_norm});
  push_attention(out, "iwc.sa.", iwc.sa);
  out.push_back({"iwc.query_ray", iwc.query_ray});
  out.push_back({"iwc.ca_q_norm", iwc.ca_q_norm});
  out.push_back({"iwc.ca_kv_norm", iwc.ca_kv_norm});
  push_attention(out, "iwc.ca.", iwc.ca);
  out.push_back({"iwc.ffn_norm", iwc.ffn_norm});
  push_ffn(out, "iwc.ffn.", iwc.ffn);
  out.push_back({"iwc.out", iwc.out});
  out.push_back({"final_norm", final_norm});
  out.push_back({"head", head});
  return out;
}

std::vector<Tensor> ModelState::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

void ModelState::zero_grad() const {
  for (auto& p : named_parameters()) p.tensor.zero_grad();
}

void randomize_identity_paths(ModelState& state, Rng& rng, double stddev) {
  auto fill = [&](Tensor& t) {
    for (auto& v : t.mutable_data()) v = stddev * rng.normal();
  };
  fill(state.spe_proj);
  fill(state.iwc.out);
  for (auto& b : state.blocks) fill(b.ada);
}

// ---- sub-blocks -------------------------------------------------------------

Tensor swiglu_ffn(const Tensor& x, const FfnWeights& w) {
  return matmul(mul(silu(matmul(x, w.w1)), matmul(x, w.w3)), w.w2);
}

Tensor self_attention(const Tensor& x, const AttentionWeights& w, std::size_t heads,
                      const AttentionMask& mask) {
  return matmul(attention(matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv), heads, mask), w.wo);
}

Tensor ssa(const Tensor& x, const AttentionWeights& w, std::size_t heads, const AttentionMask& mask,
           std::size_t n_split) {
  if (n_split > x.dim(0)) {
    throw ContractError("ssa split " + std::to_string(n_split) + " exceeds " +
                        std::to_string(x.dim(0)) + " rows");
  }
  Tensor o = self_attention(x, w, heads, mask);
  if (n_split > 0) o = zero_rows(o, 0, n_split);
  return add(x, o);
}

Modulation adaln(const Tensor& cond, const Tensor& ada) {
  const std::size_t D = cond.numel();
  if (ada.rank() != 2 || ada.dim(0) != D || ada.dim(1) != 4 * D) {
    throw DimensionError("adaln weights must be [D, 4D], got " + shape_string(ada.shape()));
  }
  const Tensor m = matmul(row_vector(silu(cond)), ada);
  return {flat(slice_cols(m, 0, D)), flat(slice_cols(m, D, 2 * D)), flat(slice_cols(m, 2 * D, 3 * D)),
          flat(slice_cols(m, 3 * D, 4 * D))};
}

namespace {

// Decoder block over rows starting at absolute position mask.query_offset.
// With caches, keys and values of earlier rows are read from them and this
// call's rows are appended.
Tensor block_rows(const Tensor& x, const BlockParams& p, const Modulation& mod, std::size_t heads,
                  const AttentionMask& mask, std::size_t ssa_rows, Tensor* cache_k, Tensor* cache_v) {
  const Tensor h = modulate(rmsnorm(x, p.attn_norm), mod.attn_shift, mod.attn_scale);
  Tensor k = matmul(h, p.attn.wk);
  Tensor v = matmul(h, p.attn.wv);
  if (cache_k != nullptr) {
    if (cache_k->defined()) {
      const Tensor ks[] = {*cache_k, k};
      const Tensor vs[] = {*cache_v, v};
      k = concat_rows(ks);
      v = concat_rows(vs);
    }
    *cache_k = k;
    *cache_v = v;
  }
  Tensor a = matmul(attention(matmul(h, p.attn.wq), k, v, heads, mask), p.attn.wo);
  const std::size_t offset = mask.query_offset;
  if (ssa_rows > offset) a = zero_rows(a, 0, std::min(ssa_rows - offset, x.dim(0)));
  const Tensor x1 = add(x, a);
  const Tensor h2 = modulate(rmsnorm(x1, p.ffn_norm), mod.ffn_shift, mod.ffn_scale);
  return add(x1, swiglu_ffn(h2, p.ffn));
}

}  // namespace

Tensor decoder_block(const Tensor& x, const BlockParams& p, const Modulation& mod, std::size_t heads,
                     const AttentionMask& mask, std::size_t ssa_rows) {
  return block_rows(x, p, mod, heads, mask, ssa_rows, nullptr, nullptr);
}

IwcMemory iwc_memory(const IwcParams& p, const Tensor& ref_features, const Tensor& ref_rays,
                     std::size_t heads) {
  if (ref_features.rank() != 2 || ref_rays.rank() != 2 || ref_features.dim(0) != ref_rays.dim(0)) {
    throw DimensionError("iwc reference features " + shape_string(ref_features.shape()) +
                         " and rays " + shape_string(ref_rays.shape()) + " disagree");
  }
  const Tensor x = add(matmul(ref_features, p.ref_in), matmul(ref_rays, p.ref_ray));
  const Tensor s = add(x, self_attention(rmsnorm(x, p.sa_norm), p.sa, heads, AttentionMask::full()));
  const Tensor kv = rmsnorm(s, p.ca_kv_norm);
  return {matmul(kv, p.ca.wk), matmul(kv, p.ca.wv)};
}

Tensor iwc_apply(const IwcParams& p, const IwcMemory& memory, const Tensor& target_rays,
                 std::size_t heads) {
  if (target_rays.rank() != 2 || target_rays.dim(1) != 6) {
    throw DimensionError("iwc target rays must be [T, 6], got " + shape_string(target_rays.shape()));
  }
  const Tensor q = matmul(target_rays, p.query_ray);
  const Tensor a = attention(matmul(rmsnorm(q, p.ca_q_norm), p.ca.wq), memory.keys, memory.values, heads,
                             AttentionMask::full());
  const Tensor c = add(q, matmul(a, p.ca.wo));
  const Tensor f = add(c, swiglu_ffn(rmsnorm(c, p.ffn_norm), p.ffn));
  return matmul(f, p.out);
}

Tensor iwc(const IwcParams& p, const Tensor& ref_features, const Tensor& ref_rays,
           const Tensor& target_rays, std::size_t heads) {
  return iwc_apply(p, iwc_memory(p, ref_features, ref_rays, heads), target_rays, heads);
}

Tensor shape_features(const PointCloud& cloud) {
  if (cloud.points.empty()) throw ContractError("shape encoder needs a non-empty point cloud");
  if (cloud.normals.size() != cloud.points.size()) {
    throw DimensionError("point cloud has " + std::to_string(cloud.points.size()) + " points and " +
                         std::to_string(cloud.normals.size()) + " normals");
  }
  std::vector<double> data;
  data.reserve(cloud.size() * kShapeFeatureDim);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const auto& n = cloud.normals[i];
    for (int c = 0; c < 3; ++c) data.push_back(p[c]);
    for (int c = 0; c < 3; ++c) data.push_back(n[c]);
    for (int octave = 0; octave < 4; ++octave) {
      const double f = std::numbers::pi * static_cast<double>(1 << octave);
      for (int c = 0; c < 3; ++c) {
        data.push_back(std::sin(f * p[c]));
        data.push_back(std::cos(f * p[c]));
      }
    }
  }
  return Tensor::from_data({cloud.size(), kShapeFeatureDim}, std::move(data));
}

Tensor encode_shape(const ShapeEncoderParams& p, const PointCloud& cloud, std::size_t m) {
  const Tensor f = shape_features(cloud);
  const Tensor h1 = silu(add(matmul(f, p.w1), p.b1));
  const Tensor h2 = add(matmul(h1, p.w2), p.b2);
  const Tensor pooled = max_rows(h2);
  const std::size_t D = pooled.numel();
  return add(reshape(matmul(row_vector(pooled), p.slot_w), {m, D}), p.slot_q);
}

Tensor code_features(const Codebook& codebook, std::span<const std::int64_t> codes) {
  std::vector<double> data;
  data.reserve(codes.size() * codebook.dim);
  for (auto c : codes) {
    if (c < 0 || static_cast<std::size_t>(c) >= codebook.entries) {
      throw ContractError("code " + std::to_string(c) + " outside codebook of " +
                          std::to_string(codebook.entries));
    }
    auto row = codebook.row(static_cast<std::size_t>(c));
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor::from_data({codes.size(), codebook.dim}, std::move(data));
}

// ---- full model -------------------------------------------------------------

namespace {

struct Context {
  Tensor rows;                          // [n_ctx, D] with positions added
  Tensor cond;                          // [D]
  std::vector<std::uint8_t> key_valid;  // n_ctx entries
};

Context embed_context(const ModelState& s, const ContextSegment& ctx,
                      const std::optional<PointCloud>& shape) {
  const auto& cfg = s.config;
  if (ctx.text_ids.size() != cfg.L_text) {
    throw DimensionError("text segment of " + std::to_string(ctx.text_ids.size()) +
                         " slots, model expects " + std::to_string(cfg.L_text));
  }
  if (ctx.text_len > cfg.L_text) throw DimensionError("text length exceeds the text segment");
  if (ctx.shape_slots != 0 && ctx.shape_slots != cfg.m) {
    throw DimensionError("shape segment of " + std::to_string(ctx.shape_slots) +
                         " slots, model expects " + std::to_string(cfg.m));
  }
  if ((ctx.shape_slots != 0) != shape.has_value()) {
    throw ContractError("shape slots and point cloud presence disagree");
  }
  for (auto id : ctx.text_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.text_vocab) {
      throw ContractError("text id " + std::to_string(id) + " outside vocabulary");
    }
  }
  Context out;
  Tensor raw = embedding(s.text_emb, ctx.text_ids);
  out.key_valid.assign(cfg.L_text, 0);
  std::vector<std::size_t> valid_rows;
  for (std::size_t i = 0; i < ctx.text_len; ++i) {
    out.key_valid[i] = 1;
    valid_rows.push_back(i);
  }
  if (shape) {
    const Tensor parts[] = {raw, encode_shape(s.shape, *shape, cfg.m)};
    raw = concat_rows(parts);
    for (std::size_t i = 0; i < cfg.m; ++i) {
      out.key_valid.push_back(1);
      valid_rows.push_back(cfg.L_text + i);
    }
  }
  const std::size_t n_ctx = raw.dim(0);
  out.rows = add(raw, slice_rows(s.ctx_pos, 0, n_ctx));
  out.cond = valid_rows.empty() ? s.null_cond : mean_rows(select_rows(raw, valid_rows));
  return out;
}

std::size_t ssa_rows_for(const ModelConfig& cfg, std::size_t n_ctx) {
  if (!cfg.ssa_enabled) return 0;
  return cfg.ssa_text_only ? cfg.L_text : n_ctx;
}

std::size_t ray_index(const ModelConfig& cfg, std::size_t k) { return cfg.spe_shift ? k + 1 : k; }

// Embeds image-stream rows [k0, k0 + ids.size()).
Tensor image_rows(const ModelState& s, std::span<const std::int64_t> ids, std::size_t k0,
                  std::span<const Ray6> rays, const std::optional<IwcMemory>& iwc_mem) {
  const auto& cfg = s.config;
  const std::size_t hw = cfg.tokens_per_view();
  std::vector<Ray6> row_rays;
  row_rays.reserve(ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) row_rays.push_back(rays[ray_index(cfg, k0 + r)]);

  Tensor e = embedding(s.tok_emb, ids);
  if (cfg.spe_enabled) e = add(e, spe_embed(row_rays, s.spe_proj));
  if (iwc_mem) {
    std::vector<std::size_t> rows;
    std::vector<Ray6> targets;
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const std::size_t ri = ray_index(cfg, k0 + r);
      if (ri >= 1 && (ri - 1) / hw >= 1) {
        rows.push_back(r);
        targets.push_back(row_rays[r]);
      }
    }
    if (!rows.empty()) {
      const Tensor res = iwc_apply(s.iwc, *iwc_mem, rays_tensor(targets), cfg.H);
      e = add(e, rows.size() == ids.size() ? res : scatter_rows(res, rows, ids.size()));
    }
  }
  return e;
}

std::optional<IwcMemory> reference_memory(const ModelState& s, std::span<const std::int64_t> ref_codes,
                                          std::span<const Ray6> rays) {
  const std::size_t hw = s.config.tokens_per_view();
  return iwc_memory(s.iwc, code_features(s.codebook, ref_codes.first(hw)),
                    rays_tensor(rays.subspan(1, hw)), s.config.H);
}

Tensor head_logits(const ModelState& s, const Tensor& x) {
  return matmul(rmsnorm(x, s.final_norm), s.head);
}

}  // namespace

Tensor forward(const ModelState& state, const TrainingSequence& seq) {
  const auto& cfg = state.config;
  const std::size_t hw = cfg.tokens_per_view();
  if (seq.h != cfg.h || seq.w != cfg.w) {
    throw DimensionError("sequence grid " + std::to_string(seq.h) + "x" + std::to_string(seq.w) +
                         " differs from model grid " + std::to_string(cfg.h) + "x" +
                         std::to_string(cfg.w));
  }
  if (seq.views == 0 || seq.views > cfg.N) {
    throw DimensionError("sequence has " + std::to_string(seq.views) + " views, model supports " +
                         std::to_string(cfg.N));
  }
  const std::size_t total = seq.views * hw;
  if (seq.image_codes.size() != total || seq.rays.size() != total + 1) {
    throw DimensionError("sequence token/ray lengths do not match its layout");
  }
  for (auto c : seq.image_codes) {
    if (c < 0 || static_cast<std::size_t>(c) >= state.codebook.entries) {
      throw ContractError("image code " + std::to_string(c) + " outside codebook");
    }
  }

  const Context ctx = embed_context(state, seq.context, seq.shape);
  const std::size_t n_ctx = ctx.rows.dim(0);

  std::vector<std::int64_t> ids;
  ids.reserve(total);
  ids.push_back(kStartToken);
  ids.insert(ids.end(), seq.image_codes.begin(), seq.image_codes.end() - 1);

  std::optional<IwcMemory> mem;
  if (seq.conditions.image && cfg.iwc_enabled && seq.views > 1) {
    mem = reference_memory(state, seq.image_codes, seq.rays);
  }
  const Tensor parts[] = {ctx.rows, image_rows(state, ids, 0, seq.rays, mem)};
  Tensor x = concat_rows(parts);

  AttentionMask mask = AttentionMask::prefix_causal(n_ctx);
  mask.key_valid = ctx.key_valid;
  mask.key_valid.resize(n_ctx + total, 1);
  const std::size_t ssa_rows = ssa_rows_for(cfg, n_ctx);
  for (std::size_t l = 0; l < state.blocks.size(); ++l) {
    const auto& b = state.blocks[l];
    const std::size_t rows = (cfg.ssa_first_block_only && l > 0) ? 0 : ssa_rows;
    x = decoder_block(x, b, adaln(ctx.cond, b.ada), cfg.H, mask, rows);
  }
  return head_logits(state, slice_rows(x, n_ctx, n_ctx + total));
}

DecodeSession::DecodeSession(const ModelState& state, DecodeRequest request)
    : state_(&state), request_(std::move(request)) {
  const auto& cfg = state.config;
  const std::size_t hw = cfg.tokens_per_view();
  if (request_.rays.size() < 1 + hw || (request_.rays.size() - 1) % hw != 0) {
    throw DimensionError("decode rays must cover whole views plus the start ray");
  }
  total_ = request_.rays.size() - 1;
  if (total_ / hw > cfg.N) throw DimensionError("decode requests more views than the model supports");

  NoGradGuard no_grad;
  const Context ctx = embed_context(state, request_.context, request_.shape);
  n_ctx_ = ctx.rows.dim(0);
  key_valid_ = ctx.key_valid;
  ssa_rows_ = ssa_rows_for(cfg, n_ctx_);
  for (const auto& b : state.blocks) mods_.push_back(adaln(ctx.cond, b.ada));
  if (request_.reference_codes) {
    if (request_.reference_codes->size() != hw) {
      throw DimensionError("reference view must have " + std::to_string(hw) + " codes");
    }
    if (cfg.iwc_enabled && total_ > hw) {
      iwc_ = reference_memory(state, *request_.reference_codes, request_.rays);
    }
  }
  cache_k_.resize(cfg.L);
  cache_v_.resize(cfg.L);

  const std::int64_t start[] = {kStartToken};
  const Tensor parts[] = {ctx.rows, image_rows(state, start, 0, request_.rays, iwc_)};
  run_rows(concat_rows(parts), 0);
}

void DecodeSession::run_rows(const Tensor& x_in, std::size_t offset) {
  const auto& cfg = state_->config;
  Tensor x = x_in;
  const std::size_t keys = offset + x.dim(0);
  AttentionMask mask = AttentionMask::prefix_causal(n_ctx_, offset);
  mask.key_valid = key_valid_;
  mask.key_valid.resize(keys, 1);
  for (std::size_t l = 0; l < state_->blocks.size(); ++l) {
    const std::size_t rows = (cfg.ssa_first_block_only && l > 0) ? 0 : ssa_rows_;
    x = block_rows(x, state_->blocks[l], mods_[l], cfg.H, mask, rows, &cache_k_[l], &cache_v_[l]);
  }
  const Tensor last = head_logits(*state_, slice_rows(x, x.dim(0) - 1, x.dim(0)));
  last_logits_.assign(last.data().begin(), last.data().end());
}

void DecodeSession::push(std::int64_t code) {
  if (position_ >= total_) throw ContractError("decode cache is full");
  if (code < 0 || static_cast<std::size_t>(code) >= state_->codebook.entries) {
    throw ContractError("decoded code " + std::to_string(code) + " outside codebook");
  }
  ++position_;
  if (position_ == total_) {
    last_logits_.clear();
    return;
  }
  NoGradGuard no_grad;
  const std::int64_t ids[] = {code};
  run_rows(image_rows(*state_, ids, position_, request_.rays, iwc_), n_ctx_ + position_);
}

}  // namespace mvar
