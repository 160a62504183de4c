#pragma once

// The multi-view autoregressive decoder.
//
// Stream layout for one sample (n_ctx = L_text + shape slots):
//
//   row 0 .. n_ctx-1      context: text embeddings, shape tokens (+ learned positions)
//   row n_ctx             start token
//   row n_ctx + k (k>=1)  image code k-1
//
// Stream row n_ctx + k predicts image code k. Image rows carry an additive
// ray encoding and, for views other than the reference, the image-warp
// residual. Context rows attend to each other freely; everything after them
// is causal.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvar/camera.hpp"
#include "mvar/ops.hpp"
#include "mvar/rng.hpp"
#include "mvar/scene.hpp"
#include "mvar/sequence.hpp"
#include "mvar/tensor.hpp"
#include "mvar/tokenizer.hpp"

namespace mvar {

struct ModelConfig {
  std::size_t D = 128;
  std::size_t L = 4;
  std::size_t H = 4;
  std::size_t V = kImageVocab;
  std::size_t N = 4;
  std::size_t h = 8;
  std::size_t w = 8;
  std::size_t L_text = 16;
  std::size_t m = 8;
  std::size_t text_vocab = kTextVocabSize;
  bool iwc_enabled = true;
  bool spe_enabled = true;
  bool ssa_enabled = true;
  bool ssa_text_only = false;  // zero only the text rows, not the shape rows
  bool ssa_first_block_only = false;
  // Row k of the image stream gets the ray of the code it predicts (k) rather
  // than of the token it holds (k-1).
  bool spe_shift = true;

  std::size_t ffn_hidden() const;
  std::size_t tokens_per_view() const { return h * w; }
  SegmentBudget budget() const { return {L_text, m}; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;
};

struct FfnWeights {
  Tensor w1, w3, w2;
};

struct BlockParams {
  Tensor attn_norm;
  AttentionWeights attn;
  Tensor ffn_norm;
  FfnWeights ffn;
  Tensor ada;  // [D, 4D] -> shift/scale for attention and FFN inputs
};

struct IwcParams {
  Tensor ref_in;   // [C, D] codebook feature projection
  Tensor ref_ray;  // [6, D]
  Tensor sa_norm;
  AttentionWeights sa;
  Tensor query_ray;  // [6, D]
  Tensor ca_q_norm;
  Tensor ca_kv_norm;
  AttentionWeights ca;
  Tensor ffn_norm;
  FfnWeights ffn;
  Tensor out;  // [D, D], zero at init
};

struct ShapeEncoderParams {
  Tensor w1, b1;  // [F, D], [D]
  Tensor w2, b2;  // [D, D], [D]
  Tensor slot_w;  // [D, m * D]
  Tensor slot_q;  // [m, D]
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelState {
  ModelConfig config;
  Codebook codebook;

  Tensor tok_emb;    // [V, D]
  Tensor text_emb;   // [text_vocab, D]
  Tensor ctx_pos;    // [L_text + m, D]
  Tensor spe_proj;   // [6, D], zero at init
  Tensor null_cond;  // [D]
  ShapeEncoderParams shape;
  std::vector<BlockParams> blocks;
  IwcParams iwc;
  Tensor final_norm;
  Tensor head;  // [D, V]

  // normal(0, 0.02) weights, unit norm gains, zeros for AdaLN, ray projection
  // and image-warp output.
  static ModelState init(const ModelConfig& config, std::uint64_t seed,
                         Codebook codebook = Codebook::palette());

  // Stable order; names are used by checkpoints.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad() const;
};

// Overwrites every zero-initialised projection with normal(0, stddev).
void randomize_identity_paths(ModelState& state, Rng& rng, double stddev = 0.02);

// ---- sub-blocks -----------------------------------------------------------

// W2 (silu(x W1) * (x W3)).
Tensor swiglu_ffn(const Tensor& x, const FfnWeights& w);

// softmax(q k^T / sqrt(d)) v per head, with input/output projections.
Tensor self_attention(const Tensor& x, const AttentionWeights& w, std::size_t heads,
                      const AttentionMask& mask);

// x + concat(0 * O[0:n_split], O[n_split:]) with O = self_attention(x).
Tensor ssa(const Tensor& x, const AttentionWeights& w, std::size_t heads, const AttentionMask& mask,
           std::size_t n_split);

// AdaLN shift/scale pairs for one block from the condition vector c [D].
struct Modulation {
  Tensor attn_shift, attn_scale, ffn_shift, ffn_scale;
};
Modulation adaln(const Tensor& cond, const Tensor& ada);

// One decoder block. `ssa_rows` leading rows (absolute positions) get no
// attention residual.
Tensor decoder_block(const Tensor& x, const BlockParams& p, const Modulation& mod,
                     std::size_t heads, const AttentionMask& mask, std::size_t ssa_rows);

// Keys/values of the reference view after its bidirectional self-attention.
struct IwcMemory {
  Tensor keys;
  Tensor values;
};
// ref_features [h*w, C] (codebook features), ref_rays [h*w, 6].
IwcMemory iwc_memory(const IwcParams& p, const Tensor& ref_features, const Tensor& ref_rays,
                     std::size_t heads);
// One [D] residual per target ray row.
Tensor iwc_apply(const IwcParams& p, const IwcMemory& memory, const Tensor& target_rays,
                 std::size_t heads);
// FFN(CA(SA(X_ref), r)) in one call.
Tensor iwc(const IwcParams& p, const Tensor& ref_features, const Tensor& ref_rays,
           const Tensor& target_rays, std::size_t heads);

// Per-point input features: point, normal, sin/cos of the point at 4 octaves.
inline constexpr std::size_t kShapeFeatureDim = 30;
Tensor shape_features(const PointCloud& cloud);
// m tokens [m, D].
Tensor encode_shape(const ShapeEncoderParams& p, const PointCloud& cloud, std::size_t m);

// ---- full model -------------------------------------------------------------

// Codebook features of codes [n, C].
Tensor code_features(const Codebook& codebook, std::span<const std::int64_t> codes);

// Logits [N*h*w, V]: row k is the distribution of image code k.
Tensor forward(const ModelState& state, const TrainingSequence& seq);

// Everything generation needs beyond the emitted tokens.
struct DecodeRequest {
  ContextSegment context;
  std::optional<PointCloud> shape;
  std::vector<Ray6> rays;  // 1 + N*h*w, same convention as TrainingSequence
  // Reference view codes occupying view slot 1; enables the image-warp path.
  std::optional<std::vector<std::int64_t>> reference_codes;
};

// Incremental decoding with per-layer key/value caches.
class DecodeSession {
 public:
  DecodeSession(const ModelState& state, DecodeRequest request);

  // Logits [V] for image code `position()` given every code before it.
  std::vector<double> logits() const { return last_logits_; }
  std::size_t position() const { return position_; }
  std::size_t capacity() const { return total_; }
  // Feeds image code position() and advances.
  void push(std::int64_t code);

 private:
  void run_rows(const Tensor& x, std::size_t offset);

  const ModelState* state_;
  DecodeRequest request_;
  std::size_t n_ctx_ = 0;
  std::size_t total_ = 0;
  std::size_t position_ = 0;
  std::vector<Modulation> mods_;
  std::vector<std::uint8_t> key_valid_;
  std::size_t ssa_rows_ = 0;
  std::optional<IwcMemory> iwc_;
  std::vector<Tensor> cache_k_;
  std::vector<Tensor> cache_v_;
  std::vector<double> last_logits_;
};

}  // namespace mvar
