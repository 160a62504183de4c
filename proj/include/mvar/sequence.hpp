#pragma once

// Flattened multi-view token sequences:
//
//   [ text (L_text slots, padded) | shape (m slots, optional) | start | view S=1 | view S=2 | ... ]
//
// Image tokens are chained view after view (row-major within a view); with a
// view order S, original view n is placed in generation slot S_n. Every image
// token carries the Plücker ray of the view and cell it came from; the start
// token carries the zero ray.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mvar/camera.hpp"
#include "mvar/rng.hpp"
#include "mvar/scene.hpp"
#include "mvar/tokenizer.hpp"

namespace mvar {

inline constexpr std::int64_t kStartToken = static_cast<std::int64_t>(kPaletteCodes);
inline constexpr std::int64_t kImagePad = kStartToken + 1;
inline constexpr std::size_t kImageVocab = kPaletteCodes + 2;

// 1-based position of token (i, j) of view n, each index 1-based.
std::size_t chain_index(std::size_t n, std::size_t i, std::size_t j, std::size_t views,
                        std::size_t h, std::size_t w);

// S as a 1-based permutation: slots[n - 1] = S_n, the generation slot of view n.
struct ViewOrder {
  std::vector<std::size_t> slots;

  static ViewOrder identity(std::size_t views);
  std::size_t size() const { return slots.size(); }
  bool is_permutation() const;
  // 0-based original view index for each 0-based generation slot.
  std::vector<std::size_t> views_by_slot() const;
  bool operator==(const ViewOrder&) const = default;
};

enum class ShuffleMode {
  kOff,       // identity every time
  kFull,      // uniform over all N! orders
  kPairwise,  // identity or one transposition of it: 1 + N(N-1)/2 orders
};

ViewOrder sample_order(std::size_t views, Rng& rng, ShuffleMode mode = ShuffleMode::kFull);

struct ConditionSet {
  bool text = true;
  bool image = false;
  bool shape = false;
  bool operator==(const ConditionSet&) const = default;
};

struct SegmentBudget {
  std::size_t text_slots = 16;
  std::size_t shape_slots = 8;
};

struct ContextSegment {
  std::vector<std::int64_t> text_ids;  // exactly text_slots entries, kTextPad filled
  std::size_t text_len = 0;            // non-pad prefix length
  std::size_t shape_slots = 0;         // 0 when the shape condition is off

  std::size_t length() const { return text_ids.size() + shape_slots; }
  std::size_t start_index() const { return length(); }
};

// Caption replacing dropped text: "generate multi view images of the
// following" plus "<img>" / "<shape>" markers for the combined conditions.
std::vector<std::int64_t> instruction_caption(bool image, bool shape);

// Text first, then shape slots, then the start token.
ContextSegment pack_context(std::span<const std::int64_t> caption_ids, const ConditionSet& conditions,
                            const SegmentBudget& budget);

struct TrainingSequence {
  ContextSegment context;
  ConditionSet conditions;
  std::optional<PointCloud> shape;
  std::vector<std::int64_t> image_codes;  // views * h * w, generation order
  std::vector<Ray6> rays;                 // 1 + views * h * w; rays[0] is the start token's
  ViewOrder order;
  std::size_t views = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t tokens_per_view() const { return h * w; }
  std::size_t start_index() const { return context.start_index(); }
  // Original (0-based) index of the view generated first; the image condition
  // refers to this view.
  std::size_t reference_view() const { return order.views_by_slot().front(); }
};

// Chains the views in the order S and reorders their rays identically.
TrainingSequence build_sequence(std::span<const TokenGrid> views, std::span<const RayGrid> rays,
                                const ViewOrder& order, ContextSegment context,
                                const ConditionSet& conditions,
                                std::optional<PointCloud> shape = std::nullopt);

// Inverse of the chaining: token grids and ray grids back in natural view order.
struct UnpermutedViews {
  std::vector<TokenGrid> views;
  std::vector<std::vector<Ray6>> rays;
};
UnpermutedViews unpermute(const TrainingSequence& seq);

}  // namespace mvar
