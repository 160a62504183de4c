#include "mvar/sequence.hpp"

#include <algorithm>
#include <numeric>

#include "mvar/error.hpp"

namespace mvar {

std::size_t chain_index(std::size_t n, std::size_t i, std::size_t j, std::size_t views,
                        std::size_t h, std::size_t w) {
  if (n < 1 || n > views || i < 1 || i > h || j < 1 || j > w) {
    throw ContractError("chain_index(" + std::to_string(n) + ", " + std::to_string(i) + ", " +
                        std::to_string(j) + ") outside N=" + std::to_string(views) +
                        ", h=" + std::to_string(h) + ", w=" + std::to_string(w));
  }
  return (n - 1) * h * w + (i - 1) * w + j;
}

ViewOrder ViewOrder::identity(std::size_t views) {
  ViewOrder o;
  o.slots.resize(views);
  std::iota(o.slots.begin(), o.slots.end(), std::size_t{1});
  return o;
}

bool ViewOrder::is_permutation() const {
  std::vector<std::uint8_t> seen(slots.size(), 0);
  for (auto s : slots) {
    if (s < 1 || s > slots.size() || seen[s - 1]) return false;
    seen[s - 1] = 1;
  }
  return true;
}

std::vector<std::size_t> ViewOrder::views_by_slot() const {
  if (!is_permutation()) throw ContractError("view order is not a permutation");
  std::vector<std::size_t> by_slot(slots.size());
  for (std::size_t n = 0; n < slots.size(); ++n) by_slot[slots[n] - 1] = n;
  return by_slot;
}

ViewOrder sample_order(std::size_t views, Rng& rng, ShuffleMode mode) {
  if (views == 0) throw ContractError("sample_order needs at least one view");
  ViewOrder order = ViewOrder::identity(views);
  switch (mode) {
    case ShuffleMode::kOff:
      break;
    case ShuffleMode::kFull:
      rng.shuffle(std::span<std::size_t>(order.slots));
      break;
    case ShuffleMode::kPairwise: {
      const std::size_t pairs = views * (views - 1) / 2;
      const std::size_t pick = rng.uniform_int(pairs + 1);
      if (pick == pairs) break;
      std::size_t a = 0, remaining = pick;
      while (remaining >= views - 1 - a) {
        remaining -= views - 1 - a;
        ++a;
      }
      std::swap(order.slots[a], order.slots[a + 1 + remaining]);
      break;
    }
  }
  return order;
}

std::vector<std::int64_t> instruction_caption(bool image, bool shape) {
  std::vector<std::int64_t> ids;
  for (const char* w : {"generate", "multi", "view", "images", "of", "the", "following"}) {
    ids.push_back(word_id(w));
  }
  if (image) ids.push_back(word_id("<img>"));
  if (image && shape) ids.push_back(word_id("and"));
  if (shape) ids.push_back(word_id("<shape>"));
  return ids;
}

ContextSegment pack_context(std::span<const std::int64_t> caption_ids, const ConditionSet& conditions,
                            const SegmentBudget& budget) {
  std::vector<std::int64_t> text = conditions.text
                                       ? std::vector<std::int64_t>(caption_ids.begin(), caption_ids.end())
                                       : instruction_caption(conditions.image, conditions.shape);
  if (text.size() > budget.text_slots) {
    throw ContractError("caption of " + std::to_string(text.size()) + " words exceeds the " +
                        std::to_string(budget.text_slots) + "-slot text segment");
  }
  if (std::find(text.begin(), text.end(), kTextPad) != text.end()) {
    throw ContractError("caption contains the pad id");
  }
  ContextSegment ctx;
  ctx.text_len = text.size();
  ctx.text_ids = std::move(text);
  ctx.text_ids.resize(budget.text_slots, kTextPad);
  ctx.shape_slots = conditions.shape ? budget.shape_slots : 0;
  return ctx;
}

TrainingSequence build_sequence(std::span<const TokenGrid> views, std::span<const RayGrid> rays,
                                const ViewOrder& order, ContextSegment context,
                                const ConditionSet& conditions, std::optional<PointCloud> shape) {
  if (views.empty()) throw DimensionError("build_sequence needs at least one view");
  if (rays.size() != views.size() || order.size() != views.size()) {
    throw DimensionError("build_sequence: " + std::to_string(views.size()) + " views, " +
                         std::to_string(rays.size()) + " ray grids, order of " +
                         std::to_string(order.size()));
  }
  if (conditions.shape != shape.has_value()) {
    throw ContractError("shape condition flag and point cloud presence disagree");
  }
  const std::size_t h = views.front().h, w = views.front().w;
  for (std::size_t n = 0; n < views.size(); ++n) {
    if (views[n].h != h || views[n].w != w || views[n].codes.size() != h * w) {
      throw DimensionError("view " + std::to_string(n) + " grid differs from view 0");
    }
    if (rays[n].h != h || rays[n].w != w) {
      throw DimensionError("ray grid " + std::to_string(n) + " does not match the token grid");
    }
  }
  const auto by_slot = order.views_by_slot();

  TrainingSequence seq;
  seq.context = std::move(context);
  seq.conditions = conditions;
  seq.shape = std::move(shape);
  seq.order = order;
  seq.views = views.size();
  seq.h = h;
  seq.w = w;
  seq.image_codes.reserve(views.size() * h * w);
  seq.rays.reserve(1 + views.size() * h * w);
  seq.rays.push_back(Ray6{});
  for (std::size_t slot = 0; slot < by_slot.size(); ++slot) {
    const std::size_t n = by_slot[slot];
    const auto& grid = views[n];
    seq.image_codes.insert(seq.image_codes.end(), grid.codes.begin(), grid.codes.end());
    for (const auto& r : rays[n].rays) seq.rays.push_back(r.as_array());
  }
  return seq;
}

UnpermutedViews unpermute(const TrainingSequence& seq) {
  const std::size_t hw = seq.h * seq.w;
  if (seq.image_codes.size() != seq.views * hw || seq.rays.size() != 1 + seq.views * hw) {
    throw DimensionError("sequence lengths do not match its view layout");
  }
  UnpermutedViews out;
  out.views.resize(seq.views);
  out.rays.resize(seq.views);
  for (std::size_t n = 0; n < seq.views; ++n) {
    const std::size_t slot = seq.order.slots[n] - 1;
    auto& grid = out.views[n];
    grid.h = seq.h;
    grid.w = seq.w;
    grid.codes.assign(seq.image_codes.begin() + slot * hw, seq.image_codes.begin() + (slot + 1) * hw);
    out.rays[n].assign(seq.rays.begin() + 1 + slot * hw, seq.rays.begin() + 1 + (slot + 1) * hw);
  }
  return out;
}

}  // namespace mvar
