#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "mvar/error.hpp"
#include "mvar/sequence.hpp"

using namespace mvar;

namespace {

// Views with distinct codes per (view, cell) and rays from a ring.
struct Fixture {
  std::vector<TokenGrid> views;
  std::vector<RayGrid> rays;
};

Fixture fixture(std::size_t n, std::size_t h, std::size_t w) {
  Fixture f;
  const auto poses = pose_ring(std::max<std::size_t>(n, 2));
  for (std::size_t v = 0; v < n; ++v) {
    TokenGrid g{h, w, {}};
    for (std::size_t c = 0; c < h * w; ++c) g.codes.push_back(static_cast<std::int64_t>((v * 37 + c * 5) % 512));
    f.views.push_back(g);
    f.rays.push_back(ray_grid(poses[v], h, w));
  }
  return f;
}

ContextSegment text_context() {
  const std::vector<std::int64_t> cap{1, 3, 11};
  return pack_context(cap, ConditionSet{}, SegmentBudget{});
}

}  // namespace

TEST_CASE("chain_index examples") {
  CHECK(chain_index(1, 1, 1, 4, 8, 8) == 1);
  CHECK(chain_index(3, 2, 4, 4, 4, 4) == 40);
  CHECK_THROWS_AS(chain_index(0, 1, 1, 4, 4, 4), ContractError);
  CHECK_THROWS_AS(chain_index(5, 1, 1, 4, 4, 4), ContractError);
  CHECK_THROWS_AS(chain_index(1, 5, 1, 4, 4, 4), ContractError);
  CHECK_THROWS_AS(chain_index(1, 1, 5, 4, 4, 4), ContractError);
}

TEST_CASE("chain_index is a bijection for every N, h, w up to 8") {
  for (std::size_t n = 1; n <= 8; ++n) {
    for (std::size_t h = 1; h <= 8; ++h) {
      for (std::size_t w = 1; w <= 8; ++w) {
        const std::size_t total = n * h * w;
        std::vector<std::uint8_t> hit(total + 1, 0);
        bool ok = true;
        for (std::size_t v = 1; v <= n; ++v) {
          for (std::size_t i = 1; i <= h; ++i) {
            for (std::size_t j = 1; j <= w; ++j) {
              const std::size_t t = chain_index(v, i, j, n, h, w);
              ok = ok && t >= 1 && t <= total && !hit[t];
              if (t >= 1 && t <= total) hit[t] = 1;
            }
          }
        }
        ok = ok && std::count(hit.begin() + 1, hit.end(), 1) == static_cast<long>(total);
        REQUIRE(ok);
      }
    }
  }
}

TEST_CASE("sample_order edge cases and support") {
  Rng rng(1);
  CHECK(sample_order(1, rng).slots == std::vector<std::size_t>{1});
  std::set<std::vector<std::size_t>> seen;
  for (int i = 0; i < 10000; ++i) seen.insert(sample_order(3, rng).slots);
  CHECK(seen.size() == 6);
  CHECK_THROWS_AS(sample_order(0, rng), ContractError);
  CHECK(sample_order(4, rng, ShuffleMode::kOff) == ViewOrder::identity(4));
}

TEST_CASE("two-view orders are balanced") {
  Rng rng(2);
  int swapped = 0;
  for (int i = 0; i < 10000; ++i) swapped += sample_order(2, rng).slots[0] == 2;
  CHECK(std::abs(swapped / 10000.0 - 0.5) <= 0.02);
}

TEST_CASE("every sampled order is a permutation and each view lands in each slot evenly") {
  Rng rng(3);
  const std::size_t n = 4, draws = 20000;
  std::vector<std::vector<int>> counts(n, std::vector<int>(n, 0));
  for (std::size_t k = 0; k < draws; ++k) {
    const ViewOrder o = sample_order(n, rng);
    REQUIRE(o.is_permutation());
    for (std::size_t v = 0; v < n; ++v) ++counts[v][o.slots[v] - 1];
  }
  for (const auto& row : counts) {
    for (int c : row) CHECK(std::abs(c / static_cast<double>(draws) - 0.25) <= 0.03);
  }
}

TEST_CASE("pairwise mode covers identity plus every transposition") {
  Rng rng(4);
  std::set<std::vector<std::size_t>> seen;
  for (int i = 0; i < 5000; ++i) {
    const ViewOrder o = sample_order(4, rng, ShuffleMode::kPairwise);
    REQUIRE(o.is_permutation());
    std::size_t moved = 0;
    for (std::size_t v = 0; v < 4; ++v) moved += o.slots[v] != v + 1;
    CHECK((moved == 0 || moved == 2));
    seen.insert(o.slots);
  }
  CHECK(seen.size() == 1 + 4 * 3 / 2);
}

TEST_CASE("views_by_slot inverts slots") {
  ViewOrder o{{3, 1, 2}};
  CHECK(o.views_by_slot() == std::vector<std::size_t>{1, 2, 0});
  CHECK(!ViewOrder{{1, 1, 2}}.is_permutation());
}

TEST_CASE("identity order concatenates views in natural order") {
  const Fixture f = fixture(3, 2, 3);
  const TrainingSequence s = build_sequence(f.views, f.rays, ViewOrder::identity(3), text_context(), {});
  REQUIRE(s.image_codes.size() == 18);
  REQUIRE(s.rays.size() == 19);
  CHECK(s.rays[0] == Ray6{});
  for (std::size_t v = 0; v < 3; ++v) {
    for (std::size_t i = 1; i <= 2; ++i) {
      for (std::size_t j = 1; j <= 3; ++j) {
        const std::size_t t = chain_index(v + 1, i, j, 3, 2, 3);
        CHECK(s.image_codes[t - 1] == f.views[v].at(i - 1, j - 1));
        CHECK(s.rays[t] == f.rays[v].at(i - 1, j - 1).as_array());
      }
    }
  }
}

TEST_CASE("order (2,1) swaps views and rays together") {
  const Fixture f = fixture(2, 2, 2);
  const TrainingSequence s = build_sequence(f.views, f.rays, ViewOrder{{2, 1}}, text_context(), {});
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(s.image_codes[c] == f.views[1].codes[c]);
    CHECK(s.image_codes[4 + c] == f.views[0].codes[c]);
    CHECK(s.rays[1 + c] == f.rays[1].rays[c].as_array());
    CHECK(s.rays[5 + c] == f.rays[0].rays[c].as_array());
  }
  CHECK(s.reference_view() == 1);
}

TEST_CASE("token t comes from the view whose slot holds it") {
  const Fixture f = fixture(4, 3, 3);
  Rng rng(5);
  for (int k = 0; k < 20; ++k) {
    const ViewOrder o = sample_order(4, rng);
    const TrainingSequence s = build_sequence(f.views, f.rays, o, text_context(), {});
    for (std::size_t v = 0; v < 4; ++v) {
      for (std::size_t i = 1; i <= 3; ++i) {
        for (std::size_t j = 1; j <= 3; ++j) {
          const std::size_t t = chain_index(o.slots[v], i, j, 4, 3, 3);
          CHECK(s.image_codes[t - 1] == f.views[v].at(i - 1, j - 1));
          CHECK(s.rays[t] == f.rays[v].at(i - 1, j - 1).as_array());
        }
      }
    }
  }
}

TEST_CASE("unpermuting a shuffled sequence gives back the identity-order sequence") {
  const Fixture f = fixture(4, 8, 8);
  const TrainingSequence ident = build_sequence(f.views, f.rays, ViewOrder::identity(4), text_context(), {});
  Rng rng(6);
  for (int k = 0; k < 100; ++k) {
    const ViewOrder o = sample_order(4, rng);
    const UnpermutedViews u = unpermute(build_sequence(f.views, f.rays, o, text_context(), {}));
    std::vector<std::int64_t> codes;
    std::vector<Ray6> rays{Ray6{}};
    for (std::size_t v = 0; v < 4; ++v) {
      CHECK(u.views[v] == f.views[v]);
      codes.insert(codes.end(), u.views[v].codes.begin(), u.views[v].codes.end());
      rays.insert(rays.end(), u.rays[v].begin(), u.rays[v].end());
    }
    CHECK(codes == ident.image_codes);
    CHECK(rays == ident.rays);
  }
}

TEST_CASE("build_sequence rejects mismatched extents") {
  Fixture f = fixture(2, 2, 2);
  CHECK_THROWS_AS(build_sequence(f.views, std::span<const RayGrid>(f.rays).first(1), ViewOrder::identity(2),
                                 text_context(), {}),
                  DimensionError);
  f.views[1] = TokenGrid{2, 3, std::vector<std::int64_t>(6, 0)};
  CHECK_THROWS_AS(build_sequence(f.views, f.rays, ViewOrder::identity(2), text_context(), {}), DimensionError);
}

TEST_CASE("context packing layouts") {
  const std::vector<std::int64_t> cap{1, 4, 13};
  const SegmentBudget b;

  const ContextSegment text = pack_context(cap, {true, false, false}, b);
  CHECK(text.text_len == 3);
  CHECK(text.text_ids.size() == b.text_slots);
  CHECK(text.text_ids[3] == kTextPad);
  CHECK(text.shape_slots == 0);
  CHECK(text.start_index() == b.text_slots);

  const ContextSegment with_shape = pack_context(cap, {true, false, true}, b);
  CHECK(with_shape.shape_slots == b.shape_slots);
  CHECK(with_shape.start_index() == b.text_slots + b.shape_slots);

  const ContextSegment none = pack_context(cap, {false, false, false}, b);
  CHECK(decode_words(std::vector<std::int64_t>(none.text_ids.begin(), none.text_ids.begin() + none.text_len)) ==
        "generate multi view images of the following");
  CHECK(none.start_index() == b.text_slots);

  const ContextSegment img = pack_context(cap, {false, true, false}, b);
  CHECK(decode_words(img.text_ids) == "generate multi view images of the following <img>");
  const ContextSegment both = pack_context(cap, {false, true, true}, b);
  CHECK(decode_words(both.text_ids) == "generate multi view images of the following <img> and <shape>");

  const std::vector<std::int64_t> long_cap(17, 1);
  CHECK_THROWS_AS(pack_context(long_cap, {}, b), ContractError);
  const std::vector<std::int64_t> padded{1, kTextPad, 2};
  CHECK_THROWS_AS(pack_context(padded, {}, b), ContractError);
}

TEST_CASE("start index depends only on conditions and budgets") {
  const SegmentBudget b{12, 5};
  for (bool shape : {false, true}) {
    std::set<std::size_t> starts;
    for (std::size_t len = 1; len <= 12; ++len) {
      const std::vector<std::int64_t> cap(len, 2);
      starts.insert(pack_context(cap, {true, false, shape}, b).start_index());
      starts.insert(pack_context(cap, {false, true, shape}, b).start_index());
    }
    CHECK(starts.size() == 1);
    CHECK(*starts.begin() == (shape ? 17u : 12u));
  }
}
