#include "mvar/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "mvar/error.hpp"

namespace mvar {

void DecodeConfig::validate(std::size_t vocab) const {
  if (!(temperature >= 0.0)) throw ContractError("temperature must be non-negative");
  if (top_k < 1 || top_k > vocab) {
    throw ContractError("top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(vocab) + "]");
  }
}

std::int64_t choose_token(std::span<const double> logits, std::size_t codes, const DecodeConfig& cfg,
                          Rng& rng) {
  if (codes == 0 || codes > logits.size()) throw DimensionError("choose_token: bad code count");
  const auto live = logits.first(codes);
  const auto argmax = [&] {
    return static_cast<std::int64_t>(std::max_element(live.begin(), live.end()) - live.begin());
  };
  if (cfg.mode == DecodeMode::kGreedy || cfg.temperature == 0.0) return argmax();

  std::vector<std::size_t> idx(codes);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t k = std::min(cfg.top_k, codes);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return live[a] > live[b] || (live[a] == live[b] && a < b); });
  idx.resize(k);
  const double mx = live[idx.front()];
  std::vector<double> w(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = std::exp((live[idx[i]] - mx) / cfg.temperature);
    total += w[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < k; ++i) {
    u -= w[i];
    if (u < 0.0) return static_cast<std::int64_t>(idx[i]);
  }
  return static_cast<std::int64_t>(idx.back());
}

ReferenceView prefill_reference(const ModelState& state, const Image& image, const CameraPose& pose) {
  const auto& cfg = state.config;
  if (image.width != image.height || image.width != cfg.w * kDefaultPatch ||
      image.height != cfg.h * kDefaultPatch) {
    throw DimensionError("reference image " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + " does not match the model grid " +
                         std::to_string(cfg.h) + "x" + std::to_string(cfg.w) + " at patch " +
                         std::to_string(kDefaultPatch));
  }
  return {tokenize(image, state.codebook, kDefaultPatch), pose};
}

double GenerationResult::mean_log_prob() const {
  if (log_probs.empty()) return 0.0;
  return std::accumulate(log_probs.begin(), log_probs.end(), 0.0) / static_cast<double>(log_probs.size());
}

GenerationResult generate(const ModelState& state, const GenerationRequest& request,
                          const DecodeConfig& cfg) {
  const auto& mc = state.config;
  cfg.validate(state.codebook.entries);
  const std::size_t hw = mc.tokens_per_view();
  const std::size_t n = request.poses.size();
  if (n == 0 || n > mc.N) {
    throw ContractError("generation needs between 1 and " + std::to_string(mc.N) + " poses, got " +
                        std::to_string(n));
  }
  if (request.conditions.image != request.reference.has_value()) {
    throw ContractError(request.conditions.image ? "image condition requested without a reference view"
                                                 : "reference view given but the image condition is off");
  }
  if (request.conditions.shape != request.shape.has_value()) {
    throw ContractError(request.conditions.shape ? "shape condition requested without a point cloud"
                                                 : "point cloud given but the shape condition is off");
  }
  if (request.conditions.text && request.caption.empty()) {
    throw ContractError("text condition requested with an empty caption");
  }

  DecodeRequest dr;
  dr.context = pack_context(request.caption, request.conditions, mc.budget());
  dr.shape = request.shape;
  dr.rays.reserve(1 + n * hw);
  dr.rays.push_back(Ray6{});
  for (const auto& pose : request.poses) {
    for (const auto& r : ray_grid(pose, mc.h, mc.w).rays) dr.rays.push_back(r.as_array());
  }
  std::size_t prefilled = 0;
  if (request.reference) {
    const auto& ref = request.reference->tokens;
    if (ref.h != mc.h || ref.w != mc.w) throw DimensionError("reference grid does not match the model");
    if (!(request.reference->pose == request.poses.front())) {
      throw ContractError("the reference pose must be the first requested pose");
    }
    dr.reference_codes = ref.codes;
    prefilled = hw;
  }

  NoGradGuard no_grad;
  DecodeSession session(state, std::move(dr));
  Rng rng(cfg.seed);
  GenerationResult out;
  out.prefilled = prefilled;
  std::vector<std::int64_t> codes;
  codes.reserve(n * hw);
  for (std::size_t p = 0; p < n * hw; ++p) {
    if (p < prefilled) {
      codes.push_back(request.reference->tokens.codes[p]);
    } else {
      const auto logits = session.logits();
      const std::int64_t c = choose_token(logits, state.codebook.entries, cfg, rng);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double l : logits) z += std::exp(l - mx);
      out.log_probs.push_back(logits[static_cast<std::size_t>(c)] - mx - std::log(z));
      codes.push_back(c);
    }
    session.push(codes.back());
  }

  out.order = ViewOrder::identity(n);
  out.poses = request.poses;
  for (std::size_t v = 0; v < n; ++v) {
    TokenGrid g;
    g.h = mc.h;
    g.w = mc.w;
    g.codes.assign(codes.begin() + static_cast<std::ptrdiff_t>(v * hw),
                   codes.begin() + static_cast<std::ptrdiff_t>((v + 1) * hw));
    out.images.push_back(decode(g, state.codebook, kDefaultPatch));
    out.views.push_back(std::move(g));
  }
  return out;
}

std::vector<CameraPose> ring_from(double start_deg, double elevation_deg, std::size_t n) {
  std::vector<CameraPose> poses;
  for (std::size_t i = 0; i < n; ++i) {
    poses.push_back(make_pose(std::fmod(start_deg + 360.0 * static_cast<double>(i) / static_cast<double>(n), 360.0),
                              elevation_deg));
  }
  return poses;
}

void write_generation(const std::filesystem::path& dir, const GenerationResult& result) {
  std::filesystem::create_directories(dir);
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw DataError("cannot write " + (dir / "manifest.txt").string());
  m << std::setprecision(17);
  m << "views=" << result.views.size() << '\n';
  m << "order=";
  for (std::size_t i = 0; i < result.order.slots.size(); ++i) m << (i ? "," : "") << result.order.slots[i];
  m << '\n';
  for (std::size_t v = 0; v < result.views.size(); ++v) {
    const std::string file = "view_" + std::to_string(v) + ".ppm";
    write_ppm(dir / file, result.images[v]);
    m << "view." << v << ".image=" << file << '\n';
    m << "view." << v << ".azimuth=" << result.poses[v].azimuth_deg << '\n';
    m << "view." << v << ".elevation=" << result.poses[v].elevation_deg << '\n';
  }
  m << "prefilled_tokens=" << result.prefilled << '\n';
  m << "generated_tokens=" << result.log_probs.size() << '\n';
  m << "mean_log_prob=" << result.mean_log_prob() << '\n';
  if (!result.log_probs.empty()) {
    m << "min_log_prob=" << *std::min_element(result.log_probs.begin(), result.log_probs.end()) << '\n';
  }
}

}  // namespace mvar
