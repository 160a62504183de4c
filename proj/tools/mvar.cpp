#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mvar/error.hpp"
#include "mvar/experiment.hpp"
#include "mvar/runtime.hpp"

namespace {

using namespace mvar;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::vector<std::int64_t> parse_caption(const std::string& text) {
  std::vector<std::int64_t> ids;
  std::istringstream is(text);
  std::string word;
  while (is >> word) ids.push_back(word_id(word));
  return ids;
}

std::pair<double, double> parse_pose(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ContractError("pose must be AZ,EL, got '" + text + "'");
  try {
    return {std::stod(text.substr(0, comma)), std::stod(text.substr(comma + 1))};
  } catch (const std::logic_error&) {
    throw ContractError("pose must be AZ,EL, got '" + text + "'");
  }
}

void write_report(const std::string& path, const MetricReport& report) {
  if (path.empty() || path == "-") {
    std::cout << report.serialize();
    return;
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << report.serialize();
}

// ---- gen-data

struct GenDataArgs {
  std::string seeds = "1..16";
  std::size_t views = 4;
  std::size_t res = 32;
  std::string out;
};

int run_gen_data(const GenDataArgs& a) {
  DatasetConfig cfg;
  cfg.views = a.views;
  cfg.res = a.res;
  cfg.validate();
  const auto seeds = parse_seed_range(a.seeds);
  write_dataset(a.out, seeds, cfg);
  std::cerr << "wrote " << seeds.size() << " scenes to " << a.out << '\n';
  return kExitOk;
}

// ---- train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  std::size_t iterations = 0;
};

int run_train(const TrainArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  if (a.iterations > 0) cfg.train.iterations = a.iterations;
  const Dataset data = load_dataset(a.data);
  if (data.config.views != cfg.model.N || data.config.grid() != cfg.model.h) {
    throw DataError("dataset layout (" + std::to_string(data.config.views) + " views, grid " +
                    std::to_string(data.config.grid()) + ") does not match the model config");
  }
  TrainSession session =
      a.resume.empty() ? start_training(cfg.model, cfg.train) : resume_session(a.resume, cfg.train);
  train(session, data.samples, cfg.train.iterations, &std::cerr);
  save_session(a.out, session);
  std::cerr << "saved " << a.out << " at iteration " << session.iteration << '\n';
  return kExitOk;
}

// ---- sample

struct SampleArgs {
  std::string ckpt;
  std::string mode = "t2mv";
  std::string caption;
  std::string ref;
  std::string ref_pose = "0,30";
  std::uint64_t shape_seed = 0;
  bool has_shape_seed = false;
  std::string out;
  double temperature = 0.0;
  std::size_t top_k = 64;
  std::uint64_t seed = 0;
  double elevation = kRingElevationDeg;
};

int run_sample(const SampleArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const ModelState& model = ckpt.model;
  const std::size_t n = model.config.N;
  GenerationRequest req;
  if (a.mode == "t2mv") {
    if (a.caption.empty()) throw ContractError("t2mv needs --caption");
    req.conditions = {true, false, false};
    req.caption = parse_caption(a.caption);
    req.poses = ring_from(0.0, a.elevation, n);
  } else if (a.mode == "i2mv") {
    if (a.ref.empty()) throw ContractError("i2mv needs --ref");
    const auto [az, el] = parse_pose(a.ref_pose);
    req.conditions = {false, true, false};
    req.poses = ring_from(az, el, n);
    req.reference = prefill_reference(model, to_8bit(read_ppm(a.ref)), req.poses.front());
  } else if (a.mode == "shape2mv") {
    if (!a.has_shape_seed) throw ContractError("shape2mv needs --shape-seed");
    req.conditions = {false, false, true};
    req.shape = sample_points(make_scene(a.shape_seed), kShapePoints, splitmix64(a.shape_seed));
    req.poses = ring_from(0.0, a.elevation, n);
  } else {
    throw ContractError("unknown mode '" + a.mode + "'");
  }
  DecodeConfig dc;
  dc.mode = a.temperature > 0.0 ? DecodeMode::kSampled : DecodeMode::kGreedy;
  dc.temperature = a.temperature;
  dc.top_k = a.top_k;
  dc.seed = a.seed;
  const GenerationResult result = generate(model, req, dc);
  write_generation(a.out, result);
  std::cerr << "wrote " << result.views.size() << " views to " << a.out << '\n';
  return kExitOk;
}

// ---- eval

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string report;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const Dataset data = load_dataset(a.data, ckpt.model.codebook);
  MetricReport report = evaluate_checkpoint(ckpt.model, data.samples);
  std::ostringstream fp;
  fp << std::hex << ckpt.iteration;
  report.fingerprint = "ckpt-iter-" + fp.str();
  write_report(a.report, report);
  return kExitOk;
}

// ---- experiment

struct ExperimentArgs {
  std::string name;
  std::string config;
  std::string out;
  std::string report;
};

int run_experiment_cmd(const ExperimentArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  if (!a.out.empty()) cfg.out_dir = a.out;
  const MetricReport report = run_experiment(a.name, cfg, &std::cerr);
  write_report(a.report, report);
  return kExitOk;
}

// ---- inspect

struct InspectArgs {
  std::string ckpt;
  std::string out;
  std::uint64_t scene_seed = 1;
  std::size_t scale = 2;
};

using Rgb = std::array<double, 3>;

void fill(Image& im, std::size_t x, std::size_t y, std::size_t s, const Rgb& c) {
  for (std::size_t dy = 0; dy < s; ++dy) {
    for (std::size_t dx = 0; dx < s; ++dx) {
      for (std::size_t k = 0; k < 3; ++k) im.at(x * s + dx, y * s + dy, k) = c[k];
    }
  }
}

int run_inspect(const InspectArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const ModelConfig& mc = ckpt.model.config;
  DatasetConfig dc;
  dc.views = mc.N;
  dc.res = mc.h * kDefaultPatch;
  const SceneSample sample = make_sample(a.scene_seed, dc, ckpt.model.codebook);
  const ConditionSet cond{true, false, true};
  Rng rng(a.scene_seed);
  const TrainingSequence seq =
      make_sequence(sample, cond, sample_order(mc.N, rng, ShuffleMode::kOff), mc);

  const std::size_t n_ctx = seq.context.length();
  const std::size_t total = n_ctx + seq.image_codes.size();
  AttentionMask mask = AttentionMask::prefix_causal(n_ctx);
  mask.key_valid.assign(total, 1);
  for (std::size_t i = seq.context.text_len; i < mc.L_text; ++i) mask.key_valid[i] = 0;
  const std::size_t ssa_rows = !mc.ssa_enabled ? 0 : (mc.ssa_text_only ? mc.L_text : n_ctx);

  std::filesystem::create_directories(a.out);
  const std::size_t s = a.scale;
  Image m(total * s, total * s);
  for (std::size_t q = 0; q < total; ++q) {
    for (std::size_t k = 0; k < total; ++k) {
      Rgb c{0.08, 0.08, 0.1};
      if (mask.allowed(q, k)) c = q < ssa_rows ? Rgb{0.45, 0.6, 0.95} : Rgb{1.0, 1.0, 1.0};
      else if (!mask.key_valid[k] && (k <= q || q < n_ctx)) c = {0.7, 0.2, 0.2};
      fill(m, k, q, s, c);
    }
  }
  write_ppm(std::filesystem::path(a.out) / "attention_mask.ppm", m);

  const std::size_t band = 24;
  const std::size_t hw = mc.tokens_per_view();
  Image layout(total * s, band);
  for (std::size_t p = 0; p < total; ++p) {
    Rgb c;
    if (p < mc.L_text) c = p < seq.context.text_len ? Rgb{0.95, 0.75, 0.2} : Rgb{0.5, 0.42, 0.2};
    else if (p < n_ctx) c = {0.3, 0.8, 0.4};
    else if (p == n_ctx) c = {0.9, 0.1, 0.1};
    else {
      const std::size_t v = (p - n_ctx - 1) / hw;
      const double t = static_cast<double>(v) / static_cast<double>(std::max<std::size_t>(1, mc.N - 1));
      c = {0.2 + 0.2 * t, 0.35 + 0.3 * t, 0.95 - 0.4 * t};
      if ((p - n_ctx - 1) % hw == 0) c = {1.0, 1.0, 1.0};
    }
    for (std::size_t y = 0; y < band; ++y) {
      for (std::size_t dx = 0; dx < s; ++dx) {
        for (std::size_t k = 0; k < 3; ++k) layout.at(p * s + dx, y, k) = c[k];
      }
    }
  }
  write_ppm(std::filesystem::path(a.out) / "sequence_layout.ppm", layout);

  std::ofstream txt(std::filesystem::path(a.out) / "layout.txt");
  txt << "text_slots=" << mc.L_text << "\ntext_len=" << seq.context.text_len
      << "\nshape_slots=" << seq.context.shape_slots << "\nstart=" << n_ctx
      << "\nimage_rows=" << seq.image_codes.size() << "\ntokens_per_view=" << hw
      << "\nssa_rows=" << ssa_rows << "\ncaption=" << decode_words(sample.caption) << '\n';
  std::cerr << "wrote attention_mask.ppm, sequence_layout.ppm, layout.txt to " << a.out << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  mvar::tune_allocator();
  CLI::App app{"mvar: multi-view autoregressive generation on synthetic scenes"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "render a dataset of synthetic scenes");
  c_gen->add_option("--seeds", gen.seeds, "seed range A..B")->capture_default_str();
  c_gen->add_option("--views", gen.views, "views per scene")->capture_default_str();
  c_gen->add_option("--res", gen.res, "image resolution")->capture_default_str();
  c_gen->add_option("--out", gen.out, "output directory")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a model on a dataset directory");
  c_train->add_option("--config", tr.config, "experiment config (INI)");
  c_train->add_option("--data", tr.data, "dataset directory")->required();
  c_train->add_option("--out", tr.out, "checkpoint path")->required();
  c_train->add_option("--resume", tr.resume, "continue from a checkpoint");
  c_train->add_option("--iterations", tr.iterations, "override the iteration count");

  SampleArgs sm;
  auto* c_sample = app.add_subcommand("sample", "generate views from a checkpoint");
  c_sample->add_option("--ckpt", sm.ckpt)->required();
  c_sample->add_option("--mode", sm.mode)->check(CLI::IsMember({"t2mv", "i2mv", "shape2mv"}));
  c_sample->add_option("--caption", sm.caption, "caption words");
  c_sample->add_option("--ref", sm.ref, "reference image (PPM)");
  c_sample->add_option("--ref-pose", sm.ref_pose, "reference azimuth,elevation in degrees");
  auto* shape_opt = c_sample->add_option("--shape-seed", sm.shape_seed, "scene seed for the point cloud");
  c_sample->add_option("--out", sm.out)->required();
  c_sample->add_option("--temperature", sm.temperature, "0 decodes greedily");
  c_sample->add_option("--top-k", sm.top_k);
  c_sample->add_option("--seed", sm.seed);
  c_sample->add_option("--elevation", sm.elevation);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  c_eval->add_option("--ckpt", ev.ckpt)->required();
  c_eval->add_option("--data", ev.data)->required();
  c_eval->add_option("--report", ev.report, "report path, - for stdout")->required();

  ExperimentArgs ex;
  auto* c_exp = app.add_subcommand("experiment", "train and evaluate a named experiment");
  c_exp->add_option("--name", ex.name)->required()->check(CLI::IsMember(experiment_names()));
  c_exp->add_option("--config", ex.config, "experiment config (INI)");
  c_exp->add_option("--out", ex.out, "output directory for reports and samples");
  c_exp->add_option("--report", ex.report, "report path, - for stdout");

  InspectArgs in;
  auto* c_inspect = app.add_subcommand("inspect", "draw the attention mask and sequence layout");
  c_inspect->add_option("--ckpt", in.ckpt)->required();
  c_inspect->add_option("--out", in.out)->required();
  c_inspect->add_option("--scene-seed", in.scene_seed);
  c_inspect->add_option("--scale", in.scale)->check(CLI::Range(1, 16));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*c_gen) return run_gen_data(gen);
    if (*c_train) return run_train(tr);
    if (*c_sample) {
      sm.has_shape_seed = shape_opt->count() > 0;
      return run_sample(sm);
    }
    if (*c_eval) return run_eval(ev);
    if (*c_exp) return run_experiment_cmd(ex);
    if (*c_inspect) return run_inspect(in);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
