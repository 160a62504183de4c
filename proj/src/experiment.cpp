#include "mvar/experiment.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "mvar/error.hpp"

namespace mvar {

namespace pt = boost::property_tree;

namespace {

std::string shuffle_name(ShuffleMode m) {
  switch (m) {
    case ShuffleMode::kOff: return "off";
    case ShuffleMode::kFull: return "full";
    case ShuffleMode::kPairwise: return "pairwise";
  }
  return "full";
}

ShuffleMode shuffle_from(const std::string& s) {
  if (s == "off") return ShuffleMode::kOff;
  if (s == "full") return ShuffleMode::kFull;
  if (s == "pairwise") return ShuffleMode::kPairwise;
  throw DataError("shuffle must be off, full or pairwise, got '" + s + "'");
}

std::string conditions_name(const std::optional<ConditionSet>& c) {
  if (!c) return "policy";
  std::string out;
  auto add = [&](bool on, const char* n) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += n;
  };
  add(c->text, "text");
  add(c->image, "image");
  add(c->shape, "shape");
  return out.empty() ? "none" : out;
}

std::optional<ConditionSet> conditions_from(const std::string& s) {
  if (s == "policy") return std::nullopt;
  ConditionSet c{false, false, false};
  if (s == "none") return c;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "text") c.text = true;
    else if (item == "image") c.image = true;
    else if (item == "shape") c.shape = true;
    else throw DataError("unknown condition '" + item + "'");
  }
  return c;
}

std::string seeds_text(const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) return "";
  bool contiguous = true;
  for (std::size_t i = 1; i < seeds.size(); ++i) contiguous = contiguous && seeds[i] == seeds[i - 1] + 1;
  if (contiguous) return std::to_string(seeds.front()) + ".." + std::to_string(seeds.back());
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) out += (i ? "," : "") + std::to_string(seeds[i]);
  return out;
}

std::vector<std::uint64_t> seeds_from(const std::string& s) {
  if (s.rfind("unique:", 0) == 0) {
    const auto rest = s.substr(7);
    const auto colon = rest.find(':');
    if (colon == std::string::npos) throw DataError("expected unique:<first>:<count>, got '" + s + "'");
    return unique_caption_seeds(std::stoull(rest.substr(0, colon)), std::stoull(rest.substr(colon + 1)));
  }
  if (s.find(',') != std::string::npos) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
    return out;
  }
  return parse_seed_range(s);
}

template <class T>
T get(const pt::ptree& sec, const char* key, T fallback) {
  const auto raw = sec.get_optional<std::string>(key);
  if (!raw) return fallback;
  const auto v = sec.get_optional<T>(key);
  if (!v) throw DataError(std::string("config key '") + key + "': cannot read '" + *raw + "'");
  return *v;
}

void check_keys(const pt::ptree& root, const std::map<std::string, std::set<std::string>>& allowed) {
  for (const auto& [section, body] : root) {
    auto it = allowed.find(section);
    if (it == allowed.end()) throw DataError("unknown config section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) throw DataError("unknown key '" + key + "' in [" + section + "]");
    }
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& ini_text) {
  pt::ptree root;
  try {
    std::istringstream is(ini_text);
    pt::ini_parser::read_ini(is, root);
  } catch (const pt::ini_parser_error& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  check_keys(root, {
                       {"model",
                        {"D", "L", "H", "N", "grid", "text_slots", "shape_slots", "iwc", "spe", "ssa",
                         "ssa_text_only", "ssa_first_block_only", "spe_shift"}},
                       {"train",
                        {"lr", "beta1", "beta2", "eps", "weight_decay", "clip", "batch", "iterations",
                         "ramp", "seed", "shuffle", "conditions", "log_every"}},
                       {"data", {"views", "res", "patch", "points", "train_seeds", "eval_seeds"}},
                       {"experiment", {"runs", "out"}},
                   });
  ExperimentConfig c;
  try {
    const auto empty = pt::ptree();
    const auto& m = root.get_child("model", empty);
    c.model.D = get<std::size_t>(m, "D", c.model.D);
    c.model.L = get<std::size_t>(m, "L", c.model.L);
    c.model.H = get<std::size_t>(m, "H", c.model.H);
    c.model.N = get<std::size_t>(m, "N", c.model.N);
    c.model.h = c.model.w = get<std::size_t>(m, "grid", c.model.h);
    c.model.L_text = get<std::size_t>(m, "text_slots", c.model.L_text);
    c.model.m = get<std::size_t>(m, "shape_slots", c.model.m);
    c.model.iwc_enabled = get<bool>(m, "iwc", c.model.iwc_enabled);
    c.model.spe_enabled = get<bool>(m, "spe", c.model.spe_enabled);
    c.model.ssa_enabled = get<bool>(m, "ssa", c.model.ssa_enabled);
    c.model.ssa_text_only = get<bool>(m, "ssa_text_only", c.model.ssa_text_only);
    c.model.ssa_first_block_only = get<bool>(m, "ssa_first_block_only", c.model.ssa_first_block_only);
    c.model.spe_shift = get<bool>(m, "spe_shift", c.model.spe_shift);

    const auto& t = root.get_child("train", empty);
    c.train.lr = get<double>(t, "lr", c.train.lr);
    c.train.beta1 = get<double>(t, "beta1", c.train.beta1);
    c.train.beta2 = get<double>(t, "beta2", c.train.beta2);
    c.train.eps = get<double>(t, "eps", c.train.eps);
    c.train.weight_decay = get<double>(t, "weight_decay", c.train.weight_decay);
    c.train.clip_norm = get<double>(t, "clip", c.train.clip_norm);
    c.train.batch = get<std::size_t>(t, "batch", c.train.batch);
    c.train.iterations = get<std::size_t>(t, "iterations", c.train.iterations);
    c.train.ramp = get<std::size_t>(t, "ramp", c.train.ramp);
    c.train.seed = get<std::uint64_t>(t, "seed", c.train.seed);
    c.train.shuffle = shuffle_from(get<std::string>(t, "shuffle", shuffle_name(c.train.shuffle)));
    c.train.fixed_conditions = conditions_from(get<std::string>(t, "conditions", "policy"));
    c.train.log_every = get<std::size_t>(t, "log_every", c.train.log_every);

    const auto& d = root.get_child("data", empty);
    c.data.views = get<std::size_t>(d, "views", c.model.N);
    c.data.res = get<std::size_t>(d, "res", c.model.h * kDefaultPatch);
    c.data.patch = get<std::size_t>(d, "patch", c.data.patch);
    c.data.points = get<std::size_t>(d, "points", c.data.points);
    c.train_seeds = seeds_from(get<std::string>(d, "train_seeds", "unique:1:16"));
    c.eval_seeds = seeds_from(get<std::string>(d, "eval_seeds", "100000..100015"));

    const auto& e = root.get_child("experiment", empty);
    c.runs = get<std::size_t>(e, "runs", c.runs);
    c.out_dir = get<std::string>(e, "out", "");
  } catch (const pt::ptree_error& ex) {
    throw DataError(std::string("config: ") + ex.what());
  } catch (const std::logic_error& ex) {
    throw DataError(std::string("config: ") + ex.what());
  }
  c.model.validate();
  c.train.validate();
  c.data.validate();
  if (c.data.views != c.model.N || c.data.grid() != c.model.h) {
    throw DataError("config: [data] views/res/patch disagree with the [model] N/grid");
  }
  if (c.runs == 0) throw DataError("config: runs must be positive");
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const auto b = [](bool v) { return v ? "true" : "false"; };
  os << "[model]\n"
     << "D=" << c.model.D << "\nL=" << c.model.L << "\nH=" << c.model.H << "\nN=" << c.model.N
     << "\ngrid=" << c.model.h << "\ntext_slots=" << c.model.L_text << "\nshape_slots=" << c.model.m
     << "\niwc=" << b(c.model.iwc_enabled) << "\nspe=" << b(c.model.spe_enabled)
     << "\nssa=" << b(c.model.ssa_enabled) << "\nssa_text_only=" << b(c.model.ssa_text_only)
     << "\nssa_first_block_only=" << b(c.model.ssa_first_block_only)
     << "\nspe_shift=" << b(c.model.spe_shift) << "\n\n";
  os << "[train]\n"
     << "lr=" << c.train.lr << "\nbeta1=" << c.train.beta1 << "\nbeta2=" << c.train.beta2
     << "\neps=" << c.train.eps << "\nweight_decay=" << c.train.weight_decay
     << "\nclip=" << c.train.clip_norm << "\nbatch=" << c.train.batch
     << "\niterations=" << c.train.iterations << "\nramp=" << c.train.ramp << "\nseed=" << c.train.seed
     << "\nshuffle=" << shuffle_name(c.train.shuffle)
     << "\nconditions=" << conditions_name(c.train.fixed_conditions)
     << "\nlog_every=" << c.train.log_every << "\n\n";
  os << "[data]\n"
     << "views=" << c.data.views << "\nres=" << c.data.res << "\npatch=" << c.data.patch
     << "\npoints=" << c.data.points << "\ntrain_seeds=" << seeds_text(c.train_seeds)
     << "\neval_seeds=" << seeds_text(c.eval_seeds) << "\n\n";
  os << "[experiment]\n"
     << "runs=" << c.runs << "\nout=" << c.out_dir.string() << "\n";
  return os.str();
}

std::string ExperimentConfig::fingerprint() const {
  ExperimentConfig copy = *this;
  copy.out_dir.clear();
  std::uint64_t h = 0x6d766172ULL;
  for (unsigned char ch : dump_config(copy)) h = splitmix64(h ^ ch);
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

std::size_t worker_threads() {
  const char* env = std::getenv("MVAR_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  try {
    const auto n = std::stoul(env);
    return n == 0 ? 1 : n;
  } catch (const std::logic_error&) {
    throw ContractError(std::string("MVAR_THREADS must be a positive integer, got '") + env + "'");
  }
}

std::string task_name(Task task) {
  switch (task) {
    case Task::kT2mv: return "t2mv";
    case Task::kI2mv: return "i2mv";
    case Task::kI2mvAnyView: return "i2mv_any";
    case Task::kShape2mv: return "shape2mv";
  }
  return "?";
}

SceneScore evaluate_scene(const ModelState& state, const SceneSample& sample, Task task,
                          std::size_t scene_index) {
  const std::size_t n = sample.poses.size();
  GenerationRequest req;
  std::size_t ref = 0;
  bool has_ref = false;
  switch (task) {
    case Task::kT2mv:
      req.conditions = {true, false, false};
      req.caption = sample.caption;
      break;
    case Task::kI2mvAnyView:
      ref = scene_index % n;
      [[fallthrough]];
    case Task::kI2mv:
      req.conditions = {false, true, false};
      has_ref = true;
      break;
    case Task::kShape2mv:
      req.conditions = {false, false, true};
      req.shape = sample.cloud;
      break;
  }
  std::vector<std::size_t> gt_index;
  for (std::size_t j = 0; j < n; ++j) {
    gt_index.push_back((ref + j) % n);
    req.poses.push_back(sample.poses[gt_index.back()]);
  }
  if (has_ref) req.reference = ReferenceView{sample.tokens[ref], sample.poses[ref]};

  const GenerationResult gen = generate(state, req, DecodeConfig{});
  SceneScore s;
  std::vector<TokenGrid> pred, gt;
  for (std::size_t j = has_ref ? 1 : 0; j < n; ++j) {
    const auto& truth = sample.images[gt_index[j]];
    s.psnr.push_back(psnr(gen.images[j], truth));
    s.ssim.push_back(ssim(gen.images[j], truth));
    pred.push_back(gen.views[j]);
    gt.push_back(sample.tokens[gt_index[j]]);
  }
  s.exact = exact_match(pred, gt);
  s.images = gen.images;
  return s;
}

void evaluate_task(const ModelState& state, std::span<const SceneSample> samples, Task task,
                   const std::string& prefix, MetricReport& report,
                   const std::filesystem::path& sample_dir) {
  if (samples.empty()) throw DataError("no evaluation scenes");
  std::vector<SceneScore> scores(samples.size());
  const std::size_t workers = std::min(worker_threads(), samples.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) scores[i] = evaluate_scene(state, samples[i], task, i);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < samples.size(); i += workers) {
            scores[i] = evaluate_scene(state, samples[i], task, i);
          }
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  const std::size_t views = scores.front().psnr.size();
  double p = 0, s = 0, x = 0;
  std::vector<double> per_view(views, 0.0);
  for (const auto& sc : scores) {
    for (std::size_t v = 0; v < views; ++v) {
      per_view[v] += sc.psnr[v];
      p += sc.psnr[v];
      s += sc.ssim[v];
    }
    x += sc.exact;
  }
  const double ns = static_cast<double>(scores.size());
  report.set(prefix + "psnr", p / (ns * static_cast<double>(views)));
  report.set(prefix + "ssim", s / (ns * static_cast<double>(views)));
  report.set(prefix + "exact", x / ns);
  for (std::size_t v = 0; v < views; ++v) report.set(prefix + "psnr.view" + std::to_string(v), per_view[v] / ns);

  if (!sample_dir.empty()) {
    std::filesystem::create_directories(sample_dir);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      for (std::size_t v = 0; v < scores[i].images.size(); ++v) {
        write_ppm(sample_dir / ("scene_" + std::to_string(samples[i].seed) + "_v" + std::to_string(v) + ".ppm"),
                  scores[i].images[v]);
      }
    }
  }
}

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {"t2mv",       "i2mv",       "shape2mv",    "ablate-ssa",
                                                 "ablate-spe", "ablate-shufv", "ablate-iwc"};
  return names;
}

namespace {

struct Variant {
  std::string name;
  ModelConfig model;
  TrainConfig train;
};

struct Plan {
  std::vector<Variant> variants;
  std::vector<Task> tasks;
  std::string primary;  // "<task>.psnr" compared between the two variants
  bool allow_tie = false;
};

Plan make_plan(const std::string& name, const ExperimentConfig& cfg) {
  Plan p;
  const Variant base{"model", cfg.model, cfg.train};
  auto variant = [&](std::string vname, auto&& edit) {
    Variant v = base;
    v.name = std::move(vname);
    edit(v);
    return v;
  };
  auto same = [](Variant&) {};
  if (name == "t2mv") {
    p.variants = {base};
    p.tasks = {Task::kT2mv};
  } else if (name == "i2mv") {
    p.variants = {base};
    p.tasks = {Task::kI2mv};
  } else if (name == "shape2mv") {
    p.variants = {base};
    p.tasks = {Task::kShape2mv};
  } else if (name == "ablate-ssa") {
    p.variants = {variant("ssa", [](Variant& v) { v.model.ssa_enabled = true; }),
                  variant("no_ssa", [](Variant& v) { v.model.ssa_enabled = false; })};
    p.tasks = {Task::kT2mv};
    p.primary = "t2mv.psnr";
  } else if (name == "ablate-spe") {
    p.variants = {variant("spe", [](Variant& v) { v.model.spe_enabled = true; }),
                  variant("no_spe", [](Variant& v) { v.model.spe_enabled = false; })};
    p.tasks = {Task::kT2mv, Task::kI2mv};
    p.primary = "i2mv.psnr";
  } else if (name == "ablate-shufv") {
    p.variants = {variant("shufv", [](Variant& v) { v.train.shuffle = ShuffleMode::kFull; }),
                  variant("no_shufv", [](Variant& v) { v.train.shuffle = ShuffleMode::kOff; })};
    p.tasks = {Task::kI2mvAnyView, Task::kI2mv, Task::kT2mv};
    p.primary = "i2mv_any.psnr";
    p.allow_tie = true;
  } else if (name == "ablate-iwc") {
    p.variants = {variant("iwc", [](Variant& v) { v.model.iwc_enabled = true; }),
                  variant("in_context", [](Variant& v) { v.model.iwc_enabled = false; })};
    p.tasks = {Task::kI2mv};
    p.primary = "i2mv.psnr";
  } else {
    throw ContractError("unknown experiment '" + name + "'");
  }
  (void)same;
  return p;
}

}  // namespace

MetricReport run_experiment(const std::string& name, const ExperimentConfig& cfg, std::ostream* log) {
  const Plan plan = make_plan(name, cfg);
  const auto train_set = make_samples(cfg.train_seeds, cfg.data);
  const auto eval_set = make_samples(cfg.eval_seeds, cfg.data);
  if (train_set.empty() || eval_set.empty()) throw DataError("experiment needs train and eval scenes");

  MetricReport report;
  report.experiment = name;
  report.fingerprint = cfg.fingerprint();
  report.set("runs", static_cast<double>(cfg.runs));
  report.set("train_scenes", static_cast<double>(train_set.size()));
  report.set("eval_scenes", static_cast<double>(eval_set.size()));

  std::map<std::string, double> sums;
  std::size_t wins = 0;
  for (std::size_t run = 0; run < cfg.runs; ++run) {
    std::vector<double> primary;
    for (const auto& v : plan.variants) {
      TrainConfig tc = v.train;
      tc.seed = cfg.train.seed + run;
      if (log) *log << "# " << name << " run " << run << " variant " << v.name << '\n';
      TrainSession session = start_training(v.model, tc);
      train(session, train_set, tc.iterations, log);
      report.set("run" + std::to_string(run) + "." + v.name + ".final_loss",
                 session.losses.empty() ? 0.0 : session.losses.back());

      MetricReport part;
      for (Task task : plan.tasks) {
        std::filesystem::path dir;
        if (!cfg.out_dir.empty()) {
          dir = cfg.out_dir / name / v.name / ("run" + std::to_string(run)) / task_name(task);
        }
        evaluate_task(session.model, eval_set, task, task_name(task) + ".", part, dir);
      }
      for (const auto& [k, val] : part.values) {
        report.set("run" + std::to_string(run) + "." + v.name + "." + k, val);
        sums[v.name + "." + k] += val;
      }
      if (!plan.primary.empty()) primary.push_back(part.at(plan.primary));
    }
    if (primary.size() == 2) {
      const bool holds = plan.allow_tie ? primary[0] >= primary[1] : primary[0] > primary[1];
      wins += holds;
      report.set("run" + std::to_string(run) + ".direction_holds", holds ? 1.0 : 0.0);
    }
  }
  for (const auto& v : plan.variants) {
    for (const auto& [k, total] : sums) {
      if (k.rfind(v.name + ".", 0) == 0) report.set(k, total / static_cast<double>(cfg.runs));
    }
  }
  if (!plan.primary.empty()) {
    report.set("direction_wins", static_cast<double>(wins));
    report.set("direction_majority", 2 * wins > cfg.runs ? 1.0 : 0.0);
  }
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir / name);
    std::ofstream out(cfg.out_dir / name / "report.txt");
    out << report.serialize();
    std::ofstream c(cfg.out_dir / name / "config.ini");
    c << dump_config(cfg);
  }
  return report;
}

MetricReport evaluate_checkpoint(const ModelState& state, std::span<const SceneSample> samples) {
  MetricReport report;
  report.experiment = "eval";
  for (Task task : {Task::kT2mv, Task::kI2mv, Task::kShape2mv}) {
    evaluate_task(state, samples, task, task_name(task) + ".", report);
  }
  return report;
}

}  // namespace mvar
