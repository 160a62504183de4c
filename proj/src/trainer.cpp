#include "mvar/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "mvar/error.hpp"

namespace mvar {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
  if (batch == 0) throw ContractError("batch size must be positive");
  if (ramp > iterations) throw ContractError("drop ramp longer than the run");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ContractError("AdamW betas must lie in [0, 1)");
  }
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.batch = 1024;
  c.ramp = 10000;
  c.iterations = 30000;
  return c;
}

Tensor ar_loss(const Tensor& logits, std::span<const std::int64_t> targets,
               std::span<const std::uint8_t> pad_mask) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("ar_loss: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  if (!pad_mask.empty() && pad_mask.size() != targets.size()) {
    throw DimensionError("ar_loss: pad mask length differs from target count");
  }
  const std::size_t V = logits.dim(1);
  std::vector<std::int64_t> t(targets.begin(), targets.end());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0 || static_cast<std::size_t>(t[i]) >= V) {
      throw ContractError("target " + std::to_string(t[i]) + " outside vocabulary of " + std::to_string(V));
    }
    if (!pad_mask.empty() && pad_mask[i]) t[i] = kIgnoreTarget;
  }
  return cross_entropy(logits, t);
}

double drop_prob(std::size_t iter, std::size_t ramp) {
  if (ramp == 0) return 0.5;
  return std::min(0.5, 0.5 * static_cast<double>(iter) / static_cast<double>(ramp));
}

ConditionSet draw_conditions(double p, Rng& rng) {
  ConditionSet c;
  c.text = !rng.bernoulli(p);
  c.image = rng.bernoulli(p);
  c.shape = rng.bernoulli(p);
  if (c.text && c.image && c.shape) {
    if (rng.bernoulli(0.5)) {
      c.image = false;
    } else {
      c.shape = false;
    }
  }
  return c;
}

TrainingSequence make_sequence(const SceneSample& sample, const ConditionSet& conditions,
                               const ViewOrder& order, const ModelConfig& model) {
  ContextSegment ctx = pack_context(sample.caption, conditions, model.budget());
  std::optional<PointCloud> shape;
  if (conditions.shape) shape = sample.cloud;
  return build_sequence(sample.tokens, sample.rays, order, std::move(ctx), conditions, std::move(shape));
}

TrainingSequence apply_condition_policy(const SceneSample& sample, std::size_t iter, Rng& rng,
                                        const TrainConfig& train, const ModelConfig& model) {
  const ConditionSet c = train.fixed_conditions ? *train.fixed_conditions
                                                : draw_conditions(drop_prob(iter, train.ramp), rng);
  const ViewOrder order = sample_order(sample.tokens.size(), rng, train.shuffle);
  return make_sequence(sample, c, order, model);
}

namespace {

constexpr std::uint64_t kEpochStream = 0x65706f6368ULL;
constexpr std::uint64_t kStepStream = 0x73746570ULL;

}  // namespace

std::vector<std::size_t> batch_indices(std::size_t iter, std::size_t batch, std::size_t dataset_size,
                                       std::uint64_t seed) {
  if (dataset_size == 0) throw DataError("empty training set");
  std::vector<std::size_t> out;
  out.reserve(batch);
  std::size_t cached_epoch = SIZE_MAX;
  std::vector<std::size_t> perm(dataset_size);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t g = iter * batch + b;
    const std::size_t epoch = g / dataset_size;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng = Rng::derive(seed ^ kEpochStream, epoch);
      rng.shuffle(std::span<std::size_t>(perm));
      cached_epoch = epoch;
    }
    out.push_back(perm[g % dataset_size]);
  }
  return out;
}

std::vector<TrainingSequence> make_batch(std::span<const SceneSample> data, std::size_t iter,
                                         const TrainConfig& train, const ModelConfig& model) {
  const auto idx = batch_indices(iter, train.batch, data.size(), train.seed);
  Rng rng = Rng::derive(train.seed ^ kStepStream, iter);
  std::vector<TrainingSequence> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(apply_condition_policy(data[i], iter, rng, train, model));
  return out;
}

AdamWState make_optimizer(const ModelState& state, const TrainConfig& train) {
  const auto params = state.parameters();
  return AdamWState::for_params(params, train.lr, train.beta1, train.beta2, train.weight_decay, train.eps);
}

StepResult train_step(ModelState& state, AdamWState& opt, std::span<const TrainingSequence> batch,
                      const TrainConfig& train) {
  if (batch.empty()) throw ContractError("empty batch");
  auto params = state.parameters();
  for (auto& p : params) p.zero_grad();
  StepResult r;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    try {
      const Tensor loss = ar_loss(forward(state, batch[b]), batch[b].image_codes);
      r.loss += loss.item() * inv;
      scale(loss, inv).backward();
    } catch (const NumericError& e) {
      throw NumericError("sample " + std::to_string(b) + " of the batch: " + e.what());
    }
  }
  if (!std::isfinite(r.loss)) throw NumericError("non-finite batch loss");
  r.grad_norm = train.clip_norm > 0.0 ? clip_grad_norm(params, train.clip_norm)
                                      : clip_grad_norm(params, INFINITY);
  if (!std::isfinite(r.grad_norm)) throw NumericError("non-finite gradient norm");
  adamw_step(params, opt);
  return r;
}

TrainSession start_training(const ModelConfig& model, const TrainConfig& train) {
  train.validate();
  TrainSession s;
  s.model = ModelState::init(model, train.seed);
  s.optimizer = make_optimizer(s.model, train);
  s.config = train;
  return s;
}

void train(TrainSession& session, std::span<const SceneSample> data, std::size_t until,
           std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  for (; session.iteration < until; ++session.iteration) {
    const std::size_t it = session.iteration;
    const auto batch = make_batch(data, it, session.config, session.model.config);
    StepResult r;
    try {
      r = train_step(session.model, session.optimizer, batch, session.config);
    } catch (const NumericError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }
    session.losses.push_back(r.loss);
    const bool last = it + 1 == until;
    if (log && session.config.log_every > 0 && (it % session.config.log_every == 0 || last)) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *log << "iter=" << it << " loss=" << std::setprecision(6) << r.loss
           << " p_drop=" << drop_prob(it, session.config.ramp) << " time=" << std::setprecision(4)
           << secs << '\n'
           << std::flush;
    }
  }
}

// ---- checkpoints --------------------------------------------------------------

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf.insert(buf.end(), c, c + n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void doubles(std::span<const double> d) { bytes(d.data(), d.size() * sizeof(double)); }

  std::vector<unsigned char> buf;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> d) : data_(d) {}
  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) throw CheckpointTruncatedError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
  double f64() { double v; bytes(&v, 8); return v; }
  std::string str() {
    const auto n = u32();
    if (n > data_.size() - pos_) throw CheckpointTruncatedError("checkpoint truncated inside a name");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::vector<double> doubles(std::size_t n) {
    if (n > (data_.size() - pos_) / sizeof(double)) {
      throw CheckpointTruncatedError("checkpoint truncated inside a data block");
    }
    std::vector<double> v(n);
    bytes(v.data(), n * sizeof(double));
    return v;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const unsigned char> data_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'M', 'V', 'A', 'R'};

std::vector<std::pair<std::string, std::uint64_t>> config_fields(const ModelConfig& c) {
  return {{"D", c.D},
          {"L", c.L},
          {"H", c.H},
          {"V", c.V},
          {"N", c.N},
          {"h", c.h},
          {"w", c.w},
          {"L_text", c.L_text},
          {"m", c.m},
          {"text_vocab", c.text_vocab},
          {"iwc_enabled", c.iwc_enabled},
          {"spe_enabled", c.spe_enabled},
          {"ssa_enabled", c.ssa_enabled},
          {"ssa_text_only", c.ssa_text_only},
          {"ssa_first_block_only", c.ssa_first_block_only},
          {"spe_shift", c.spe_shift}};
}

void set_config_field(ModelConfig& c, const std::string& key, std::uint64_t v) {
  if (key == "D") c.D = v;
  else if (key == "L") c.L = v;
  else if (key == "H") c.H = v;
  else if (key == "V") c.V = v;
  else if (key == "N") c.N = v;
  else if (key == "h") c.h = v;
  else if (key == "w") c.w = v;
  else if (key == "L_text") c.L_text = v;
  else if (key == "m") c.m = v;
  else if (key == "text_vocab") c.text_vocab = v;
  else if (key == "iwc_enabled") c.iwc_enabled = v != 0;
  else if (key == "spe_enabled") c.spe_enabled = v != 0;
  else if (key == "ssa_enabled") c.ssa_enabled = v != 0;
  else if (key == "ssa_text_only") c.ssa_text_only = v != 0;
  else if (key == "ssa_first_block_only") c.ssa_first_block_only = v != 0;
  else if (key == "spe_shift") c.spe_shift = v != 0;
  else throw CheckpointError("unknown config field '" + key + "' in checkpoint");
}

struct StoredParam {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

}  // namespace

std::vector<unsigned char> encode_checkpoint(const ModelState& model, const AdamWState* optimizer,
                                             std::size_t iteration) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);

  const auto fields = config_fields(model.config);
  w.u32(static_cast<std::uint32_t>(fields.size()));
  for (const auto& [k, v] : fields) {
    w.str(k);
    w.u64(v);
  }

  const auto params = model.named_parameters();
  w.u64(params.size());
  for (const auto& p : params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.u64(d);
    w.doubles(p.tensor.data());
  }

  w.u64(model.codebook.entries);
  w.u64(model.codebook.dim);
  w.doubles(model.codebook.values);

  w.u8(optimizer != nullptr);
  if (optimizer) {
    const auto& o = *optimizer;
    w.f64(o.lr);
    w.f64(o.beta1);
    w.f64(o.beta2);
    w.f64(o.eps);
    w.f64(o.weight_decay);
    w.u64(o.step);
    w.u64(o.first_moment.size());
    for (std::size_t i = 0; i < o.first_moment.size(); ++i) {
      w.u8(o.decay[i]);
      w.u64(o.first_moment[i].size());
      w.doubles(o.first_moment[i]);
      w.doubles(o.second_moment[i]);
    }
  }
  w.u64(iteration);
  return std::move(w.buf);
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& model,
                     const AdamWState* optimizer, std::size_t iteration) {
  const auto bytes = encode_checkpoint(model, optimizer, iteration);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

namespace {

void copy_into(const std::vector<StoredParam>& stored, ModelState& target) {
  auto params = target.named_parameters();
  for (const auto& p : params) {
    auto it = std::find_if(stored.begin(), stored.end(), [&](const StoredParam& s) { return s.name == p.name; });
    if (it == stored.end()) throw CheckpointShapeError(p.name, "checkpoint lacks parameter " + p.name);
    if (it->shape != p.tensor.shape()) {
      throw CheckpointShapeError(p.name, "parameter " + p.name + " stored as " + shape_string(it->shape) +
                                             ", config expects " + shape_string(p.tensor.shape()));
    }
  }
  if (stored.size() != params.size()) {
    for (const auto& s : stored) {
      const bool known = std::any_of(params.begin(), params.end(), [&](const NamedTensor& p) { return p.name == s.name; });
      if (!known) throw CheckpointShapeError(s.name, "checkpoint parameter " + s.name + " has no place in this config");
    }
  }
  for (auto& p : params) {
    const auto& s = *std::find_if(stored.begin(), stored.end(), [&](const StoredParam& x) { return x.name == p.name; });
    auto dst = p.tensor.mutable_data();
    std::copy(s.data.begin(), s.data.end(), dst.begin());
  }
}

struct Decoded {
  ModelConfig config;
  std::vector<StoredParam> params;
  Codebook codebook;
  std::optional<AdamWState> optimizer;
  std::size_t iteration = 0;
};

Decoded decode_raw(std::span<const unsigned char> bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("not an MVAR checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) +
                                 ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  Decoded d;
  const auto n_fields = r.u32();
  for (std::uint32_t i = 0; i < n_fields; ++i) {
    const auto key = r.str();
    set_config_field(d.config, key, r.u64());
  }
  const auto n_params = r.u64();
  for (std::uint64_t i = 0; i < n_params; ++i) {
    StoredParam p;
    p.name = r.str();
    const auto rank = r.u32();
    if (rank > 8) throw CheckpointError("implausible rank for " + p.name);
    for (std::uint32_t k = 0; k < rank; ++k) p.shape.push_back(r.u64());
    p.data = r.doubles(shape_numel(p.shape));
    d.params.push_back(std::move(p));
  }
  d.codebook.entries = r.u64();
  d.codebook.dim = r.u64();
  if (d.codebook.dim == 0 || d.codebook.entries > (1u << 24)) throw CheckpointError("implausible codebook");
  d.codebook.values = r.doubles(d.codebook.entries * d.codebook.dim);
  if (r.u8()) {
    AdamWState o;
    o.lr = r.f64();
    o.beta1 = r.f64();
    o.beta2 = r.f64();
    o.eps = r.f64();
    o.weight_decay = r.f64();
    o.step = r.u64();
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      o.decay.push_back(r.u8());
      const auto len = r.u64();
      o.first_moment.push_back(r.doubles(len));
      o.second_moment.push_back(r.doubles(len));
    }
    d.optimizer = std::move(o);
  }
  d.iteration = r.u64();
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return d;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  Decoded d = decode_raw(bytes);
  try {
    d.config.validate();
    d.codebook.validate();
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  Checkpoint c;
  c.model = ModelState::init(d.config, 0, d.codebook);
  copy_into(d.params, c.model);
  if (d.optimizer && d.optimizer->first_moment.size() != d.params.size()) {
    throw CheckpointError("optimizer state does not match the parameter list");
  }
  c.optimizer = std::move(d.optimizer);
  c.iteration = d.iteration;
  return c;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

void load_parameters(const Checkpoint& ckpt, ModelState& target) {
  std::vector<StoredParam> stored;
  for (const auto& p : ckpt.model.named_parameters()) {
    stored.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  copy_into(stored, target);
  target.codebook = ckpt.model.codebook;
}

void save_session(const std::filesystem::path& path, const TrainSession& session) {
  save_checkpoint(path, session.model, &session.optimizer, session.iteration);
}

TrainSession resume_session(const std::filesystem::path& path, const TrainConfig& train) {
  Checkpoint c = load_checkpoint(path);
  if (!c.optimizer) throw CheckpointError("checkpoint has no optimizer state to resume from");
  TrainSession s;
  s.model = std::move(c.model);
  s.optimizer = std::move(*c.optimizer);
  s.config = train;
  s.iteration = c.iteration;
  return s;
}

}  // namespace mvar
