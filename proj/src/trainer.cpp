#include "rp/trainer.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <sstream>

#include "rp/serialize.hpp"

namespace rp {

using nlohmann::json;

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'R', 'P', 'C', 'K'};
}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::Priors4: return "priors4";
    case Method::Priors5: return "priors5";
    case Method::DAE: return "dae";
    case Method::Supervised: return "supervised";
  }
  return "?";
}

Method method_from_name(const std::string& s) {
  if (s == "priors4") return Method::Priors4;
  if (s == "priors5") return Method::Priors5;
  if (s == "dae") return Method::DAE;
  if (s == "supervised") return Method::Supervised;
  throw std::invalid_argument("unknown method: " + s);
}

std::string reference_mode_name(ReferenceMode m) { return m == ReferenceMode::Goal ? "goal" : "start"; }

ReferenceMode reference_mode_from_name(const std::string& s) {
  if (s == "goal") return ReferenceMode::Goal;
  if (s == "start") return ReferenceMode::Start;
  throw std::invalid_argument("unknown reference mode: " + s);
}

Vec2 goal_reference_position(const WorldConfig& config) {
  if (config.task == Task::ButtonGoal) return config.goal_position;
  double a = config.arena_size;
  return {a / 16.0, a * 15.0 / 16.0};  // center of the corner goal region
}

Vec2 start_reference_position(const WorldConfig& config) {
  double a = config.arena_size;
  return {0.15 * a, 0.85 * a};
}

Vec2 reference_position_for(ReferenceMode mode, const WorldConfig& config) {
  return mode == ReferenceMode::Goal ? goal_reference_position(config) : start_reference_position(config);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (pairs_per_prior < 1) throw std::invalid_argument("TrainConfig: pairs_per_prior must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(lr > 0.0f)) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (lr_decay < 0.0f) throw std::invalid_argument("TrainConfig: lr_decay must be >= 0");
  if (dae_sigma < 0.0f) throw std::invalid_argument("TrainConfig: dae_sigma must be >= 0");
  weights.validate();
}

namespace {

json encoder_spec_json(const EncoderSpec& s) {
  json j;
  j["image_dim"] = s.image_dim;
  json conv = json::array();
  for (const auto& b : s.conv) conv.push_back(json::array({b.out_channels, b.kernel, b.stride}));
  j["conv"] = conv;
  j["fc_hidden"] = s.fc_hidden;
  j["state_dim"] = s.state_dim;
  j["freeze_prefix"] = s.freeze_prefix;
  return j;
}

EncoderSpec encoder_spec_from_json(const json& j) {
  EncoderSpec s;
  s.image_dim = j.at("image_dim").get<int>();
  s.conv.clear();
  for (const auto& b : j.at("conv"))
    s.conv.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>()});
  s.fc_hidden = j.at("fc_hidden").get<int>();
  s.state_dim = j.at("state_dim").get<int>();
  s.freeze_prefix = j.at("freeze_prefix").get<int>();
  return s;
}

}  // namespace

std::string train_config_json(const TrainConfig& c) {
  json j;
  j["method"] = method_name(c.method);
  j["epochs"] = c.epochs;
  j["pairs_per_prior"] = c.pairs_per_prior;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["lr_decay"] = c.lr_decay;
  j["seed"] = c.seed;
  j["weights"] = json::array({c.weights.temporal, c.weights.proportionality, c.weights.repeatability,
                              c.weights.causality, c.weights.reference});
  j["reference_mode"] = reference_mode_name(c.reference_mode);
  j["encoder"] = encoder_spec_json(c.encoder);
  j["dae_sigma"] = c.dae_sigma;
  return j.dump();
}

std::string train_config_digest(const TrainConfig& c) {
  std::string s = train_config_json(c);
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

double RunLog::epoch_mean_total(int epoch) const {
  double acc = 0.0;
  std::int64_t n = 0;
  for (const auto& r : rows)
    if (r.epoch == epoch) {
      acc += r.total_loss;
      ++n;
    }
  if (n == 0) throw std::invalid_argument("RunLog: no rows for epoch " + std::to_string(epoch));
  return acc / static_cast<double>(n);
}

namespace {

std::string fmt_f32(float v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

}  // namespace

void write_runlog(const RunLog& log, const std::string& path) {
  auto os = open_out(path);
  os << "step,epoch,total_loss,l_temp,l_prop,l_rep,l_caus,l_ref,lr_effective\r\n";
  for (const auto& r : log.rows) {
    os << r.step << ',' << r.epoch << ',' << fmt_f32(r.total_loss) << ',' << fmt_f32(r.l_temp) << ','
       << fmt_f32(r.l_prop) << ',' << fmt_f32(r.l_rep) << ',' << fmt_f32(r.l_caus) << ','
       << fmt_f32(r.l_ref) << ',' << fmt_f32(r.lr_effective) << "\r\n";
  }
  if (!os) throw io_error("write failed: " + path);
}

bool operator==(const Checkpoint& a, const Checkpoint& b) {
  return a.method == b.method && a.encoder_spec == b.encoder_spec && a.has_decoder == b.has_decoder &&
         a.params == b.params && a.adam_m == b.adam_m && a.adam_v == b.adam_v &&
         a.adam_step == b.adam_step && a.lr == b.lr && a.lr_decay == b.lr_decay && a.beta1 == b.beta1 &&
         a.beta2 == b.beta2 && a.epsilon == b.epsilon && a.config_digest == b.config_digest &&
         a.epochs_completed == b.epochs_completed;
}

namespace {

void write_tensor(ByteWriter& w, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(t.shape.size()));
  for (auto e : t.shape) w.u32(static_cast<std::uint32_t>(e));
  w.f32s(t.ptr(), t.data.size());
}

Tensor read_tensor(ByteReader& r) {
  std::uint32_t rank = r.u32();
  if (rank > 8) throw io_error("checkpoint: implausible tensor rank");
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::int64_t>(r.u32());
  Tensor t(shape);
  r.f32s(t.ptr(), t.data.size());
  return t;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  auto os = open_out(path);
  ByteWriter w(os);
  w.magic(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  json j;
  j["method"] = method_name(ckpt.method);
  j["encoder"] = encoder_spec_json(ckpt.encoder_spec);
  j["has_decoder"] = ckpt.has_decoder;
  j["param_count"] = ckpt.params.size();
  j["trainable_count"] = ckpt.adam_m.size();
  j["adam"] = {{"step", ckpt.adam_step}, {"lr", ckpt.lr},       {"lr_decay", ckpt.lr_decay},
               {"beta1", ckpt.beta1},    {"beta2", ckpt.beta2}, {"epsilon", ckpt.epsilon}};
  j["config_digest"] = ckpt.config_digest;
  j["epochs_completed"] = ckpt.epochs_completed;
  w.blob(j.dump());
  for (const auto& t : ckpt.params) write_tensor(w, t);
  for (const auto& t : ckpt.adam_m) write_tensor(w, t);
  for (const auto& t : ckpt.adam_v) write_tensor(w, t);
  if (!os) throw io_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  auto is = open_in(path);
  ByteReader r(is, "checkpoint " + path);
  r.expect_magic(kCheckpointMagic);
  r.expect_version(kCheckpointVersion);
  json j;
  try {
    j = json::parse(r.blob());
  } catch (const json::exception& e) {
    throw io_error("checkpoint " + path + ": bad metadata: " + e.what());
  }
  Checkpoint c;
  try {
    c.method = method_from_name(j.at("method").get<std::string>());
    c.encoder_spec = encoder_spec_from_json(j.at("encoder"));
    c.has_decoder = j.at("has_decoder").get<bool>();
    const auto& a = j.at("adam");
    c.adam_step = a.at("step").get<std::int64_t>();
    c.lr = a.at("lr").get<float>();
    c.lr_decay = a.at("lr_decay").get<float>();
    c.beta1 = a.at("beta1").get<float>();
    c.beta2 = a.at("beta2").get<float>();
    c.epsilon = a.at("epsilon").get<float>();
    c.config_digest = j.at("config_digest").get<std::string>();
    c.epochs_completed = j.at("epochs_completed").get<int>();
    size_t pc = j.at("param_count").get<size_t>();
    size_t tc = j.at("trainable_count").get<size_t>();
    c.params.reserve(pc);
    for (size_t i = 0; i < pc; ++i) c.params.push_back(read_tensor(r));
    for (size_t i = 0; i < tc; ++i) c.adam_m.push_back(read_tensor(r));
    for (size_t i = 0; i < tc; ++i) c.adam_v.push_back(read_tensor(r));
  } catch (const json::exception& e) {
    throw io_error("checkpoint " + path + ": bad metadata: " + e.what());
  }
  r.expect_eof();
  return c;
}

Encoder encoder_from_checkpoint(const Checkpoint& ckpt) {
  Encoder e = init_encoder(ckpt.encoder_spec, 0);
  if (ckpt.params.size() < e.params.size())
    throw io_error("checkpoint: parameter count mismatch for encoder spec");
  for (size_t i = 0; i < e.params.size(); ++i) {
    if (ckpt.params[i].shape != e.params[i]->shape)
      throw io_error("checkpoint: parameter shape mismatch at index " + std::to_string(i));
    *e.params[i] = ckpt.params[i];
  }
  return e;
}

Decoder decoder_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.has_decoder) throw std::invalid_argument("checkpoint has no decoder");
  Decoder d = init_decoder(ckpt.encoder_spec.image_dim, ckpt.encoder_spec.state_dim, 0);
  Encoder e = init_encoder(ckpt.encoder_spec, 0);
  size_t off = e.params.size();
  if (ckpt.params.size() != off + d.params.size())
    throw io_error("checkpoint: parameter count mismatch for decoder");
  for (size_t i = 0; i < d.params.size(); ++i) {
    if (ckpt.params[off + i].shape != d.params[i]->shape)
      throw io_error("checkpoint: decoder parameter shape mismatch at index " + std::to_string(i));
    *d.params[i] = ckpt.params[off + i];
  }
  return d;
}

namespace {

Checkpoint make_checkpoint(Method method, const TrainConfig& config, const Encoder& enc,
                           const Decoder* dec, const AdamState& opt, int epochs_done) {
  Checkpoint c;
  c.method = method;
  c.encoder_spec = enc.spec;
  c.has_decoder = dec != nullptr;
  for (const auto& p : enc.params) c.params.push_back(*p);
  if (dec)
    for (const auto& p : dec->params) c.params.push_back(*p);
  c.adam_m = opt.m;
  c.adam_v = opt.v;
  c.adam_step = opt.step;
  c.lr = opt.lr;
  c.lr_decay = opt.lr_decay;
  c.beta1 = opt.beta1;
  c.beta2 = opt.beta2;
  c.epsilon = opt.epsilon;
  c.config_digest = train_config_digest(config);
  c.epochs_completed = epochs_done;
  return c;
}

struct StepClock {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

float node_value(const Workspace& ws, int node) {
  return node < 0 ? 0.0f : ws.value[static_cast<size_t>(node)].data[0];
}

void check_reference_mode(const Dataset& dataset, const TrainConfig& config) {
  Vec2 want = reference_position_for(config.reference_mode, dataset.config);
  const Vec2& got = dataset.config.reference_position;
  double d = std::hypot(want.x - got.x, want.y - got.y);
  if (d > 1e-9 * std::max(1.0, dataset.config.arena_size))
    throw std::invalid_argument(
        "train: dataset reference_position does not match reference_mode '" +
        reference_mode_name(config.reference_mode) + "' (regenerate the dataset with that reference)");
}

TrainResult train_priors(const Dataset& dataset, const TrainConfig& config, const SnapshotFn& snapshot) {
  const bool five = config.method == Method::Priors5;
  CandidateIndex index(dataset);
  PriorCounts counts;
  counts.temporal = counts.proportional = counts.repeatable = counts.causal = config.pairs_per_prior;
  counts.reference = five ? config.pairs_per_prior : 0;
  PriorWeights weights = config.weights;
  if (!five) weights.reference = 0.0f;
  if (five) check_reference_mode(dataset, config);

  EncoderSpec espec = config.encoder;
  espec.image_dim = dataset.config.image_dim;
  Encoder enc = init_encoder(espec, Rng::substream(config.seed, 0).next_u64());
  AdamState opt = AdamState::init(enc.trainable_params(), config.lr, config.lr_decay);
  Rng rng = Rng::substream(config.seed, 1);

  const int active = five ? 5 : 4;
  const std::int64_t n = dataset.total_frames();
  const std::int64_t per_step = static_cast<std::int64_t>(config.pairs_per_prior) * active;
  const std::int64_t steps_per_epoch = (n + per_step - 1) / per_step;

  TrainResult res;
  StepClock clock;
  std::int64_t step_id = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::int64_t s = 0; s < steps_per_epoch; ++s, ++step_id) {
      PriorBatch batch = index.sample(counts, rng);
      Graph g;
      PriorLossNodes nodes = total_prior_loss(g, enc, dataset, batch, weights);
      Tensor imgs = batch_images(dataset, nodes.rows);
      Workspace ws;
      evaluate(g, {{nodes.images, &imgs}}, ws);
      GradMap grads = gradient(g, nodes.total, ws);
      RunLogRow row;
      row.step = step_id;
      row.epoch = epoch;
      row.total_loss = node_value(ws, nodes.total);
      row.l_temp = node_value(ws, nodes.temporal);
      row.l_prop = node_value(ws, nodes.proportional);
      row.l_rep = node_value(ws, nodes.repeatable);
      row.l_caus = node_value(ws, nodes.causal);
      row.l_ref = node_value(ws, nodes.reference);
      row.lr_effective = opt.effective_lr();
      adam_step(opt, grads);
      res.log.rows.push_back(row);
      res.log.wall_seconds.push_back(clock.seconds());
    }
    if (snapshot) snapshot(epoch, make_checkpoint(config.method, config, enc, nullptr, opt, epoch));
  }
  res.checkpoint = make_checkpoint(config.method, config, enc, nullptr, opt, config.epochs);
  return res;
}

TrainResult train_supervised(const Dataset& dataset, const TrainConfig& config, const SnapshotFn& snapshot) {
  EncoderSpec espec = config.encoder;
  espec.image_dim = dataset.config.image_dim;
  if (espec.state_dim != 2)
    throw std::invalid_argument("train: supervised regression needs state_dim == 2 (gt is 2D)");
  Encoder enc = init_encoder(espec, Rng::substream(config.seed, 0).next_u64());
  AdamState opt = AdamState::init(enc.trainable_params(), config.lr, config.lr_decay);
  Rng rng = Rng::substream(config.seed, 1);

  const std::int64_t n = dataset.total_frames();
  const std::int64_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;

  TrainResult res;
  StepClock clock;
  std::int64_t step_id = 0;
  std::vector<std::int64_t> rows(static_cast<size_t>(config.batch_size));
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::int64_t s = 0; s < steps_per_epoch; ++s, ++step_id) {
      for (auto& r : rows) r = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n)));
      Tensor imgs = batch_images(dataset, rows);
      Tensor gts = batch_gt(dataset, rows);
      Graph g;
      int img_in = g.input(imgs.shape);
      int tgt_in = g.input(gts.shape);
      int loss = supervised_loss(g, enc, img_in, tgt_in);
      Workspace ws;
      evaluate(g, {{img_in, &imgs}, {tgt_in, &gts}}, ws);
      GradMap grads = gradient(g, loss, ws);
      RunLogRow row;
      row.step = step_id;
      row.epoch = epoch;
      row.total_loss = node_value(ws, loss);
      row.lr_effective = opt.effective_lr();
      adam_step(opt, grads);
      res.log.rows.push_back(row);
      res.log.wall_seconds.push_back(clock.seconds());
    }
    if (snapshot) snapshot(epoch, make_checkpoint(config.method, config, enc, nullptr, opt, epoch));
  }
  res.checkpoint = make_checkpoint(config.method, config, enc, nullptr, opt, config.epochs);
  return res;
}

}  // namespace

TrainResult train_dae(const Dataset& dataset, const TrainConfig& config, const SnapshotFn& snapshot) {
  config.validate();
  EncoderSpec espec = config.encoder;
  espec.image_dim = dataset.config.image_dim;
  Encoder enc = init_encoder(espec, Rng::substream(config.seed, 0).next_u64());
  Decoder dec = init_decoder(espec.image_dim, espec.state_dim, Rng::substream(config.seed, 3).next_u64());
  std::vector<std::shared_ptr<Tensor>> params = enc.trainable_params();
  for (const auto& p : dec.params) params.push_back(p);
  AdamState opt = AdamState::init(std::move(params), config.lr, config.lr_decay);
  Rng rng = Rng::substream(config.seed, 1);
  Rng noise = Rng::substream(config.seed, 2);

  const std::int64_t n = dataset.total_frames();
  const std::int64_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;

  TrainResult res;
  StepClock clock;
  std::int64_t step_id = 0;
  std::vector<std::int64_t> rows(static_cast<size_t>(config.batch_size));
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::int64_t s = 0; s < steps_per_epoch; ++s, ++step_id) {
      for (auto& r : rows) r = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n)));
      Tensor clean = batch_images(dataset, rows);
      Tensor noisy = corrupt(clean, config.dae_sigma, noise);
      Graph g;
      int noisy_in = g.input(clean.shape);
      int clean_in = g.input(clean.shape);
      int states = enc.build(g, noisy_in);
      int recon = dec.build(g, states);
      int loss = g.mean(g.square(g.sub(recon, clean_in)));
      Workspace ws;
      evaluate(g, {{noisy_in, &noisy}, {clean_in, &clean}}, ws);
      GradMap grads = gradient(g, loss, ws);
      RunLogRow row;
      row.step = step_id;
      row.epoch = epoch;
      row.total_loss = node_value(ws, loss);
      row.lr_effective = opt.effective_lr();
      adam_step(opt, grads);
      res.log.rows.push_back(row);
      res.log.wall_seconds.push_back(clock.seconds());
    }
    if (snapshot) snapshot(epoch, make_checkpoint(Method::DAE, config, enc, &dec, opt, epoch));
  }
  res.checkpoint = make_checkpoint(Method::DAE, config, enc, &dec, opt, config.epochs);
  return res;
}

TrainResult train(const Dataset& dataset, const TrainConfig& config, const SnapshotFn& snapshot) {
  config.validate();
  if (dataset.total_frames() < 2) throw std::invalid_argument("train: dataset too small");
  switch (config.method) {
    case Method::Priors4:
    case Method::Priors5:
      return train_priors(dataset, config, snapshot);
    case Method::Supervised:
      return train_supervised(dataset, config, snapshot);
    case Method::DAE:
      return train_dae(dataset, config, snapshot);
  }
  throw std::invalid_argument("train: unknown method");
}

}  // namespace rp
