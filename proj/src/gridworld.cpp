#include "rp/gridworld.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "rp/serialize.hpp"

static_assert(std::endian::native == std::endian::little, "dataset format assumes a little-endian host");

namespace rp {

using nlohmann::json;

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr char kDatasetMagic[4] = {'R', 'P', 'D', 'S'};

// scene geometry, in fractions of arena_size
constexpr double kWallThickness = 1.0 / 16.0;
constexpr double kAgentRadius = 1.0 / 20.0;
constexpr double kGoalSide = 1.0 / 10.0;
constexpr double kDistractorSide = 1.0 / 12.0;
constexpr double kCornerSide = 1.0 / 8.0;    // corner goal region
constexpr double kButtonRadius = 1.0 / 16.0; // button goal region

double sq(double v) { return v * v; }

bool in_corner_goal(const Vec2& p, double arena) {
  return p.x <= arena * kCornerSide && p.y >= arena * (1.0 - kCornerSide);
}

bool in_button_goal(const Vec2& p, const Vec2& goal, double arena) {
  return sq(p.x - goal.x) + sq(p.y - goal.y) <= sq(arena * kButtonRadius);
}

Color draw_color(Rng& rng) {
  auto ch = [&] { return static_cast<std::uint8_t>(30 + rng.uniform_int(196)); };
  std::uint8_t r = ch(), g = ch(), b = ch();
  return Color{r, g, b};
}

double color_dist(const Color& a, const Color& b) {
  return std::sqrt(sq(a.r - b.r) + sq(a.g - b.g) + sq(a.b - b.b));
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Plain: return "plain";
    case Variant::MovingDistractors: return "moving";
    case Variant::StaticDistractors: return "static";
    case Variant::DomainRandomized: return "domrand";
  }
  return "?";
}

std::string task_name(Task t) { return t == Task::CornerGoal ? "corner" : "button"; }

Variant variant_from_name(const std::string& s) {
  if (s == "plain") return Variant::Plain;
  if (s == "moving") return Variant::MovingDistractors;
  if (s == "static") return Variant::StaticDistractors;
  if (s == "domrand") return Variant::DomainRandomized;
  throw std::invalid_argument("unknown variant: " + s);
}

Task task_from_name(const std::string& s) {
  if (s == "corner") return Task::CornerGoal;
  if (s == "button") return Task::ButtonGoal;
  throw std::invalid_argument("unknown task: " + s);
}

Palette canonical_palette(int distractor_count) {
  Palette p;
  p.background = {192, 192, 192};
  p.wall[0] = {200, 40, 40};   // left, red
  p.wall[1] = {40, 160, 70};   // right, green
  p.wall[2] = {230, 200, 50};  // top, yellow
  p.wall[3] = {50, 90, 200};   // bottom, blue
  p.agent = {235, 30, 210};
  p.goal = {200, 0, 0};
  const Color pool[] = {{30, 150, 160}, {130, 140, 40}, {120, 50, 180},
                        {140, 90, 50},  {40, 60, 110},  {210, 120, 160}};
  for (int i = 0; i < distractor_count; ++i) p.distractor.push_back(pool[i % 6]);
  return p;
}

Palette randomized_palette(Rng& rng, int distractor_count) {
  Palette p = canonical_palette(distractor_count);
  // the agent keeps its canonical color; everything else is resampled,
  // rejecting colors too close to the agent's
  auto pick = [&] {
    for (int tries = 0; tries < 16; ++tries) {
      Color c = draw_color(rng);
      if (color_dist(c, p.agent) >= 60.0) return c;
    }
    return Color{40, 40, 40};
  };
  p.background = pick();
  for (auto& w : p.wall) w = pick();
  p.goal = pick();
  for (auto& d : p.distractor) d = pick();
  return p;
}

std::vector<Vec2> WorldConfig::default_action_table(double arena_size) {
  std::vector<Vec2> t;
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  const Vec2 dirs[8] = {{1, 0},  {inv_sqrt2, inv_sqrt2},   {0, 1},  {-inv_sqrt2, inv_sqrt2},
                        {-1, 0}, {-inv_sqrt2, -inv_sqrt2}, {0, -1}, {inv_sqrt2, -inv_sqrt2}};
  for (double mag : {0.05, 0.025})
    for (const auto& d : dirs) t.push_back({d.x * mag * arena_size, d.y * mag * arena_size});
  return t;
}

WorldConfig WorldConfig::defaults(Variant v, Task t) {
  WorldConfig c;
  c.variant = v;
  c.task = t;
  c.action_table = default_action_table(c.arena_size);
  c.goal_position = {0.75 * c.arena_size, 0.25 * c.arena_size};
  if (t == Task::CornerGoal)
    c.reference_position = {c.arena_size * kCornerSide / 2.0, c.arena_size * (1.0 - kCornerSide / 2.0)};
  else
    c.reference_position = c.goal_position;
  c.reference_radius = c.arena_size / 16.0;
  return c;
}

void WorldConfig::validate() const {
  if (arena_size <= 0.0) throw std::invalid_argument("WorldConfig: arena_size must be positive");
  if (image_dim < 16) throw std::invalid_argument("WorldConfig: image_dim must be >= 16");
  if (action_table.empty()) throw std::invalid_argument("WorldConfig: action_table must be non-empty");
  for (size_t i = 0; i < action_table.size(); ++i) {
    const Vec2& a = action_table[i];
    if (std::sqrt(sq(a.x) + sq(a.y)) > arena_size / 4.0)
      throw std::invalid_argument("WorldConfig: action displacement exceeds arena_size/4");
    for (size_t j = i + 1; j < action_table.size(); ++j)
      if (action_table[j] == a)
        throw std::invalid_argument("WorldConfig: duplicate action displacement");
  }
  if (reference_radius <= 0.0) throw std::invalid_argument("WorldConfig: reference_radius must be positive");
}

void GenSpec::validate() const {
  if (episodes < 1) throw std::invalid_argument("GenSpec: episodes must be >= 1");
  if (frames_per_episode < 3) throw std::invalid_argument("GenSpec: frames_per_episode must be >= 3");
  if (distractor_count < 0) throw std::invalid_argument("GenSpec: distractor_count must be >= 0");
}

bool operator==(const WorldConfig& a, const WorldConfig& b) {
  return a.arena_size == b.arena_size && a.image_dim == b.image_dim && a.variant == b.variant &&
         a.task == b.task && a.action_table == b.action_table && a.goal_position == b.goal_position &&
         a.reference_position == b.reference_position && a.reference_radius == b.reference_radius &&
         a.seed == b.seed;
}

bool operator==(const GenSpec& a, const GenSpec& b) {
  return a.episodes == b.episodes && a.frames_per_episode == b.frames_per_episode &&
         a.distractor_count == b.distractor_count && a.seed == b.seed;
}

bool operator==(const Transition& a, const Transition& b) {
  return a.episode_id == b.episode_id && a.step == b.step && a.image == b.image &&
         a.action_id == b.action_id && a.reward == b.reward && a.gt_state == b.gt_state &&
         a.at_reference == b.at_reference;
}

bool operator==(const Dataset& a, const Dataset& b) {
  return a.config == b.config && a.spec == b.spec && a.episodes == b.episodes;
}

std::int64_t Dataset::total_frames() const {
  std::int64_t n = 0;
  for (const auto& e : episodes) n += static_cast<std::int64_t>(e.size());
  return n;
}

const Transition& Dataset::frame(std::int64_t flat) const {
  for (const auto& e : episodes) {
    if (flat < static_cast<std::int64_t>(e.size())) return e[static_cast<size_t>(flat)];
    flat -= static_cast<std::int64_t>(e.size());
  }
  throw std::out_of_range("Dataset::frame: index out of range");
}

std::int64_t Dataset::flat_index(int episode, int step_idx) const {
  std::int64_t n = 0;
  for (int e = 0; e < episode; ++e) n += static_cast<std::int64_t>(episodes[static_cast<size_t>(e)].size());
  return n + step_idx;
}

StepResult step(const Vec2& state, int action_id, const WorldConfig& config) {
  if (action_id < 0 || action_id >= static_cast<int>(config.action_table.size()))
    throw std::invalid_argument("step: invalid action_id " + std::to_string(action_id));
  const Vec2& d = config.action_table[static_cast<size_t>(action_id)];
  Vec2 raw{state.x + d.x, state.y + d.y};
  Vec2 next{std::clamp(raw.x, 0.0, config.arena_size), std::clamp(raw.y, 0.0, config.arena_size)};
  bool clamped = raw.x != next.x || raw.y != next.y;
  int reward = 0;
  bool at_goal = config.task == Task::CornerGoal ? in_corner_goal(next, config.arena_size)
                                                 : in_button_goal(next, config.goal_position, config.arena_size);
  if (at_goal)
    reward = config.task == Task::CornerGoal ? 10 : 1;
  else if (clamped)
    reward = -1;
  return {next, reward};
}

std::vector<std::uint8_t> render(const Vec2& state, const std::vector<Vec2>& distractor_states,
                                 const Palette& palette, const WorldConfig& config) {
  const int dim = config.image_dim;
  const double arena = config.arena_size;
  const double th = arena * kWallThickness;
  const double agent_r2 = sq(arena * kAgentRadius);
  const double goal_h = arena * kGoalSide / 2.0;
  const double dis_h = arena * kDistractorSide / 2.0;
  std::vector<std::uint8_t> img(static_cast<size_t>(dim) * dim * 3);
  for (int row = 0; row < dim; ++row) {
    double y = arena * (1.0 - (row + 0.5) / dim);
    for (int col = 0; col < dim; ++col) {
      double x = arena * (col + 0.5) / dim;
      Color c = palette.background;
      if (x <= th) c = palette.wall[0];
      if (x >= arena - th) c = palette.wall[1];
      if (y >= arena - th) c = palette.wall[2];
      if (y <= th) c = palette.wall[3];
      if (config.task == Task::ButtonGoal &&
          std::abs(x - config.goal_position.x) <= goal_h && std::abs(y - config.goal_position.y) <= goal_h)
        c = palette.goal;
      for (size_t i = 0; i < distractor_states.size(); ++i) {
        const Vec2& d = distractor_states[i];
        if (std::abs(x - d.x) <= dis_h && std::abs(y - d.y) <= dis_h)
          c = palette.distractor.empty() ? Color{0, 0, 0} : palette.distractor[i % palette.distractor.size()];
      }
      if (sq(x - state.x) + sq(y - state.y) <= agent_r2) c = palette.agent;
      size_t o = (static_cast<size_t>(row) * dim + col) * 3;
      img[o] = c.r;
      img[o + 1] = c.g;
      img[o + 2] = c.b;
    }
  }
  return img;
}

std::vector<Transition> generate_episode(const WorldConfig& config, const GenSpec& spec,
                                         int episode_id, Rng& rng) {
  const double arena = config.arena_size;
  const int frames = spec.frames_per_episode;
  const int n_dis = config.variant == Variant::Plain ? 0 : spec.distractor_count;
  const double dis_margin = arena * kDistractorSide / 2.0;

  // draw order: palette, static distractors, start position, then per frame
  // [moving distractors], action
  Palette palette = config.variant == Variant::DomainRandomized ? randomized_palette(rng, n_dis)
                                                                : canonical_palette(n_dis);
  auto draw_distractors = [&] {
    std::vector<Vec2> d(static_cast<size_t>(n_dis));
    for (auto& p : d) {
      p.x = rng.uniform(dis_margin, arena - dis_margin);
      p.y = rng.uniform(dis_margin, arena - dis_margin);
    }
    return d;
  };
  std::vector<Vec2> distractors;
  if (config.variant == Variant::StaticDistractors || config.variant == Variant::DomainRandomized)
    distractors = draw_distractors();

  Vec2 pos{rng.uniform() * arena, rng.uniform() * arena};
  std::vector<Transition> out;
  out.reserve(static_cast<size_t>(frames));
  int reward = 0;
  for (int t = 0; t < frames; ++t) {
    if (config.variant == Variant::MovingDistractors) distractors = draw_distractors();
    Transition tr;
    tr.episode_id = episode_id;
    tr.step = t;
    tr.image = render(pos, distractors, palette, config);
    tr.reward = reward;
    tr.gt_state = pos;
    tr.at_reference =
        sq(pos.x - config.reference_position.x) + sq(pos.y - config.reference_position.y) <=
        sq(config.reference_radius);
    if (t + 1 < frames) {
      int action = static_cast<int>(rng.uniform_int(config.action_table.size()));
      StepResult sr = step(pos, action, config);
      tr.action_id = action;
      pos = sr.next_state;
      reward = sr.reward;
    }
    out.push_back(std::move(tr));
  }
  return out;
}

namespace {

std::uint64_t dataset_master_seed(const WorldConfig& config, const GenSpec& spec) {
  std::uint64_t s = config.seed;
  std::uint64_t h = splitmix64(s);
  s = h + spec.seed;
  return splitmix64(s);
}

// at least one same-action pair and one causality-compatible pair
bool pair_availability_ok(const Dataset& d) {
  bool same_action = false, causal = false;
  std::vector<std::pair<int, int>> seen;  // (action, next_reward) of non-final frames
  for (const auto& ep : d.episodes) {
    for (size_t t = 0; t + 1 < ep.size(); ++t) {
      int a = ep[t].action_id;
      int rn = ep[t + 1].reward;
      for (const auto& [oa, orn] : seen) {
        if (oa == a) {
          same_action = true;
          if (orn != rn) causal = true;
        }
      }
      if (same_action && causal) return true;
      seen.emplace_back(a, rn);
    }
  }
  return same_action && causal;
}

}  // namespace

Dataset generate_dataset(const WorldConfig& config, const GenSpec& spec) {
  config.validate();
  spec.validate();
  Dataset d;
  d.config = config;
  d.spec = spec;
  std::uint64_t master = dataset_master_seed(config, spec);
  d.episodes.reserve(static_cast<size_t>(spec.episodes));
  for (int e = 0; e < spec.episodes; ++e) {
    Rng rng = Rng::substream(master, static_cast<std::uint64_t>(e));
    d.episodes.push_back(generate_episode(config, spec, e, rng));
  }
  // regenerate the last episode from fresh substreams until the dataset has
  // the pairs the priors need
  for (int retry = 0; retry < 64 && !pair_availability_ok(d); ++retry) {
    Rng rng = Rng::substream(master, static_cast<std::uint64_t>(spec.episodes + retry));
    d.episodes.back() = generate_episode(config, spec, spec.episodes - 1, rng);
  }
  if (!pair_availability_ok(d))
    throw std::runtime_error("generate_dataset: could not satisfy same-action/causality pair availability");
  return d;
}

namespace {

json to_json(const Vec2& v) { return json::array({v.x, v.y}); }
Vec2 vec2_from_json(const json& j) { return Vec2{j.at(0).get<double>(), j.at(1).get<double>()}; }

json to_json(const WorldConfig& c) {
  json j;
  j["arena_size"] = c.arena_size;
  j["image_dim"] = c.image_dim;
  j["variant"] = variant_name(c.variant);
  j["task"] = task_name(c.task);
  json at = json::array();
  for (const auto& a : c.action_table) at.push_back(to_json(a));
  j["action_table"] = at;
  j["goal_position"] = to_json(c.goal_position);
  j["reference_position"] = to_json(c.reference_position);
  j["reference_radius"] = c.reference_radius;
  j["seed"] = c.seed;
  return j;
}

WorldConfig world_config_from_json(const json& j) {
  WorldConfig c;
  c.arena_size = j.at("arena_size").get<double>();
  c.image_dim = j.at("image_dim").get<int>();
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.task = task_from_name(j.at("task").get<std::string>());
  c.action_table.clear();
  for (const auto& a : j.at("action_table")) c.action_table.push_back(vec2_from_json(a));
  c.goal_position = vec2_from_json(j.at("goal_position"));
  c.reference_position = vec2_from_json(j.at("reference_position"));
  c.reference_radius = j.at("reference_radius").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json to_json(const GenSpec& s) {
  json j;
  j["episodes"] = s.episodes;
  j["frames_per_episode"] = s.frames_per_episode;
  j["distractor_count"] = s.distractor_count;
  j["seed"] = s.seed;
  return j;
}

GenSpec gen_spec_from_json(const json& j) {
  GenSpec s;
  s.episodes = j.at("episodes").get<int>();
  s.frames_per_episode = j.at("frames_per_episode").get<int>();
  s.distractor_count = j.at("distractor_count").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace

std::string world_config_json(const WorldConfig& config) { return to_json(config).dump(); }
std::string gen_spec_json(const GenSpec& spec) { return to_json(spec).dump(); }

void write_dataset(const Dataset& dataset, const std::string& path) {
  auto os = open_out(path);
  ByteWriter w(os);
  w.magic(kDatasetMagic);
  w.u32(kDatasetVersion);
  json meta;
  meta["config"] = to_json(dataset.config);
  meta["spec"] = to_json(dataset.spec);
  meta["episode_count"] = dataset.episodes.size();
  w.blob(meta.dump());
  for (const auto& ep : dataset.episodes) {
    w.u32(static_cast<std::uint32_t>(ep.empty() ? 0 : ep.front().episode_id));
    w.u32(static_cast<std::uint32_t>(ep.size()));
    for (const auto& tr : ep) {
      w.bytes(tr.image.data(), tr.image.size());
      w.i32(tr.action_id);
      w.i32(tr.reward);
      w.f64(tr.gt_state.x);
      w.f64(tr.gt_state.y);
      w.u8(tr.at_reference ? 1 : 0);
    }
  }
  if (!os) throw io_error("write failed: " + path);
}

Dataset read_dataset(const std::string& path) {
  auto is = open_in(path);
  ByteReader r(is, "dataset " + path);
  r.expect_magic(kDatasetMagic);
  r.expect_version(kDatasetVersion);
  json meta;
  try {
    meta = json::parse(r.blob());
  } catch (const json::exception& e) {
    throw io_error("dataset " + path + ": bad metadata: " + e.what());
  }
  Dataset d;
  try {
    d.config = world_config_from_json(meta.at("config"));
    d.spec = gen_spec_from_json(meta.at("spec"));
  } catch (const json::exception& e) {
    throw io_error("dataset " + path + ": bad metadata: " + e.what());
  }
  size_t episode_count = meta.at("episode_count").get<size_t>();
  size_t img_bytes = static_cast<size_t>(d.config.image_dim) * d.config.image_dim * 3;
  d.episodes.resize(episode_count);
  for (auto& ep : d.episodes) {
    int episode_id = static_cast<int>(r.u32());
    std::uint32_t frames = r.u32();
    ep.resize(frames);
    for (std::uint32_t t = 0; t < frames; ++t) {
      Transition& tr = ep[t];
      tr.episode_id = episode_id;
      tr.step = static_cast<int>(t);
      tr.image.resize(img_bytes);
      r.bytes(tr.image.data(), img_bytes);
      tr.action_id = r.i32();
      tr.reward = r.i32();
      tr.gt_state.x = r.f64();
      tr.gt_state.y = r.f64();
      tr.at_reference = r.u8() != 0;
    }
  }
  r.expect_eof();
  return d;
}

}  // namespace rp
