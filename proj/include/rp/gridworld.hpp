#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rp/rng.hpp"

namespace rp {

enum class Variant { Plain, MovingDistractors, StaticDistractors, DomainRandomized };
enum class Task { CornerGoal, ButtonGoal };

std::string variant_name(Variant v);
std::string task_name(Task t);
Variant variant_from_name(const std::string& s);
Task task_from_name(const std::string& s);

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};
inline bool operator==(const Vec2& a, const Vec2& b) { return a.x == b.x && a.y == b.y; }

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
};
inline bool operator==(const Color& a, const Color& b) { return a.r == b.r && a.g == b.g && a.b == b.b; }

// Scene colors. Walls are ordered left, right, top, bottom.
struct Palette {
  Color background;
  Color wall[4];
  Color agent;
  Color goal;
  std::vector<Color> distractor;
};

Palette canonical_palette(int distractor_count);
Palette randomized_palette(Rng& rng, int distractor_count);

struct WorldConfig {
  double arena_size = 1.0;
  int image_dim = 64;
  Variant variant = Variant::Plain;
  Task task = Task::CornerGoal;
  std::vector<Vec2> action_table;  // empty -> default_action_table()
  Vec2 goal_position{0.75, 0.25};
  Vec2 reference_position{0.0625, 0.9375};
  double reference_radius = 1.0 / 16.0;
  std::uint64_t seed = 1;

  void validate() const;
  // 8 directions x magnitudes {0.05, 0.025} * arena_size.
  static std::vector<Vec2> default_action_table(double arena_size);
  static WorldConfig defaults(Variant v, Task t);
};
bool operator==(const WorldConfig& a, const WorldConfig& b);

struct GenSpec {
  int episodes = 11;
  int frames_per_episode = 99;
  int distractor_count = 0;
  std::uint64_t seed = 1;

  void validate() const;
};
bool operator==(const GenSpec& a, const GenSpec& b);

struct Transition {
  int episode_id = 0;
  int step = 0;
  std::vector<std::uint8_t> image;  // image_dim*image_dim*3, RGB row-major
  int action_id = -1;               // -1 on the last frame of an episode
  int reward = 0;                   // received on arriving at this frame
  Vec2 gt_state;
  bool at_reference = false;
};
bool operator==(const Transition& a, const Transition& b);

struct Dataset {
  WorldConfig config;
  GenSpec spec;
  std::vector<std::vector<Transition>> episodes;

  std::int64_t total_frames() const;
  // flat row index <-> (episode, step)
  const Transition& frame(std::int64_t flat) const;
  std::int64_t flat_index(int episode, int step) const;
};
bool operator==(const Dataset& a, const Dataset& b);

struct StepResult {
  Vec2 next_state;
  int reward = 0;
};

// Clamps the displaced state to the arena. Wall reward -1 on clamping,
// goal reward (+10 corner / +1 button) takes precedence.
StepResult step(const Vec2& state, int action_id, const WorldConfig& config);

// Deterministic rasterization; identical inputs give byte-identical images.
std::vector<std::uint8_t> render(const Vec2& state, const std::vector<Vec2>& distractor_states,
                                 const Palette& palette, const WorldConfig& config);

std::vector<Transition> generate_episode(const WorldConfig& config, const GenSpec& spec,
                                         int episode_id, Rng& rng);

Dataset generate_dataset(const WorldConfig& config, const GenSpec& spec);

void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

std::string world_config_json(const WorldConfig& config);
std::string gen_spec_json(const GenSpec& spec);

}  // namespace rp
