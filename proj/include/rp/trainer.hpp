#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rp/adam.hpp"
#include "rp/models.hpp"
#include "rp/priors.hpp"

namespace rp {

enum class Method { Priors4, Priors5, DAE, Supervised };
enum class ReferenceMode { Goal, Start };

std::string method_name(Method m);
Method method_from_name(const std::string& s);
std::string reference_mode_name(ReferenceMode m);
ReferenceMode reference_mode_from_name(const std::string& s);

// Where the reference sensor is placed at data-collection time.
Vec2 goal_reference_position(const WorldConfig& config);
Vec2 start_reference_position(const WorldConfig& config);
Vec2 reference_position_for(ReferenceMode mode, const WorldConfig& config);

struct TrainConfig {
  Method method = Method::Priors5;
  int epochs = 15;
  int pairs_per_prior = 10;
  int batch_size = 10;  // supervised / DAE minibatch (DAE conventionally 20)
  float lr = 1e-4f;
  float lr_decay = 3e-6f;
  std::uint64_t seed = 1;
  PriorWeights weights;
  ReferenceMode reference_mode = ReferenceMode::Goal;  // Priors5 only
  EncoderSpec encoder;  // image_dim is overwritten from the dataset
  float dae_sigma = 0.1f;

  void validate() const;
};

std::string train_config_json(const TrainConfig& c);
std::string train_config_digest(const TrainConfig& c);

struct RunLogRow {
  std::int64_t step = 0;
  int epoch = 0;
  float total_loss = 0.0f;
  float l_temp = 0.0f;
  float l_prop = 0.0f;
  float l_rep = 0.0f;
  float l_caus = 0.0f;
  float l_ref = 0.0f;
  float lr_effective = 0.0f;
};

struct RunLog {
  std::vector<RunLogRow> rows;
  std::vector<double> wall_seconds;  // since training start, one per row

  double epoch_mean_total(int epoch) const;
};

void write_runlog(const RunLog& log, const std::string& path);

struct Checkpoint {
  Method method = Method::Priors5;
  EncoderSpec encoder_spec;
  bool has_decoder = false;
  std::vector<Tensor> params;  // encoder params, then decoder params
  std::vector<Tensor> adam_m;  // aligned with the trainable parameter list
  std::vector<Tensor> adam_v;
  std::int64_t adam_step = 0;
  float lr = 1e-4f, lr_decay = 3e-6f, beta1 = 0.9f, beta2 = 0.999f, epsilon = 1e-8f;
  std::string config_digest;
  int epochs_completed = 0;
};
bool operator==(const Checkpoint& a, const Checkpoint& b);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Encoder encoder_from_checkpoint(const Checkpoint& ckpt);
Decoder decoder_from_checkpoint(const Checkpoint& ckpt);

using SnapshotFn = std::function<void(int epoch, const Checkpoint&)>;

struct TrainResult {
  Checkpoint checkpoint;
  RunLog log;
};

// Deterministic given (dataset, config). One Adam step per sampled batch.
TrainResult train(const Dataset& dataset, const TrainConfig& config, const SnapshotFn& snapshot = {});

// Denoising-autoencoder training; also reachable through train() with
// method == DAE.
TrainResult train_dae(const Dataset& dataset, const TrainConfig& config, const SnapshotFn& snapshot = {});

}  // namespace rp
