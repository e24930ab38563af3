#pragma once

#include <memory>
#include <span>
#include <vector>

#include "rp/graph.hpp"
#include "rp/gridworld.hpp"
#include "rp/rng.hpp"
#include "rp/tensor.hpp"

namespace rp {

struct ConvBlock {
  int out_channels = 0;
  int kernel = 3;
  int stride = 2;
};
inline bool operator==(const ConvBlock& a, const ConvBlock& b) {
  return a.out_channels == b.out_channels && a.kernel == b.kernel && a.stride == b.stride;
}

struct EncoderSpec {
  int image_dim = 64;
  std::vector<ConvBlock> conv = {{8, 3, 2}, {16, 3, 2}, {32, 3, 2}};
  int fc_hidden = 64;
  int state_dim = 2;
  int freeze_prefix = 0;  // leading conv blocks excluded from training

  void validate() const;
  int spatial_after_conv() const;  // side length of the last conv feature map
};
bool operator==(const EncoderSpec& a, const EncoderSpec& b);

// Convolutional state encoder. Parameters are shared tensors; building the
// encode subgraph into several graphs (or several times into one graph)
// reuses the same storage, which is what makes training siamese.
struct Encoder {
  EncoderSpec spec;
  std::vector<std::shared_ptr<Tensor>> params;  // conv (w,b)*, fc1 (w,b), fc2 (w,b)
  std::vector<bool> trainable;

  // images: (N,3,H,W) float in [0,1]; returns the (N,state_dim) node
  int build(Graph& g, int images) const;
  std::vector<std::shared_ptr<Tensor>> trainable_params() const;
};

Encoder init_encoder(const EncoderSpec& spec, std::uint64_t seed);

// Forward pass outside any training loop.
Tensor encode(const Encoder& encoder, const Tensor& images);

// Five-layer transposed-convolution decoder from the state back to an
// image in [0,1]. image_dim must be 16, 32 or 64.
struct Decoder {
  int image_dim = 64;
  int state_dim = 2;
  std::vector<std::shared_ptr<Tensor>> params;  // fc (w,b), tconv (w,b)*5

  int build(Graph& g, int states) const;
};

Decoder init_decoder(int image_dim, int state_dim, std::uint64_t seed);

Tensor decode(const Decoder& decoder, const Tensor& states);

// Additive Gaussian pixel noise, clipped back to [0,1].
Tensor corrupt(const Tensor& images, float sigma, Rng& rng);

// Mean squared error between encode(images) and targets; mean over batch
// and components. Returns the loss node.
int supervised_loss(Graph& g, const Encoder& encoder, int images, int targets);

// (N,3,H,W) float batch in [0,1] from dataset frames at the given flat rows.
Tensor batch_images(const Dataset& dataset, std::span<const std::int64_t> rows);
// (N,2) float batch of ground-truth states.
Tensor batch_gt(const Dataset& dataset, std::span<const std::int64_t> rows);

}  // namespace rp
