#include "rp/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rp {

namespace {

std::shared_ptr<Tensor> he_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  auto t = std::make_shared<Tensor>(std::move(shape));
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t->data) v = static_cast<float>((rng.uniform() * 2.0 - 1.0) * bound);
  return t;
}

std::shared_ptr<Tensor> const_tensor(Shape shape, float value) {
  auto t = std::make_shared<Tensor>(std::move(shape));
  std::fill(t->data.begin(), t->data.end(), value);
  return t;
}

}  // namespace

void EncoderSpec::validate() const {
  if (image_dim < 4) throw std::invalid_argument("EncoderSpec: image_dim too small");
  if (conv.empty()) throw std::invalid_argument("EncoderSpec: at least one conv block required");
  if (state_dim < 1) throw std::invalid_argument("EncoderSpec: state_dim must be >= 1");
  if (fc_hidden < 1) throw std::invalid_argument("EncoderSpec: fc_hidden must be >= 1");
  if (freeze_prefix < 0 || freeze_prefix > static_cast<int>(conv.size()))
    throw std::invalid_argument("EncoderSpec: freeze_prefix out of range");
  if (spatial_after_conv() < 1)
    throw std::invalid_argument("EncoderSpec: conv stack reduces the image to nothing");
}

int EncoderSpec::spatial_after_conv() const {
  int s = image_dim;
  for (const auto& b : conv) {
    int pad = b.kernel / 2;
    s = (s + 2 * pad - b.kernel) / b.stride + 1;
    if (s < 1) return 0;
  }
  return s;
}

bool operator==(const EncoderSpec& a, const EncoderSpec& b) {
  return a.image_dim == b.image_dim && a.conv == b.conv && a.fc_hidden == b.fc_hidden &&
         a.state_dim == b.state_dim && a.freeze_prefix == b.freeze_prefix;
}

Encoder init_encoder(const EncoderSpec& spec, std::uint64_t seed) {
  spec.validate();
  Encoder e;
  e.spec = spec;
  Rng rng(seed);
  int in_ch = 3;
  for (size_t i = 0; i < spec.conv.size(); ++i) {
    const auto& b = spec.conv[i];
    std::int64_t fan_in = static_cast<std::int64_t>(in_ch) * b.kernel * b.kernel;
    bool train = static_cast<int>(i) >= spec.freeze_prefix;
    e.params.push_back(he_uniform({b.out_channels, in_ch, b.kernel, b.kernel}, fan_in, rng));
    e.trainable.push_back(train);
    e.params.push_back(const_tensor({b.out_channels}, 0.0f));
    e.trainable.push_back(train);
    in_ch = b.out_channels;
  }
  int s = spec.spatial_after_conv();
  std::int64_t flat = static_cast<std::int64_t>(in_ch) * s * s;
  e.params.push_back(he_uniform({flat, spec.fc_hidden}, flat, rng));
  e.trainable.push_back(true);
  e.params.push_back(const_tensor({spec.fc_hidden}, 0.0f));
  e.trainable.push_back(true);
  e.params.push_back(he_uniform({spec.fc_hidden, spec.state_dim}, spec.fc_hidden, rng));
  e.trainable.push_back(true);
  e.params.push_back(const_tensor({spec.state_dim}, 0.0f));
  e.trainable.push_back(true);
  return e;
}

int Encoder::build(Graph& g, int images) const {
  const auto& shape = g.node(images).shape;
  if (shape.size() != 4 || shape[1] != 3 || shape[2] != spec.image_dim || shape[3] != spec.image_dim)
    throw std::invalid_argument("Encoder::build: images must be (N,3," + std::to_string(spec.image_dim) +
                                "," + std::to_string(spec.image_dim) + "), got " + shape_str(shape));
  // per-channel normalization: mean 0.5, scale 0.5
  int x = g.scalar_affine(images, 2.0f, -1.0f);
  size_t pi = 0;
  for (const auto& b : spec.conv) {
    int w = g.param(params[pi], trainable[pi]);
    int bias = g.param(params[pi + 1], trainable[pi + 1]);
    pi += 2;
    x = g.conv2d(x, w, bias, b.stride, b.kernel / 2);
    x = g.relu(x);
  }
  const auto& xs = g.node(x).shape;
  x = g.reshape(x, {xs[0], xs[1] * xs[2] * xs[3]});
  int w1 = g.param(params[pi], trainable[pi]);
  int b1 = g.param(params[pi + 1], trainable[pi + 1]);
  x = g.relu(g.dense(x, w1, b1));
  int w2 = g.param(params[pi + 2], trainable[pi + 2]);
  int b2 = g.param(params[pi + 3], trainable[pi + 3]);
  return g.dense(x, w2, b2);
}

std::vector<std::shared_ptr<Tensor>> Encoder::trainable_params() const {
  std::vector<std::shared_ptr<Tensor>> out;
  for (size_t i = 0; i < params.size(); ++i)
    if (trainable[i]) out.push_back(params[i]);
  return out;
}

Tensor encode(const Encoder& encoder, const Tensor& images) {
  Graph g;
  int in = g.input(images.shape);
  int out = encoder.build(g, in);
  Workspace ws;
  evaluate(g, {{in, &images}}, ws);
  return ws.value[static_cast<size_t>(out)];
}

namespace {

struct TconvPlan {
  int out_channels;
  int stride;  // 1 keeps the size (k3 p1), 2 doubles it (k4 p1)
};

std::vector<TconvPlan> decoder_plan(int image_dim, int& seed_channels) {
  int doublings;
  switch (image_dim) {
    case 16: doublings = 3; break;
    case 32: doublings = 4; break;
    case 64: doublings = 5; break;
    default:
      throw std::invalid_argument("Decoder: image_dim must be 16, 32 or 64");
  }
  seed_channels = 32;
  const int chans[5] = {32, 16, 8, 8, 3};
  std::vector<TconvPlan> plan;
  for (int i = 0; i < 5; ++i) plan.push_back({chans[i], i < 5 - doublings ? 1 : 2});
  return plan;
}

}  // namespace

Decoder init_decoder(int image_dim, int state_dim, std::uint64_t seed) {
  Decoder d;
  d.image_dim = image_dim;
  d.state_dim = state_dim;
  int seed_ch = 0;
  auto plan = decoder_plan(image_dim, seed_ch);
  Rng rng(seed);
  std::int64_t seed_flat = static_cast<std::int64_t>(seed_ch) * 2 * 2;
  d.params.push_back(he_uniform({state_dim, seed_flat}, state_dim, rng));
  d.params.push_back(const_tensor({seed_flat}, 0.0f));
  int in_ch = seed_ch;
  for (size_t i = 0; i < plan.size(); ++i) {
    int k = plan[i].stride == 2 ? 4 : 3;
    std::int64_t fan_in = static_cast<std::int64_t>(in_ch) * k * k;
    d.params.push_back(he_uniform({in_ch, plan[i].out_channels, k, k}, fan_in, rng));
    // mid-range bias on the final layer so pixels start inside the clamp
    d.params.push_back(const_tensor({plan[i].out_channels}, i + 1 == plan.size() ? 0.5f : 0.0f));
    in_ch = plan[i].out_channels;
  }
  return d;
}

int Decoder::build(Graph& g, int states) const {
  const auto& ss = g.node(states).shape;
  if (ss.size() != 2 || ss[1] != state_dim)
    throw std::invalid_argument("Decoder::build: states must be (N," + std::to_string(state_dim) +
                                "), got " + shape_str(ss));
  int seed_ch = 0;
  auto plan = decoder_plan(image_dim, seed_ch);
  size_t pi = 0;
  int w = g.param(params[pi], true);
  int b = g.param(params[pi + 1], true);
  pi += 2;
  int x = g.relu(g.dense(states, w, b));
  x = g.reshape(x, {ss[0], seed_ch, 2, 2});
  for (size_t i = 0; i < plan.size(); ++i) {
    int tw = g.param(params[pi], true);
    int tb = g.param(params[pi + 1], true);
    pi += 2;
    x = g.tconv2d(x, tw, tb, plan[i].stride, 1);
    if (i + 1 < plan.size()) x = g.relu(x);
  }
  return g.clamp01(x);
}

Tensor decode(const Decoder& decoder, const Tensor& states) {
  Graph g;
  int in = g.input(states.shape);
  int out = decoder.build(g, in);
  Workspace ws;
  evaluate(g, {{in, &states}}, ws);
  return ws.value[static_cast<size_t>(out)];
}

Tensor corrupt(const Tensor& images, float sigma, Rng& rng) {
  if (sigma < 0.0f) throw std::invalid_argument("corrupt: sigma must be >= 0");
  Tensor out = images;
  if (sigma == 0.0f) return out;
  for (auto& v : out.data)
    v = std::clamp(v + sigma * static_cast<float>(rng.normal()), 0.0f, 1.0f);
  return out;
}

int supervised_loss(Graph& g, const Encoder& encoder, int images, int targets) {
  int states = encoder.build(g, images);
  return g.mean(g.square(g.sub(states, targets)));
}

Tensor batch_images(const Dataset& dataset, std::span<const std::int64_t> rows) {
  const int dim = dataset.config.image_dim;
  const std::int64_t px = static_cast<std::int64_t>(dim) * dim;
  Tensor t({static_cast<std::int64_t>(rows.size()), 3, dim, dim});
  float* out = t.ptr();
  for (size_t n = 0; n < rows.size(); ++n) {
    const auto& img = dataset.frame(rows[n]).image;
    for (std::int64_t p = 0; p < px; ++p)
      for (int c = 0; c < 3; ++c)
        out[static_cast<std::int64_t>(n) * 3 * px + c * px + p] =
            static_cast<float>(img[static_cast<size_t>(p * 3 + c)]) / 255.0f;
  }
  return t;
}

Tensor batch_gt(const Dataset& dataset, std::span<const std::int64_t> rows) {
  Tensor t({static_cast<std::int64_t>(rows.size()), 2});
  for (size_t n = 0; n < rows.size(); ++n) {
    const auto& tr = dataset.frame(rows[n]);
    t.data[n * 2] = static_cast<float>(tr.gt_state.x);
    t.data[n * 2 + 1] = static_cast<float>(tr.gt_state.y);
  }
  return t;
}

}  // namespace rp
