#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "diat/tensor.hpp"

namespace diat::nn {

enum class LayerKind : std::uint8_t { conv, deconv, dense, residual_block, activation, norm, flatten };
enum class Activation : std::uint8_t { relu, leaky_relu, sigmoid, tanh };

std::string_view kind_name(LayerKind k);
std::string_view activation_name(Activation a);

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int channels = 0;  // output channels, or units for dense
  int kernel = 0;
  int pad = 0;
  int stride = 1;
  int out_pad = 0;
  Activation activation = Activation::relu;
  double slope = 0.2;
  bool norm = false;     // residual blocks: normalize inside the branch
  std::string tap;       // exposes this layer's output under this label

  static LayerSpec conv(int channels, int kernel, int pad, int stride);
  static LayerSpec deconv(int channels, int kernel, int pad, int stride, int out_pad);
  static LayerSpec dense(int units);
  static LayerSpec residual(int channels, bool norm);
  static LayerSpec act(Activation a, double slope = 0.2);
  static LayerSpec instance_norm();
  static LayerSpec flatten();
  LayerSpec& tapped(std::string label);
};

/// Positive rational applied to the paper's 128x128 resolution and channel
/// widths. Scaled widths are rounded up to a multiple of 4 with a floor of 8.
struct Scale {
  int num = 1;
  int den = 4;

  static Scale parse(std::string_view text);  // "1", "1/4", "0.25"
  int channels(int paper_channels) const;
  int resolution(int paper_resolution = 128) const;
  std::string str() const;
  bool operator==(const Scale&) const = default;
};

struct ArchOptions {
  bool norm = true;  // instance normalization after generator-side convs
};

class NetworkSpec {
 public:
  std::string name;
  Shape input;  // [C,H,W]
  std::vector<LayerSpec> layers;

  /// Output shape of every layer, for a single (unbatched) input. Throws
  /// ShapeError if any layer does not fit.
  std::vector<Shape> infer_shapes() const;
  Shape output_shape() const { return infer_shapes().back(); }
  /// Label -> shape for every declared tap.
  std::map<std::string, Shape> tap_shapes() const;
  /// Text form of everything except the name.
  std::string canonical() const;
  std::uint64_t hash() const;
};

struct Param {
  std::string name;
  Tensor value;
};

class Network {
 public:
  struct Output {
    Tensor out;
    std::map<std::string, Tensor> taps;
  };

  Network() = default;
  /// Allocates zero parameters for `spec`; shape inference runs first.
  explicit Network(NetworkSpec spec, DType dt = DType::f32);

  const NetworkSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }
  DType dtype() const { return dtype_; }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Tensor> parameters() const;
  std::int64_t parameter_count() const;
  Tensor& param(std::string_view name);

  /// Accepts [C,H,W] or [N,C,H,W]. With `stop_after_tap`, evaluation stops
  /// once that tap is produced and `out` is the tap.
  Output forward(const Tensor& x, std::string_view stop_after_tap = {}) const;
  Tensor operator()(const Tensor& x) const { return forward(x).out; }

  void set_trainable(bool on);
  bool trainable() const { return trainable_; }
  void zero_grads();

  /// Deep copy, optionally converted to another precision.
  Network clone() const;
  Network to(DType dt) const;
  /// Copies parameter values from a network with an identical spec hash.
  void load_values(const Network& other);

 private:
  struct Slot {
    std::size_t first;  // index into params_
    std::size_t count;
  };
  NetworkSpec spec_;
  DType dtype_ = DType::f32;
  std::vector<Param> params_;
  std::vector<Slot> slots_;
  bool trainable_ = true;
};

/// Fan-in scaled uniform weights, zero biases, unit norm scales. Residual
/// branches end at zero so every block starts as the identity map.
void init_params(Network& net, std::uint64_t seed);

// Builders. Resolution and widths follow `scale`; at scale 1 the transform
// net and discriminator reproduce the paper's tables.
NetworkSpec transform_net_spec(Scale scale, ArchOptions opts = {});
NetworkSpec discriminator_spec(Scale scale);
NetworkSpec reconstruction_net_spec(Scale scale, ArchOptions opts = {});
NetworkSpec denoising_net_spec(Scale scale, int width = 32);
NetworkSpec local_enhancer_spec(Scale scale, int width = 16);
NetworkSpec global_enhancer_spec(Scale scale, ArchOptions opts = {});
NetworkSpec identity_embedder_spec(Scale scale, int n_identities);
NetworkSpec attribute_classifier_spec(Scale scale);

Network build_transform_net(Scale scale, std::uint64_t seed = 0, ArchOptions opts = {});
Network build_discriminator(Scale scale, std::uint64_t seed = 0);
Network build_reconstruction_net(Scale scale, std::uint64_t seed = 0, ArchOptions opts = {});
Network build_denoising_net(Scale scale, std::uint64_t seed = 0, int width = 32);
Network build_local_enhancer(Scale scale, std::uint64_t seed = 0, int width = 16);
Network build_global_enhancer(Scale scale, std::uint64_t seed = 0, ArchOptions opts = {});
Network build_identity_embedder(Scale scale, int n_identities, std::uint64_t seed = 0);
Network build_attribute_classifier(Scale scale, std::uint64_t seed = 0);

}  // namespace diat::nn
