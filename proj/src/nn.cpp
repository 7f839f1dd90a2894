#include "diat/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "diat/ops.hpp"

namespace diat::nn {

std::string_view kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::deconv: return "deconv";
    case LayerKind::dense: return "dense";
    case LayerKind::residual_block: return "residual_block";
    case LayerKind::activation: return "activation";
    case LayerKind::norm: return "norm";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

LayerSpec LayerSpec::conv(int channels, int kernel, int pad, int stride) {
  LayerSpec l;
  l.kind = LayerKind::conv;
  l.channels = channels;
  l.kernel = kernel;
  l.pad = pad;
  l.stride = stride;
  return l;
}

LayerSpec LayerSpec::deconv(int channels, int kernel, int pad, int stride, int out_pad) {
  LayerSpec l = conv(channels, kernel, pad, stride);
  l.kind = LayerKind::deconv;
  l.out_pad = out_pad;
  return l;
}

LayerSpec LayerSpec::dense(int units) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.channels = units;
  return l;
}

LayerSpec LayerSpec::residual(int channels, bool norm) {
  LayerSpec l = conv(channels, 3, 1, 1);
  l.kind = LayerKind::residual_block;
  l.norm = norm;
  return l;
}

LayerSpec LayerSpec::act(Activation a, double slope) {
  LayerSpec l;
  l.kind = LayerKind::activation;
  l.activation = a;
  l.slope = slope;
  return l;
}

LayerSpec LayerSpec::instance_norm() {
  LayerSpec l;
  l.kind = LayerKind::norm;
  return l;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

LayerSpec& LayerSpec::tapped(std::string label) {
  tap = std::move(label);
  return *this;
}

Scale Scale::parse(std::string_view text) {
  const std::string s(text);
  Scale sc;
  try {
    if (auto slash = s.find('/'); slash != std::string::npos) {
      sc.num = std::stoi(s.substr(0, slash));
      sc.den = std::stoi(s.substr(slash + 1));
    } else if (s.find('.') != std::string::npos) {
      const double v = std::stod(s);
      sc.num = static_cast<int>(std::lround(v * 1024));
      sc.den = 1024;
    } else {
      sc.num = std::stoi(s);
      sc.den = 1;
    }
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid scale factor '" + s + "'");
  }
  if (sc.num <= 0 || sc.den <= 0) throw std::invalid_argument("scale factor must be positive: " + s);
  const int g = std::gcd(sc.num, sc.den);
  sc.num /= g;
  sc.den /= g;
  return sc;
}

int Scale::channels(int paper_channels) const {
  const long scaled = (static_cast<long>(paper_channels) * num + den - 1) / den;
  const long rounded = (scaled + 3) / 4 * 4;
  return static_cast<int>(std::max(8L, rounded));
}

int Scale::resolution(int paper_resolution) const {
  const long r = static_cast<long>(paper_resolution) * num;
  if (r % den != 0 || (r / den) % 4 != 0 || r / den < 8)
    throw ShapeError("scale " + str() + " does not map resolution " + std::to_string(paper_resolution) +
                     " to a positive multiple of 4");
  return static_cast<int>(r / den);
}

std::string Scale::str() const { return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den); }

namespace {

Shape layer_output(const LayerSpec& l, const Shape& in, std::size_t index) {
  auto fail = [&](const std::string& why) {
    return ShapeError("layer " + std::to_string(index) + " (" + std::string(kind_name(l.kind)) + "): " + why +
                      ", input " + in.str());
  };
  switch (l.kind) {
    case LayerKind::conv:
    case LayerKind::deconv:
    case LayerKind::residual_block: {
      if (in.rank() != 3) throw fail("expects [C,H,W]");
      if (l.channels <= 0 || l.kernel <= 0 || l.stride <= 0 || l.pad < 0) throw fail("non-positive geometry");
      if (l.kind == LayerKind::residual_block) {
        if (l.channels != in[0]) throw fail("residual block width must equal input channels");
        return in;
      }
      if (l.kind == LayerKind::conv)
        return Shape{l.channels, conv_out_extent(in[1], l.kernel, l.pad, l.stride),
                     conv_out_extent(in[2], l.kernel, l.pad, l.stride)};
      return Shape{l.channels, deconv_out_extent(in[1], l.kernel, l.pad, l.stride, l.out_pad),
                   deconv_out_extent(in[2], l.kernel, l.pad, l.stride, l.out_pad)};
    }
    case LayerKind::dense:
      if (in.rank() != 1) throw fail("expects a flattened input");
      if (l.channels <= 0) throw fail("non-positive unit count");
      return Shape{l.channels};
    case LayerKind::norm:
      if (in.rank() != 3) throw fail("expects [C,H,W]");
      return in;
    case LayerKind::activation:
      return in;
    case LayerKind::flatten:
      return Shape{in.numel()};
  }
  throw fail("unknown layer kind");
}

// FNV-1a, 64 bit.
std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::vector<Shape> NetworkSpec::infer_shapes() const {
  if (input.rank() != 3) throw ShapeError("network input must be [C,H,W], got " + input.str());
  std::vector<Shape> shapes;
  Shape cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    cur = layer_output(layers[i], cur, i);
    shapes.push_back(cur);
  }
  if (shapes.empty()) throw ShapeError("network has no layers");
  return shapes;
}

std::map<std::string, Shape> NetworkSpec::tap_shapes() const {
  auto shapes = infer_shapes();
  std::map<std::string, Shape> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (!layers[i].tap.empty()) out.emplace(layers[i].tap, shapes[i]);
  return out;
}

std::string NetworkSpec::canonical() const {
  std::ostringstream os;
  os << "input " << input.str() << '\n';
  for (const auto& l : layers) {
    os << kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::deconv:
      case LayerKind::residual_block:
        os << " c=" << l.channels << " k=" << l.kernel << " p=" << l.pad << " s=" << l.stride;
        if (l.kind == LayerKind::deconv) os << " op=" << l.out_pad;
        if (l.kind == LayerKind::residual_block) os << " norm=" << l.norm;
        break;
      case LayerKind::dense:
        os << " units=" << l.channels;
        break;
      case LayerKind::activation:
        os << ' ' << activation_name(l.activation);
        if (l.activation == Activation::leaky_relu) os << " slope=" << l.slope;
        break;
      default:
        break;
    }
    if (!l.tap.empty()) os << " tap=" << l.tap;
    os << '\n';
  }
  return os.str();
}

std::uint64_t NetworkSpec::hash() const { return fnv1a(canonical()); }

Network::Network(NetworkSpec spec, DType dt) : spec_(std::move(spec)), dtype_(dt) {
  const auto shapes = spec_.infer_shapes();
  std::map<std::string, int> seen_taps;
  for (const auto& l : spec_.layers)
    if (!l.tap.empty() && seen_taps[l.tap]++ > 0) throw std::invalid_argument("duplicate tap label " + l.tap);

  auto add = [&](const std::string& name, Shape s) {
    params_.push_back(Param{name, Tensor::zeros(s, dt)});
  };
  Shape in = spec_.input;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    const std::size_t first = params_.size();
    switch (l.kind) {
      case LayerKind::conv:
        add(p + "weight", Shape{l.channels, in[0], l.kernel, l.kernel});
        add(p + "bias", Shape{l.channels});
        break;
      case LayerKind::deconv:
        add(p + "weight", Shape{in[0], l.channels, l.kernel, l.kernel});
        add(p + "bias", Shape{l.channels});
        break;
      case LayerKind::dense:
        add(p + "weight", Shape{l.channels, in[0]});
        add(p + "bias", Shape{l.channels});
        break;
      case LayerKind::norm:
        add(p + "gamma", Shape{in[0]});
        add(p + "beta", Shape{in[0]});
        break;
      case LayerKind::residual_block:
        add(p + "conv1.weight", Shape{l.channels, l.channels, 3, 3});
        add(p + "conv1.bias", Shape{l.channels});
        if (l.norm) {
          add(p + "norm1.gamma", Shape{l.channels});
          add(p + "norm1.beta", Shape{l.channels});
        }
        add(p + "conv2.weight", Shape{l.channels, l.channels, 3, 3});
        add(p + "conv2.bias", Shape{l.channels});
        if (l.norm) {
          add(p + "norm2.gamma", Shape{l.channels});
          add(p + "norm2.beta", Shape{l.channels});
        }
        break;
      default:
        break;
    }
    slots_.push_back(Slot{first, params_.size() - first});
    in = shapes[i];
  }
  set_trainable(true);
}

std::vector<Tensor> Network::parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

std::int64_t Network::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

Tensor& Network::param(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p.value;
  throw std::out_of_range("no parameter named " + std::string(name) + " in " + spec_.name);
}

Network::Output Network::forward(const Tensor& x, std::string_view stop_after_tap) const {
  const auto& xs = x.shape();
  const bool batched = xs.rank() == 4;
  if (!(xs.rank() == 3 || batched) || xs[xs.rank() - 3] != spec_.input[0] ||
      xs[xs.rank() - 2] != spec_.input[1] || xs[xs.rank() - 1] != spec_.input[2])
    throw ShapeError(spec_.name + ": expected input " + spec_.input.str() + " (optionally batched), got " +
                     xs.str());
  if (x.dtype() != dtype_) throw std::invalid_argument(spec_.name + ": input dtype does not match network");

  Output result;
  Tensor h = x;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    const Param* p = params_.data() + slots_[i].first;
    switch (l.kind) {
      case LayerKind::conv:
        h = conv2d(h, p[0].value, p[1].value, l.pad, l.stride);
        break;
      case LayerKind::deconv:
        h = conv_transpose2d(h, p[0].value, p[1].value, l.pad, l.stride, l.out_pad);
        break;
      case LayerKind::dense:
        h = dense(h, p[0].value, p[1].value);
        break;
      case LayerKind::norm:
        h = instance_norm(h, p[0].value, p[1].value);
        break;
      case LayerKind::residual_block: {
        Tensor r;
        if (l.norm) {
          r = relu(instance_norm(conv2d(h, p[0].value, p[1].value, 1, 1), p[2].value, p[3].value));
          r = instance_norm(conv2d(r, p[4].value, p[5].value, 1, 1), p[6].value, p[7].value);
        } else {
          r = relu(conv2d(h, p[0].value, p[1].value, 1, 1));
          r = conv2d(r, p[2].value, p[3].value, 1, 1);
        }
        h = add(h, r);
        break;
      }
      case LayerKind::activation:
        switch (l.activation) {
          case Activation::relu: h = relu(h); break;
          case Activation::leaky_relu: h = leaky_relu(h, l.slope); break;
          case Activation::sigmoid: h = sigmoid(h); break;
          case Activation::tanh: h = diat::tanh(h); break;
        }
        break;
      case LayerKind::flatten:
        h = batched ? reshape(h, Shape{h.shape()[0], h.numel() / h.shape()[0]}) : reshape(h, Shape{h.numel()});
        break;
    }
    if (!l.tap.empty()) {
      result.taps.emplace(l.tap, h);
      if (l.tap == stop_after_tap) {
        result.out = h;
        return result;
      }
    }
  }
  if (!stop_after_tap.empty()) throw std::invalid_argument(spec_.name + ": no tap named " + std::string(stop_after_tap));
  result.out = h;
  return result;
}

void Network::set_trainable(bool on) {
  trainable_ = on;
  for (auto& p : params_) {
    p.value.set_requires_grad(on);
    if (!on) p.value.clear_grad();
  }
}

void Network::zero_grads() {
  for (auto& p : params_) p.value.zero_grad();
}

Network Network::clone() const { return to(dtype_); }

Network Network::to(DType dt) const {
  Network n;
  n.spec_ = spec_;
  n.dtype_ = dt;
  n.slots_ = slots_;
  for (const auto& p : params_) n.params_.push_back(Param{p.name, p.value.to(dt)});
  n.set_trainable(trainable_);
  return n;
}

void Network::load_values(const Network& other) {
  if (other.spec_.hash() != spec_.hash())
    throw std::invalid_argument("load_values: spec mismatch between " + other.name() + " and " + name());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto src = other.params_[i].value.to_vector();
    dispatch(dtype_, [&]<class T>() {
      auto dst = params_[i].value.mutable_data<T>();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(src[j]);
    });
  }
}

namespace {

bool followed_by_rectifier(const NetworkSpec& spec, std::size_t i) {
  for (std::size_t j = i + 1; j < spec.layers.size(); ++j) {
    const auto& l = spec.layers[j];
    if (l.kind == LayerKind::norm) continue;
    return l.kind == LayerKind::activation &&
           (l.activation == Activation::relu || l.activation == Activation::leaky_relu);
  }
  return false;
}

void fill_uniform(Tensor& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  dispatch(t.dtype(), [&]<class T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(u(rng));
  });
}

void fill_const(Tensor& t, double value) {
  dispatch(t.dtype(), [&]<class T>() {
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

}  // namespace

void init_params(Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& spec = net.spec();
  const auto shapes = spec.infer_shapes();
  auto bound = [](double fan_in, bool rectified) { return std::sqrt((rectified ? 6.0 : 3.0) / fan_in); };
  std::size_t pi = 0;
  auto& params = net.params();
  Shape in = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const bool rect = followed_by_rectifier(spec, i);
    switch (l.kind) {
      case LayerKind::conv:
        fill_uniform(params[pi].value, bound(double(in[0]) * l.kernel * l.kernel, rect), rng);
        fill_const(params[pi + 1].value, 0.0);
        pi += 2;
        break;
      case LayerKind::deconv: {
        const double fan_in = double(in[0]) * l.kernel * l.kernel / (double(l.stride) * l.stride);
        fill_uniform(params[pi].value, bound(fan_in, rect), rng);
        fill_const(params[pi + 1].value, 0.0);
        pi += 2;
        break;
      }
      case LayerKind::dense:
        fill_uniform(params[pi].value, bound(double(in[0]), rect), rng);
        fill_const(params[pi + 1].value, 0.0);
        pi += 2;
        break;
      case LayerKind::norm:
        fill_const(params[pi].value, 1.0);
        fill_const(params[pi + 1].value, 0.0);
        pi += 2;
        break;
      case LayerKind::residual_block: {
        const double fan_in = double(l.channels) * 9;
        fill_uniform(params[pi].value, bound(fan_in, true), rng);
        fill_const(params[pi + 1].value, 0.0);
        pi += 2;
        if (l.norm) {
          fill_const(params[pi].value, 1.0);
          fill_const(params[pi + 1].value, 0.0);
          pi += 2;
          // Branch ends in a normalization: its scale starts at zero.
          fill_uniform(params[pi].value, bound(fan_in, false), rng);
          fill_const(params[pi + 1].value, 0.0);
          fill_const(params[pi + 2].value, 0.0);
          fill_const(params[pi + 3].value, 0.0);
          pi += 4;
        } else {
          fill_const(params[pi].value, 0.0);
          fill_const(params[pi + 1].value, 0.0);
          pi += 2;
        }
        break;
      }
      default:
        break;
    }
    in = shapes[i];
  }
}

namespace {

void require_image_scale(Scale s) {
  if (s.num <= 0 || s.den <= 0) throw ShapeError("scale factor must be positive");
  (void)s.resolution();
}

Shape image_input(Scale s, int channels = 3) {
  const int r = s.resolution();
  return Shape{channels, r, r};
}

void push_conv_block(NetworkSpec& n, LayerSpec conv, bool norm, const std::string& tap = {}) {
  n.layers.push_back(conv);
  if (norm) n.layers.push_back(LayerSpec::instance_norm());
  auto a = LayerSpec::act(Activation::relu);
  if (!tap.empty()) a.tapped(tap);
  n.layers.push_back(a);
}

}  // namespace

NetworkSpec transform_net_spec(Scale scale, ArchOptions opts) {
  require_image_scale(scale);
  NetworkSpec n;
  n.name = "transform";
  n.input = image_input(scale);
  push_conv_block(n, LayerSpec::conv(scale.channels(32), 9, 4, 1), opts.norm);
  push_conv_block(n, LayerSpec::conv(scale.channels(64), 3, 1, 2), opts.norm);
  push_conv_block(n, LayerSpec::conv(scale.channels(128), 3, 1, 2), opts.norm);
  for (int i = 0; i < 5; ++i) n.layers.push_back(LayerSpec::residual(scale.channels(128), opts.norm));
  // out_pad 1 then 0 reproduces the printed 64 and 127 extents.
  push_conv_block(n, LayerSpec::deconv(scale.channels(64), 3, 1, 2, 1), opts.norm);
  push_conv_block(n, LayerSpec::deconv(scale.channels(32), 3, 1, 2, 0), opts.norm);
  n.layers.push_back(LayerSpec::deconv(3, 10, 4, 1, 0));
  n.layers.push_back(LayerSpec::act(Activation::sigmoid));
  n.infer_shapes();
  return n;
}

NetworkSpec discriminator_spec(Scale scale) {
  require_image_scale(scale);
  NetworkSpec n;
  n.name = "discriminator";
  n.input = image_input(scale);
  const struct {
    int c, k, p, s;
  } rows[] = {{32, 8, 3, 2}, {32, 3, 1, 1}, {64, 4, 1, 2}, {64, 3, 1, 1}, {128, 4, 1, 2}, {128, 4, 1, 2}};
  int idx = 1;
  for (const auto& r : rows) {
    n.layers.push_back(LayerSpec::conv(scale.channels(r.c), r.k, r.p, r.s));
    n.layers.push_back(LayerSpec::act(Activation::leaky_relu, 0.2).tapped("conv" + std::to_string(idx++)));
  }
  n.layers.push_back(LayerSpec::flatten());
  n.layers.push_back(LayerSpec::dense(scale.channels(1000)));
  n.layers.push_back(LayerSpec::act(Activation::leaky_relu, 0.2));
  n.layers.push_back(LayerSpec::dense(1));
  n.layers.push_back(LayerSpec::act(Activation::sigmoid));
  n.infer_shapes();
  return n;
}

NetworkSpec reconstruction_net_spec(Scale scale, ArchOptions opts) {
  auto n = transform_net_spec(scale, opts);
  n.name = "reconstruction";
  return n;
}

NetworkSpec global_enhancer_spec(Scale scale, ArchOptions opts) {
  auto n = transform_net_spec(scale, opts);
  n.name = "global_enhancer";
  return n;
}

NetworkSpec denoising_net_spec(Scale scale, int width) {
  require_image_scale(scale);
  if (width <= 0) throw ShapeError("denoiser width must be positive");
  NetworkSpec n;
  n.name = "denoiser";
  n.input = image_input(scale);
  push_conv_block(n, LayerSpec::conv(width, 3, 1, 1), false);
  n.layers.push_back(LayerSpec::conv(3, 3, 1, 1));
  n.infer_shapes();
  return n;
}

NetworkSpec local_enhancer_spec(Scale scale, int width) {
  require_image_scale(scale);
  if (width <= 0) throw ShapeError("enhancer width must be positive");
  NetworkSpec n;
  n.name = "local_enhancer";
  n.input = image_input(scale, 6);
  for (int i = 0; i < 3; ++i) push_conv_block(n, LayerSpec::conv(width, 3, 1, 1), false);
  n.layers.push_back(LayerSpec::conv(3, 3, 1, 1));
  n.infer_shapes();
  return n;
}

namespace {

void push_embedder_trunk(NetworkSpec& n, Scale scale) {
  const struct {
    int c, s;
  } rows[] = {{64, 1}, {64, 1}, {128, 2}, {128, 1}, {256, 2}};
  int idx = 1;
  for (const auto& r : rows)
    push_conv_block(n, LayerSpec::conv(scale.channels(r.c), 3, 1, r.s), false, "conv" + std::to_string(idx++));
}

}  // namespace

NetworkSpec identity_embedder_spec(Scale scale, int n_identities) {
  require_image_scale(scale);
  if (n_identities <= 0) throw ShapeError("identity count must be positive");
  NetworkSpec n;
  n.name = "identity_embedder";
  n.input = image_input(scale);
  push_embedder_trunk(n, scale);
  n.layers.push_back(LayerSpec::flatten());
  n.layers.push_back(LayerSpec::dense(n_identities));
  n.infer_shapes();
  return n;
}

NetworkSpec attribute_classifier_spec(Scale scale) {
  require_image_scale(scale);
  NetworkSpec n;
  n.name = "attribute_classifier";
  n.input = image_input(scale);
  push_embedder_trunk(n, scale);
  n.layers.push_back(LayerSpec::flatten());
  n.layers.push_back(LayerSpec::dense(1));
  n.layers.push_back(LayerSpec::act(Activation::sigmoid));
  n.infer_shapes();
  return n;
}

namespace {
Network built(NetworkSpec spec, std::uint64_t seed) {
  Network net(std::move(spec));
  init_params(net, seed);
  return net;
}
}  // namespace

Network build_transform_net(Scale scale, std::uint64_t seed, ArchOptions opts) {
  return built(transform_net_spec(scale, opts), seed);
}
Network build_discriminator(Scale scale, std::uint64_t seed) { return built(discriminator_spec(scale), seed); }
Network build_reconstruction_net(Scale scale, std::uint64_t seed, ArchOptions opts) {
  return built(reconstruction_net_spec(scale, opts), seed);
}
Network build_denoising_net(Scale scale, std::uint64_t seed, int width) {
  return built(denoising_net_spec(scale, width), seed);
}
Network build_local_enhancer(Scale scale, std::uint64_t seed, int width) {
  return built(local_enhancer_spec(scale, width), seed);
}
Network build_global_enhancer(Scale scale, std::uint64_t seed, ArchOptions opts) {
  return built(global_enhancer_spec(scale, opts), seed);
}
Network build_identity_embedder(Scale scale, int n_identities, std::uint64_t seed) {
  return built(identity_embedder_spec(scale, n_identities), seed);
}
Network build_attribute_classifier(Scale scale, std::uint64_t seed) {
  return built(attribute_classifier_spec(scale), seed);
}

}  // namespace diat::nn
