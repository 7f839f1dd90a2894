#include "diat/selfcheck.hpp"

#include <algorithm>
#include <random>

#include "diat/gradcheck.hpp"
#include "diat/losses.hpp"
#include "diat/ops.hpp"

namespace diat::selfcheck {

namespace {

using nn::Activation;
using nn::LayerSpec;
using nn::Network;
using nn::NetworkSpec;

Tensor rand_t(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = u(rng);
  return Tensor::from(s, v, DType::f64);
}

Tensor off_zero(const Shape& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor::from(s, v, DType::f64);
}

Tensor weighted_sum(const Tensor& y, const Tensor& r) { return sum(mul(y, r)); }

Network make(NetworkSpec spec, std::uint64_t seed) {
  Network n(std::move(spec), DType::f64);
  nn::init_params(n, seed);
  // Nonzero biases and norm offsets so every parameter has a generic gradient.
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (auto& p : n.params())
    if (p.name.ends_with("bias") || p.name.ends_with("beta"))
      for (auto& v : p.value.mutable_data<double>()) v = u(rng);
  n.set_trainable(false);
  return n;
}

NetworkSpec tiny(const std::string& name, std::int64_t in_channels) {
  NetworkSpec s;
  s.name = name;
  s.input = Shape{in_channels, 4, 4};
  return s;
}

void push_tapped(NetworkSpec& s, LayerSpec conv, const std::string& tap) {
  s.layers.push_back(conv);
  s.layers.push_back(LayerSpec::act(Activation::tanh).tapped(tap));
}

NetworkSpec encoder_decoder(const std::string& name) {
  auto s = tiny(name, 3);
  s.layers = {LayerSpec::conv(2, 3, 1, 1), LayerSpec::act(Activation::tanh), LayerSpec::instance_norm(),
              LayerSpec::conv(2, 3, 1, 2), LayerSpec::act(Activation::tanh),
              LayerSpec::deconv(3, 3, 1, 2, 1), LayerSpec::act(Activation::sigmoid)};
  return s;
}

struct Tracker {
  std::vector<CaseResult> results;
  void add(const std::string& name, double err, double tol = 1e-4) {
    auto it = std::find_if(results.begin(), results.end(), [&](const CaseResult& r) { return r.name == name; });
    if (it == results.end()) {
      results.push_back(CaseResult{name, 0, 0.0, tol});
      it = results.end() - 1;
    }
    it->instances += 1;
    it->max_rel_error = std::max(it->max_rel_error, err);
  }
};

double check(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves) {
  return grad_check(f, leaves).max_rel_error;
}

}  // namespace

TinyNets TinyNets::make(std::uint64_t seed) {
  TinyNets n;
  n.t = selfcheck::make(encoder_decoder("tiny_transform"), seed + 1);
  n.e_global = selfcheck::make(encoder_decoder("tiny_global_enhancer"), seed + 2);

  auto d = tiny("tiny_discriminator", 3);
  push_tapped(d, LayerSpec::conv(2, 3, 1, 1), "conv1");
  push_tapped(d, LayerSpec::conv(2, 3, 1, 1), "conv2");
  push_tapped(d, LayerSpec::conv(2, 3, 1, 2), "conv3");
  push_tapped(d, LayerSpec::conv(2, 3, 1, 1), "conv4");
  push_tapped(d, LayerSpec::conv(2, 3, 1, 1), "conv5");
  d.layers.push_back(LayerSpec::flatten());
  d.layers.push_back(LayerSpec::dense(2));
  d.layers.push_back(LayerSpec::act(Activation::tanh));
  d.layers.push_back(LayerSpec::dense(1));
  d.layers.push_back(LayerSpec::act(Activation::sigmoid));
  n.d = selfcheck::make(d, seed + 3);

  auto phi = tiny("tiny_embedder", 3);
  push_tapped(phi, LayerSpec::conv(2, 3, 1, 1), "conv1");
  push_tapped(phi, LayerSpec::conv(2, 3, 1, 1), "conv2");
  push_tapped(phi, LayerSpec::conv(2, 3, 1, 2), "conv3");
  push_tapped(phi, LayerSpec::conv(2, 3, 1, 1), "conv4");
  push_tapped(phi, LayerSpec::conv(3, 3, 1, 1), "conv5");
  phi.layers.push_back(LayerSpec::flatten());
  phi.layers.push_back(LayerSpec::dense(5));
  n.phi = selfcheck::make(phi, seed + 4);

  auto f = tiny("tiny_denoiser", 3);
  f.layers = {LayerSpec::conv(2, 3, 1, 1), LayerSpec::act(Activation::tanh), LayerSpec::conv(3, 3, 1, 1)};
  n.f = selfcheck::make(f, seed + 5);

  auto e = tiny("tiny_local_enhancer", 6);
  e.layers = {LayerSpec::conv(2, 3, 1, 1), LayerSpec::act(Activation::tanh), LayerSpec::conv(2, 3, 1, 1),
              LayerSpec::act(Activation::tanh), LayerSpec::conv(2, 3, 1, 1), LayerSpec::act(Activation::tanh),
              LayerSpec::conv(3, 3, 1, 1)};
  n.e_local = selfcheck::make(e, seed + 6);
  return n;
}

std::vector<CaseResult> check_ops(int instances, std::uint64_t seed) {
  Tracker tr;
  for (int k = 0; k < instances; ++k) {
    std::mt19937_64 rng(seed + 7919ULL * static_cast<std::uint64_t>(k));
    {
      auto x = rand_t({2, 2, 5, 6}, rng), w = rand_t({3, 2, 3, 3}, rng), b = rand_t({3}, rng);
      auto r = rand_t(conv2d(x, w, b, 1, 2).shape(), rng);
      tr.add("conv2d", check([&] { return weighted_sum(conv2d(x, w, b, 1, 2), r); }, {x, w, b}));
    }
    {
      auto x = rand_t({2, 3, 4, 3}, rng), w = rand_t({3, 2, 3, 3}, rng), b = rand_t({2}, rng);
      auto r = rand_t(conv_transpose2d(x, w, b, 1, 2, 1).shape(), rng);
      tr.add("conv_transpose2d",
             check([&] { return weighted_sum(conv_transpose2d(x, w, b, 1, 2, 1), r); }, {x, w, b}));
    }
    {
      auto x = rand_t({3, 5}, rng), w = rand_t({4, 5}, rng), b = rand_t({4}, rng), r = rand_t({3, 4}, rng);
      tr.add("dense", check([&] { return weighted_sum(dense(x, w, b), r); }, {x, w, b}));
    }
    {
      auto x = rand_t({2, 3, 4, 4}, rng), g = rand_t({3}, rng, 0.5, 1.5), b = rand_t({3}, rng);
      auto r = rand_t(x.shape(), rng);
      tr.add("instance_norm", check([&] { return weighted_sum(instance_norm(x, g, b), r); }, {x, g, b}));
    }
    {
      auto x = off_zero({2, 3, 4}, rng);
      auto r = rand_t(x.shape(), rng);
      auto unary = [&](const char* name, const std::function<Tensor(const Tensor&)>& op) {
        tr.add(name, check([&] { return weighted_sum(op(x), r); }, {x}));
      };
      unary("relu", [](const Tensor& t) { return relu(t); });
      unary("leaky_relu", [](const Tensor& t) { return leaky_relu(t, 0.2); });
      unary("sigmoid", [](const Tensor& t) { return sigmoid(t); });
      unary("tanh", [](const Tensor& t) { return diat::tanh(t); });
      unary("square", [](const Tensor& t) { return square(t); });
      unary("mul_scalar", [](const Tensor& t) { return mul_scalar(t, -2.5); });
      unary("add_scalar", [](const Tensor& t) { return add_scalar(t, 0.3); });
      unary("gaussian_blur", [](const Tensor& t) { return gaussian_blur(t, 0.8); });
      tr.add("reshape", check([&] { return weighted_sum(reshape(x, Shape{4, 6}), reshape(r, Shape{4, 6})); }, {x}));
      tr.add("sum", check([&] { return sum(x); }, {x}));
      tr.add("mean", check([&] { return mean(x); }, {x}));
      tr.add("frobenius_sq", check([&] { return frobenius_sq(x); }, {x}), 1e-6);
    }
    {
      auto p = rand_t({6}, rng, 0.05, 0.95), r = rand_t({6}, rng);
      tr.add("log_clamped", check([&] { return weighted_sum(log_clamped(p, 1e-7), r); }, {p}));
    }
    {
      auto a = rand_t({2, 3}, rng), b = rand_t({2, 3}, rng), r = rand_t({2, 3}, rng);
      tr.add("add", check([&] { return weighted_sum(add(a, b), r); }, {a, b}));
      tr.add("sub", check([&] { return weighted_sum(sub(a, b), r); }, {a, b}));
      tr.add("mul", check([&] { return weighted_sum(mul(a, b), r); }, {a, b}));
    }
    {
      auto a = rand_t({2, 2, 3, 3}, rng), b = rand_t({2, 1, 3, 3}, rng), r = rand_t({2, 3, 3, 3}, rng);
      tr.add("concat_channels", check([&] { return weighted_sum(concat_channels({a, b}), r); }, {a, b}));
    }
    {
      auto logits = rand_t({4, 5}, rng, -2, 2);
      std::vector<int> labels(4);
      for (auto& l : labels) l = std::uniform_int_distribution<int>(0, 4)(rng);
      tr.add("softmax_cross_entropy", check([&] { return softmax_cross_entropy(logits, labels); }, {logits}));
    }
    {
      auto x = off_zero({1, 2, 5, 5}, rng), w = rand_t({3, 2, 3, 3}, rng), b = rand_t({3}, rng);
      tr.add("conv2d>relu>mean", check([&] { return mean(relu(conv2d(x, w, b, 1, 1))); }, {x, w, b}));
    }
  }
  return tr.results;
}

std::vector<CaseResult> check_losses(int instances, std::uint64_t seed) {
  Tracker tr;
  loss::LossConfig cfg;
  for (int k = 0; k < instances; ++k) {
    const auto s = seed + 104729ULL * static_cast<std::uint64_t>(k);
    std::mt19937_64 rng(s);
    auto n = TinyNets::make(s);
    const auto x = rand_t({2, 3, 4, 4}, rng, 0, 1);
    const auto a = rand_t({2, 3, 4, 4}, rng, 0, 1);
    std::vector<double> mask_v(32);
    for (auto& m : mask_v) m = std::bernoulli_distribution(0.4)(rng) ? 1.0 : 0.0;
    const auto mask = Tensor::from(Shape{2, 1, 4, 4}, mask_v, DType::f64);
    const auto T = n.t.parameters(), D = n.d.parameters();

    {
      auto fa = rand_t({2, 3, 2, 2}, rng), fb = rand_t({2, 3, 2, 2}, rng);
      tr.add("perceptual_content_loss", check([&] { return loss::perceptual_content_loss(fa, fb); }, {fa, fb}));
      tr.add("adaptive_layer_loss", check([&] { return loss::adaptive_layer_loss(fa, fb); }, {fa, fb}));
    }
    tr.add("identity_loss/T", check([&] { return loss::identity_loss(n.phi, n.t(x), x, cfg); }, T));
    tr.add("discriminator_loss/D",
           check([&] { return loss::diat_discriminator_loss(n.d, a, n.t(x), x, cfg, false); }, D));
    for (auto form : {loss::GeneratorLoss::non_saturating, loss::GeneratorLoss::saturating}) {
      const char* name = form == loss::GeneratorLoss::saturating ? "generator_loss_saturating/T"
                                                                 : "generator_loss_non_saturating/T";
      tr.add(name, check([&] { return loss::generator_adversarial_loss(n.d(n.t(x)), form); }, T));
    }
    tr.add("reconstruction_objective/g",
           check([&] { return loss::reconstruction_objective(n.e_global, n.phi, x, cfg); }, n.e_global.parameters()));
    tr.add("denoiser_objective/f",
           check([&] { return loss::denoiser_objective(n.f, n.e_global, x); }, n.f.parameters()));
    tr.add("smooth_regularizer/T", check([&] { return loss::smooth_regularizer(n.f, n.t(x)); }, T));
    tr.add("diat_objective/T",
           check([&] { return loss::diat_generator_terms(n.d, &n.f, n.phi, n.t(x), x, cfg).loss_t; }, T));
    tr.add("adaptive_identity_loss/T", check([&] { return loss::adaptive_identity_loss(n.d, n.t(x), x, cfg); }, T));
    tr.add("adaptive_identity_loss/D", check([&] { return loss::adaptive_identity_loss(n.d, n.t(x), x, cfg); }, D));
    tr.add("diat_a_objective/T",
           check([&] { return loss::diat_a_generator_terms(n.d, n.t(x), x, cfg).loss_t; }, T));
    {
      auto with_d = cfg;
      with_d.adaptive_in_d_update = true;
      tr.add("diat_a_discriminator_loss/D",
             check([&] { return loss::diat_discriminator_loss(n.d, a, n.t(x), x, with_d, true); }, D));
    }
    tr.add("pretrain_recon_loss/T", check([&] { return loss::pretrain_recon_loss(n.t, x); }, T));
    tr.add("pretrain_disc_loss/D", check([&] { return loss::pretrain_disc_loss(n.d, x, {1.0, 0.0}); }, D));
    const auto tx = [&] {
      NoGradGuard g;
      return n.t(x);
    }();
    tr.add("local_enhance_loss/E",
           check([&] { return loss::local_enhance_loss(n.e_local, tx, x, mask, n.phi, cfg); }, n.e_local.parameters()));
    tr.add("global_enhance_loss/E",
           check([&] { return loss::global_enhance_loss(n.e_global, x, cfg.sigma); }, n.e_global.parameters()));
  }
  return tr.results;
}

}  // namespace diat::selfcheck
