#include "diat/losses.hpp"

#include <stdexcept>

#include "diat/ops.hpp"

namespace diat::loss {

void LossConfig::validate() const {
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0.0)) throw std::invalid_argument(std::string("loss weight ") + name + " must be >= 0");
  };
  nonneg(lambda, "lambda");
  nonneg(gamma, "gamma");
  nonneg(w4, "w4");
  nonneg(w5, "w5");
  for (double b : beta) nonneg(b, "beta");
  if (!(sigma > 0.0)) throw std::invalid_argument("blur sigma must be > 0");
  if (!(log_eps > 0.0 && log_eps < 0.5)) throw std::invalid_argument("log_eps must lie in (0, 0.5)");
}

TapWeights identity_taps(const LossConfig& cfg) { return {{"conv4", cfg.w4}, {"conv5", cfg.w5}}; }

TapWeights enhance_taps(const LossConfig& cfg) {
  return {{"conv1", cfg.beta[0]}, {"conv2", cfg.beta[1]}, {"conv3", cfg.beta[2]}};
}

namespace {

std::int64_t batch_of(const Tensor& t) { return t.rank() == 4 ? t.shape()[0] : 1; }

Tensor one_minus(const Tensor& p) { return add_scalar(mul_scalar(p, -1.0), 1.0); }

Tensor zero_scalar(DType dt) { return Tensor::scalar(0.0, dt); }

Tensor scaled_add(const Tensor& acc, const Tensor& term, double w) {
  return acc.defined() ? add(acc, mul_scalar(term, w)) : mul_scalar(term, w);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

void require_frozen(const nn::Network& n, const char* role) {
  if (n.trainable())
    throw std::logic_error(std::string(role) + " network '" + n.name() + "' must be frozen for this loss");
}

// Name of the tap evaluated last among those with nonzero weight.
std::string last_tap(const nn::Network& net, const TapWeights& taps) {
  std::string last;
  for (const auto& l : net.spec().layers)
    for (const auto& [name, w] : taps)
      if (w != 0.0 && l.tap == name) last = name;
  return last;
}

}  // namespace

Tensor image_sq_norm(const Tensor& diff) {
  return mul_scalar(frobenius_sq(diff), 1.0 / static_cast<double>(batch_of(diff)));
}

Tensor perceptual_content_loss(const Tensor& feat_hat, const Tensor& feat) {
  require_same_shape(feat_hat, feat, "perceptual_content_loss");
  if (feat.rank() != 3 && feat.rank() != 4)
    throw ShapeError("perceptual_content_loss: expected [C,H,W] feature maps, got " + feat.shape().str());
  const auto per_image = feat.numel() / batch_of(feat);
  return mul_scalar(frobenius_sq(sub(feat_hat, feat)), 1.0 / (2.0 * per_image * batch_of(feat)));
}

Tensor tap_loss(const nn::Network& net, const Tensor& x_hat, const Tensor& x, const TapWeights& taps) {
  require_same_shape(x_hat, x, "tap_loss");
  const auto stop = last_tap(net, taps);
  if (stop.empty()) return zero_scalar(x.dtype());
  const auto fh = net.forward(x_hat, stop);
  const auto fx = net.forward(x, stop);
  Tensor total;
  for (const auto& [name, w] : taps) {
    if (w == 0.0) continue;
    auto it = fh.taps.find(name);
    if (it == fh.taps.end()) throw std::invalid_argument("network " + net.name() + " has no tap " + name);
    total = scaled_add(total, perceptual_content_loss(it->second, fx.taps.at(name)), w);
  }
  return total;
}

Tensor identity_loss(const nn::Network& phi, const Tensor& tx, const Tensor& x, const LossConfig& cfg) {
  return tap_loss(phi, tx, x, identity_taps(cfg));
}

Tensor discriminator_loss(const Tensor& d_real, const Tensor& d_fake, double log_eps) {
  if (d_real.numel() == 0 || d_fake.numel() == 0) throw std::invalid_argument("discriminator_loss: empty batch");
  return mul_scalar(add(mean(log_clamped(d_real, log_eps)), mean(log_clamped(one_minus(d_fake), log_eps))), -1.0);
}

Tensor generator_adversarial_loss(const Tensor& d_fake, GeneratorLoss form, double log_eps) {
  if (form == GeneratorLoss::saturating) return mean(log_clamped(one_minus(d_fake), log_eps));
  return mul_scalar(mean(log_clamped(d_fake, log_eps)), -1.0);
}

AdversarialLosses adversarial_losses(const nn::Network& d, const Tensor& real, const Tensor& fake,
                                     const LossConfig& cfg) {
  if (batch_of(real) == 0 || batch_of(fake) == 0) throw std::invalid_argument("adversarial_losses: empty batch");
  AdversarialLosses out;
  out.loss_d = discriminator_loss(d(real), d(fake.detach()), cfg.log_eps);
  out.loss_t = generator_adversarial_loss(d(fake), cfg.generator_loss, cfg.log_eps);
  return out;
}

Tensor reconstruction_objective(const nn::Network& g, const nn::Network& phi, const Tensor& x,
                                const LossConfig& cfg) {
  return identity_loss(phi, g(x), x, cfg);
}

Tensor denoiser_objective(const nn::Network& f, const nn::Network& g, const Tensor& x) {
  require_frozen(g, "reconstruction");
  Tensor gx;
  {
    NoGradGuard guard;
    gx = g(x);
  }
  return add(image_sq_norm(sub(f(gx), x)), image_sq_norm(sub(f(x), x)));
}

Tensor smooth_regularizer(const nn::Network& f, const Tensor& tx) {
  require_frozen(f, "denoising");
  return image_sq_norm(sub(f(tx), tx));
}

Tensor adaptive_layer_loss(const Tensor& d_feat_hat, const Tensor& d_feat) {
  return perceptual_content_loss(d_feat_hat, d_feat);
}

Tensor adaptive_identity_loss(const nn::Network& d, const Tensor& tx, const Tensor& x, const LossConfig& cfg) {
  return tap_loss(d, tx, x, identity_taps(cfg));
}

namespace {

ObjectiveTerms generator_terms(const nn::Network& d, const Tensor& tx, const LossConfig& cfg) {
  ObjectiveTerms t;
  const auto dt = tx.dtype();
  t.adversarial = generator_adversarial_loss(d(tx), cfg.generator_loss, cfg.log_eps);
  t.identity = zero_scalar(dt);
  t.smooth = zero_scalar(dt);
  t.loss_t = t.adversarial;
  return t;
}

}  // namespace

ObjectiveTerms diat_generator_terms(const nn::Network& d, const nn::Network* f, const nn::Network& phi,
                                    const Tensor& tx, const Tensor& x, const LossConfig& cfg) {
  auto t = generator_terms(d, tx, cfg);
  if (cfg.lambda > 0.0) {
    t.identity = identity_loss(phi, tx, x, cfg);
    t.loss_t = add(t.loss_t, mul_scalar(t.identity, cfg.lambda));
  }
  if (cfg.gamma > 0.0) {
    if (f == nullptr) throw std::invalid_argument("smooth term requested without a denoising network");
    t.smooth = smooth_regularizer(*f, tx);
    t.loss_t = add(t.loss_t, mul_scalar(t.smooth, cfg.gamma));
  }
  return t;
}

ObjectiveTerms diat_a_generator_terms(const nn::Network& d, const Tensor& tx, const Tensor& x,
                                      const LossConfig& cfg) {
  auto t = generator_terms(d, tx, cfg);
  if (cfg.lambda > 0.0) {
    t.identity = adaptive_identity_loss(d, tx, x, cfg);
    t.loss_t = add(t.loss_t, mul_scalar(t.identity, cfg.lambda));
  }
  return t;
}

Tensor diat_discriminator_loss(const nn::Network& d, const Tensor& real, const Tensor& fake, const Tensor& x,
                               const LossConfig& cfg, bool adaptive) {
  const auto fake_c = fake.detach();
  auto loss = discriminator_loss(d(real), d(fake_c), cfg.log_eps);
  if (adaptive && cfg.adaptive_in_d_update && cfg.lambda > 0.0)
    loss = add(loss, mul_scalar(adaptive_identity_loss(d, fake_c, x, cfg), cfg.lambda));
  return loss;
}

ObjectiveTerms diat_objective(const nn::Network& t, const nn::Network& d, const nn::Network* f,
                              const nn::Network& phi, const Tensor& x, const Tensor& a, const LossConfig& cfg) {
  const auto tx = t(x);
  auto terms = diat_generator_terms(d, f, phi, tx, x, cfg);
  terms.loss_d = diat_discriminator_loss(d, a, tx, x, cfg, false);
  return terms;
}

ObjectiveTerms diat_a_objective(const nn::Network& t, const nn::Network& d, const Tensor& x, const Tensor& a,
                                const LossConfig& cfg) {
  const auto tx = t(x);
  auto terms = diat_a_generator_terms(d, tx, x, cfg);
  terms.loss_d = diat_discriminator_loss(d, a, tx, x, cfg, true);
  return terms;
}

Tensor pretrain_recon_loss(const Tensor& tx, const Tensor& x) {
  require_same_shape(tx, x, "pretrain_recon_loss");
  return frobenius_sq(sub(x, tx));
}

Tensor pretrain_recon_loss(const nn::Network& t, const Tensor& x) { return pretrain_recon_loss(t(x), x); }

Tensor pretrain_disc_loss_from_scores(const Tensor& scores, const std::vector<double>& labels) {
  if (static_cast<std::size_t>(scores.numel()) != labels.size())
    throw ShapeError("pretrain_disc_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(scores.numel()) + " scores");
  for (double y : labels)
    if (y != 0.0 && y != 1.0) throw std::invalid_argument("pretrain_disc_loss: labels must be 0 or 1");
  const auto y = Tensor::from(scores.shape(), labels, scores.dtype());
  return frobenius_sq(sub(y, scores));
}

Tensor pretrain_disc_loss(const nn::Network& d, const Tensor& x, const std::vector<double>& labels) {
  return pretrain_disc_loss_from_scores(d(x), labels);
}

Tensor expand_mask(const Tensor& mask, std::int64_t channels) {
  const auto& s = mask.shape();
  const bool batched = s.rank() == 4;
  if (!((s.rank() == 3 || batched) && s[s.rank() - 3] == 1))
    throw ShapeError("mask must be [1,H,W] or [N,1,H,W], got " + s.str());
  std::vector<Tensor> parts(static_cast<std::size_t>(channels), mask.detach());
  return concat_channels(parts);
}

Tensor local_enhance_loss(const Tensor& e_out, const Tensor& tx, const Tensor& x, const Tensor& mask,
                          const nn::Network& phi, const LossConfig& cfg) {
  require_same_shape(e_out, x, "local_enhance_loss");
  require_same_shape(tx, x, "local_enhance_loss");
  const auto& ms = mask.shape();
  const auto& xs = x.shape();
  if (ms.rank() != xs.rank() || ms[ms.rank() - 1] != xs[xs.rank() - 1] || ms[ms.rank() - 2] != xs[xs.rank() - 2] ||
      (xs.rank() == 4 && ms[0] != xs[0]))
    throw ShapeError("local_enhance_loss: mask " + ms.str() + " does not match image " + xs.str());
  const auto m = expand_mask(mask, xs[xs.rank() - 3]);
  const auto inv = one_minus(m);
  auto total = image_sq_norm(mul(inv, sub(e_out, x)));
  const auto taps = enhance_taps(cfg);
  if (!last_tap(phi, taps).empty()) total = add(total, tap_loss(phi, mul(m, e_out), mul(m, tx), taps));
  return total;
}

Tensor local_enhance_loss(const nn::Network& e, const Tensor& tx, const Tensor& x, const Tensor& mask,
                          const nn::Network& phi, const LossConfig& cfg) {
  return local_enhance_loss(e(concat_channels({x, tx})), tx, x, mask, phi, cfg);
}

Tensor global_enhance_loss(const nn::Network& e, const Tensor& x, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("global_enhance_loss: sigma must be > 0");
  return image_sq_norm(sub(e(gaussian_blur(x, sigma)), x));
}

}  // namespace diat::loss
