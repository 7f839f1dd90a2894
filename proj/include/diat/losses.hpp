#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "diat/nn.hpp"

namespace diat::loss {

enum class GeneratorLoss : std::uint8_t { saturating, non_saturating };

struct LossConfig {
  double lambda = 0.1;   // identity weight
  double gamma = 0.001;  // smooth-regularizer weight
  double w4 = 0.5;       // perceptual layer weights for taps conv4 / conv5
  double w5 = 0.5;
  std::array<double, 3> beta{0.1, 0.5, 1.0};  // local enhancement, taps conv1..conv3
  double sigma = 1.8;                          // global enhancement blur
  GeneratorLoss generator_loss = GeneratorLoss::non_saturating;
  double log_eps = 1e-7;
  /// Also minimize the adaptive identity term w.r.t. the discriminator.
  bool adaptive_in_d_update = false;

  /// Throws std::invalid_argument on negative weights or sigma <= 0.
  void validate() const;
};

using TapWeights = std::vector<std::pair<std::string, double>>;

TapWeights identity_taps(const LossConfig& cfg);  // {conv4: w4, conv5: w5}
TapWeights enhance_taps(const LossConfig& cfg);   // {conv1: b0, conv2: b1, conv3: b2}

// Image-level terms below accept [C,H,W] or [N,C,H,W]. Squared Frobenius
// norms are taken per image and averaged over the batch, except the two
// pretraining losses which sum over the batch as written.

/// ||a - b||_F^2 / (2 C H W), averaged over the batch for [N,C,H,W] maps.
Tensor perceptual_content_loss(const Tensor& feat_hat, const Tensor& feat);

/// Sum over `taps` of w * perceptual_content_loss on `net`'s feature maps.
Tensor tap_loss(const nn::Network& net, const Tensor& x_hat, const Tensor& x, const TapWeights& taps);

Tensor identity_loss(const nn::Network& phi, const Tensor& tx, const Tensor& x, const LossConfig& cfg);

/// -mean log D(a) - mean log(1 - D(fake)) on discriminator probabilities.
Tensor discriminator_loss(const Tensor& d_real, const Tensor& d_fake, double log_eps = 1e-7);
/// mean log(1 - D(fake)) (saturating) or -mean log D(fake).
Tensor generator_adversarial_loss(const Tensor& d_fake, GeneratorLoss form, double log_eps = 1e-7);

struct AdversarialLosses {
  Tensor loss_d;
  Tensor loss_t;
};
/// Both sides of the minimax game. The fake batch is detached for loss_d.
AdversarialLosses adversarial_losses(const nn::Network& d, const Tensor& real, const Tensor& fake,
                                     const LossConfig& cfg);

Tensor reconstruction_objective(const nn::Network& g, const nn::Network& phi, const Tensor& x,
                                const LossConfig& cfg);
/// ||f(g(x)) - x||^2 + ||f(x) - x||^2. `g` must be frozen.
Tensor denoiser_objective(const nn::Network& f, const nn::Network& g, const Tensor& x);
/// ||f(tx) - tx||^2 with `f` frozen; differentiable through both uses of tx.
Tensor smooth_regularizer(const nn::Network& f, const Tensor& tx);

Tensor adaptive_layer_loss(const Tensor& d_feat_hat, const Tensor& d_feat);
Tensor adaptive_identity_loss(const nn::Network& d, const Tensor& tx, const Tensor& x, const LossConfig& cfg);

struct ObjectiveTerms {
  Tensor loss_d;
  Tensor adversarial;
  Tensor identity;
  Tensor smooth;
  Tensor loss_t;  // adversarial + lambda * identity [+ gamma * smooth]
};

/// Transform-side terms for a fake batch tx = T(x). Terms with zero weight
/// are not evaluated and report 0. `f` may be null when gamma is 0.
ObjectiveTerms diat_generator_terms(const nn::Network& d, const nn::Network* f, const nn::Network& phi,
                                    const Tensor& tx, const Tensor& x, const LossConfig& cfg);
ObjectiveTerms diat_a_generator_terms(const nn::Network& d, const Tensor& tx, const Tensor& x,
                                      const LossConfig& cfg);
/// Discriminator-side loss on a detached fake batch. With `adaptive` and
/// cfg.adaptive_in_d_update, lambda * adaptive identity is added.
Tensor diat_discriminator_loss(const nn::Network& d, const Tensor& real, const Tensor& fake, const Tensor& x,
                               const LossConfig& cfg, bool adaptive);

/// Full objectives: runs T on x, then fills both loss_d and the T terms.
ObjectiveTerms diat_objective(const nn::Network& t, const nn::Network& d, const nn::Network* f,
                              const nn::Network& phi, const Tensor& x, const Tensor& a, const LossConfig& cfg);
ObjectiveTerms diat_a_objective(const nn::Network& t, const nn::Network& d, const Tensor& x, const Tensor& a,
                                const LossConfig& cfg);

/// sum over the batch of ||x - T(x)||^2.
Tensor pretrain_recon_loss(const nn::Network& t, const Tensor& x);
/// Same on a precomputed reconstruction.
Tensor pretrain_recon_loss(const Tensor& tx, const Tensor& x);
/// sum_i (y_i - D(x_i))^2 for labels y in {0,1}.
Tensor pretrain_disc_loss(const nn::Network& d, const Tensor& x, const std::vector<double>& labels);
Tensor pretrain_disc_loss_from_scores(const Tensor& scores, const std::vector<double>& labels);

/// Local enhancement on precomputed E output. Mask is [1,H,W] or [N,1,H,W].
Tensor local_enhance_loss(const Tensor& e_out, const Tensor& tx, const Tensor& x, const Tensor& mask,
                          const nn::Network& phi, const LossConfig& cfg);
/// Same, evaluating E on the channel concatenation [x, tx].
Tensor local_enhance_loss(const nn::Network& e, const Tensor& tx, const Tensor& x, const Tensor& mask,
                          const nn::Network& phi, const LossConfig& cfg);
/// ||E(B(x)) - x||^2 with B a Gaussian blur of width sigma.
Tensor global_enhance_loss(const nn::Network& e, const Tensor& x, double sigma);

/// Mask broadcast to `channels` channels (not differentiable).
Tensor expand_mask(const Tensor& mask, std::int64_t channels);
/// Per-image squared Frobenius norm averaged over the batch.
Tensor image_sq_norm(const Tensor& diff);

}  // namespace diat::loss
