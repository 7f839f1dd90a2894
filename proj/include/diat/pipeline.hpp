#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "diat/data.hpp"
#include "diat/losses.hpp"
#include "diat/nn.hpp"
#include "diat/optim.hpp"

namespace diat::pipeline {

enum class Variant : std::uint8_t { diat, diat_a, diat_a0, diat1, diat2, diat3 };

std::string_view variant_name(Variant v);  // "DIAT", "DIAT-A", ...
Variant parse_variant(std::string_view text);

enum class EnhanceMode : std::uint8_t { none, local, global, automatic };

std::string_view enhance_name(EnhanceMode m);
EnhanceMode parse_enhance(std::string_view text);

/// Thrown when training produces a non-finite loss or gradient.
class Diverged : public NumericError {
 public:
  Diverged(const std::string& what, std::int64_t iteration) : NumericError(what), iteration(iteration) {}
  std::int64_t iteration;
};

/// Thrown when a phase is started without the networks it depends on.
class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Variant variant = Variant::diat_a;
  loss::LossConfig loss;
  double lr_t = 1e-5;
  double lr_d = 1e-5;
  int dstep = 1;
  int tstep = 2;
  int batch = 16;
  std::int64_t max_iters = 3000;
  std::int64_t plateau_window = 200;
  double plateau_min_delta = 0.005;
  double success_threshold = 0.85;
  std::int64_t eval_every = 10;
  std::int64_t eval_size = 64;
  std::int64_t checkpoint_every = 100;
  // Smooth-term weight is multiplied by (128/S)^2 so the per-pixel balance
  // against the normalized terms matches the 128x128 setting.
  bool scale_gamma_with_resolution = true;

  std::int64_t input_limit = 2000;
  data::AttributeTarget attribute = data::AttributeTarget::parse("-glasses");
  EnhanceMode enhance = EnhanceMode::automatic;

  // Pretraining and auxiliary phases.
  double lr_pretrain = 1e-3;
  double lr_enhance = 1e-3;
  std::int64_t pretrain_t_steps = 2500;
  std::int64_t pretrain_d_steps = 400;
  std::int64_t embedder_steps = 600;
  std::int64_t classifier_steps = 400;
  std::int64_t regularizer_g_steps = 300;
  std::int64_t regularizer_f_steps = 300;
  std::int64_t enhancer_steps = 2000;

  std::uint64_t seed = 0;
  nn::Scale scale{1, 4};

  /// Defaults for a variant: loss weights, learning rates and enhancement.
  static TrainConfig for_variant(Variant v);

  bool adaptive() const { return variant == Variant::diat_a || variant == Variant::diat_a0; }
  /// Enhancement mode after resolving `automatic` against the attribute.
  EnhanceMode effective_enhance() const;
  /// Loss weights as used by the trainer (gamma possibly rescaled).
  loss::LossConfig effective_loss() const;
  int image_size() const { return scale.resolution(); }

  /// Throws std::invalid_argument on out-of-range values or a loss setup that
  /// contradicts the variant.
  void validate() const;
};

/// Active loss terms, derived from the config.
struct TermSet {
  bool adversarial = true;
  bool identity = false;           // fixed embedder
  bool adaptive_identity = false;  // discriminator features
  bool smooth = false;
  bool operator==(const TermSet&) const = default;
};
TermSet active_terms(const TrainConfig& cfg);

// --- auxiliary training phases ---

struct PhaseOptions {
  std::int64_t steps = 100;
  int batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct PhaseReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double held_out_metric = 0.0;  // phase-specific, see each function
  std::vector<double> losses;    // per step
};

/// Eq. (8) on batches from `train`; metric: mean per-pixel MSE on held_out.
PhaseReport pretrain_transform(nn::Network& t, const Tensor& train, const Tensor& held_out, const PhaseOptions& opt);

/// Eq. (9) with balanced batches (half positive). Labels: 1 = attribute
/// matches `target`. Metric: held-out accuracy at threshold 0.5. Throws
/// std::invalid_argument if either class is empty.
PhaseReport pretrain_discriminator(nn::Network& d, const data::Dataset& ds, const std::vector<std::int64_t>& train,
                                   const std::vector<std::int64_t>& held_out, const data::AttributeTarget& target,
                                   const PhaseOptions& opt);

/// Softmax identity classifier; metric: held-out identity accuracy.
PhaseReport train_embedder(nn::Network& phi, const data::Dataset& ds, const std::vector<std::int64_t>& train,
                           const std::vector<std::int64_t>& held_out, const PhaseOptions& opt);

/// Binary cross-entropy on the raw attribute label; metric: held-out accuracy.
PhaseReport train_attribute_classifier(nn::Network& c, const data::Dataset& ds, int attribute,
                                       const std::vector<std::int64_t>& train,
                                       const std::vector<std::int64_t>& held_out, const PhaseOptions& opt);

struct RegularizerReport {
  PhaseReport g, f;
  double clean_residual_per_pixel = 0.0;  // ||f(x) - x||^2 / pixel on held-out
};
/// Trains g on the reconstruction objective, freezes it, then trains f on the
/// denoiser objective. phi must be frozen.
RegularizerReport train_regularizer(nn::Network& g, nn::Network& f, const nn::Network& phi, const Tensor& train,
                                    const Tensor& held_out, const loss::LossConfig& cfg, const PhaseOptions& g_opt,
                                    const PhaseOptions& f_opt);

/// Eq. (10) on pairs (x, T(x)) with T frozen; metric: mean |E - x| outside
/// the mask on held_out.
PhaseReport train_local_enhancer(nn::Network& e, const nn::Network& t, const nn::Network& phi, const Tensor& train_x,
                                 const Tensor& train_masks, const Tensor& held_x, const Tensor& held_masks,
                                 const loss::LossConfig& cfg, const PhaseOptions& opt);

/// Eq. (11); metric: held-out PSNR gain in dB of E(B(x)) over B(x).
PhaseReport train_global_enhancer(nn::Network& e, const Tensor& train, const Tensor& held_out, double sigma,
                                  const PhaseOptions& opt);

// --- Algorithm 1 ---

struct ReportRow {
  std::int64_t iteration = 0;
  double loss_d = 0, adversarial = 0, identity = 0, smooth = 0, loss_t = 0;
  double attribute_score = 0;  // C_attr success on the eval subset (latest evaluation)
  double identity_distance = 0;
};

struct TrainReport {
  std::vector<ReportRow> rows;
  std::int64_t iterations_to_threshold = -1;  // first evaluated iteration reaching the threshold
  std::string stop_reason;

  std::string to_tsv() const;
  static TrainReport from_tsv(std::string_view text);
};

/// Networks and optimizer state owned by the transform trainer.
struct TrainState {
  nn::Network t, d;
  optim::Adam opt_t, opt_d;
  std::mt19937_64 rng;
  std::int64_t iteration = 0;
  TrainReport report;
  bool finished = false;

  /// Writes t.ckpt and d.ckpt under dir (atomic per file).
  void save(const std::filesystem::path& dir) const;
  /// Restores into networks with matching specs.
  void load(const std::filesystem::path& dir);
};

/// Frozen networks the trainer reads.
struct Auxiliary {
  const nn::Network* phi = nullptr;       // identity loss (DIAT variants with lambda > 0)
  const nn::Network* f = nullptr;         // smooth term (gamma > 0)
  const nn::Network* c_attr = nullptr;    // attribute score for plateau / threshold
  const nn::Network* phi_eval = nullptr;  // identity distance column (optional)
};

struct TrainData {
  Tensor inputs;  // input set X
  Tensor guided;  // guided set A
  Tensor eval;    // inputs scored every eval_every iterations
};

/// Deep-copies pretrained t and d, creates their optimizers and seeds the RNG.
TrainState start_training(const TrainConfig& cfg, const nn::Network& t, const nn::Network& d);

/// Runs outer iterations until max_iters, plateau, or `stop_after` total
/// iterations (for interrupted runs). `on_checkpoint` is called every
/// checkpoint_every iterations and at the end. Throws Diverged; the state is
/// then left at the last completed iteration.
void train_transform(const TrainConfig& cfg, TrainState& state, const TrainData& data, const Auxiliary& aux,
                     std::int64_t stop_after = -1,
                     const std::function<void(const TrainState&)>& on_checkpoint = {});

/// Score used for plateau detection: fraction of T(eval) that c_attr
/// classifies as the target value.
double attribute_success(const nn::Network& c_attr, const data::AttributeTarget& target, const Tensor& images);

// --- inference and evaluation ---

/// none: T(x); local: E([x, T(x)]); global: E(B(T(x))). Clamped to [0,1].
Tensor run_transfer(const nn::Network& t, const nn::Network* e, EnhanceMode mode, const Tensor& x,
                    double sigma = 1.8);

/// Row-wise embeddings (network output flattened per image).
Tensor embed(const nn::Network& phi, const Tensor& x);
/// Mean L2 distance between matched rows of two embedding batches.
double mean_pair_distance(const Tensor& a, const Tensor& b);

struct Metrics {
  double attribute_success = 0.0;
  double identity_distance = 0.0;  // matched pairs (x, transfer(x))
  double baseline_distance = 0.0;  // non-matching identities
  double outside_mask_change = -1.0;  // mean |delta| per pixel outside the mask; -1 if no mask
  double classifier_accuracy_raw = -1.0;  // C_attr accuracy on raw inputs, if labels given
  std::int64_t count = 0;
};

Metrics evaluate(const nn::Network& t, const nn::Network* e, EnhanceMode mode, const nn::Network& phi_eval,
                 const nn::Network& c_attr, const data::AttributeTarget& target, const Tensor& inputs,
                 const std::vector<int>& identities, const Tensor* masks = nullptr, double sigma = 1.8);

/// Input | transformed | enhanced columns, one row per image, as PPM.
void write_mosaic(const std::filesystem::path& path, const std::vector<Tensor>& columns);

/// PSNR in dB of a against reference b (both in [0,1]).
double psnr(const Tensor& a, const Tensor& b);

/// Rows of `batch` drawn with replacement.
Tensor sample_rows(const Tensor& batch, int n, std::mt19937_64& rng);

}  // namespace diat::pipeline
