#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diat/checkpoint.hpp"
#include "diat/nn.hpp"

namespace diat::optim {

enum class NonFinitePolicy : std::uint8_t { skip, abort };

/// Raised by Adam::step under NonFinitePolicy::abort.
class NonFiniteGradient : public NumericError {
 public:
  using NumericError::NumericError;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  NonFinitePolicy on_non_finite = NonFinitePolicy::skip;
  double clip_norm = 0.0;  // <= 0 disables clipping
};

class Adam {
 public:
  Adam() = default;
  /// Optimizes the tensors in place; names are used for checkpoint blobs.
  Adam(std::vector<Tensor> params, std::vector<std::string> names, AdamConfig cfg = {});
  Adam(const nn::Network& net, AdamConfig cfg = {});

  /// One update from the current .grad of every parameter (missing grads
  /// count as zero). Returns false when the step was skipped because a
  /// gradient was not finite; t does not advance in that case.
  bool step();

  std::int64_t t() const { return t_; }
  std::int64_t skipped() const { return skipped_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  const std::vector<Tensor>& first_moment() const { return m_; }
  const std::vector<Tensor>& second_moment() const { return v_; }

  /// Appends adam.m.<name> / adam.v.<name> blobs and adam.t / adam.skipped
  /// metadata.
  void export_state(Checkpoint& ckpt) const;
  void import_state(const Checkpoint& ckpt);

 private:
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::int64_t skipped_ = 0;
};

void zero_grads(const std::vector<Tensor>& params);
/// Global L2 norm over all gradients (missing grads count as zero).
double grad_norm(const std::vector<Tensor>& params);
/// Rescales gradients so their global norm is at most max_norm. Returns the
/// factor applied (1 when already within bounds).
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);
bool grads_finite(const std::vector<Tensor>& params);

}  // namespace diat::optim
