#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "diat/nn.hpp"

namespace diat::selfcheck {

struct CaseResult {
  std::string name;
  int instances = 0;
  double max_rel_error = 0.0;
  double tolerance = 1e-4;
  bool pass() const { return max_rel_error <= tolerance; }
};

/// Miniature 64-bit stand-ins for every network role, small enough for
/// coordinate-wise finite differences. Images are 3x4x4.
struct TinyNets {
  nn::Network t;    // residual encoder-decoder, sigmoid output
  nn::Network d;    // five conv layers (taps conv1..conv5), sigmoid head
  nn::Network phi;  // five conv layers with taps conv1..conv5
  nn::Network f;    // two 3x3 convs
  nn::Network e_local;  // 6 -> 3 channels
  nn::Network e_global;

  static TinyNets make(std::uint64_t seed);
};

/// Central-difference checks (eps 1e-5, 64-bit) of every differentiable
/// tensor op. `instances` random draws per op.
std::vector<CaseResult> check_ops(int instances, std::uint64_t seed);
/// Same for every loss, w.r.t. each upstream parameter group.
std::vector<CaseResult> check_losses(int instances, std::uint64_t seed);

}  // namespace diat::selfcheck
