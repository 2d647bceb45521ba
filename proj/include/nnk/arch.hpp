// Architecture description shared by the analytic kernels and finite networks.
#pragma once

#include <cstdint>
#include <string>

#include "nnk/common.hpp"

namespace nnk {

enum class Family { FCN, CNN_VEC, CNN_GAP };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::FCN: return "fcn";
    case Family::CNN_VEC: return "cnn-vec";
    case Family::CNN_GAP: return "cnn-gap";
  }
  return "?";
}

Family family_from_name(const std::string& s);

// ReLU architectures with critical initialization. `depth` counts hidden
// (conv) layers; a linear readout follows. Convolutions are 3x3, stride 1,
// SAME zero padding.
struct ArchitectureSpec {
  Family family = Family::FCN;
  int depth = 3;            // hidden layers (3 FCN base, 8 CNN base)
  int units = 2048;         // hidden width or channel count (2048 / 512 base)
  double weight_var = 2.0;  // sigma_w^2
  double bias_var = 0.01;   // sigma_b^2
  int filter = 3;

  void validate() const {
    if (depth < 0) throw ConfigError("architecture depth must be >= 0");
    if (units <= 0) throw ConfigError("architecture width must be positive");
    if (weight_var <= 0.0) throw ConfigError("weight variance must be > 0");
    if (bias_var < 0.0) throw ConfigError("bias variance must be >= 0");
  }

  std::string describe() const {
    std::string s = family_name(family);
    s += "-d" + std::to_string(depth) + "-w" + std::to_string(units);
    s += "-sw" + std::to_string(weight_var) + "-sb" + std::to_string(bias_var);
    return s;
  }

  std::uint64_t hash() const { return fnv1a64(describe()); }
};

inline ArchitectureSpec fcn_base() { return {Family::FCN, 3, 2048, 2.0, 0.01, 3}; }
inline ArchitectureSpec cnn_base(Family f) { return {f, 8, 512, 2.0, 0.01, 3}; }

}  // namespace nnk
