// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Seeded randomness with a fixed cross-platform sequence. std::mt19937_64 has
// a standardized output stream, but the standard *distributions* do not, so
// this wrapper owns its own uniform/normal/integer conversions. Every random
// choice in the project flows through Rng so that a run is reproducible from
// its seeds alone.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace condlm {

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1) with 53 bits of resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (the spare value is cached).
  double normal();
  float normal_f(float mean, float stddev) {
    return mean + stddev * static_cast<float>(normal());
  }

  // Uniform integer in [0, n). Rejection-sampled, bias free. n must be > 0.
  int64_t uniform_int(int64_t n);

  // Index drawn from an (unnormalized) nonnegative weight vector.
  size_t categorical(std::span<const double> weights);

  // Fisher-Yates shuffle using uniform_int, stable across platforms.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable sub-seed for a named stream, e.g. derive_seed(master, "pretrain").
// FNV-1a over the name mixed with the master seed, finished with splitmix64.
uint64_t derive_seed(uint64_t master, std::string_view stream_name);

}  // namespace condlm
