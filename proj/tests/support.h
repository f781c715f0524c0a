// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Catch-free helpers shared between test binaries and the acceptance runner.

#pragma once

#include <vector>

#include "condlm/model.h"

namespace condlm_test {

// A model whose next-token logits are the given constant vector regardless of
// input: all weights start at zero, so the residual stream is zero everywhere
// and the final layer norm emits its shift vector unchanged. Setting that
// shift to e_0 and the first lm_head row to `logits` makes the output
// distribution softmax(logits) at every position. Handy for closed-form
// checks of scoring, sampling and KL metrics.
inline condlm::TransformerLM make_constant_logits_model(const std::vector<float>& logits,
                                                        int max_seq_len = 32) {
  condlm::ModelConfig config;
  config.vocab_size = static_cast<int>(logits.size());
  config.d_model = 8;
  config.n_layers = 1;
  config.n_heads = 2;
  config.d_ff = 16;
  config.max_seq_len = max_seq_len;
  config.init_seed = 0;
  config.init_scale = 0.0f;
  auto model = condlm::TransformerLM::init(config);
  model.final_ln_shift->values[0] = 1.0f;
  for (size_t v = 0; v < logits.size(); ++v)
    model.lm_head->values[v] = logits[v];  // row 0 of [d x V]
  return model;
}

}  // namespace condlm_test
