// SPDX-License-Identifier: Apache-2.0
//
// Language-model distillation objective.
//
//   student  L_S   cross-entropy against the ground-truth codes
//   teacher  L_T   KL(q || p) from the teacher posterior q to the student p
//   mse      L_MSE hidden-state alignment through a layer mapping
//
// Each term is averaged over codebooks and, unless `sum_over_time` is set,
// over batch and time. The combined loss is either the fixed-scale sum
//   l_s L_S + l_t L_T + l_m L_MSE
// or, given simplex weights a, the same sum with each term multiplied by a_i.
#pragma once

#include <optional>
#include <string>

#include "kdforge/models.hpp"
#include "kdforge/nn.hpp"
#include "kdforge/sampling.hpp"
#include "kdforge/transfer.hpp"

namespace kdforge {

inline constexpr double kProbabilityFloor = 1e-12;

struct LossScales {
    double student = 1.0;
    double teacher = 1.0;
    double mse = 1.0;

    void validate() const;
};

struct KdOptions {
    bool sum_over_time = false;
    double temperature = 1.0;
};

// logits [B, K, T, C] against codes [B, K, T].
Tensor student_loss(const Tensor& logits, const TokenBatch& targets, const KdOptions& opts = {});
// Teacher logits are treated as constants.
Tensor teacher_loss(const Tensor& student_logits, const Tensor& teacher_logits, const KdOptions& opts = {});
// `projection` lifts student states to the teacher width; required when the
// widths differ, ignored (may be null) when they agree.
Tensor intermediate_mse(const HiddenTrace& student, const HiddenTrace& teacher, const LayerMapping& mapping,
                        const Linear* projection = nullptr);

struct LossBreakdown {
    double student = 0.0;
    double teacher = 0.0;
    double mse = 0.0;
    double total = 0.0;
    std::optional<SimplexWeights> weights;  // absent on the fixed-scale path
};

// Scalar form. Throws ValidationError on negative scales or weights that do
// not sum to one within 1e-9.
LossBreakdown combine_losses(double student, double teacher, double mse, const LossScales& scales,
                             const std::optional<SimplexWeights>& weights);

// Differentiable form. Undefined tensors are inactive terms and contribute
// nothing. `breakdown`, when given, receives the scalar view.
Tensor combine_losses(const Tensor& student, const Tensor& teacher, const Tensor& mse, const LossScales& scales,
                      const std::optional<SimplexWeights>& weights, LossBreakdown* breakdown = nullptr);

}  // namespace kdforge
