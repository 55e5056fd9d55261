// SPDX-License-Identifier: Apache-2.0
#include "kdforge/kd_losses.hpp"

#include <array>
#include <cmath>

#include "kdforge/errors.hpp"
#include "kdforge/ops.hpp"

namespace kdforge {

void LossScales::validate() const {
    if (student < 0.0 || teacher < 0.0 || mse < 0.0) {
        throw ValidationError("loss scales must be nonnegative");
    }
}

namespace {

void check_logits(const Tensor& logits, const char* what) {
    if (logits.rank() != 4) {
        throw ShapeError(std::string(what) + ": expected logits [B, K, T, C], got " + shape_str(logits.shape()));
    }
}

// Number of (b, k, t) positions each term is divided by.
double normalizer(const Shape& s, const KdOptions& opts) {
    const double bk = static_cast<double>(s[0] * s[1]);
    return opts.sum_over_time ? bk : bk * static_cast<double>(s[2]);
}

void check_temperature(const KdOptions& opts) {
    if (!(opts.temperature > 0.0)) {
        throw ValidationError("temperature must be positive");
    }
}

}  // namespace

Tensor student_loss(const Tensor& logits, const TokenBatch& targets, const KdOptions& opts) {
    check_logits(logits, "student loss");
    const Shape& s = logits.shape();
    if (targets.shape() != Shape{s[0], s[1], s[2]} || targets.cardinality != s[3]) {
        throw ShapeError("student loss: logits " + shape_str(s) + " vs targets " + shape_str(targets.shape()) +
                         " of cardinality " + std::to_string(targets.cardinality));
    }
    targets.validate();
    const Tensor logp = log_softmax(logits, -1);
    const Tensor picked = sum(mul(one_hot(targets.codes, targets.shape(), s[3]), logp));
    return scale(picked, -1.0 / normalizer(s, opts));
}

Tensor teacher_loss(const Tensor& student_logits, const Tensor& teacher_logits, const KdOptions& opts) {
    check_logits(student_logits, "teacher loss");
    if (student_logits.shape() != teacher_logits.shape()) {
        throw ShapeError("teacher loss: student " + shape_str(student_logits.shape()) + " vs teacher " +
                         shape_str(teacher_logits.shape()));
    }
    check_temperature(opts);
    const double inv_t = 1.0 / opts.temperature;
    const double log_floor = std::log(kProbabilityFloor);

    const Tensor teacher = scale(teacher_logits.detach(), inv_t);
    const Tensor logq = clamp_min(log_softmax(teacher, -1), log_floor);
    const Tensor q = softmax(teacher, -1);
    const Tensor logp = clamp_min(log_softmax(scale(student_logits, inv_t), -1), log_floor);
    const Tensor kl = sum(mul(q, sub(logq, logp)));
    return scale(kl, 1.0 / normalizer(student_logits.shape(), opts));
}

Tensor intermediate_mse(const HiddenTrace& student, const HiddenTrace& teacher, const LayerMapping& mapping,
                        const Linear* projection) {
    if (mapping.map.size() != student.size()) {
        throw ShapeError("intermediate mse: mapping has " + std::to_string(mapping.map.size()) + " entries for " +
                         std::to_string(student.size()) + " student layers");
    }
    if (student.empty()) {
        throw ValidationError("intermediate mse: empty student trace");
    }
    Tensor total;
    for (std::size_t k = 0; k < student.size(); ++k) {
        const std::size_t m = mapping.map[k];
        if (m >= teacher.size()) {
            throw RangeError("intermediate mse: teacher layer " + std::to_string(m) + " outside trace of " +
                             std::to_string(teacher.size()));
        }
        Tensor s = student[k];
        const Tensor t = teacher[m].detach();
        if (s.size(-1) != t.size(-1)) {
            if (!projection) {
                throw ShapeError("intermediate mse: student width " + std::to_string(s.size(-1)) +
                                 " vs teacher width " + std::to_string(t.size(-1)) + " needs a projection");
            }
            s = (*projection)(s);
        }
        const Tensor term = mse(s, t);
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, 1.0 / static_cast<double>(student.size()));
}

namespace {

void check_weights(const std::optional<SimplexWeights>& weights) {
    if (!weights) {
        return;
    }
    if (weights->size() != 3) {
        throw ValidationError("loss weights must have 3 components, got " + std::to_string(weights->size()));
    }
    for (double a : weights->a) {
        if (a < 0.0) {
            throw ValidationError("loss weights must be nonnegative");
        }
    }
    if (std::abs(weights->total() - 1.0) > 1e-9) {
        throw ValidationError("loss weights must sum to 1, got " + std::to_string(weights->total()));
    }
}

// Effective coefficient of each term.
std::array<double, 3> coefficients(const LossScales& scales, const std::optional<SimplexWeights>& weights) {
    std::array<double, 3> c = {scales.student, scales.teacher, scales.mse};
    if (weights) {
        for (std::size_t i = 0; i < 3; ++i) {
            c[i] *= (*weights)[i];
        }
    }
    return c;
}

}  // namespace

LossBreakdown combine_losses(double student, double teacher, double mse_value, const LossScales& scales,
                             const std::optional<SimplexWeights>& weights) {
    scales.validate();
    check_weights(weights);
    const auto c = coefficients(scales, weights);
    LossBreakdown b;
    b.student = student;
    b.teacher = teacher;
    b.mse = mse_value;
    b.total = c[0] * student + c[1] * teacher + c[2] * mse_value;
    b.weights = weights;
    return b;
}

Tensor combine_losses(const Tensor& student, const Tensor& teacher, const Tensor& mse_term, const LossScales& scales,
                      const std::optional<SimplexWeights>& weights, LossBreakdown* breakdown) {
    scales.validate();
    check_weights(weights);
    const auto c = coefficients(scales, weights);
    const Tensor* parts[3] = {&student, &teacher, &mse_term};
    Tensor total;
    double values[3] = {0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < 3; ++i) {
        if (!parts[i]->defined()) {
            continue;
        }
        values[i] = parts[i]->item();
        const Tensor term = scale(*parts[i], c[i]);
        total = total.defined() ? add(total, term) : term;
    }
    if (!total.defined()) {
        throw ValidationError("combined loss: no active terms");
    }
    if (breakdown) {
        *breakdown = combine_losses(values[0], values[1], values[2], scales, weights);
    }
    return total;
}

}  // namespace kdforge
