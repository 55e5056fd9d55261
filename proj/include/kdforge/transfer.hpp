// SPDX-License-Identifier: Apache-2.0
//
// Student-to-teacher layer mapping and weight-copy initialization.
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "kdforge/models.hpp"

namespace kdforge {

struct LayerMapping {
    std::size_t student_layers = 0;
    std::size_t teacher_layers = 0;
    std::vector<std::size_t> map;  // teacher block feeding student block k

    void validate() const;
};

enum class MappingRule {
    // map[k] = floor((k+1) * N / K) - 1; always ends on the last teacher block.
    final_anchored,
    // map[k] = ceil(k * (N-1) / (K-1)); starts on block 0 and ends on the last.
    first_anchored,
};

MappingRule parse_mapping_rule(std::string_view name);
std::string to_string(MappingRule rule);

LayerMapping equidistant_map(std::size_t student_layers, std::size_t teacher_layers,
                             MappingRule rule = MappingRule::final_anchored);

// ShapeError naming both widths when block weights cannot be copied.
void check_transfer_compatible(const LmConfig& teacher, const LmConfig& student);

// Copies teacher block map[k] into student block k, plus the embeddings,
// final norm and output head. Everything else keeps its current value.
void transfer_weights(const LanguageModel& teacher, LanguageModel& student, const LayerMapping& mapping);

}  // namespace kdforge
