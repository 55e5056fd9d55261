// SPDX-License-Identifier: Apache-2.0
#include "kdforge/transfer.hpp"

#include "kdforge/errors.hpp"

namespace kdforge {

void LayerMapping::validate() const {
    if (map.size() != student_layers) {
        throw ConfigError("layer mapping: " + std::to_string(map.size()) + " entries for " +
                          std::to_string(student_layers) + " student layers");
    }
    for (std::size_t k = 0; k < map.size(); ++k) {
        if (map[k] >= teacher_layers) {
            throw RangeError("layer mapping: teacher index " + std::to_string(map[k]) + " outside [0, " +
                             std::to_string(teacher_layers) + ")");
        }
        if (k > 0 && map[k] <= map[k - 1]) {
            throw ConfigError("layer mapping must be strictly increasing");
        }
    }
}

MappingRule parse_mapping_rule(std::string_view name) {
    if (name == "final" || name == "final_anchored") {
        return MappingRule::final_anchored;
    }
    if (name == "first" || name == "first_anchored") {
        return MappingRule::first_anchored;
    }
    throw ConfigError("unknown mapping rule '" + std::string(name) + "' (expected final or first)");
}

std::string to_string(MappingRule rule) {
    return rule == MappingRule::final_anchored ? "final" : "first";
}

LayerMapping equidistant_map(std::size_t student_layers, std::size_t teacher_layers, MappingRule rule) {
    if (student_layers == 0 || student_layers > teacher_layers) {
        throw RangeError("equidistant map: need 1 <= student layers <= teacher layers, got " +
                         std::to_string(student_layers) + " and " + std::to_string(teacher_layers));
    }
    LayerMapping m{student_layers, teacher_layers, std::vector<std::size_t>(student_layers)};
    const std::size_t k_tr = student_layers;
    const std::size_t n_t = teacher_layers;
    for (std::size_t k = 0; k < k_tr; ++k) {
        if (rule == MappingRule::final_anchored || k_tr == 1) {
            m.map[k] = (k + 1) * n_t / k_tr - 1;
        } else {
            m.map[k] = (k * (n_t - 1) + (k_tr - 2)) / (k_tr - 1);
        }
    }
    return m;
}

void check_transfer_compatible(const LmConfig& teacher, const LmConfig& student) {
    if (teacher.dim != student.dim) {
        throw ShapeError("weight transfer: student width " + std::to_string(student.dim) + " vs teacher width " +
                         std::to_string(teacher.dim));
    }
    if (teacher.heads != student.heads || teacher.ffn_mult != student.ffn_mult ||
        teacher.cond_dim != student.cond_dim) {
        throw ShapeError("weight transfer: block geometry differs (heads " + std::to_string(student.heads) + " vs " +
                         std::to_string(teacher.heads) + ", cond_dim " + std::to_string(student.cond_dim) + " vs " +
                         std::to_string(teacher.cond_dim) + ")");
    }
    if (teacher.codebooks != student.codebooks || teacher.cardinality != student.cardinality ||
        teacher.max_time != student.max_time) {
        throw ShapeError("weight transfer: token layout differs");
    }
}

namespace {

NamedTensors rename_block(const NamedTensors& params, std::size_t from, std::size_t to) {
    const std::string src = "blocks." + std::to_string(from) + ".";
    const std::string dst = "blocks." + std::to_string(to) + ".";
    NamedTensors out;
    for (const auto& [name, t] : params) {
        out.emplace_back(dst + name.substr(src.size()), t);
    }
    return out;
}

}  // namespace

void transfer_weights(const LanguageModel& teacher, LanguageModel& student, const LayerMapping& mapping) {
    check_transfer_compatible(teacher.config(), student.config());
    mapping.validate();
    if (mapping.student_layers != student.block_count() || mapping.teacher_layers != teacher.block_count()) {
        throw ConfigError("weight transfer: mapping is for " + std::to_string(mapping.student_layers) + " -> " +
                          std::to_string(mapping.teacher_layers) + " layers, models have " +
                          std::to_string(student.block_count()) + " and " + std::to_string(teacher.block_count()));
    }
    NamedTensors shared_dst;
    for (const auto& [name, t] : student.named_parameters()) {
        if (name.rfind("blocks.", 0) != 0) {
            shared_dst.emplace_back(name, t);
        }
    }
    copy_parameters(shared_dst, teacher.named_parameters(), true);
    for (std::size_t k = 0; k < mapping.map.size(); ++k) {
        copy_parameters(student.block_parameters(k),
                        rename_block(teacher.block_parameters(mapping.map[k]), mapping.map[k], k), true);
    }
}

}  // namespace kdforge
