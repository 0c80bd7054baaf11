#pragma once

#include <vector>

#include "ddlab/model.hpp"
#include "ddlab/rng.hpp"

namespace ddlab {

// Layer-wise scheme: one uniformly random middle layer per iteration.
struct LayerSchedule {
    std::vector<std::size_t> candidates;

    void validate(std::size_t num_middle_layers) const {
        if (candidates.empty()) throw ConfigError("layer schedule: empty candidate set");
        for (std::size_t c : candidates)
            if (c >= num_middle_layers)
                throw ConfigError("layer schedule: candidate out of backbone range");
    }
};

inline std::size_t select_layer(const LayerSchedule& schedule, Rng& rng) {
    if (schedule.candidates.empty()) throw ConfigError("select_layer: empty candidate set");
    return schedule.candidates[rng.index(schedule.candidates.size())];
}

inline bool gate_active(double p_active, Rng& rng) {
    if (p_active <= 0.0) return false;
    if (p_active >= 1.0) return true;
    return rng.uniform_open() < p_active;
}

}  // namespace ddlab
