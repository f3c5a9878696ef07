#pragma once

#include <vector>

#include "nsi/tensor.hpp"

namespace nsi {

// Adam with bias correction. Moment buffers are lazily sized to the
// parameter list on the first step.
struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t step_count = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

// One update over all params, reading each tensor's grad buffer.
void adam_step(std::vector<Tensor>& params, AdamState& state);

void zero_grads(std::vector<Tensor>& params);

}  // namespace nsi
