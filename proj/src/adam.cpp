#include "nsi/adam.hpp"

#include <cmath>

namespace nsi {

void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (state.first_moment.empty()) {
        state.first_moment.resize(params.size());
        state.second_moment.resize(params.size());
        for (std::size_t p = 0; p < params.size(); ++p) {
            state.first_moment[p].assign(params[p].numel(), 0.0);
            state.second_moment[p].assign(params[p].numel(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size())
        throw contract_error("adam_step: parameter list changed size");
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, double(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, double(state.step_count));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = params[p];
        if (!t.has_grad()) throw contract_error("adam_step: parameter without gradient");
        if (state.first_moment[p].size() != static_cast<std::size_t>(t.numel()))
            throw contract_error("adam_step: moment buffer shape mismatch");
        const double* gr = t.grad();
        double* x = t.data();
        double* m = state.first_moment[p].data();
        double* v = state.second_moment[p].data();
        const std::int64_t n = t.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gr[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gr[i] * gr[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            x[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

void zero_grads(std::vector<Tensor>& params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace nsi
