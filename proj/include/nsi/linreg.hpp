#pragma once

#include <vector>

#include "nsi/dataset.hpp"

namespace nsi {

enum class LinearRegularizer { none, l1, l2 };

// Per-neuron linear filter over an oracle-cropped stimulus patch.
// Objectives (S = sample count, X column-centered, y centered):
//   none:  (1/2S) ||y - Xb||^2           (minimum-norm solution when singular)
//   l2:    (1/2S) ||y - Xb||^2 + (lambda/2) ||b||^2
//   l1:    (1/2S) ||y - Xb||^2 + lambda ||b||_1
struct LinearBaseline {
    Tensor kernel;  // [kh, kw]
    double bias = 0.0;
    LinearRegularizer reg = LinearRegularizer::none;
    double lambda = 0.0;
    std::int64_t row = 0, col = 0;  // crop location on the valid grid
    bool min_norm_warning = false;  // OLS with fewer samples than parameters
};

// Fits one baseline per neuron on the dataset's train split, cropping each
// stimulus at the neuron's known location. Lasso runs ISTA with backtracking
// until the relative objective change drops below 1e-8 (or 1e4 iterations).
std::vector<LinearBaseline> fit_linear_baseline(const Dataset& ds,
                                                const std::vector<std::int64_t>& loc_row,
                                                const std::vector<std::int64_t>& loc_col,
                                                std::int64_t kernel_h, std::int64_t kernel_w,
                                                LinearRegularizer reg, double lambda,
                                                const std::vector<std::int64_t>* fit_idx = nullptr);

// Predicted rates [S, N] for the chosen sample indices.
Tensor predict_linear_baseline(const std::vector<LinearBaseline>& models, const Tensor& stimuli,
                               const std::vector<std::int64_t>& idx);

// Lasso objective value for external verification.
double lasso_objective(const Tensor& X, const std::vector<double>& y,
                       const std::vector<double>& beta, double lambda);

}  // namespace nsi
