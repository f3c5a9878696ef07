#pragma once

#include <functional>
#include <vector>

#include "nsi/tensor.hpp"

namespace nsi {

// Scalar loss rebuilt from scratch on every call (fresh graph each time).
using LossFn = std::function<Tensor(Graph&)>;

// Compares analytic gradients of `loss` w.r.t. every element of `params`
// against central finite differences with step h. Returns
// max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double grad_check(const LossFn& loss, std::vector<Tensor>& params, double h = 1e-5);

// Pushes parameter entries with |x| < margin to sign(x) * margin so finite
// differences do not straddle |.| / relu kinks.
void nudge_from_kinks(std::vector<Tensor>& params, double margin = 1e-3);

}  // namespace nsi
