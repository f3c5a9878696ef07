#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nsi/tensor.hpp"

namespace nsi {

// Fraction of explainable variance explained, per neuron:
// 1 - <(pred - rate)^2> / Var(rate). Zero-variance neurons come back empty.
std::vector<std::optional<double>> fev(const Tensor& pred, const Tensor& rates);

struct CorrelationResult {
    std::vector<double> value;     // 0 when degenerate
    std::vector<bool> degenerate;  // zero-variance prediction or target
};

// Pearson correlation per neuron between pred[:,n] and the mean over repeats.
// pred [S,N], repeats [S,R,N]; needs R >= 2 and S >= 3.
CorrelationResult test_correlation(const Tensor& pred, const Tensor& repeats);

// Pearson correlation per neuron between two [S,N] matrices.
CorrelationResult pearson_columns(const Tensor& pred, const Tensor& target);

// Chebyshev distance between each mask's |argmax| and the true grid location.
std::vector<double> location_recovery(const Tensor& masks,
                                      const std::vector<std::int64_t>& true_row,
                                      const std::vector<std::int64_t>& true_col);

struct TypeClassification {
    double accuracy = 0.0;
    std::vector<std::vector<std::int64_t>> confusion;  // [channel][true type]
    std::vector<int> predicted_channel;                // argmax_k |w_nk|
    std::vector<int> channel_of_type;                  // optimal assignment
};

// Predicted type = argmax_k |w|; accuracy under the best one-to-one matching
// of feature channels to true types (channel order is arbitrary).
TypeClassification classify_types(const Tensor& feature_weights, const std::vector<int>& true_types,
                                  std::int64_t n_types);

// Min-cost assignment on a square matrix; returns column per row.
std::vector<int> hungarian_assignment(const std::vector<std::vector<double>>& cost);

// ---- per-neuron report -------------------------------------------------------

struct NeuronMetrics {
    std::optional<double> fev;
    double corr = 0.0;
    bool corr_degenerate = false;
    std::optional<double> location_error_px;
    std::optional<int> predicted_type;
};

struct MetricReport {
    std::vector<NeuronMetrics> per_neuron;
    double fev_mean = 0.0, fev_median = 0.0;
    double corr_mean = 0.0, corr_median = 0.0;
    std::int64_t n_fev_valid = 0;

    void finalize();  // recomputes aggregates from per_neuron
    std::string to_csv() const;
    std::string summary_json() const;
};

}  // namespace nsi
