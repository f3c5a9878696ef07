#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nsi/adam.hpp"
#include "nsi/dataset.hpp"
#include "nsi/metrics.hpp"
#include "nsi/models.hpp"

namespace nsi {

enum class LossKind { mse, poisson };

struct TrainConfig {
    std::int64_t batch_size = 256;
    double lr0 = 1e-3;
    std::int64_t patience_steps = 300;  // optimizer steps without improvement
    double lr_decay = 0.1;
    std::int64_t n_decays = 1;  // schedule ends on exhaustion n_decays + 1
    double val_fraction = 0.2;
    std::int64_t eval_every = 10;
    std::int64_t max_steps = 50000;
    LossKind loss = LossKind::mse;
    PenaltyConfig penalties;
    std::uint64_t seed = 1;

    void validate() const;
};

struct LrEvent {
    std::int64_t step;
    double lr_before, lr_after;
    bool terminal;
};

struct TracePoint {
    std::int64_t step;
    double train_loss;
    double val_loss;
};

struct FitReport {
    double best_val_loss = 0.0;
    std::int64_t steps_run = 0;
    std::vector<LrEvent> lr_events;
    std::vector<TracePoint> trace;
    std::map<std::string, double> selected;  // hyperparameters of the chosen model
    std::string recipe;
    MetricReport test_metrics;
};

// Eq.-style penalized losses. The data term is summed over neurons and
// divided by the batch size only.
Tensor loss_mse_penalized(Graph& g, const Tensor& pred, const Tensor& target, Model& model,
                          const PenaltyConfig& p);
// pred must be positive rates; a 1e-8 floor is applied before the log.
Tensor loss_poisson(Graph& g, const Tensor& pred, const Tensor& target, Model& model,
                    const PenaltyConfig& p);

// Adam + early stopping: track best validation loss, on patience exhaustion
// restore the best parameters and decay the learning rate; the second
// exhaustion ends training. Returns the model at the best validation point.
FitReport train(Model& model, const Dataset& ds, const TrainConfig& cfg);

// Forward in eval mode over the given samples, in chunks. [|idx|, N]
Tensor predict(Model& model, const Dataset& ds, const std::vector<std::int64_t>& idx,
               std::int64_t chunk = 512);

// Unpenalized per-sample data loss over the given samples (eval mode).
double evaluate_data_loss(Model& model, const Dataset& ds,
                          const std::vector<std::int64_t>& idx, LossKind kind,
                          std::int64_t chunk = 512);

// ---- grid search ----------------------------------------------------------------

struct GridPoint {
    std::map<std::string, double> values;
    double get(const std::string& key, double fallback) const {
        auto it = values.find(key);
        return it == values.end() ? fallback : it->second;
    }
};

// Cross product of named value lists, in deterministic row-major order.
std::vector<GridPoint> grid_cross(const std::map<std::string, std::vector<double>>& axes);

using ModelFactory = std::function<std::unique_ptr<Model>(const GridPoint&, std::uint64_t seed)>;

struct GridCellRow {
    GridPoint point;
    double val_loss = 0.0;
    double test_fev_mean = 0.0;
    double test_corr_mean = 0.0;
    std::int64_t steps_run = 0;
    std::string status;  // ok | failed
};

struct GridSearchResult {
    std::unique_ptr<Model> best_model;
    FitReport best_report;
    GridPoint best_point;
    std::size_t best_index = 0;
    std::vector<GridCellRow> table;
};

// One model per grid cell with seed = base seed + cell index; selects the
// cell with the lowest validation loss. Cells aborting on NaN are recorded
// as failed; throws only when every cell fails.
GridSearchResult grid_search(const ModelFactory& factory, const Dataset& ds,
                             const std::vector<GridPoint>& grid, const TrainConfig& base,
                             int n_workers = 1);

// columns: hyperparameters..., val_loss, test_fev_mean, test_corr_mean, steps_run, status
std::string grid_table_csv(const std::vector<GridCellRow>& table);

}  // namespace nsi
