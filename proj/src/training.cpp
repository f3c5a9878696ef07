#include "nsi/training.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <thread>

namespace nsi {

void TrainConfig::validate() const {
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw config_error("train config: val_fraction must be in (0,1)");
    if (batch_size < 1 || eval_every < 1 || patience_steps < 1 || max_steps < 1)
        throw config_error("train config: sizes and intervals must be positive");
    if (patience_steps % eval_every != 0)
        throw config_error("train config: patience_steps must be a positive multiple of "
                           "eval_every");
    if (!(lr0 > 0.0) || !(lr_decay > 0.0 && lr_decay < 1.0))
        throw config_error("train config: bad learning-rate settings");
}

Tensor loss_mse_penalized(Graph& g, const Tensor& pred, const Tensor& target, Model& model,
                          const PenaltyConfig& p) {
    if (pred.shape() != target.shape())
        throw dim_error("loss: pred " + shape_str(pred.shape()) + " vs target " +
                        shape_str(target.shape()));
    Tensor diff = sub(g, pred, target);
    Tensor data = scale(g, sum_squares(g, diff), 1.0 / double(pred.dim(0)));
    return add(g, data, model.penalty(g, pred, p));
}

Tensor loss_poisson(Graph& g, const Tensor& pred, const Tensor& target, Model& model,
                    const PenaltyConfig& p) {
    if (pred.shape() != target.shape())
        throw dim_error("loss: pred " + shape_str(pred.shape()) + " vs target " +
                        shape_str(target.shape()));
    Tensor rate = clamp_min(g, pred, 1e-8);
    for (std::int64_t i = 0; i < rate.numel(); ++i)
        if (!(rate.data()[i] > 0.0))
            throw numeric_error("poisson loss: nonpositive rate after floor");
    Tensor nll = sub(g, rate, mul(g, target, log_op(g, rate)));
    Tensor data = scale(g, sum(g, nll), 1.0 / double(pred.dim(0)));
    return add(g, data, model.penalty(g, pred, p));
}

// ---- batching helpers ------------------------------------------------------------

namespace {

Tensor gather_stimuli(const Tensor& stimuli, const std::vector<std::int64_t>& idx,
                      std::size_t begin, std::size_t end) {
    const std::int64_t per = stimuli.numel() / stimuli.dim(0);
    Tensor out({std::int64_t(end - begin), stimuli.dim(1), stimuli.dim(2), stimuli.dim(3)});
    for (std::size_t i = begin; i < end; ++i)
        std::copy(stimuli.data() + idx[i] * per, stimuli.data() + (idx[i] + 1) * per,
                  out.data() + std::int64_t(i - begin) * per);
    return out;
}

Tensor gather_rows(const Tensor& mat, const std::vector<std::int64_t>& idx, std::size_t begin,
                   std::size_t end) {
    const std::int64_t N = mat.dim(1);
    Tensor out({std::int64_t(end - begin), N});
    for (std::size_t i = begin; i < end; ++i)
        std::copy(mat.data() + idx[i] * N, mat.data() + (idx[i] + 1) * N,
                  out.data() + std::int64_t(i - begin) * N);
    return out;
}

struct Snapshot {
    std::vector<std::vector<double>> values;
};

Snapshot take_snapshot(const std::vector<Tensor>& tensors) {
    Snapshot s;
    for (const auto& t : tensors) s.values.emplace_back(t.data(), t.data() + t.numel());
    return s;
}

void restore_snapshot(std::vector<Tensor>& tensors, const Snapshot& s) {
    for (std::size_t i = 0; i < tensors.size(); ++i)
        std::copy(s.values[i].begin(), s.values[i].end(), tensors[i].data());
}

double data_loss_value(Model& model, LossKind kind, const Tensor& pred, const Tensor& target) {
    // penalty-free data term, summed over neurons, per sample
    const std::int64_t B = pred.dim(0);
    double acc = 0.0;
    if (kind == LossKind::mse) {
        for (std::int64_t i = 0; i < pred.numel(); ++i) {
            const double d = pred.data()[i] - target.data()[i];
            acc += d * d;
        }
    } else {
        for (std::int64_t i = 0; i < pred.numel(); ++i) {
            const double r = std::max(pred.data()[i], 1e-8);
            acc += r - target.data()[i] * std::log(r);
        }
    }
    (void)model;
    return acc / double(B);
}

}  // namespace

Tensor predict(Model& model, const Dataset& ds, const std::vector<std::int64_t>& idx,
               std::int64_t chunk) {
    const std::int64_t N = model.n_outputs();
    Tensor out({std::int64_t(idx.size()), N});
    for (std::size_t b = 0; b < idx.size(); b += std::size_t(chunk)) {
        const std::size_t e = std::min(idx.size(), b + std::size_t(chunk));
        Graph g;
        Tensor pred = model.forward(g, gather_stimuli(ds.stimuli, idx, b, e), Mode::eval);
        std::copy(pred.data(), pred.data() + pred.numel(), out.data() + std::int64_t(b) * N);
    }
    return out;
}

double evaluate_data_loss(Model& model, const Dataset& ds,
                          const std::vector<std::int64_t>& idx, LossKind kind,
                          std::int64_t chunk) {
    double total = 0.0;
    for (std::size_t b = 0; b < idx.size(); b += std::size_t(chunk)) {
        const std::size_t e = std::min(idx.size(), b + std::size_t(chunk));
        Graph g;
        Tensor x = gather_stimuli(ds.stimuli, idx, b, e);
        Tensor y = gather_rows(ds.responses, idx, b, e);
        Tensor pred = model.forward(g, x, Mode::eval);
        total += data_loss_value(model, kind, pred, y) * double(e - b);
    }
    return total / double(idx.size());
}

FitReport train(Model& model, const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    ds.validate();

    // validation split: honor an explicit split, otherwise carve the last
    // val_fraction of a seeded shuffle of the training indices
    std::vector<std::int64_t> train_idx = ds.train_idx, val_idx = ds.val_idx;
    if (val_idx.empty()) {
        rng gen(mix_seed(cfg.seed, 0xB0u));
        std::vector<std::int64_t> shuffled = train_idx;
        for (std::size_t i = shuffled.size(); i > 1; --i)
            std::swap(shuffled[i - 1], shuffled[gen.below(i)]);
        const std::size_t n_val =
            std::max<std::size_t>(1, std::size_t(std::llround(cfg.val_fraction *
                                                              double(shuffled.size()))));
        val_idx.assign(shuffled.end() - std::ptrdiff_t(n_val), shuffled.end());
        train_idx.assign(shuffled.begin(), shuffled.end() - std::ptrdiff_t(n_val));
    }
    if (train_idx.empty()) throw config_error("train: empty training split");

    const bool full_batch = std::int64_t(train_idx.size()) < 2 * cfg.batch_size;

    std::vector<Tensor> params = model.trainable();
    std::vector<Tensor> buffers = model.buffers();
    std::vector<Tensor> state = params;
    state.insert(state.end(), buffers.begin(), buffers.end());

    AdamState adam;
    adam.learning_rate = cfg.lr0;
    zero_grads(params);

    FitReport report;
    Dataset view = ds;  // shares tensors; local split bookkeeping only
    view.train_idx = train_idx;
    view.val_idx = val_idx;

    // prime batch-norm running statistics so the untrained model can be
    // evaluated; no parameter update happens here
    {
        Graph g;
        const std::size_t warm = std::min<std::size_t>(train_idx.size(),
                                                       std::size_t(cfg.batch_size));
        model.forward(g, gather_stimuli(ds.stimuli, train_idx, 0, warm), Mode::train);
    }

    double best_val = evaluate_data_loss(model, ds, val_idx, cfg.loss);
    Snapshot best = take_snapshot(state);
    std::int64_t best_step = 0;
    report.trace.push_back({0, std::nan(""), best_val});

    rng epoch_gen(mix_seed(cfg.seed, 0xC0u));
    std::vector<std::int64_t> order = train_idx;
    std::size_t cursor = order.size();  // trigger shuffle on first use
    int exhaustions = 0;
    double last_train_loss = std::nan("");
    std::int64_t step = 0;

    while (step < cfg.max_steps) {
        ++step;
        // assemble the batch
        std::vector<std::int64_t> batch;
        if (full_batch) {
            batch = train_idx;
        } else {
            batch.reserve(std::size_t(cfg.batch_size));
            while (std::int64_t(batch.size()) < cfg.batch_size) {
                if (cursor >= order.size()) {
                    for (std::size_t i = order.size(); i > 1; --i)
                        std::swap(order[i - 1], order[epoch_gen.below(i)]);
                    cursor = 0;
                }
                batch.push_back(order[cursor++]);
            }
        }
        Tensor x = gather_stimuli(ds.stimuli, batch, 0, batch.size());
        Tensor y = gather_rows(ds.responses, batch, 0, batch.size());

        Graph g;
        Tensor pred = model.forward(g, x, Mode::train);
        Tensor loss = cfg.loss == LossKind::mse
                          ? loss_mse_penalized(g, pred, y, model, cfg.penalties)
                          : loss_poisson(g, pred, y, model, cfg.penalties);
        last_train_loss = loss.value();
        if (!std::isfinite(last_train_loss)) {
            std::ostringstream trace;
            trace << "NaN loss at step " << step << "; trailing trace:";
            const std::size_t from = report.trace.size() > 8 ? report.trace.size() - 8 : 0;
            for (std::size_t i = from; i < report.trace.size(); ++i)
                trace << " (step " << report.trace[i].step << " val "
                      << report.trace[i].val_loss << ")";
            throw training_error("training aborted on non-finite loss", trace.str());
        }
        g.backward(loss);
        adam_step(params, adam);
        zero_grads(params);

        if (step % cfg.eval_every == 0) {
            const double val_loss = evaluate_data_loss(model, ds, val_idx, cfg.loss);
            report.trace.push_back({step, last_train_loss, val_loss});
            if (val_loss < best_val) {
                best_val = val_loss;
                best = take_snapshot(state);
                best_step = step;
            } else if (step - best_step >= cfg.patience_steps) {
                restore_snapshot(state, best);
                ++exhaustions;
                const bool terminal = exhaustions > cfg.n_decays;
                report.lr_events.push_back({step, adam.learning_rate,
                                            terminal ? adam.learning_rate
                                                     : adam.learning_rate * cfg.lr_decay,
                                            terminal});
                if (terminal) break;
                adam.learning_rate *= cfg.lr_decay;
                best_step = step;  // patience restarts from the restore point
            }
        }
    }
    restore_snapshot(state, best);
    report.best_val_loss = best_val;
    report.steps_run = step;

    // held-out test metrics
    if (!ds.test_idx.empty()) {
        Tensor pred = predict(model, ds, ds.test_idx);
        MetricReport& mr = report.test_metrics;
        mr.per_neuron.resize(std::size_t(model.n_outputs()));
        if (ds.has_rates()) {
            Tensor true_rates = gather_rows(ds.rates, ds.test_idx, 0, ds.test_idx.size());
            auto f = fev(pred, true_rates);
            auto c = pearson_columns(pred, true_rates);
            for (std::size_t n = 0; n < mr.per_neuron.size(); ++n) {
                mr.per_neuron[n].fev = f[n];
                mr.per_neuron[n].corr = c.value[n];
                mr.per_neuron[n].corr_degenerate = c.degenerate[n];
            }
        } else if (ds.has_repeats()) {
            auto c = test_correlation(pred, ds.repeats);
            for (std::size_t n = 0; n < mr.per_neuron.size(); ++n) {
                mr.per_neuron[n].corr = c.value[n];
                mr.per_neuron[n].corr_degenerate = c.degenerate[n];
            }
        }
        mr.finalize();
    }
    return report;
}

// ---- grid search -----------------------------------------------------------------

std::vector<GridPoint> grid_cross(const std::map<std::string, std::vector<double>>& axes) {
    std::vector<GridPoint> grid{GridPoint{}};
    for (const auto& [name, values] : axes) {
        if (values.empty()) throw config_error("grid axis '" + name + "' is empty");
        std::vector<GridPoint> next;
        next.reserve(grid.size() * values.size());
        for (const auto& gp : grid)
            for (double v : values) {
                GridPoint q = gp;
                q.values[name] = v;
                next.push_back(std::move(q));
            }
        grid = std::move(next);
    }
    return grid;
}

GridSearchResult grid_search(const ModelFactory& factory, const Dataset& ds,
                             const std::vector<GridPoint>& grid, const TrainConfig& base,
                             int n_workers) {
    if (grid.empty()) throw config_error("grid_search: empty grid");
    struct Cell {
        std::unique_ptr<Model> model;
        FitReport report;
        GridCellRow row;
        bool ok = false;
    };
    std::vector<Cell> cells(grid.size());

    auto run_cell = [&](std::size_t i) {
        Cell& cell = cells[i];
        cell.row.point = grid[i];
        TrainConfig cfg = base;
        cfg.seed = base.seed + i;
        cfg.penalties.lambda_mask = grid[i].get("lambda_mask", base.penalties.lambda_mask);
        cfg.penalties.lambda_weight = grid[i].get("lambda_weight", base.penalties.lambda_weight);
        cfg.penalties.lambda_laplace =
            grid[i].get("lambda_laplace", base.penalties.lambda_laplace);
        cfg.penalties.lambda_group = grid[i].get("lambda_group", base.penalties.lambda_group);
        try {
            cell.model = factory(grid[i], cfg.seed);
            cell.report = train(*cell.model, ds, cfg);
            cell.row.val_loss = cell.report.best_val_loss;
            cell.row.test_fev_mean = cell.report.test_metrics.fev_mean;
            cell.row.test_corr_mean = cell.report.test_metrics.corr_mean;
            cell.row.steps_run = cell.report.steps_run;
            cell.row.status = "ok";
            cell.ok = true;
        } catch (const training_error&) {
            cell.row.status = "failed";
        }
    };

    const int workers = std::max(1, std::min<int>(n_workers, int(grid.size())));
    if (workers == 1) {
        for (std::size_t i = 0; i < grid.size(); ++i) run_cell(i);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&, w]() {
                for (std::size_t i = std::size_t(w); i < grid.size(); i += std::size_t(workers))
                    run_cell(i);
            });
        for (auto& t : pool) t.join();
    }

    GridSearchResult res;
    std::size_t best = grid.size();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (cells[i].ok && (best == grid.size() || cells[i].row.val_loss < cells[best].row.val_loss))
            best = i;
        res.table.push_back(cells[i].row);
    }
    if (best == grid.size())
        throw training_error("grid_search: all cells failed", "no successful grid cell");
    res.best_model = std::move(cells[best].model);
    res.best_report = std::move(cells[best].report);
    res.best_point = grid[best];
    res.best_index = best;
    for (const auto& [k, v] : res.best_point.values) res.best_report.selected[k] = v;
    return res;
}

std::string grid_table_csv(const std::vector<GridCellRow>& table) {
    std::set<std::string> keys;
    for (const auto& row : table)
        for (const auto& [k, v] : row.point.values) keys.insert(k);
    std::ostringstream os;
    for (const auto& k : keys) os << k << ",";
    os << "val_loss,test_fev_mean,test_corr_mean,steps_run,status\n";
    for (const auto& row : table) {
        for (const auto& k : keys) {
            auto it = row.point.values.find(k);
            if (it != row.point.values.end()) os << it->second;
            os << ",";
        }
        os << row.val_loss << "," << row.test_fev_mean << "," << row.test_corr_mean << ","
           << row.steps_run << "," << row.status << "\n";
    }
    return os.str();
}

}  // namespace nsi
