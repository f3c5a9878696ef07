#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nsi/gradcheck.hpp"
#include "nsi/groundtruth.hpp"
#include "nsi/training.hpp"

using namespace nsi;

namespace {

// Convex toy: a plain linear map with no nonlinearity or norm layers.
class ToyLinearModel final : public Model {
public:
    Tensor weights;  // [N, D]
    explicit ToyLinearModel(std::int64_t n, std::int64_t d, std::uint64_t seed) {
        rng gen(seed);
        weights = Tensor::randn({n, d}, gen, 0.0, 0.1, true);
    }
    Tensor forward(Graph& g, const Tensor& stimuli, Mode) override {
        const std::int64_t B = stimuli.dim(0);
        return linear(g, stimuli.reshaped({B, stimuli.numel() / B}), weights);
    }
    Tensor penalty(Graph&, const Tensor&, const PenaltyConfig&) override {
        return Tensor::scalar(0.0);
    }
    std::vector<Tensor> trainable() override { return {weights}; }
    std::vector<Tensor> buffers() override { return {}; }
    std::int64_t n_outputs() const override { return weights.dim(0); }
    std::string family() const override { return "toy"; }
};

Dataset toy_dataset(std::int64_t S, std::int64_t D, std::uint64_t seed, double noise_sd = 0.0) {
    rng gen(seed);
    Dataset ds;
    ds.stimuli = Tensor::randn({S, 1, 1, D}, gen);
    Tensor truth = Tensor::randn({D}, gen);
    ds.responses = Tensor({S, 1});
    ds.rates = Tensor({S, 1});
    for (std::int64_t s = 0; s < S; ++s) {
        double acc = 0.0;
        for (std::int64_t d = 0; d < D; ++d) acc += ds.stimuli.data()[s * D + d] * truth.data()[d];
        ds.rates.data()[s] = acc;
        ds.responses.data()[s] = acc + noise_sd * gen.gaussian();
    }
    const std::int64_t n_test = S / 5;
    for (std::int64_t s = 0; s < S - n_test; ++s) ds.train_idx.push_back(s);
    for (std::int64_t s = S - n_test; s < S; ++s) ds.test_idx.push_back(s);
    return ds;
}

std::unique_ptr<FactorizedModel> small_factorized(std::uint64_t seed) {
    FactorizedConfig cfg;
    cfg.layers = {{1, 5, Activation::identity}};
    return init_factorized(cfg, 3, 12, 12, seed);
}

}  // namespace

TEST_CASE("mse loss arithmetic") {
    auto model = small_factorized(1);
    Graph g;
    PenaltyConfig none;

    SUBCASE("zero loss at the optimum") {
        Tensor y({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
        CHECK(loss_mse_penalized(g, y, y, *model, none).value() == 0.0);
    }

    SUBCASE("zero prediction on unit targets: data term sums over neurons") {
        Tensor pred = Tensor::zeros({2, 3});
        Tensor target = Tensor::full({2, 3}, 1.0);
        CHECK(loss_mse_penalized(g, pred, target, *model, none).value() ==
              doctest::Approx(3.0));
    }

    SUBCASE("L1 penalty arithmetic on the masks") {
        model->masks.fill(0.0);
        model->masks.data()[0] = 1.0;
        model->masks.data()[1] = -2.0;
        model->feature_weights.fill(0.0);
        PenaltyConfig p;
        p.lambda_mask = 0.5;
        Tensor zero = Tensor::zeros({1, 3});
        CHECK(loss_mse_penalized(g, zero, zero, *model, p).value() == doctest::Approx(1.5));
    }
}

TEST_CASE("poisson loss") {
    auto model = small_factorized(2);
    PenaltyConfig none;

    SUBCASE("unit rate and target contribute 1 per element") {
        Graph g;
        Tensor one = Tensor::full({1, 3}, 1.0);
        CHECK(loss_poisson(g, one, one, *model, none).value() == doctest::Approx(3.0));
    }

    SUBCASE("zero target reduces to the rate itself") {
        Graph g;
        Tensor rate = Tensor::full({1, 2}, 0.7);
        Tensor zero = Tensor::zeros({1, 2});
        CHECK(loss_poisson(g, rate, zero, *model, none).value() == doctest::Approx(1.4));
    }

    SUBCASE("minimized at rate == target (finite-difference around the minimum)") {
        const double y = 1.7;
        auto value_at = [&](double r) {
            Graph g;
            Tensor pred = Tensor::full({1, 1}, r);
            Tensor target = Tensor::full({1, 1}, y);
            return loss_poisson(g, pred, target, *model, none).value();
        };
        const double h = 1e-5;
        const double deriv = (value_at(y + h) - value_at(y - h)) / (2 * h);
        CHECK(std::abs(deriv) < 1e-8);
        CHECK(value_at(y) < value_at(y + 0.3));
        CHECK(value_at(y) < value_at(y - 0.3));
    }
}

TEST_CASE("penalized losses differentiate cleanly through the model") {
    auto model = small_factorized(5);
    rng gen(6);
    Tensor stim = Tensor::randn({3, 1, 12, 12}, gen);
    Tensor target = Tensor::randn({3, 3}, gen);
    PenaltyConfig p;
    p.lambda_mask = 0.01;
    p.lambda_weight = 0.01;
    p.lambda_laplace = 0.1;
    p.lambda_group = 0.05;
    auto params = model->trainable();
    nudge_from_kinks(params);
    auto loss = [&](Graph& g) {
        Tensor pred = model->forward(g, stim, Mode::train);
        return loss_mse_penalized(g, pred, target, *model, p);
    };
    CHECK(grad_check(loss, params) < 1e-4);

    SUBCASE("poisson + softplus output") {
        model->output_act = Activation::softplus;
        Tensor pos_target = Tensor::randn({3, 3}, gen, 1.0, 0.2);
        auto loss_p = [&](Graph& g) {
            Tensor pred = model->forward(g, stim, Mode::train);
            return loss_poisson(g, pred, pos_target, *model, p);
        };
        CHECK(grad_check(loss_p, params) < 1e-4);
    }
}

TEST_CASE("training converges on a convex toy problem") {
    Dataset ds = toy_dataset(300, 6, 11);
    ToyLinearModel model(1, 6, 3);
    TrainConfig cfg;
    cfg.batch_size = 64;
    cfg.lr0 = 0.02;
    cfg.patience_steps = 200;
    cfg.eval_every = 10;
    cfg.seed = 9;
    FitReport rep = train(model, ds, cfg);
    CHECK(rep.best_val_loss < 1e-6);
    CHECK(rep.test_metrics.fev_mean > 0.999);

    // schedule contract: at most two exhaustions, the last one terminal
    CHECK(rep.lr_events.size() <= 2);
    if (!rep.lr_events.empty()) CHECK(rep.lr_events.back().terminal);

    // returned parameters achieve the best validation loss seen in the trace
    double min_trace = 1e300;
    for (const auto& t : rep.trace) min_trace = std::min(min_trace, t.val_loss);
    CHECK(rep.best_val_loss == doctest::Approx(min_trace));

    // no worse than the initial model
    CHECK(rep.best_val_loss <= rep.trace.front().val_loss);
}

TEST_CASE("training is deterministic given identical config and seed") {
    Dataset ds = toy_dataset(200, 5, 21, 0.3);
    auto run = [&]() {
        ToyLinearModel model(2, 5, 7);
        // two outputs need a two-column response
        Dataset d2 = ds;
        d2.responses = Tensor({200, 2});
        d2.rates = Tensor({200, 2});
        for (std::int64_t s = 0; s < 200; ++s) {
            d2.responses.data()[s * 2] = ds.responses.data()[s];
            d2.responses.data()[s * 2 + 1] = -ds.responses.data()[s];
            d2.rates.data()[s * 2] = ds.rates.data()[s];
            d2.rates.data()[s * 2 + 1] = -ds.rates.data()[s];
        }
        TrainConfig cfg;
        cfg.batch_size = 32;
        cfg.patience_steps = 100;
        cfg.seed = 5;
        return train(model, d2, cfg);
    };
    FitReport a = run(), b = run();
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        REQUIRE(a.trace[i].step == b.trace[i].step);
        REQUIRE(a.trace[i].val_loss == b.trace[i].val_loss);
    }
    REQUIRE(a.best_val_loss == b.best_val_loss);
    REQUIRE(a.steps_run == b.steps_run);
}

TEST_CASE("nan loss aborts with a diagnostic trace") {
    Dataset ds = toy_dataset(100, 4, 31);
    ToyLinearModel model(1, 4, 3);
    model.weights.data()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.patience_steps = 100;
    try {
        train(model, ds, cfg);
        FAIL("expected training_error");
    } catch (const training_error& e) {
        CHECK(std::string(e.trace).find("NaN loss at step") != std::string::npos);
    }
}

TEST_CASE("config invariants") {
    TrainConfig cfg;
    cfg.patience_steps = 25;  // not a multiple of eval_every = 10
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg.patience_steps = 300;
    cfg.val_fraction = 1.5;
    CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("grid search") {
    Dataset ds = toy_dataset(240, 5, 41, 0.5);
    auto factory = [&](const GridPoint&, std::uint64_t seed) -> std::unique_ptr<Model> {
        return std::make_unique<ToyLinearModel>(1, 5, seed);
    };
    TrainConfig base;
    base.batch_size = 32;
    base.patience_steps = 100;
    base.seed = 77;

    SUBCASE("singleton grid equals a plain train call") {
        std::vector<GridPoint> grid{GridPoint{}};
        auto res = grid_search(factory, ds, grid, base);
        ToyLinearModel plain(1, 5, base.seed);
        FitReport ref = train(plain, ds, base);
        CHECK(res.best_report.best_val_loss == doctest::Approx(ref.best_val_loss));
        CHECK(res.best_report.steps_run == ref.steps_run);
    }

    SUBCASE("selection is the argmin of the validation column; huge penalty loses") {
        // factorized models so the mask penalty has bite
        PopulationSpec spec = make_homogeneous_population(2, DoGParams{}, 24, 24, 3);
        Dataset lin = build_dataset(spec, StimulusSource::white(), 400, 60, 5);
        auto ffac = [&](const GridPoint& gp, std::uint64_t seed) -> std::unique_ptr<Model> {
            FactorizedConfig cfg;
            cfg.layers = {{1, 17, Activation::identity}};
            (void)gp;
            return init_factorized(cfg, 2, 24, 24, seed);
        };
        TrainConfig cfg;
        cfg.batch_size = 64;
        cfg.patience_steps = 60;
        cfg.eval_every = 10;
        cfg.max_steps = 400;
        cfg.seed = 3;
        std::vector<GridPoint> grid;
        GridPoint moderate, huge;
        moderate.values["lambda_mask"] = 1e-4;
        huge.values["lambda_mask"] = 1e6;
        grid.push_back(moderate);
        grid.push_back(huge);
        auto res = grid_search(ffac, lin, grid, cfg, 2);
        REQUIRE(res.table.size() == 2);
        CHECK(res.table[0].val_loss < res.table[1].val_loss);
        CHECK(res.best_index == 0);
        double best = 1e300;
        for (const auto& row : res.table)
            if (row.status == "ok") best = std::min(best, row.val_loss);
        CHECK(res.best_report.best_val_loss == doctest::Approx(best));
        const std::string csv = grid_table_csv(res.table);
        CHECK(csv.find("lambda_mask") != std::string::npos);
        CHECK(csv.find("status") != std::string::npos);
    }

    SUBCASE("failed cells are recorded; all-failed throws") {
        auto nan_factory = [&](const GridPoint& gp, std::uint64_t seed) -> std::unique_ptr<Model> {
            auto m = std::make_unique<ToyLinearModel>(1, 5, seed);
            if (gp.get("poison", 0.0) > 0.0)
                m->weights.data()[0] = std::numeric_limits<double>::quiet_NaN();
            return m;
        };
        GridPoint ok, poisoned;
        poisoned.values["poison"] = 1.0;
        auto res = grid_search(nan_factory, ds, {ok, poisoned}, base);
        CHECK(res.table[0].status == "ok");
        CHECK(res.table[1].status == "failed");
        CHECK_THROWS_AS(grid_search(nan_factory, ds, {poisoned, poisoned}, base),
                        training_error);
    }
}

TEST_CASE("grid cross product is deterministic and complete") {
    auto grid = grid_cross({{"a", {1, 2}}, {"b", {10, 20, 30}}});
    REQUIRE(grid.size() == 6);
    CHECK(grid[0].get("a", 0) == 1);
    CHECK(grid[0].get("b", 0) == 10);
    CHECK(grid[5].get("a", 0) == 2);
    CHECK(grid[5].get("b", 0) == 30);
}
