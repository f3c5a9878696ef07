#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nsi/metrics.hpp"
#include "nsi/rng.hpp"

using namespace nsi;

TEST_CASE("fev basics") {
    rng gen(1);
    Tensor rates = Tensor::randn({400, 3}, gen, 0.5, 1.0);

    SUBCASE("perfect prediction gives 1") {
        auto f = fev(rates, rates);
        for (auto& v : f) CHECK(*v == doctest::Approx(1.0));
    }

    SUBCASE("constant mean prediction gives 0") {
        Tensor pred({400, 3});
        for (std::int64_t n = 0; n < 3; ++n) {
            double m = 0.0;
            for (std::int64_t s = 0; s < 400; ++s) m += rates.at({s, n});
            m /= 400.0;
            for (std::int64_t s = 0; s < 400; ++s) pred.data()[s * 3 + n] = m;
        }
        auto f = fev(pred, rates);
        for (auto& v : f) CHECK(*v == doctest::Approx(0.0).epsilon(1e-10));
    }

    SUBCASE("noise with a quarter of the variance gives about 0.75") {
        Tensor big_rates = Tensor::randn({60000, 1}, gen, 0.0, 1.0);
        Tensor pred = big_rates.clone();
        for (std::int64_t s = 0; s < 60000; ++s) pred.data()[s] += 0.5 * gen.gaussian();
        auto f = fev(pred, big_rates);
        CHECK(*f[0] == doctest::Approx(0.75).epsilon(0.03));
    }

    SUBCASE("joint shift invariance and strictness below 1") {
        Tensor pred = rates.clone();
        pred.data()[0] += 0.3;
        auto f1 = fev(pred, rates);
        CHECK(*f1[0] < 1.0);
        Tensor pred_c = pred.clone(), rates_c = rates.clone();
        for (std::int64_t i = 0; i < pred_c.numel(); ++i) {
            pred_c.data()[i] += 7.0;
            rates_c.data()[i] += 7.0;
        }
        auto f2 = fev(pred_c, rates_c);
        for (std::int64_t n = 0; n < 3; ++n)
            CHECK(*f1[n] == doctest::Approx(*f2[n]).epsilon(1e-10));
    }

    SUBCASE("zero-variance neuron is reported absent") {
        Tensor flat = Tensor::full({10, 1}, 2.0);
        auto f = fev(flat, flat);
        CHECK_FALSE(f[0].has_value());
    }
}

TEST_CASE("test correlation against repeat means") {
    rng gen(2);
    const std::int64_t S = 50, R = 4, N = 2;
    Tensor repeats = Tensor::randn({S, R, N}, gen);
    Tensor mean({S, N});
    for (std::int64_t s = 0; s < S; ++s)
        for (std::int64_t n = 0; n < N; ++n) {
            double m = 0.0;
            for (std::int64_t r = 0; r < R; ++r) m += repeats.at({s, r, n});
            mean.data()[s * N + n] = m / R;
        }

    SUBCASE("exact repeat mean gives 1, negated gives -1") {
        auto c = test_correlation(mean, repeats);
        for (std::int64_t n = 0; n < N; ++n) CHECK(c.value[n] == doctest::Approx(1.0));
        Tensor neg = mean.clone();
        for (auto& v : neg.storage()) v = -v;
        auto c2 = test_correlation(neg, repeats);
        for (std::int64_t n = 0; n < N; ++n) CHECK(c2.value[n] == doctest::Approx(-1.0));
    }

    SUBCASE("independent predictions stay near zero on average") {
        double acc = 0.0;
        int within_bound = 0;
        for (int trial = 0; trial < 100; ++trial) {
            Tensor shuffled = Tensor::randn({S, N}, gen);
            auto c = test_correlation(shuffled, repeats);
            for (std::int64_t n = 0; n < N; ++n) {
                acc += c.value[n];
                if (std::abs(c.value[n]) < 3.0 / std::sqrt(double(S))) ++within_bound;
            }
        }
        CHECK(std::abs(acc / (100.0 * N)) < 0.1);
        CHECK(within_bound >= 95 * N);  // |corr| < 3/sqrt(S) typically
    }

    SUBCASE("preconditions") {
        CHECK_THROWS_AS(test_correlation(mean, Tensor::zeros({S, 1, N})), contract_error);
        CHECK_THROWS_AS(test_correlation(Tensor::zeros({2, N}), Tensor::zeros({2, 3, N})),
                        contract_error);
    }

    SUBCASE("degenerate prediction reports 0 with a flag") {
        Tensor flat = Tensor::full({S, N}, 1.0);
        auto c = test_correlation(flat, repeats);
        for (std::int64_t n = 0; n < N; ++n) {
            CHECK(c.value[n] == 0.0);
            CHECK(c.degenerate[n]);
        }
    }

    SUBCASE("correlation is invariant to positive affine transforms") {
        Tensor scaled = mean.clone();
        for (auto& v : scaled.storage()) v = 3.0 * v + 11.0;
        auto c = test_correlation(scaled, repeats);
        for (std::int64_t n = 0; n < N; ++n) CHECK(c.value[n] == doctest::Approx(1.0));
    }
}

TEST_CASE("location recovery") {
    SUBCASE("one-hot mask at the truth has zero error") {
        Tensor masks = Tensor::zeros({2, 8, 8});
        masks.data()[3 * 8 + 4] = 1.0;
        masks.data()[64 + 2 * 8 + 7] = -2.0;  // strongest by magnitude
        auto err = location_recovery(masks, {3, 2}, {4, 7});
        CHECK(err[0] == 0.0);
        CHECK(err[1] == 0.0);
    }

    SUBCASE("uniformly random masks are usually far off on a 32 grid") {
        rng gen(3);
        Tensor masks = Tensor::randn({64, 32, 32}, gen);
        auto err = location_recovery(masks, std::vector<std::int64_t>(64, 16),
                                     std::vector<std::int64_t>(64, 16));
        double mean = 0.0;
        for (double e : err) mean += e;
        CHECK(mean / 64.0 > 2.0);
    }
}

TEST_CASE("type classification") {
    SUBCASE("one-hot weights aligned with types") {
        Tensor w = Tensor::zeros({6, 3});
        std::vector<int> types = {0, 0, 1, 1, 2, 2};
        for (std::int64_t n = 0; n < 6; ++n) w.data()[n * 3 + types[n]] = 1.0;
        auto res = classify_types(w, types, 3);
        CHECK(res.accuracy == 1.0);
    }

    SUBCASE("channel permutations leave accuracy unchanged") {
        rng gen(5);
        const std::int64_t N = 40, K = 4;
        Tensor w({N, K});
        std::vector<int> types(N);
        for (std::int64_t n = 0; n < N; ++n) {
            types[n] = int(n % 3);
            for (std::int64_t k = 0; k < K; ++k)
                w.data()[n * K + k] = 0.1 * gen.gaussian() + (k == types[n] ? 1.0 : 0.0);
        }
        auto base = classify_types(w, types, 3);
        const int perm[4] = {2, 0, 3, 1};
        Tensor wp({N, K});
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k) wp.data()[n * K + perm[k]] = w.data()[n * K + k];
        auto permuted = classify_types(wp, types, 3);
        CHECK(base.accuracy == doctest::Approx(permuted.accuracy));
    }

    SUBCASE("hungarian assignment solves a known problem") {
        // cost matrix with unique optimum 0+1+2 on the anti-diagonal
        std::vector<std::vector<double>> cost = {{9, 9, 0}, {9, 1, 9}, {2, 9, 9}};
        auto a = hungarian_assignment(cost);
        CHECK(a[0] == 2);
        CHECK(a[1] == 1);
        CHECK(a[2] == 0);
    }
}

TEST_CASE("metric report aggregates and serialization") {
    MetricReport r;
    r.per_neuron.resize(3);
    r.per_neuron[0].fev = 0.5;
    r.per_neuron[0].corr = 0.6;
    r.per_neuron[1].fev = 0.7;
    r.per_neuron[1].corr = 0.8;
    r.per_neuron[2].corr = 0.0;
    r.per_neuron[2].corr_degenerate = true;
    r.finalize();
    CHECK(r.n_fev_valid == 2);
    CHECK(r.fev_mean == doctest::Approx(0.6));
    const std::string csv = r.to_csv();
    CHECK(csv.find("neuron,fev,corr") == 0);
    CHECK(r.summary_json().find("\"fev_mean\":0.6") != std::string::npos);
}
