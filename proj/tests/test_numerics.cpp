#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nsi/adam.hpp"
#include "nsi/gradcheck.hpp"
#include "nsi/nn.hpp"
#include "nsi/tensor.hpp"

using namespace nsi;

namespace {

// Independent six-nested-loop reference for valid cross-correlation.
Tensor conv2d_naive(const Tensor& input, const Tensor& kernel) {
    const auto B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const auto O = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const auto Ho = H - kh + 1, Wo = W - kw + 1;
    Tensor out({B, O, Ho, Wo});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t o = 0; o < O; ++o)
            for (std::int64_t i = 0; i < Ho; ++i)
                for (std::int64_t j = 0; j < Wo; ++j) {
                    double s = 0.0;
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t u = 0; u < kh; ++u)
                            for (std::int64_t v = 0; v < kw; ++v)
                                s += input.at({b, c, i + u, j + v}) * kernel.at({o, c, u, v});
                    out.data()[((b * O + o) * Ho + i) * Wo + j] = s;
                }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("conv2d spec examples") {
    Graph g;
    Tensor ones({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    Tensor k_ones({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    Tensor out = conv2d(g, ones, k_ones);
    CHECK(out.shape() == shape_t{1, 1, 1, 1});
    CHECK(out.data()[0] == doctest::Approx(9.0));

    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor k({1, 1, 1, 1}, std::vector<double>{2.0});
    Tensor y = conv2d(g, x, k);
    CHECK(y.data()[0] == doctest::Approx(2));
    CHECK(y.data()[1] == doctest::Approx(4));
    CHECK(y.data()[2] == doctest::Approx(6));
    CHECK(y.data()[3] == doctest::Approx(8));
}

TEST_CASE("conv2d matches naive loop oracle on random shapes") {
    rng gen(77);
    for (int trial = 0; trial < 12; ++trial) {
        const std::int64_t B = 1 + std::int64_t(gen.below(4));
        const std::int64_t C = 1 + std::int64_t(gen.below(8));
        const std::int64_t H = 4 + std::int64_t(gen.below(13));
        const std::int64_t W = 4 + std::int64_t(gen.below(13));
        const std::int64_t O = 1 + std::int64_t(gen.below(4));
        const std::int64_t kh = 1 + std::int64_t(gen.below(std::uint64_t(std::min<std::int64_t>(H, 5))));
        const std::int64_t kw = 1 + std::int64_t(gen.below(std::uint64_t(std::min<std::int64_t>(W, 5))));
        Tensor in = Tensor::randn({B, C, H, W}, gen);
        Tensor k = Tensor::randn({O, C, kh, kw}, gen);
        Graph g;
        CHECK(max_abs_diff(conv2d(g, in, k), conv2d_naive(in, k)) < 1e-12);
    }
}

TEST_CASE("conv2d random 2x3x8x8 against oracle") {
    rng gen(5);
    Tensor in = Tensor::randn({2, 3, 8, 8}, gen);
    Tensor k = Tensor::randn({4, 3, 3, 3}, gen);
    Graph g;
    CHECK(max_abs_diff(conv2d(g, in, k), conv2d_naive(in, k)) < 1e-12);
}

TEST_CASE("conv2d shape errors name the offending axes") {
    Graph g;
    Tensor in = Tensor::zeros({1, 3, 8, 8});
    Tensor k = Tensor::zeros({2, 4, 3, 3});
    CHECK_THROWS_WITH_AS(conv2d(g, in, k),
                         doctest::Contains("axis 1"), dim_error);
    Tensor big = Tensor::zeros({2, 3, 9, 9});
    CHECK_THROWS_AS(conv2d(g, in, big), dim_error);
}

TEST_CASE("backward on sum of squares") {
    Graph g;
    Tensor x({3}, {1, 2, 3}, true);
    Tensor loss = sum_squares(g, x);
    g.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2));
    CHECK(x.grad()[1] == doctest::Approx(4));
    CHECK(x.grad()[2] == doctest::Approx(6));

    SUBCASE("repeated backward accumulates additively") {
        g.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(4));
        CHECK(x.grad()[1] == doctest::Approx(8));
        CHECK(x.grad()[2] == doctest::Approx(12));
    }
}

TEST_CASE("backward rejects non-scalar loss and empty graph") {
    Graph g;
    Tensor x({2}, {1, 2}, true);
    Tensor y = scale(g, x, 2.0);
    CHECK_THROWS_AS(g.backward(y), contract_error);
    Graph empty;
    Tensor s = Tensor::scalar(1.0, true);
    CHECK_THROWS_AS(empty.backward(s), contract_error);
}

TEST_CASE("pointwise activations") {
    Graph g;
    Tensor x({4}, {-1.0, 2.0, 0.0, 100.0});
    Tensor r = pointwise(g, x, Activation::relu);
    CHECK(r.data()[0] == 0.0);
    CHECK(r.data()[1] == 2.0);
    Tensor s = pointwise(g, Tensor({1}, std::vector<double>{0.0}), Activation::softplus);
    CHECK(s.data()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    Tensor big = pointwise(g, Tensor({1}, std::vector<double>{100.0}), Activation::softplus);
    CHECK(std::abs(big.data()[0] - 100.0) < 1e-12);
    // identity passes through untouched
    Tensor id = pointwise(g, x, Activation::identity);
    CHECK(id.same_storage(x));
}

TEST_CASE("batchnorm constant input collapses to zero and seeds running stats") {
    BatchNorm bn(1);
    Graph g;
    Tensor x = Tensor::full({2, 1, 2, 2}, 5.0);
    Tensor y = batchnorm(g, x, bn, Mode::train);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.data()[i]) < 1e-9);
    CHECK(bn.running_mean.data()[0] == doctest::Approx(0.5));  // 0.9*0 + 0.1*5
    CHECK(bn.running_var.data()[0] == doctest::Approx(0.9));   // 0.9*1 + 0.1*0
}

TEST_CASE("batchnorm normalizes a large standard-normal batch") {
    rng gen(11);
    BatchNorm bn(2);
    Tensor x = Tensor::randn({8, 2, 16, 16}, gen, 3.0, 1.0);
    Graph g;
    Tensor y = batchnorm(g, x, bn, Mode::train);
    const std::int64_t M = 8 * 16 * 16;
    for (std::int64_t c = 0; c < 2; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::int64_t b = 0; b < 8; ++b)
            for (std::int64_t i = 0; i < 256; ++i) mean += y.at({b, c, i / 16, i % 16});
        mean /= M;
        for (std::int64_t b = 0; b < 8; ++b)
            for (std::int64_t i = 0; i < 256; ++i) {
                double d = y.at({b, c, i / 16, i % 16}) - mean;
                var += d * d;
            }
        var /= M;
        CHECK(std::abs(mean) < 1e-10);
        // exact deviation is eps/(var+eps) with eps = 1e-5
        CHECK(std::abs(var - 1.0) < 2e-5);
    }
}

TEST_CASE("batchnorm affine output is gamma * normalized + beta") {
    rng gen(13);
    BatchNorm bn_ref(1), bn_affine(1);
    bn_affine.gamma.fill(2.0);
    bn_affine.beta.fill(3.0);
    Tensor x = Tensor::randn({4, 1, 5, 5}, gen);
    Graph g;
    Tensor ref = batchnorm(g, x, bn_ref, Mode::train);
    Tensor y = batchnorm(g, x, bn_affine, Mode::train);
    for (std::int64_t i = 0; i < y.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(2.0 * ref.data()[i] + 3.0).epsilon(1e-10));
}

TEST_CASE("batchnorm eval before train throws") {
    BatchNorm bn(1);
    Graph g;
    Tensor x = Tensor::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS(batchnorm(g, x, bn, Mode::eval), contract_error);
}

TEST_CASE("adam first step moves by about lr, zero grad is fixed point") {
    std::vector<Tensor> params{Tensor::zeros({1}, true)};
    params[0].grad()[0] = 1.0;
    AdamState st;
    adam_step(params, st);
    CHECK(params[0].data()[0] == doctest::Approx(-0.001).epsilon(1e-6));

    std::vector<Tensor> frozen{Tensor::full({3}, 0.5, true)};
    AdamState st2;
    adam_step(frozen, st2);
    for (int i = 0; i < 3; ++i) CHECK(frozen[0].data()[i] == 0.5);

    std::vector<Tensor> pair{Tensor::zeros({1}, true), Tensor::zeros({1}, true)};
    pair[0].grad()[0] = 0.7;
    pair[1].grad()[0] = 0.7;
    AdamState st3;
    adam_step(pair, st3);
    CHECK(pair[0].data()[0] == pair[1].data()[0]);
}

TEST_CASE("grad_check on quadratic form is tight") {
    rng gen(3);
    std::vector<Tensor> params{Tensor::randn({6}, gen, 0.0, 1.0, true)};
    auto loss = [&](Graph& g) { return sum_squares(g, params[0]); };
    CHECK(grad_check(loss, params) < 1e-8);
}

TEST_CASE("grad_check on conv/batchnorm/pointwise composite") {
    rng gen(21);
    Tensor input = Tensor::randn({2, 2, 6, 6}, gen);
    std::vector<Tensor> params{Tensor::randn({3, 2, 3, 3}, gen, 0.0, 0.5, true)};
    auto bn = std::make_shared<BatchNorm>(3);
    std::vector<Tensor> all = params;
    all.push_back(bn->gamma);
    all.push_back(bn->beta);
    nudge_from_kinks(all);
    auto loss = [&](Graph& g) {
        Tensor c = conv2d(g, input, params[0]);
        Tensor b = batchnorm(g, c, *bn, Mode::train);
        Tensor r = pointwise(g, b, Activation::softplus);
        return sum_squares(g, r);
    };
    CHECK(grad_check(loss, all) < 1e-4);
}

TEST_CASE("grad_check relu composite away from kinks") {
    rng gen(9);
    Tensor input = Tensor::randn({2, 1, 5, 5}, gen);
    std::vector<Tensor> params{Tensor::randn({2, 1, 3, 3}, gen, 0.0, 0.7, true)};
    nudge_from_kinks(params);
    auto loss = [&](Graph& g) {
        Tensor c = conv2d(g, input, params[0]);
        Tensor r = pointwise(g, c, Activation::relu);
        return sum_squares(g, r);
    };
    CHECK(grad_check(loss, params) < 1e-4);
}

TEST_CASE("linear and add_rowvec gradients") {
    rng gen(31);
    Tensor x = Tensor::randn({3, 4}, gen);
    std::vector<Tensor> params{Tensor::randn({2, 4}, gen, 0.0, 1.0, true),
                               Tensor::randn({2}, gen, 0.0, 1.0, true)};
    auto loss = [&](Graph& g) {
        Tensor y = linear(g, x, params[0]);
        Tensor z = add_rowvec(g, y, params[1]);
        return sum_squares(g, z);
    };
    CHECK(grad_check(loss, params) < 1e-6);
}

TEST_CASE("laplace penalty of centered delta is 41") {
    Tensor k = Tensor::zeros({1, 1, 3, 3});
    k.data()[4] = 1.0;  // centered delta
    Graph g;
    CHECK(laplace_penalty(g, k, 1.0).value() == doctest::Approx(41.0));

    SUBCASE("quadratic in the kernel") {
        Tensor k2 = k.clone();
        for (auto& v : k2.storage()) v *= 3.0;
        Graph g2;
        CHECK(laplace_penalty(g2, k2, 1.0).value() == doctest::Approx(9.0 * 41.0));
    }
    SUBCASE("zero kernel gives zero") {
        Graph g3;
        CHECK(laplace_penalty(g3, Tensor::zeros({2, 2, 4, 4}), 1.0).value() == 0.0);
    }
    SUBCASE("gradient matches finite differences") {
        rng gen(41);
        std::vector<Tensor> params{Tensor::randn({2, 2, 4, 5}, gen, 0.0, 1.0, true)};
        auto loss = [&](Graph& gg) { return laplace_penalty(gg, params[0], 0.7); };
        CHECK(grad_check(loss, params) < 1e-6);
    }
}

TEST_CASE("group sparsity") {
    SUBCASE("single nonzero entry") {
        Tensor k = Tensor::zeros({2, 2, 3, 3});
        k.data()[7] = -4.0;
        Graph g;
        CHECK(group_sparsity(g, k, 0.5).value() == doctest::Approx(2.0));
    }
    SUBCASE("two equal groups of norm 3") {
        // spatial grouping: all mass at two spatial positions
        Tensor k = Tensor::zeros({1, 1, 2, 2});
        k.data()[0] = 3.0;
        k.data()[3] = -3.0;
        Graph g;
        CHECK(group_sparsity(g, k, 1.0).value() == doctest::Approx(6.0));
    }
    SUBCASE("matches flattened-loop oracle on random tensors") {
        rng gen(55);
        Tensor k = Tensor::randn({3, 2, 4, 5}, gen);
        double expect = 0.0;
        for (std::int64_t i = 0; i < 4; ++i)
            for (std::int64_t j = 0; j < 5; ++j) {
                double q = 0.0;
                for (std::int64_t o = 0; o < 3; ++o)
                    for (std::int64_t c = 0; c < 2; ++c) {
                        double v = k.at({o, c, i, j});
                        q += v * v;
                    }
                expect += std::sqrt(q);
            }
        Graph g;
        CHECK(group_sparsity(g, k, 1.3).value() == doctest::Approx(1.3 * expect).epsilon(1e-12));

        double expect_ch = 0.0;
        for (std::int64_t o = 0; o < 3; ++o)
            for (std::int64_t c = 0; c < 2; ++c) {
                double q = 0.0;
                for (std::int64_t i = 0; i < 4; ++i)
                    for (std::int64_t j = 0; j < 5; ++j) {
                        double v = k.at({o, c, i, j});
                        q += v * v;
                    }
                expect_ch += std::sqrt(q);
            }
        Graph g2;
        CHECK(group_sparsity(g2, k, 1.0, GroupAxes::channel).value() ==
              doctest::Approx(expect_ch).epsilon(1e-12));
    }
    SUBCASE("gradient away from zero groups") {
        rng gen(56);
        std::vector<Tensor> params{Tensor::randn({2, 2, 3, 3}, gen, 0.0, 1.0, true)};
        nudge_from_kinks(params);
        auto loss = [&](Graph& g) { return group_sparsity(g, params[0], 0.9); };
        CHECK(grad_check(loss, params) < 1e-6);
    }
}

TEST_CASE("readout_factorized selection semantics and direct-sum oracle") {
    rng gen(66);
    const std::int64_t B = 3, K = 4, Ho = 5, Wo = 6, N = 7;
    Tensor c = Tensor::randn({B, K, Ho, Wo}, gen);

    SUBCASE("one-hot mask and weights pick a single feature value") {
        Tensor m = Tensor::zeros({1, Ho, Wo});
        Tensor w = Tensor::zeros({1, K});
        m.data()[2 * Wo + 3] = 1.0;
        w.data()[1] = 1.0;
        Graph g;
        Tensor out = readout_factorized(g, c, m, w);
        for (std::int64_t b = 0; b < B; ++b)
            CHECK(out.at({b, 0}) == doctest::Approx(c.at({b, 1, 2, 3})).epsilon(1e-12));
    }

    SUBCASE("matches direct summation over q = m (x) w") {
        Tensor m = Tensor::randn({N, Ho, Wo}, gen);
        Tensor w = Tensor::randn({N, K}, gen);
        Graph g;
        Tensor out = readout_factorized(g, c, m, w);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t n = 0; n < N; ++n) {
                double s = 0.0;
                for (std::int64_t k = 0; k < K; ++k)
                    for (std::int64_t i = 0; i < Ho; ++i)
                        for (std::int64_t j = 0; j < Wo; ++j)
                            s += c.at({b, k, i, j}) * m.at({n, i, j}) * w.at({n, k});
                CHECK(std::abs(out.at({b, n}) - s) < 1e-12);
            }
    }

    SUBCASE("gradients match finite differences") {
        std::vector<Tensor> params{Tensor::randn({2, Ho, Wo}, gen, 0.0, 1.0, true),
                                   Tensor::randn({2, K}, gen, 0.0, 1.0, true)};
        auto loss = [&](Graph& g) {
            Tensor out = readout_factorized(g, c, params[0], params[1]);
            return sum_squares(g, out);
        };
        CHECK(grad_check(loss, params) < 1e-6);
    }
}

TEST_CASE("determinism: identical seeds give bit-identical op outputs") {
    auto run = []() {
        rng gen(123);
        Tensor in = Tensor::randn({2, 2, 8, 8}, gen);
        Tensor k = Tensor::randn({3, 2, 3, 3}, gen);
        Graph g;
        Tensor out = conv2d(g, in, k);
        return out;
    };
    Tensor a = run(), b = run();
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("check_finite raises on NaN") {
    Tensor t = Tensor::zeros({2});
    t.data()[1] = std::nan("");
    CHECK_THROWS_AS(check_finite(t, "test"), numeric_error);
}
