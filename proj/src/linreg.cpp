#include "nsi/linreg.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace nsi {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Crop matrix [S, kh*kw] for one neuron over the given sample indices.
MatrixXd crop_matrix(const Tensor& stimuli, const std::vector<std::int64_t>& idx,
                     std::int64_t r0, std::int64_t c0, std::int64_t kh, std::int64_t kw) {
    const std::int64_t W = stimuli.dim(3);
    const std::int64_t HW = stimuli.dim(2) * W;
    MatrixXd X(idx.size(), kh * kw);
    for (std::size_t s = 0; s < idx.size(); ++s) {
        const double* stim = stimuli.data() + idx[s] * HW + r0 * W + c0;
        for (std::int64_t u = 0; u < kh; ++u)
            for (std::int64_t v = 0; v < kw; ++v) X(s, u * kw + v) = stim[u * W + v];
    }
    return X;
}

double objective_value(const MatrixXd& X, const VectorXd& y, const VectorXd& b, double lambda) {
    const double S = double(X.rows());
    return (y - X * b).squaredNorm() / (2.0 * S) + lambda * b.lpNorm<1>();
}

// ISTA with backtracking line search on the smooth part.
VectorXd lasso_ista(const MatrixXd& X, const VectorXd& y, double lambda) {
    const double S = double(X.rows());
    const std::int64_t p = X.cols();
    const MatrixXd gram = X.transpose() * X / S;
    const VectorXd xty = X.transpose() * y / S;
    VectorXd b = VectorXd::Zero(p);
    double step = 1.0;
    auto smooth = [&](const VectorXd& v) { return (y - X * v).squaredNorm() / (2.0 * S); };
    auto shrink = [&](const VectorXd& v, double t) {
        VectorXd out(p);
        for (std::int64_t i = 0; i < p; ++i) {
            const double x = v[i];
            const double thr = t * lambda;
            out[i] = x > thr ? x - thr : (x < -thr ? x + thr : 0.0);
        }
        return out;
    };
    double prev_obj = objective_value(X, y, b, lambda);
    for (int iter = 0; iter < 10000; ++iter) {
        const VectorXd grad = gram * b - xty;
        const double f_b = smooth(b);
        VectorXd next;
        for (;;) {
            next = shrink(b - step * grad, step);
            const VectorXd d = next - b;
            const double quad = f_b + grad.dot(d) + d.squaredNorm() / (2.0 * step);
            if (smooth(next) <= quad + 1e-15) break;
            step *= 0.5;
            if (step < 1e-12) break;
        }
        b = next;
        const double obj = objective_value(X, y, b, lambda);
        if (std::abs(prev_obj - obj) <= 1e-8 * std::max(1.0, std::abs(prev_obj))) break;
        prev_obj = obj;
        step = std::min(step * 2.0, 1e6);  // allow recovery after conservative steps
    }
    return b;
}

}  // namespace

std::vector<LinearBaseline> fit_linear_baseline(const Dataset& ds,
                                                const std::vector<std::int64_t>& loc_row,
                                                const std::vector<std::int64_t>& loc_col,
                                                std::int64_t kernel_h, std::int64_t kernel_w,
                                                LinearRegularizer reg, double lambda,
                                                const std::vector<std::int64_t>* fit_idx) {
    const std::vector<std::int64_t>& idx = fit_idx ? *fit_idx : ds.train_idx;
    const std::int64_t N = ds.n_neurons();
    if (std::int64_t(loc_row.size()) != N || std::int64_t(loc_col.size()) != N)
        throw contract_error("fit_linear_baseline: need one crop location per neuron");
    const std::int64_t S = std::int64_t(idx.size());
    const std::int64_t p = kernel_h * kernel_w;

    std::vector<LinearBaseline> out(N);
    for (std::int64_t n = 0; n < N; ++n) {
        MatrixXd X = crop_matrix(ds.stimuli, idx, loc_row[n], loc_col[n], kernel_h, kernel_w);
        VectorXd y(S);
        for (std::int64_t s = 0; s < S; ++s) y[s] = ds.responses.data()[idx[s] * N + n];

        // center so the intercept is unpenalized
        const VectorXd xmean = X.colwise().mean();
        const double ymean = y.mean();
        X.rowwise() -= xmean.transpose();
        y.array() -= ymean;

        VectorXd beta;
        LinearBaseline& m = out[n];
        switch (reg) {
            case LinearRegularizer::none: {
                beta = X.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(y);
                m.min_norm_warning = S < p;
                break;
            }
            case LinearRegularizer::l2: {
                MatrixXd A = X.transpose() * X / double(S);
                A.diagonal().array() += lambda;
                beta = A.ldlt().solve(X.transpose() * y / double(S));
                break;
            }
            case LinearRegularizer::l1: {
                beta = lasso_ista(X, y, lambda);
                break;
            }
        }
        m.kernel = Tensor({kernel_h, kernel_w});
        for (std::int64_t i = 0; i < p; ++i) m.kernel.data()[i] = beta[i];
        m.bias = ymean - xmean.dot(beta);
        m.reg = reg;
        m.lambda = lambda;
        m.row = loc_row[n];
        m.col = loc_col[n];
    }
    return out;
}

Tensor predict_linear_baseline(const std::vector<LinearBaseline>& models, const Tensor& stimuli,
                               const std::vector<std::int64_t>& idx) {
    const std::int64_t N = std::int64_t(models.size());
    const std::int64_t S = std::int64_t(idx.size());
    const std::int64_t W = stimuli.dim(3);
    const std::int64_t HW = stimuli.dim(2) * W;
    Tensor pred({S, N});
    for (std::int64_t s = 0; s < S; ++s) {
        const double* stim = stimuli.data() + idx[s] * HW;
        for (std::int64_t n = 0; n < N; ++n) {
            const auto& m = models[n];
            const std::int64_t kh = m.kernel.dim(0), kw = m.kernel.dim(1);
            const double* patch = stim + m.row * W + m.col;
            double acc = m.bias;
            for (std::int64_t u = 0; u < kh; ++u)
                for (std::int64_t v = 0; v < kw; ++v)
                    acc += patch[u * W + v] * m.kernel.data()[u * kw + v];
            pred.data()[s * N + n] = acc;
        }
    }
    return pred;
}

double lasso_objective(const Tensor& X, const std::vector<double>& y,
                       const std::vector<double>& beta, double lambda) {
    const std::int64_t S = X.dim(0), p = X.dim(1);
    double rss = 0.0;
    for (std::int64_t s = 0; s < S; ++s) {
        double r = y[s];
        for (std::int64_t j = 0; j < p; ++j) r -= X.data()[s * p + j] * beta[j];
        rss += r * r;
    }
    double l1 = 0.0;
    for (double b : beta) l1 += std::abs(b);
    return rss / (2.0 * double(S)) + lambda * l1;
}

}  // namespace nsi
