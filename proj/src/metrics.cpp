#include "nsi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace nsi {

std::vector<std::optional<double>> fev(const Tensor& pred, const Tensor& rates) {
    if (pred.shape() != rates.shape() || pred.rank() != 2)
        throw dim_error("fev: pred " + shape_str(pred.shape()) + " vs rates " +
                        shape_str(rates.shape()));
    const std::int64_t S = pred.dim(0), N = pred.dim(1);
    std::vector<std::optional<double>> out(N);
    for (std::int64_t n = 0; n < N; ++n) {
        double mean = 0.0;
        for (std::int64_t s = 0; s < S; ++s) mean += rates.data()[s * N + n];
        mean /= double(S);
        double var = 0.0, mse = 0.0;
        for (std::int64_t s = 0; s < S; ++s) {
            const double r = rates.data()[s * N + n];
            var += (r - mean) * (r - mean);
            const double d = pred.data()[s * N + n] - r;
            mse += d * d;
        }
        var /= double(S);
        mse /= double(S);
        if (var <= 0.0)
            out[n] = std::nullopt;
        else
            out[n] = 1.0 - mse / var;
    }
    return out;
}

namespace {

CorrelationResult pearson_impl(const Tensor& a, const Tensor& b) {
    const std::int64_t S = a.dim(0), N = a.dim(1);
    CorrelationResult res;
    res.value.resize(N);
    res.degenerate.resize(N);
    for (std::int64_t n = 0; n < N; ++n) {
        double ma = 0.0, mb = 0.0;
        for (std::int64_t s = 0; s < S; ++s) {
            ma += a.data()[s * N + n];
            mb += b.data()[s * N + n];
        }
        ma /= double(S);
        mb /= double(S);
        double saa = 0.0, sbb = 0.0, sab = 0.0;
        for (std::int64_t s = 0; s < S; ++s) {
            const double da = a.data()[s * N + n] - ma;
            const double db = b.data()[s * N + n] - mb;
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
        if (saa <= 0.0 || sbb <= 0.0) {
            res.value[n] = 0.0;
            res.degenerate[n] = true;
        } else {
            res.value[n] = sab / std::sqrt(saa * sbb);
            res.degenerate[n] = false;
        }
    }
    return res;
}

}  // namespace

CorrelationResult pearson_columns(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape() || pred.rank() != 2)
        throw dim_error("pearson_columns: shape mismatch " + shape_str(pred.shape()) + " vs " +
                        shape_str(target.shape()));
    return pearson_impl(pred, target);
}

CorrelationResult test_correlation(const Tensor& pred, const Tensor& repeats) {
    if (repeats.rank() != 3)
        throw dim_error("test_correlation: repeats must be [S,R,N], got " +
                        shape_str(repeats.shape()));
    const std::int64_t S = repeats.dim(0), R = repeats.dim(1), N = repeats.dim(2);
    if (R < 2) throw contract_error("test_correlation: need at least 2 repeats");
    if (S < 3) throw contract_error("test_correlation: need at least 3 test stimuli");
    if (pred.dim(0) != S || pred.dim(1) != N)
        throw dim_error("test_correlation: pred " + shape_str(pred.shape()) + " vs repeats " +
                        shape_str(repeats.shape()));
    Tensor mean({S, N});
    for (std::int64_t s = 0; s < S; ++s)
        for (std::int64_t n = 0; n < N; ++n) {
            double m = 0.0;
            for (std::int64_t r = 0; r < R; ++r) m += repeats.data()[(s * R + r) * N + n];
            mean.data()[s * N + n] = m / double(R);
        }
    return pearson_impl(pred, mean);
}

std::vector<double> location_recovery(const Tensor& masks,
                                      const std::vector<std::int64_t>& true_row,
                                      const std::vector<std::int64_t>& true_col) {
    const std::int64_t N = masks.dim(0), H = masks.dim(1), W = masks.dim(2);
    if (std::int64_t(true_row.size()) != N || std::int64_t(true_col.size()) != N)
        throw contract_error("location_recovery: need one true location per neuron");
    std::vector<double> err(N);
    for (std::int64_t n = 0; n < N; ++n) {
        const double* m = masks.data() + n * H * W;
        std::int64_t best = 0;
        for (std::int64_t i = 1; i < H * W; ++i)
            if (std::abs(m[i]) > std::abs(m[best])) best = i;
        const std::int64_t r = best / W, c = best % W;
        err[n] = double(std::max(std::abs(r - true_row[n]), std::abs(c - true_col[n])));
    }
    return err;
}

std::vector<int> hungarian_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = int(cost.size());
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, INF);
        std::vector<char> used(n + 1, false);
        do {
            used[j0] = true;
            const int i0 = p[j0];
            double delta = INF;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

TypeClassification classify_types(const Tensor& feature_weights, const std::vector<int>& true_types,
                                  std::int64_t n_types) {
    const std::int64_t N = feature_weights.dim(0), K = feature_weights.dim(1);
    if (K < n_types)
        throw contract_error("classify_types: K=" + std::to_string(K) + " < n_types=" +
                             std::to_string(n_types));
    if (std::int64_t(true_types.size()) != N)
        throw contract_error("classify_types: need one true type per neuron");
    TypeClassification res;
    res.predicted_channel.resize(N);
    res.confusion.assign(K, std::vector<std::int64_t>(n_types, 0));
    for (std::int64_t n = 0; n < N; ++n) {
        std::int64_t best = 0;
        for (std::int64_t k = 1; k < K; ++k)
            if (std::abs(feature_weights.data()[n * K + k]) >
                std::abs(feature_weights.data()[n * K + best]))
                best = k;
        res.predicted_channel[n] = int(best);
        res.confusion[best][true_types[n]] += 1;
    }
    // best channel per type: maximize matched counts over a square padding
    const int m = int(std::max(K, n_types));
    std::vector<std::vector<double>> cost(m, std::vector<double>(m, 0.0));
    for (int k = 0; k < m; ++k)
        for (int t = 0; t < m; ++t)
            if (k < K && t < n_types) cost[k][t] = -double(res.confusion[k][t]);
    std::vector<int> channel_to_type = hungarian_assignment(cost);
    res.channel_of_type.assign(n_types, -1);
    std::int64_t matched = 0;
    for (int k = 0; k < int(K); ++k) {
        const int t = channel_to_type[k];
        if (t >= 0 && t < int(n_types)) {
            res.channel_of_type[t] = k;
            matched += res.confusion[k][t];
        }
    }
    res.accuracy = double(matched) / double(N);
    return res;
}

void MetricReport::finalize() {
    std::vector<double> fevs, corrs;
    for (const auto& m : per_neuron) {
        if (m.fev) fevs.push_back(*m.fev);
        corrs.push_back(m.corr);
    }
    n_fev_valid = std::int64_t(fevs.size());
    auto mean = [](std::vector<double>& v) {
        if (v.empty()) return 0.0;
        double s = 0.0;
        for (double x : v) s += x;
        return s / double(v.size());
    };
    auto median = [](std::vector<double>& v) {
        if (v.empty()) return 0.0;
        std::sort(v.begin(), v.end());
        const std::size_t h = v.size() / 2;
        return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
    };
    fev_mean = mean(fevs);
    corr_mean = mean(corrs);
    fev_median = median(fevs);
    corr_median = median(corrs);
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << "neuron,fev,corr,corr_degenerate,location_error_px,predicted_type\n";
    for (std::size_t n = 0; n < per_neuron.size(); ++n) {
        const auto& m = per_neuron[n];
        os << n << ",";
        if (m.fev) os << *m.fev;
        os << "," << m.corr << "," << (m.corr_degenerate ? 1 : 0) << ",";
        if (m.location_error_px) os << *m.location_error_px;
        os << ",";
        if (m.predicted_type) os << *m.predicted_type;
        os << "\n";
    }
    return os.str();
}

std::string MetricReport::summary_json() const {
    std::ostringstream os;
    os << "{\"n_neurons\":" << per_neuron.size() << ",\"n_fev_valid\":" << n_fev_valid
       << ",\"fev_mean\":" << fev_mean << ",\"fev_median\":" << fev_median
       << ",\"corr_mean\":" << corr_mean << ",\"corr_median\":" << corr_median << "}";
    return os.str();
}

}  // namespace nsi
