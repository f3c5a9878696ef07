#include "nsi/gradcheck.hpp"

#include <cmath>

namespace nsi {

double grad_check(const LossFn& loss, std::vector<Tensor>& params, double h) {
    for (auto& p : params) p.zero_grad();
    {
        Graph g;
        Tensor l = loss(g);
        g.backward(l);
    }
    std::vector<std::vector<double>> analytic(params.size());
    for (std::size_t p = 0; p < params.size(); ++p)
        analytic[p].assign(params[p].grad(), params[p].grad() + params[p].numel());

    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = params[p];
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double x0 = t.data()[i];
            t.data()[i] = x0 + h;
            double fp;
            {
                Graph g;
                fp = loss(g).value();
            }
            t.data()[i] = x0 - h;
            double fm;
            {
                Graph g;
                fm = loss(g).value();
            }
            t.data()[i] = x0;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[p][i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

void nudge_from_kinks(std::vector<Tensor>& params, double margin) {
    for (auto& p : params)
        for (auto& x : p.storage())
            if (std::abs(x) < margin) x = (x >= 0.0 ? margin : -margin);
}

}  // namespace nsi
