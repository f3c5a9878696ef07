#include "nsi/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace nsi {

std::string shape_str(const shape_t& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

static std::int64_t shape_numel(const shape_t& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d < 0) throw dim_error("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor::Tensor(shape_t shape, bool requires_grad) : shape_(std::move(shape)) {
    data_ = std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0);
    set_requires_grad(requires_grad);
}

Tensor::Tensor(shape_t shape, std::vector<double> values, bool requires_grad)
    : shape_(std::move(shape)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(values.size()))
        throw dim_error("value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(std::move(values));
    set_requires_grad(requires_grad);
}

Tensor Tensor::zeros(shape_t shape, bool requires_grad) {
    return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(shape_t shape, double value, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::randn(shape_t shape, rng& gen, double mean, double stddev, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    for (auto& x : t.storage()) x = gen.gaussian(mean, stddev);
    return t;
}

std::int64_t Tensor::numel() const {
    return data_ ? static_cast<std::int64_t>(data_->size()) : 0;
}

void Tensor::set_requires_grad(bool flag) {
    requires_grad_ = flag;
    if (flag && !grad_) grad_ = std::make_shared<std::vector<double>>(data_->size(), 0.0);
}

double* Tensor::grad() {
    if (!grad_) throw contract_error("tensor has no gradient buffer");
    return grad_->data();
}

const double* Tensor::grad() const {
    if (!grad_) throw contract_error("tensor has no gradient buffer");
    return grad_->data();
}

double Tensor::value() const {
    if (!is_scalar()) throw contract_error("value() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != shape_.size())
        throw dim_error("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                        std::to_string(shape_.size()));
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
        if (i < 0 || i >= shape_[axis])
            throw dim_error("index " + std::to_string(i) + " out of range on axis " +
                            std::to_string(axis) + " of " + shape_str(shape_));
        flat = flat * shape_[axis] + i;
        ++axis;
    }
    return (*data_)[flat];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    t.set_requires_grad(requires_grad_);
    return t;
}

Tensor Tensor::reshaped(shape_t new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw dim_error("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                        " changes element count");
    Tensor t(*this);
    t.shape_ = std::move(new_shape);
    return t;
}

void Tensor::fill(double v) {
    for (auto& x : *data_) x = v;
}

void Tensor::zero_grad() {
    if (grad_)
        for (auto& x : *grad_) x = 0.0;
}

void Tensor::copy_data_from(const Tensor& other) {
    if (other.numel() != numel())
        throw dim_error("copy_data_from: " + shape_str(other.shape_) + " into " +
                        shape_str(shape_));
    *data_ = *other.data_;
}

void check_finite(const Tensor& t, const char* what) {
    for (double x : t.storage())
        if (!std::isfinite(x))
            throw numeric_error(std::string("non-finite value in ") + what + " " +
                                shape_str(t.shape()));
}

void Graph::record(Tensor output, std::function<void()> backward) {
    nodes_.push_back({std::move(output), std::move(backward)});
}

void Graph::backward(const Tensor& loss) {
    if (!loss.is_scalar())
        throw contract_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (nodes_.empty()) throw contract_error("backward: empty graph");
    // Intermediate grads are scratch space; leaves (never a node output)
    // keep accumulating across calls.
    for (auto& node : nodes_)
        if (node.output.has_grad()) node.output.zero_grad();
    const_cast<Tensor&>(loss).grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
        if (it->backward) it->backward();
}

// ---- op helpers ------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw dim_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

Tensor make_output(shape_t shape, bool requires_grad) {
    return Tensor(std::move(shape), requires_grad);
}

}  // namespace

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    NSI_DEBUG_CHECK_FINITE(out, "add");
    if (out.requires_grad()) {
        g.record(out, [a, b, out]() {
            const double* go = out.grad();
            const std::int64_t n = out.numel();
            if (a.requires_grad()) {
                double* ga = const_cast<Tensor&>(a).grad();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                double* gb = const_cast<Tensor&>(b).grad();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    NSI_DEBUG_CHECK_FINITE(out, "sub");
    if (out.requires_grad()) {
        g.record(out, [a, b, out]() {
            const double* go = out.grad();
            const std::int64_t n = out.numel();
            if (a.requires_grad()) {
                double* ga = const_cast<Tensor&>(a).grad();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                double* gb = const_cast<Tensor&>(b).grad();
                for (std::int64_t i = 0; i < n; ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    NSI_DEBUG_CHECK_FINITE(out, "mul");
    if (out.requires_grad()) {
        g.record(out, [a, b, out]() {
            const double* go = out.grad();
            const std::int64_t n = out.numel();
            if (a.requires_grad()) {
                double* ga = const_cast<Tensor&>(a).grad();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                double* gb = const_cast<Tensor&>(b).grad();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += go[i] * a.data()[i];
            }
        });
    }
    return out;
}

Tensor scale(Graph& g, const Tensor& a, double c) {
    Tensor out = make_output(a.shape(), a.requires_grad());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    NSI_DEBUG_CHECK_FINITE(out, "scale");
    if (out.requires_grad()) {
        g.record(out, [a, out, c]() {
            const double* go = out.grad();
            double* ga = const_cast<Tensor&>(a).grad();
            const std::int64_t n = out.numel();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * c;
        });
    }
    return out;
}

Tensor log_op(Graph& g, const Tensor& a) {
    Tensor out = make_output(a.shape(), a.requires_grad());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::log(a.data()[i]);
    NSI_DEBUG_CHECK_FINITE(out, "log");
    if (out.requires_grad()) {
        g.record(out, [a, out]() {
            const double* go = out.grad();
            double* ga = const_cast<Tensor&>(a).grad();
            const std::int64_t n = out.numel();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] / a.data()[i];
        });
    }
    return out;
}

Tensor clamp_min(Graph& g, const Tensor& a, double floor) {
    Tensor out = make_output(a.shape(), a.requires_grad());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::max(a.data()[i], floor);
    if (out.requires_grad()) {
        g.record(out, [a, out, floor]() {
            const double* go = out.grad();
            double* ga = const_cast<Tensor&>(a).grad();
            const std::int64_t n = out.numel();
            for (std::int64_t i = 0; i < n; ++i)
                if (a.data()[i] > floor) ga[i] += go[i];
        });
    }
    return out;
}

Tensor sum(Graph& g, const Tensor& a) {
    double s = 0.0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) s += a.data()[i];
    Tensor out = Tensor::scalar(s);
    out.set_requires_grad(a.requires_grad());
    if (out.requires_grad()) {
        g.record(out, [a, out]() {
            const double go = out.grad()[0];
            double* ga = const_cast<Tensor&>(a).grad();
            const std::int64_t n = a.numel();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += go;
        });
    }
    return out;
}

Tensor sum_abs(Graph& g, const Tensor& a) {
    double s = 0.0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) s += std::abs(a.data()[i]);
    Tensor out = Tensor::scalar(s);
    out.set_requires_grad(a.requires_grad());
    if (out.requires_grad()) {
        g.record(out, [a, out]() {
            const double go = out.grad()[0];
            double* ga = const_cast<Tensor&>(a).grad();
            const std::int64_t n = a.numel();
            for (std::int64_t i = 0; i < n; ++i) {
                double x = a.data()[i];
                if (x > 0.0)
                    ga[i] += go;
                else if (x < 0.0)
                    ga[i] -= go;
            }
        });
    }
    return out;
}

Tensor sum_squares(Graph& g, const Tensor& a) {
    double s = 0.0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) s += a.data()[i] * a.data()[i];
    Tensor out = Tensor::scalar(s);
    out.set_requires_grad(a.requires_grad());
    if (out.requires_grad()) {
        g.record(out, [a, out]() {
            const double go = out.grad()[0];
            double* ga = const_cast<Tensor&>(a).grad();
            const std::int64_t n = a.numel();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += go * 2.0 * a.data()[i];
        });
    }
    return out;
}

namespace {

// Overflow-safe softplus: for large x, log(1+exp(x)) == x to double precision.
double softplus_val(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double softplus_grad(double x) { return x > 30.0 ? 1.0 : 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor pointwise(Graph& g, const Tensor& a, Activation fn) {
    if (fn == Activation::identity) return a;
    Tensor out = make_output(a.shape(), a.requires_grad());
    const std::int64_t n = a.numel();
    if (fn == Activation::relu) {
        for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::max(a.data()[i], 0.0);
    } else {
        for (std::int64_t i = 0; i < n; ++i) out.data()[i] = softplus_val(a.data()[i]);
    }
    NSI_DEBUG_CHECK_FINITE(out, "pointwise");
    if (out.requires_grad()) {
        g.record(out, [a, out, fn]() {
            const double* go = out.grad();
            double* ga = const_cast<Tensor&>(a).grad();
            const std::int64_t n = out.numel();
            if (fn == Activation::relu) {
                for (std::int64_t i = 0; i < n; ++i)
                    if (a.data()[i] > 0.0) ga[i] += go[i];
            } else {
                for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * softplus_grad(a.data()[i]);
            }
        });
    }
    return out;
}

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::softplus: return "softplus";
    }
    return "?";
}

Activation activation_from_name(const std::string& name) {
    if (name == "identity") return Activation::identity;
    if (name == "relu") return Activation::relu;
    if (name == "softplus") return Activation::softplus;
    throw config_error("unknown activation '" + name + "'");
}

}  // namespace nsi
