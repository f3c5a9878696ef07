#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nsi/errors.hpp"
#include "nsi/rng.hpp"

namespace nsi {

using shape_t = std::vector<std::int64_t>;

std::string shape_str(const shape_t& s);

// Dense n-dimensional f64 array, row-major. Copies share storage (clone()
// deep-copies). A tensor with requires_grad carries a same-shaped grad
// buffer that backward passes accumulate into.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(shape_t shape, bool requires_grad = false);
    Tensor(shape_t shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(shape_t shape, bool requires_grad = false);
    static Tensor full(shape_t shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(shape_t shape, rng& gen, double mean = 0.0, double stddev = 1.0,
                        bool requires_grad = false);

    const shape_t& shape() const { return shape_; }
    std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const;
    bool defined() const { return data_ != nullptr; }
    bool is_scalar() const { return numel() == 1; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool flag);

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double* grad();              // throws if no grad buffer
    const double* grad() const;  // throws if no grad buffer
    bool has_grad() const { return grad_ != nullptr; }

    std::vector<double>& storage() { return *data_; }
    const std::vector<double>& storage() const { return *data_; }

    double value() const;  // scalar tensors only
    double at(std::initializer_list<std::int64_t> idx) const;

    Tensor clone() const;                   // deep copy of data (grad not copied)
    Tensor reshaped(shape_t new_shape) const;  // shares storage
    void fill(double v);
    void zero_grad();
    void copy_data_from(const Tensor& other);

    // True when the two tensors alias the same storage.
    bool same_storage(const Tensor& other) const { return data_ == other.data_; }

private:
    shape_t shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<std::vector<double>> grad_;
    bool requires_grad_ = false;
};

// Throws numeric_error if t holds NaN/Inf. Enabled per-op in debug builds.
void check_finite(const Tensor& t, const char* what);

#if !defined(NDEBUG) || defined(NSI_CHECK_FINITE)
#define NSI_DEBUG_CHECK_FINITE(t, what) ::nsi::check_finite((t), (what))
#else
#define NSI_DEBUG_CHECK_FINITE(t, what) ((void)0)
#endif

// Recorded tape of operations. Ops append nodes in execution order, which
// is already topological; backward() replays them once in reverse.
class Graph {
public:
    struct Node {
        Tensor output;
        std::function<void()> backward;
    };

    void record(Tensor output, std::function<void()> backward);
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // requires_grad tensor reachable from loss. Repeated calls accumulate
    // additively on leaves; intermediate grads are reset each call.
    void backward(const Tensor& loss);

private:
    std::vector<Node> nodes_;
};

// ---- elementwise / reduction ops ------------------------------------------

Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& a, double c);
Tensor log_op(Graph& g, const Tensor& a);
Tensor clamp_min(Graph& g, const Tensor& a, double floor);
Tensor sum(Graph& g, const Tensor& a);          // -> scalar
Tensor sum_abs(Graph& g, const Tensor& a);      // -> scalar, subgradient 0 at 0
Tensor sum_squares(Graph& g, const Tensor& a);  // -> scalar

enum class Activation { identity, relu, softplus };
Tensor pointwise(Graph& g, const Tensor& a, Activation fn);
const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

// out[b,n] = sum_d x[b,d] * w[n,d]   (x: [B,D], w: [N,D])
Tensor linear(Graph& g, const Tensor& x, const Tensor& w);

// Broadcasting add of a length-N row vector onto a [B,N] matrix.
Tensor add_rowvec(Graph& g, const Tensor& x, const Tensor& v);

}  // namespace nsi
