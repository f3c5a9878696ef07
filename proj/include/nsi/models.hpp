#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nsi/dataset.hpp"
#include "nsi/nn.hpp"

namespace nsi {

// Regularization strengths applied by the training loss.
struct PenaltyConfig {
    double lambda_mask = 0.0;      // L1 on spatial masks
    double lambda_weight = 0.0;    // L1 on feature weights
    double lambda_laplace = 0.0;   // L2 on kernel Laplacians
    double lambda_group = 0.0;     // group sparsity on kernels
    GroupAxes group_axes = GroupAxes::spatial;
};

// Common surface for everything the trainer can fit.
class Model {
public:
    virtual ~Model() = default;
    virtual Tensor forward(Graph& g, const Tensor& stimuli, Mode mode) = 0;
    // Scalar penalty term added to the data loss. `pred` is passed for
    // activity penalties; B is the batch size that normalized the data term.
    virtual Tensor penalty(Graph& g, const Tensor& pred, const PenaltyConfig& p) = 0;
    virtual std::vector<Tensor> trainable() = 0;
    virtual std::vector<Tensor> buffers() = 0;
    virtual std::int64_t n_outputs() const = 0;
    virtual std::string family() const = 0;
};

// ---- shared convolutional feature space -------------------------------------

struct ConvLayerConfig {
    std::int64_t out_channels = 1;
    std::int64_t kernel_size = 17;
    Activation act = Activation::identity;
};

// Conv -> batchnorm -> activation blocks over a [B,C,H,W] stimulus.
struct ConvStack {
    std::vector<Tensor> kernels;  // each [O,C,kh,kw]
    std::vector<BatchNorm> norms;
    std::vector<Activation> acts;
    bool trainable = true;

    Tensor forward(Graph& g, const Tensor& x, Mode mode);
    void collect_trainable(std::vector<Tensor>& out);
    void collect_buffers(std::vector<Tensor>& out);
    std::int64_t out_channels() const { return kernels.back().dim(0); }
    // Receptive footprint in stimulus pixels: sum of (k-1) + 1.
    std::int64_t footprint() const;
};

ConvStack make_conv_stack(const std::vector<ConvLayerConfig>& layers, std::int64_t in_channels,
                          double init_sd, rng& gen);

// ---- factorized readout model (the architecture under study) ----------------

class FactorizedModel final : public Model {
public:
    ConvStack conv;
    Tensor masks;            // [N, Ho, Wo]
    Tensor feature_weights;  // [N, K]
    Tensor output_bias;      // [N]; undefined when the recipe has no bias
    Activation output_act = Activation::identity;
    bool masks_trainable = true;
    bool weights_trainable = true;

    Tensor forward(Graph& g, const Tensor& stimuli, Mode mode) override;
    Tensor penalty(Graph& g, const Tensor& pred, const PenaltyConfig& p) override;
    std::vector<Tensor> trainable() override;
    std::vector<Tensor> buffers() override;
    std::int64_t n_outputs() const override { return masks.dim(0); }
    std::string family() const override { return "factorized"; }

    std::int64_t grid_height() const { return masks.dim(1); }
    std::int64_t grid_width() const { return masks.dim(2); }
};

struct FactorizedConfig {
    std::vector<ConvLayerConfig> layers;
    std::int64_t in_channels = 1;
    double kernel_init_sd = 0.01;   // N(0, 0.01)
    double weight_init_sd = 0.01;   // N(1/K, 0.01)
    double mask_init_sd = 0.001;    // N(0, 0.001)
    Activation output_act = Activation::identity;
    bool output_bias = false;
};

// STA-based mask initialization: peak pixel at the mapped argmax of the
// smoothed |STA|, set to the response std, rest ~ N(0, mask_init_sd).
struct MaskInit {
    Tensor masks;  // [N, Ho, Wo]
    std::vector<std::int64_t> row, col;
};

std::unique_ptr<FactorizedModel> init_factorized(const FactorizedConfig& cfg,
                                                 std::int64_t n_neurons, std::int64_t stim_height,
                                                 std::int64_t stim_width, std::uint64_t seed,
                                                 const MaskInit* mask_init = nullptr);

// ---- STA -------------------------------------------------------------------

// STA[n] = sum_s y[s,n] * stimulus[s] / sum_s |y[s,n]| over the train split.
Tensor spike_triggered_average(const Dataset& ds);

MaskInit init_masks_from_sta(const Dataset& ds, std::int64_t grid_height,
                             std::int64_t grid_width, double smoothing_sigma,
                             std::uint64_t seed);

// One-hot masks at the (unsmoothed) |STA| argmax; masks leave the trainable
// set, only kernels and feature weights keep training.
void fix_masks_from_sta(FactorizedModel& model, const Dataset& ds);

// ---- GLM baseline ------------------------------------------------------------

// relu variant: r = relu(w.s + b_in) + b_out; softplus variant: softplus(w.s + b_in).
class GlmModel final : public Model {
public:
    Tensor weights;   // [N, D], full-field
    Tensor bias_in;   // [N]
    Tensor bias_out;  // [N], relu variant only
    Activation act = Activation::relu;
    double lambda_ridge = 0.0;

    Tensor forward(Graph& g, const Tensor& stimuli, Mode mode) override;
    Tensor penalty(Graph& g, const Tensor& pred, const PenaltyConfig& p) override;
    std::vector<Tensor> trainable() override;
    std::vector<Tensor> buffers() override { return {}; }
    std::int64_t n_outputs() const override { return weights.dim(0); }
    std::string family() const override { return "glm"; }
};

std::unique_ptr<GlmModel> init_glm(std::int64_t n_neurons, std::int64_t stim_pixels,
                                   Activation act, double lambda_ridge, std::uint64_t seed);

// ---- fully-connected readout baseline ----------------------------------------

class FullyConnectedModel final : public Model {
public:
    ConvStack conv;
    Tensor readout;  // [N, K * Ho * Wo]
    double lambda_weight_decay = 0.0;
    double lambda_activity = 0.0;

    Tensor forward(Graph& g, const Tensor& stimuli, Mode mode) override;
    Tensor penalty(Graph& g, const Tensor& pred, const PenaltyConfig& p) override;
    std::vector<Tensor> trainable() override;
    std::vector<Tensor> buffers() override;
    std::int64_t n_outputs() const override { return readout.dim(0); }
    std::string family() const override { return "fully_connected"; }
};

struct FullyConnectedConfig {
    std::vector<ConvLayerConfig> layers;
    std::int64_t in_channels = 1;
    double kernel_init_sd = 0.01;
    double readout_init_sd = 0.01;
    double lambda_weight_decay = 0.0;
    double lambda_activity = 0.0;
};

// Throws a capacity error when readout entries Ho*Wo*K*N exceed 1e8.
std::unique_ptr<FullyConnectedModel> init_fully_connected(const FullyConnectedConfig& cfg,
                                                          std::int64_t n_neurons,
                                                          std::int64_t stim_height,
                                                          std::int64_t stim_width,
                                                          std::uint64_t seed);

// ---- checkpoints ---------------------------------------------------------------

void save_model(const Model& model, const std::string& path);
std::unique_ptr<Model> load_model(const std::string& path);

}  // namespace nsi
