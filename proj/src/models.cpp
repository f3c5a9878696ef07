#include "nsi/models.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace nsi {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using json = nlohmann::json;

// ---- conv stack ---------------------------------------------------------------

Tensor ConvStack::forward(Graph& g, const Tensor& x, Mode mode) {
    Tensor h = x;
    for (std::size_t l = 0; l < kernels.size(); ++l) {
        h = conv2d(g, h, kernels[l]);
        h = batchnorm(g, h, norms[l], mode);
        h = pointwise(g, h, acts[l]);
    }
    return h;
}

void ConvStack::collect_trainable(std::vector<Tensor>& out) {
    if (!trainable) return;
    for (std::size_t l = 0; l < kernels.size(); ++l) {
        out.push_back(kernels[l]);
        out.push_back(norms[l].gamma);
        out.push_back(norms[l].beta);
    }
}

void ConvStack::collect_buffers(std::vector<Tensor>& out) {
    for (auto& bn : norms) {
        out.push_back(bn.running_mean);
        out.push_back(bn.running_var);
    }
}

std::int64_t ConvStack::footprint() const {
    std::int64_t f = 1;
    for (const auto& k : kernels) f += k.dim(2) - 1;
    return f;
}

ConvStack make_conv_stack(const std::vector<ConvLayerConfig>& layers, std::int64_t in_channels,
                          double init_sd, rng& gen) {
    if (layers.empty()) throw config_error("conv stack needs at least one layer");
    ConvStack stack;
    std::int64_t c = in_channels;
    for (const auto& cfg : layers) {
        stack.kernels.push_back(Tensor::randn({cfg.out_channels, c, cfg.kernel_size,
                                               cfg.kernel_size},
                                              gen, 0.0, init_sd, true));
        stack.norms.emplace_back(cfg.out_channels);
        stack.acts.push_back(cfg.act);
        c = cfg.out_channels;
    }
    return stack;
}

// ---- factorized model ------------------------------------------------------------

Tensor FactorizedModel::forward(Graph& g, const Tensor& stimuli, Mode mode) {
    Tensor c = conv.forward(g, stimuli, mode);
    Tensor out = readout_factorized(g, c, masks, feature_weights);
    if (output_bias.defined()) out = add_rowvec(g, out, output_bias);
    return pointwise(g, out, output_act);
}

Tensor FactorizedModel::penalty(Graph& g, const Tensor& pred, const PenaltyConfig& p) {
    (void)pred;
    Tensor total = Tensor::scalar(0.0);
    if (p.lambda_mask > 0.0) total = add(g, total, scale(g, sum_abs(g, masks), p.lambda_mask));
    if (p.lambda_weight > 0.0)
        total = add(g, total, scale(g, sum_abs(g, feature_weights), p.lambda_weight));
    if (p.lambda_laplace > 0.0)
        for (auto& k : conv.kernels)
            if (k.dim(2) >= 3 && k.dim(3) >= 3)
                total = add(g, total, laplace_penalty(g, k, p.lambda_laplace));
    if (p.lambda_group > 0.0)
        for (auto& k : conv.kernels)
            total = add(g, total, group_sparsity(g, k, p.lambda_group, p.group_axes));
    return total;
}

std::vector<Tensor> FactorizedModel::trainable() {
    std::vector<Tensor> out;
    conv.collect_trainable(out);
    if (masks_trainable) out.push_back(masks);
    if (weights_trainable) out.push_back(feature_weights);
    if (output_bias.defined()) out.push_back(output_bias);
    return out;
}

std::vector<Tensor> FactorizedModel::buffers() {
    std::vector<Tensor> out;
    conv.collect_buffers(out);
    return out;
}

std::unique_ptr<FactorizedModel> init_factorized(const FactorizedConfig& cfg,
                                                 std::int64_t n_neurons, std::int64_t stim_height,
                                                 std::int64_t stim_width, std::uint64_t seed,
                                                 const MaskInit* mask_init) {
    rng gen(mix_seed(seed, 0x50u));
    auto model = std::make_unique<FactorizedModel>();
    model->conv = make_conv_stack(cfg.layers, cfg.in_channels, cfg.kernel_init_sd, gen);
    const std::int64_t fp = model->conv.footprint();
    const std::int64_t gh = stim_height - fp + 1, gw = stim_width - fp + 1;
    if (gh < 1 || gw < 1)
        throw config_error("factorized model: receptive footprint " + std::to_string(fp) +
                           " exceeds stimulus " + std::to_string(stim_height) + "x" +
                           std::to_string(stim_width));
    const std::int64_t K = model->conv.out_channels();
    if (mask_init) {
        if (mask_init->masks.dim(0) != n_neurons || mask_init->masks.dim(1) != gh ||
            mask_init->masks.dim(2) != gw)
            throw config_error("factorized model: mask init shape " +
                               shape_str(mask_init->masks.shape()) + " vs expected [" +
                               std::to_string(n_neurons) + "," + std::to_string(gh) + "," +
                               std::to_string(gw) + "]");
        model->masks = mask_init->masks.clone();
        model->masks.set_requires_grad(true);
    } else {
        model->masks = Tensor::randn({n_neurons, gh, gw}, gen, 0.0, cfg.mask_init_sd, true);
    }
    model->feature_weights =
        Tensor::randn({n_neurons, K}, gen, 1.0 / double(K), cfg.weight_init_sd, true);
    model->output_act = cfg.output_act;
    if (cfg.output_bias) model->output_bias = Tensor::zeros({n_neurons}, true);
    return model;
}

// ---- spike-triggered averages -------------------------------------------------

Tensor spike_triggered_average(const Dataset& ds) {
    if (ds.train_idx.size() < 2)
        throw contract_error("spike_triggered_average: need >= 2 training samples");
    if (ds.stimuli.dim(1) != 1)
        throw contract_error("spike_triggered_average: expected single-channel stimuli");
    const std::int64_t N = ds.n_neurons();
    const std::int64_t H = ds.stimuli.dim(2), W = ds.stimuli.dim(3);
    const std::int64_t HW = H * W;
    const std::int64_t S = std::int64_t(ds.train_idx.size());

    Tensor sta({N, H, W});
    std::vector<double> denom(N, 0.0);
    // num = y^T * stimuli over the train split, as one GEMM
    MatRM y(S, N), x(S, HW);
    for (std::int64_t s = 0; s < S; ++s) {
        const std::int64_t idx = ds.train_idx[s];
        for (std::int64_t n = 0; n < N; ++n) {
            const double v = ds.responses.data()[idx * N + n];
            y(s, n) = v;
            denom[n] += std::abs(v);
        }
        std::copy(ds.stimuli.data() + idx * HW, ds.stimuli.data() + (idx + 1) * HW, x.data() + s * HW);
    }
    Eigen::Map<MatRM> sta_map(sta.data(), N, HW);
    sta_map.noalias() = y.transpose() * x;
    for (std::int64_t n = 0; n < N; ++n) {
        if (denom[n] == 0.0) {
            for (std::int64_t i = 0; i < HW; ++i) sta.data()[n * HW + i] = 0.0;
        } else {
            for (std::int64_t i = 0; i < HW; ++i) sta.data()[n * HW + i] /= denom[n];
        }
    }
    return sta;
}

namespace {

// Separable gaussian blur with zero padding; sigma <= 0 is the identity.
void gaussian_blur_inplace(std::vector<double>& plane, std::int64_t H, std::int64_t W,
                           double sigma) {
    if (sigma <= 0.0) return;
    const std::int64_t radius = std::int64_t(std::ceil(3.0 * sigma));
    std::vector<double> taps(2 * radius + 1);
    double s = 0.0;
    for (std::int64_t i = -radius; i <= radius; ++i) {
        taps[i + radius] = std::exp(-double(i * i) / (2.0 * sigma * sigma));
        s += taps[i + radius];
    }
    for (auto& t : taps) t /= s;
    std::vector<double> tmp(H * W, 0.0);
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
            double acc = 0.0;
            for (std::int64_t d = -radius; d <= radius; ++d) {
                const std::int64_t jj = j + d;
                if (jj >= 0 && jj < W) acc += plane[i * W + jj] * taps[d + radius];
            }
            tmp[i * W + j] = acc;
        }
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
            double acc = 0.0;
            for (std::int64_t d = -radius; d <= radius; ++d) {
                const std::int64_t ii = i + d;
                if (ii >= 0 && ii < H) acc += tmp[ii * W + j] * taps[d + radius];
            }
            plane[i * W + j] = acc;
        }
}

std::pair<std::int64_t, std::int64_t> argmax_2d(const double* p, std::int64_t H, std::int64_t W) {
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < H * W; ++i)
        if (p[i] > p[best]) best = i;
    return {best / W, best % W};
}

std::int64_t clamp_idx(std::int64_t v, std::int64_t hi) {
    return std::max<std::int64_t>(0, std::min(v, hi - 1));
}

}  // namespace

MaskInit init_masks_from_sta(const Dataset& ds, std::int64_t grid_height,
                             std::int64_t grid_width, double smoothing_sigma,
                             std::uint64_t seed) {
    const std::int64_t H = ds.stimuli.dim(2), W = ds.stimuli.dim(3);
    if (grid_height > H || grid_width > W)
        throw config_error("init_masks_from_sta: grid larger than stimulus");
    const std::int64_t fp_h = H - grid_height + 1;
    const std::int64_t fp_w = W - grid_width + 1;
    const std::int64_t N = ds.n_neurons();

    Tensor sta = spike_triggered_average(ds);
    rng gen(mix_seed(seed, 0x60u));
    MaskInit init;
    init.masks = Tensor::randn({N, grid_height, grid_width}, gen, 0.0, 0.001);
    std::vector<double> plane(H * W);

    // response std over the train split, per neuron
    const std::int64_t S = std::int64_t(ds.train_idx.size());
    std::vector<double> mean(N, 0.0), sd(N, 0.0);
    for (auto idx : ds.train_idx)
        for (std::int64_t n = 0; n < N; ++n) mean[n] += ds.responses.data()[idx * N + n];
    for (auto& m : mean) m /= double(S);
    for (auto idx : ds.train_idx)
        for (std::int64_t n = 0; n < N; ++n) {
            const double d = ds.responses.data()[idx * N + n] - mean[n];
            sd[n] += d * d;
        }
    for (auto& v : sd) v = std::sqrt(v / double(S));

    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t i = 0; i < H * W; ++i) plane[i] = std::abs(sta.data()[n * H * W + i]);
        gaussian_blur_inplace(plane, H, W, smoothing_sigma);
        auto [pi, pj] = argmax_2d(plane.data(), H, W);
        const std::int64_t r = clamp_idx(pi - fp_h / 2, grid_height);
        const std::int64_t c = clamp_idx(pj - fp_w / 2, grid_width);
        init.masks.data()[(n * grid_height + r) * grid_width + c] = sd[n];
        init.row.push_back(r);
        init.col.push_back(c);
    }
    return init;
}

void fix_masks_from_sta(FactorizedModel& model, const Dataset& ds) {
    const std::int64_t H = ds.stimuli.dim(2), W = ds.stimuli.dim(3);
    const std::int64_t gh = model.grid_height(), gw = model.grid_width();
    const std::int64_t fp_h = H - gh + 1, fp_w = W - gw + 1;
    const std::int64_t N = model.n_outputs();
    Tensor sta = spike_triggered_average(ds);
    std::vector<double> plane(H * W);
    model.masks.fill(0.0);
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t i = 0; i < H * W; ++i) plane[i] = std::abs(sta.data()[n * H * W + i]);
        auto [pi, pj] = argmax_2d(plane.data(), H, W);
        const std::int64_t r = clamp_idx(pi - fp_h / 2, gh);
        const std::int64_t c = clamp_idx(pj - fp_w / 2, gw);
        model.masks.data()[(n * gh + r) * gw + c] = 1.0;
    }
    model.masks_trainable = false;
    model.masks.set_requires_grad(false);
}

// ---- GLM ------------------------------------------------------------------------

Tensor GlmModel::forward(Graph& g, const Tensor& stimuli, Mode mode) {
    (void)mode;
    const std::int64_t B = stimuli.dim(0);
    const std::int64_t D = stimuli.numel() / B;
    if (D != weights.dim(1))
        throw dim_error("glm: stimulus pixels " + std::to_string(D) + " vs weight columns " +
                        std::to_string(weights.dim(1)));
    Tensor flat = stimuli.reshaped({B, D});
    Tensor z = add_rowvec(g, linear(g, flat, weights), bias_in);
    Tensor r = pointwise(g, z, act);
    if (act == Activation::relu) r = add_rowvec(g, r, bias_out);
    return r;
}

Tensor GlmModel::penalty(Graph& g, const Tensor& pred, const PenaltyConfig& p) {
    (void)pred;
    (void)p;
    if (lambda_ridge <= 0.0) return Tensor::scalar(0.0);
    return scale(g, sum_squares(g, weights), lambda_ridge);
}

std::vector<Tensor> GlmModel::trainable() {
    std::vector<Tensor> out{weights, bias_in};
    if (act == Activation::relu) out.push_back(bias_out);
    return out;
}

std::unique_ptr<GlmModel> init_glm(std::int64_t n_neurons, std::int64_t stim_pixels,
                                   Activation act, double lambda_ridge, std::uint64_t seed) {
    rng gen(mix_seed(seed, 0x70u));
    auto glm = std::make_unique<GlmModel>();
    glm->weights = Tensor::randn({n_neurons, stim_pixels}, gen, 0.0, 0.01, true);
    glm->bias_in = Tensor::zeros({n_neurons}, true);
    glm->bias_out = Tensor::zeros({n_neurons}, true);
    glm->act = act;
    glm->lambda_ridge = lambda_ridge;
    return glm;
}

// ---- fully-connected readout ------------------------------------------------------

Tensor FullyConnectedModel::forward(Graph& g, const Tensor& stimuli, Mode mode) {
    Tensor c = conv.forward(g, stimuli, mode);
    const std::int64_t B = c.dim(0);
    Tensor flat = c.reshaped({B, c.numel() / B});
    if (flat.dim(1) != readout.dim(1))
        throw config_error("fully_connected: feature size " + std::to_string(flat.dim(1)) +
                           " vs readout columns " + std::to_string(readout.dim(1)));
    return linear(g, flat, readout);
}

Tensor FullyConnectedModel::penalty(Graph& g, const Tensor& pred, const PenaltyConfig& p) {
    (void)p;
    Tensor total = Tensor::scalar(0.0);
    if (lambda_weight_decay > 0.0)
        total = add(g, total, scale(g, sum_squares(g, readout), lambda_weight_decay));
    if (lambda_activity > 0.0)
        total = add(g, total,
                    scale(g, sum_abs(g, pred), lambda_activity / double(pred.dim(0))));
    return total;
}

std::vector<Tensor> FullyConnectedModel::trainable() {
    std::vector<Tensor> out;
    conv.collect_trainable(out);
    out.push_back(readout);
    return out;
}

std::vector<Tensor> FullyConnectedModel::buffers() {
    std::vector<Tensor> out;
    conv.collect_buffers(out);
    return out;
}

std::unique_ptr<FullyConnectedModel> init_fully_connected(const FullyConnectedConfig& cfg,
                                                          std::int64_t n_neurons,
                                                          std::int64_t stim_height,
                                                          std::int64_t stim_width,
                                                          std::uint64_t seed) {
    rng gen(mix_seed(seed, 0x80u));
    auto model = std::make_unique<FullyConnectedModel>();
    model->conv = make_conv_stack(cfg.layers, cfg.in_channels, cfg.kernel_init_sd, gen);
    const std::int64_t fp = model->conv.footprint();
    const std::int64_t gh = stim_height - fp + 1, gw = stim_width - fp + 1;
    const std::int64_t K = model->conv.out_channels();
    const double entries = double(gh) * double(gw) * double(K) * double(n_neurons);
    if (entries > 1e8)
        throw config_error("fully_connected: readout tensor of " + std::to_string(std::int64_t(entries)) +
                           " entries exceeds the 1e8 capacity limit");
    model->readout = Tensor::randn({n_neurons, K * gh * gw}, gen, 0.0, cfg.readout_init_sd, true);
    model->lambda_weight_decay = cfg.lambda_weight_decay;
    model->lambda_activity = cfg.lambda_activity;
    return model;
}

// ---- checkpoints ---------------------------------------------------------------------

namespace {

void save_conv_stack(Container& c, const ConvStack& stack, json& arch) {
    arch["n_layers"] = stack.kernels.size();
    json acts = json::array(), bn_init = json::array();
    for (std::size_t l = 0; l < stack.kernels.size(); ++l) {
        c.add_tensor("conv.kernel." + std::to_string(l), stack.kernels[l]);
        c.add_tensor("conv.gamma." + std::to_string(l), stack.norms[l].gamma);
        c.add_tensor("conv.beta." + std::to_string(l), stack.norms[l].beta);
        c.add_tensor("conv.running_mean." + std::to_string(l), stack.norms[l].running_mean);
        c.add_tensor("conv.running_var." + std::to_string(l), stack.norms[l].running_var);
        acts.push_back(activation_name(stack.acts[l]));
        bn_init.push_back(stack.norms[l].initialized);
    }
    arch["activations"] = acts;
    arch["bn_initialized"] = bn_init;
    arch["conv_trainable"] = stack.trainable;
}

}  // namespace

namespace {

Tensor required_tensor(const Container& c, const std::string& name, bool requires_grad) {
    const Tensor* t = c.find_tensor(name);
    if (!t)
        throw format_error(format_error::kind::shape_inconsistent,
                           "checkpoint: missing tensor section '" + name + "'");
    Tensor out = t->clone();
    out.set_requires_grad(requires_grad);
    return out;
}

ConvStack load_conv_stack(const Container& c, const json& arch) {
    ConvStack stack;
    const std::size_t n_layers = arch.at("n_layers").get<std::size_t>();
    stack.trainable = arch.at("conv_trainable").get<bool>();
    for (std::size_t l = 0; l < n_layers; ++l) {
        const std::string suffix = "." + std::to_string(l);
        stack.kernels.push_back(required_tensor(c, "conv.kernel" + suffix, stack.trainable));
        BatchNorm bn(stack.kernels.back().dim(0));
        bn.gamma = required_tensor(c, "conv.gamma" + suffix, stack.trainable);
        bn.beta = required_tensor(c, "conv.beta" + suffix, stack.trainable);
        bn.running_mean = required_tensor(c, "conv.running_mean" + suffix, false);
        bn.running_var = required_tensor(c, "conv.running_var" + suffix, false);
        bn.initialized = arch.at("bn_initialized")[l].get<bool>();
        stack.norms.push_back(std::move(bn));
        stack.acts.push_back(activation_from_name(arch.at("activations")[l].get<std::string>()));
    }
    return stack;
}

}  // namespace

std::unique_ptr<Model> load_model(const std::string& path) {
    Container c = Container::load(path);
    const std::string* blob = c.find_blob("arch");
    if (!blob)
        throw format_error(format_error::kind::shape_inconsistent,
                           "checkpoint: missing arch descriptor in " + path);
    const json arch = json::parse(*blob);
    const std::string family = arch.at("family").get<std::string>();
    if (family == "factorized") {
        auto m = std::make_unique<FactorizedModel>();
        m->conv = load_conv_stack(c, arch);
        m->masks_trainable = arch.at("masks_trainable").get<bool>();
        m->weights_trainable = arch.at("weights_trainable").get<bool>();
        m->masks = required_tensor(c, "masks", m->masks_trainable);
        m->feature_weights = required_tensor(c, "feature_weights", m->weights_trainable);
        if (c.find_tensor("output_bias")) m->output_bias = required_tensor(c, "output_bias", true);
        m->output_act = activation_from_name(arch.at("output_act").get<std::string>());
        return m;
    }
    if (family == "glm") {
        auto m = std::make_unique<GlmModel>();
        m->weights = required_tensor(c, "weights", true);
        m->bias_in = required_tensor(c, "bias_in", true);
        m->bias_out = required_tensor(c, "bias_out", true);
        m->act = activation_from_name(arch.at("act").get<std::string>());
        m->lambda_ridge = arch.at("lambda_ridge").get<double>();
        return m;
    }
    if (family == "fully_connected") {
        auto m = std::make_unique<FullyConnectedModel>();
        m->conv = load_conv_stack(c, arch);
        m->readout = required_tensor(c, "readout", true);
        m->lambda_weight_decay = arch.at("lambda_weight_decay").get<double>();
        m->lambda_activity = arch.at("lambda_activity").get<double>();
        return m;
    }
    throw format_error(format_error::kind::shape_inconsistent,
                       "checkpoint: unknown model family '" + family + "'");
}

void save_model(const Model& model, const std::string& path) {
    Container c;
    json arch;
    arch["family"] = model.family();
    auto& m = const_cast<Model&>(model);
    if (auto* f = dynamic_cast<FactorizedModel*>(&m)) {
        save_conv_stack(c, f->conv, arch);
        c.add_tensor("masks", f->masks);
        c.add_tensor("feature_weights", f->feature_weights);
        if (f->output_bias.defined()) c.add_tensor("output_bias", f->output_bias);
        arch["output_act"] = activation_name(f->output_act);
        arch["masks_trainable"] = f->masks_trainable;
        arch["weights_trainable"] = f->weights_trainable;
    } else if (auto* glm = dynamic_cast<GlmModel*>(&m)) {
        c.add_tensor("weights", glm->weights);
        c.add_tensor("bias_in", glm->bias_in);
        c.add_tensor("bias_out", glm->bias_out);
        arch["act"] = activation_name(glm->act);
        arch["lambda_ridge"] = glm->lambda_ridge;
    } else if (auto* fc = dynamic_cast<FullyConnectedModel*>(&m)) {
        save_conv_stack(c, fc->conv, arch);
        c.add_tensor("readout", fc->readout);
        arch["lambda_weight_decay"] = fc->lambda_weight_decay;
        arch["lambda_activity"] = fc->lambda_activity;
    } else {
        throw contract_error("save_model: unknown model family " + model.family());
    }
    c.add_blob("arch", arch.dump());
    c.save(path);
}

}  // namespace nsi
