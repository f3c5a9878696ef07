#pragma once

#include <string>
#include <vector>

#include "nsi/dataset.hpp"
#include "nsi/tensor.hpp"

namespace nsi {

// Center-surround difference-of-Gaussians kernel parameters (pixels).
struct DoGParams {
    double center_sigma = 2.0;
    double surround_sigma = 4.0;
    double surround_gain = 1.0;
    std::int64_t kernel_size = 17;
};

// Unit-sum Gaussians differenced, then L2-normalized. [size, size]
Tensor make_dog_kernel(const DoGParams& p);

// i.i.d. standard-normal pixels. [count, 1, H, W]
Tensor gaussian_white_stimuli(std::int64_t count, std::int64_t height, std::int64_t width,
                              std::uint64_t seed);

enum class PopulationKind { linear, teacher_cnn };

// Generative description of a simulated population. Linear populations hold
// one kernel per neuron; teacher populations hold two frozen conv layers and
// a (channel, location) per neuron.
struct PopulationSpec {
    PopulationKind kind = PopulationKind::linear;
    std::int64_t n_neurons = 0;
    std::int64_t n_types = 1;
    std::int64_t stim_height = 48, stim_width = 48;
    Tensor kernels;  // linear: [N, kh, kw], unit L2 norm each
    Tensor teacher_w1;  // [16, 1, 5, 5]
    Tensor teacher_w2;  // [C2, 16, 9, 9]
    Tensor teacher_b1;  // [16], pre-ReLU bias
    Tensor teacher_b2;  // [C2]
    std::vector<std::int64_t> teacher_channel;      // per neuron
    std::vector<std::int64_t> loc_row, loc_col;     // per neuron, output-grid coords
    std::vector<int> type_ids;                      // per neuron, in [0, n_types)
    double output_scale = 1.0;
    std::uint64_t seed = 0;

    // Extent of one receptive field in stimulus pixels.
    std::int64_t footprint() const;
    std::int64_t grid_height() const { return stim_height - footprint() + 1; }
    std::int64_t grid_width() const { return stim_width - footprint() + 1; }
    void validate() const;
};

// All neurons share one DoG kernel at uniformly random grid locations.
PopulationSpec make_homogeneous_population(std::int64_t n_neurons, const DoGParams& dog,
                                           std::int64_t stim_height, std::int64_t stim_width,
                                           std::uint64_t seed);

struct TwoTypeParams {
    double mean_sigma0 = 1.5, sd_sigma0 = 0.15;
    double mean_sigma1 = 3.0, sd_sigma1 = 0.3;
};

// Two DoG cell types differing in average size: center sigma ~ N(1.5, 0.15^2)
// vs N(3.0, 0.3^2), surround sigma = 2 * center sigma.
PopulationSpec build_two_type_population(std::int64_t n_per_type, std::int64_t stim_height,
                                         std::int64_t stim_width, std::uint64_t seed,
                                         const TwoTypeParams& params = {});

// Frozen random two-layer ReLU CNN (16 then max(n_types,16) channels, 5x5 and
// 9x9 kernels, He-initialized weights); one output channel per cell type.
// Negative pre-ReLU biases (half the per-channel pre-activation std, measured
// on an internal probe batch) keep the population decisively nonlinear.
PopulationSpec build_teacher_cnn(std::int64_t n_types, std::int64_t units_per_type,
                                 std::int64_t stim_height, std::int64_t stim_width,
                                 std::uint64_t seed);

// Noiseless rates [S, N] for either population kind (output_scale applied).
Tensor simulate_rates(const PopulationSpec& spec, const Tensor& stimuli);

// Sets spec.output_scale so that mean |rate| over stimuli and neurons hits
// target_mean_abs. Returns the scale. Needs >= 1000 calibration stimuli.
double calibrate_scale(PopulationSpec& spec, const Tensor& stimuli,
                       double target_mean_abs = 0.1);

// y = r + sqrt(|r|) * eps, eps ~ N(0,1): Gaussian noise with variance |r|.
Tensor add_poisson_like_noise(const Tensor& rates, std::uint64_t seed);

struct StimulusSource {
    enum class Kind { gaussian_white, pink_noise, image_dir } kind = Kind::gaussian_white;
    std::string path;  // image_dir only

    static StimulusSource white() { return {Kind::gaussian_white, {}}; }
    static StimulusSource pink() { return {Kind::pink_noise, {}}; }
    static StimulusSource images(std::string dir) { return {Kind::image_dir, std::move(dir)}; }
};

// 1/f-amplitude Gaussian fields or random PGM crops, standardized to zero
// mean / unit variance per patch. [count, 1, H, W]
Tensor natural_like_stimuli(std::int64_t count, std::int64_t height, std::int64_t width,
                            std::uint64_t seed, const StimulusSource& source);

Tensor make_stimuli(std::int64_t count, std::int64_t height, std::int64_t width,
                    std::uint64_t seed, const StimulusSource& source);

// Binary 8-bit PGM (P5). [H, W] with values in [0, 255].
Tensor load_pgm(const std::string& path);

// Full synthetic dataset: train + test stimuli, calibrated rates, noisy
// responses, optional repeated test presentations.
Dataset build_dataset(PopulationSpec& spec, const StimulusSource& source,
                      std::int64_t n_train, std::int64_t n_test, std::uint64_t seed,
                      std::int64_t n_repeats = 0);

}  // namespace nsi
