#include "nsi/groundtruth.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>

#include "nsi/nn.hpp"

namespace nsi {

// ---- DoG kernels -------------------------------------------------------------

Tensor make_dog_kernel(const DoGParams& p) {
    if (p.kernel_size < 3 || p.kernel_size % 2 == 0)
        throw contract_error("make_dog_kernel: kernel_size must be odd and >= 3, got " +
                             std::to_string(p.kernel_size));
    if (!(p.center_sigma > 0.0) || !(p.surround_sigma > p.center_sigma))
        throw contract_error("make_dog_kernel: need surround_sigma > center_sigma > 0");
    const std::int64_t k = p.kernel_size;
    const double c = double(k - 1) / 2.0;
    auto gaussian = [&](double sigma) {
        Tensor g({k, k});
        double s = 0.0;
        for (std::int64_t i = 0; i < k; ++i)
            for (std::int64_t j = 0; j < k; ++j) {
                const double r2 = (i - c) * (i - c) + (j - c) * (j - c);
                const double v = std::exp(-r2 / (2.0 * sigma * sigma));
                g.data()[i * k + j] = v;
                s += v;
            }
        for (auto& v : g.storage()) v /= s;
        return g;
    };
    Tensor center = gaussian(p.center_sigma);
    Tensor surround = gaussian(p.surround_sigma);
    Tensor dog({k, k});
    double norm2 = 0.0;
    for (std::int64_t i = 0; i < k * k; ++i) {
        dog.data()[i] = center.data()[i] - p.surround_gain * surround.data()[i];
        norm2 += dog.data()[i] * dog.data()[i];
    }
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) throw contract_error("make_dog_kernel: degenerate zero kernel");
    for (auto& v : dog.storage()) v /= norm;
    return dog;
}

// ---- stimulus generators -------------------------------------------------------

Tensor gaussian_white_stimuli(std::int64_t count, std::int64_t height, std::int64_t width,
                              std::uint64_t seed) {
    if (count < 1) throw contract_error("gaussian_white_stimuli: count must be >= 1");
    rng gen(mix_seed(seed, 0x57u));
    return Tensor::randn({count, 1, height, width}, gen);
}

namespace {

// Naive O(n^2) DFT along one axis; fine for desk-scale patches.
struct DftPlan {
    std::int64_t n;
    std::vector<std::complex<double>> twiddle;  // exp(-2pi i jk / n)
    explicit DftPlan(std::int64_t n_) : n(n_), twiddle(n_ * n_) {
        for (std::int64_t j = 0; j < n; ++j)
            for (std::int64_t k = 0; k < n; ++k) {
                const double a = -2.0 * M_PI * double(j * k % n) / double(n);
                twiddle[j * n + k] = {std::cos(a), std::sin(a)};
            }
    }
    void forward(const std::complex<double>* in, std::complex<double>* out,
                 std::int64_t stride) const {
        for (std::int64_t j = 0; j < n; ++j) {
            std::complex<double> s = 0.0;
            for (std::int64_t k = 0; k < n; ++k) s += twiddle[j * n + k] * in[k * stride];
            out[j * stride] = s;
        }
    }
    void inverse(const std::complex<double>* in, std::complex<double>* out,
                 std::int64_t stride) const {
        for (std::int64_t j = 0; j < n; ++j) {
            std::complex<double> s = 0.0;
            for (std::int64_t k = 0; k < n; ++k)
                s += std::conj(twiddle[j * n + k]) * in[k * stride];
            out[j * stride] = s / double(n);
        }
    }
};

void standardize_patch(double* p, std::int64_t n) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < n; ++i) mean += p[i];
    mean /= double(n);
    double var = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        p[i] -= mean;
        var += p[i] * p[i];
    }
    var /= double(n);
    const double inv = 1.0 / std::sqrt(var);
    for (std::int64_t i = 0; i < n; ++i) p[i] *= inv;
}

Tensor pink_noise_stimuli(std::int64_t count, std::int64_t H, std::int64_t W,
                          std::uint64_t seed) {
    rng gen(mix_seed(seed, 0x91u));
    DftPlan row_plan(W), col_plan(H);
    // 1/f amplitude over signed frequency pairs; DC removed
    std::vector<double> amp(H * W);
    for (std::int64_t u = 0; u < H; ++u)
        for (std::int64_t v = 0; v < W; ++v) {
            const double fu = double(u <= H / 2 ? u : u - H) / double(H);
            const double fv = double(v <= W / 2 ? v : v - W) / double(W);
            const double f = std::sqrt(fu * fu + fv * fv);
            amp[u * W + v] = f > 0.0 ? 1.0 / f : 0.0;
        }
    Tensor out({count, 1, H, W});
    std::vector<std::complex<double>> field(H * W), tmp(H * W);
    for (std::int64_t s = 0; s < count; ++s) {
        for (auto& z : field) z = {gen.gaussian(), 0.0};
        for (std::int64_t i = 0; i < H; ++i) row_plan.forward(&field[i * W], &tmp[i * W], 1);
        for (std::int64_t j = 0; j < W; ++j) col_plan.forward(&tmp[j], &field[j], W);
        for (std::int64_t i = 0; i < H * W; ++i) field[i] *= amp[i];
        for (std::int64_t j = 0; j < W; ++j) col_plan.inverse(&field[j], &tmp[j], W);
        for (std::int64_t i = 0; i < H; ++i) row_plan.inverse(&tmp[i * W], &field[i * W], 1);
        double* dst = out.data() + s * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) dst[i] = field[i].real();
        standardize_patch(dst, H * W);
    }
    return out;
}

Tensor image_dir_stimuli(std::int64_t count, std::int64_t H, std::int64_t W, std::uint64_t seed,
                         const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    if (!fs::is_directory(dir))
        throw contract_error("image_dir: '" + dir + "' is not a directory");
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".pgm")
            files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    std::vector<Tensor> images;
    std::string rejected;
    for (const auto& f : files) {
        try {
            Tensor img = load_pgm(f);
            if (img.dim(0) < H || img.dim(1) < W)
                throw contract_error("smaller than patch");
            images.push_back(std::move(img));
        } catch (const error& e) {
            rejected += "\n  " + f + ": " + e.what();
        }
    }
    if (images.empty())
        throw contract_error("image_dir: no usable grayscale images in '" + dir + "'" + rejected);

    rng gen(mix_seed(seed, 0xA3u));
    Tensor out({count, 1, H, W});
    for (std::int64_t s = 0; s < count; ++s) {
        bool ok = false;
        for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
            const Tensor& img = images[gen.below(images.size())];
            const std::int64_t r0 = std::int64_t(gen.below(std::uint64_t(img.dim(0) - H + 1)));
            const std::int64_t c0 = std::int64_t(gen.below(std::uint64_t(img.dim(1) - W + 1)));
            double* dst = out.data() + s * H * W;
            double mean = 0.0, m2 = 0.0;
            for (std::int64_t i = 0; i < H; ++i)
                for (std::int64_t j = 0; j < W; ++j) {
                    const double v = img.at({r0 + i, c0 + j});
                    dst[i * W + j] = v;
                    mean += v;
                    m2 += v * v;
                }
            mean /= double(H * W);
            const double var = m2 / double(H * W) - mean * mean;
            if (var > 1e-9) {  // reject constant crops
                standardize_patch(dst, H * W);
                ok = true;
            }
        }
        if (!ok)
            throw contract_error("image_dir: could not find a non-constant crop in '" + dir +
                                 "' (images appear constant)");
    }
    return out;
}

}  // namespace

Tensor natural_like_stimuli(std::int64_t count, std::int64_t height, std::int64_t width,
                            std::uint64_t seed, const StimulusSource& source) {
    switch (source.kind) {
        case StimulusSource::Kind::pink_noise:
            return pink_noise_stimuli(count, height, width, seed);
        case StimulusSource::Kind::image_dir:
            return image_dir_stimuli(count, height, width, seed, source.path);
        default:
            throw contract_error("natural_like_stimuli: source must be pink_noise or image_dir");
    }
}

Tensor make_stimuli(std::int64_t count, std::int64_t height, std::int64_t width,
                    std::uint64_t seed, const StimulusSource& source) {
    if (source.kind == StimulusSource::Kind::gaussian_white)
        return gaussian_white_stimuli(count, height, width, seed);
    return natural_like_stimuli(count, height, width, seed, source);
}

Tensor load_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error(format_error::kind::io, "pgm: cannot open " + path);
    auto next_token = [&]() {
        std::string tok;
        int ch;
        while ((ch = is.get()) != EOF) {
            if (ch == '#') {  // comment to end of line
                while ((ch = is.get()) != EOF && ch != '\n') {}
                continue;
            }
            if (std::isspace(ch)) {
                if (!tok.empty()) break;
                continue;
            }
            tok.push_back(char(ch));
        }
        return tok;
    };
    if (next_token() != "P5")
        throw format_error(format_error::kind::bad_magic, "pgm: not binary P5: " + path);
    const std::int64_t w = std::stoll(next_token());
    const std::int64_t h = std::stoll(next_token());
    const std::int64_t maxval = std::stoll(next_token());
    if (maxval <= 0 || maxval > 255)
        throw format_error(format_error::kind::shape_inconsistent,
                           "pgm: only 8-bit grayscale supported: " + path);
    std::vector<unsigned char> buf(h * w);
    if (!is.read(reinterpret_cast<char*>(buf.data()), h * w))
        throw format_error(format_error::kind::truncated, "pgm: truncated pixel data: " + path);
    Tensor img({h, w});
    for (std::int64_t i = 0; i < h * w; ++i) img.data()[i] = double(buf[i]);
    return img;
}

// ---- populations ---------------------------------------------------------------

namespace {
void add_channel_bias(Tensor& x, const Tensor& bias);
std::vector<double> channel_std(const Tensor& x);
}  // namespace

std::int64_t PopulationSpec::footprint() const {
    if (kind == PopulationKind::linear) return kernels.defined() ? kernels.dim(1) : 0;
    return (teacher_w1.dim(2) - 1) + (teacher_w2.dim(2) - 1) + 1;
}

void PopulationSpec::validate() const {
    if (n_neurons <= 0) throw contract_error("population: n_neurons must be positive");
    if (!(output_scale > 0.0)) throw contract_error("population: output_scale must be > 0");
    const std::int64_t gh = grid_height(), gw = grid_width();
    for (std::int64_t n = 0; n < n_neurons; ++n) {
        if (loc_row[n] < 0 || loc_row[n] >= gh || loc_col[n] < 0 || loc_col[n] >= gw)
            throw contract_error("population: neuron " + std::to_string(n) + " located at (" +
                                 std::to_string(loc_row[n]) + "," + std::to_string(loc_col[n]) +
                                 ") outside the valid " + std::to_string(gh) + "x" +
                                 std::to_string(gw) + " grid");
        if (type_ids[n] < 0 || type_ids[n] >= n_types)
            throw contract_error("population: type id out of range");
    }
}

PopulationSpec make_homogeneous_population(std::int64_t n_neurons, const DoGParams& dog,
                                           std::int64_t stim_height, std::int64_t stim_width,
                                           std::uint64_t seed) {
    PopulationSpec spec;
    spec.kind = PopulationKind::linear;
    spec.n_neurons = n_neurons;
    spec.n_types = 1;
    spec.stim_height = stim_height;
    spec.stim_width = stim_width;
    spec.seed = seed;
    Tensor kernel = make_dog_kernel(dog);
    const std::int64_t k = dog.kernel_size;
    spec.kernels = Tensor({n_neurons, k, k});
    for (std::int64_t n = 0; n < n_neurons; ++n)
        std::copy(kernel.data(), kernel.data() + k * k, spec.kernels.data() + n * k * k);
    rng gen(mix_seed(seed, 0x10u));
    const std::int64_t gh = stim_height - k + 1, gw = stim_width - k + 1;
    for (std::int64_t n = 0; n < n_neurons; ++n) {
        spec.loc_row.push_back(std::int64_t(gen.below(std::uint64_t(gh))));
        spec.loc_col.push_back(std::int64_t(gen.below(std::uint64_t(gw))));
        spec.type_ids.push_back(0);
    }
    spec.validate();
    return spec;
}

PopulationSpec build_two_type_population(std::int64_t n_per_type, std::int64_t stim_height,
                                         std::int64_t stim_width, std::uint64_t seed,
                                         const TwoTypeParams& params) {
    if (n_per_type < 1) throw contract_error("build_two_type_population: n_per_type >= 1");
    PopulationSpec spec;
    spec.kind = PopulationKind::linear;
    spec.n_neurons = 2 * n_per_type;
    spec.n_types = 2;
    spec.stim_height = stim_height;
    spec.stim_width = stim_width;
    spec.seed = seed;
    const std::int64_t k = 17;
    spec.kernels = Tensor({spec.n_neurons, k, k});
    rng gen(mix_seed(seed, 0x20u));
    const std::int64_t gh = stim_height - k + 1, gw = stim_width - k + 1;
    for (std::int64_t n = 0; n < spec.n_neurons; ++n) {
        const int type = n < n_per_type ? 0 : 1;
        const double mean_sigma = type == 0 ? params.mean_sigma0 : params.mean_sigma1;
        const double sd_sigma = type == 0 ? params.sd_sigma0 : params.sd_sigma1;
        DoGParams p;
        p.center_sigma = std::max(gen.gaussian(mean_sigma, sd_sigma), 0.1);
        p.surround_sigma = 2.0 * p.center_sigma;
        p.surround_gain = 1.0;
        p.kernel_size = k;
        Tensor kern = make_dog_kernel(p);
        std::copy(kern.data(), kern.data() + k * k, spec.kernels.data() + n * k * k);
        spec.loc_row.push_back(std::int64_t(gen.below(std::uint64_t(gh))));
        spec.loc_col.push_back(std::int64_t(gen.below(std::uint64_t(gw))));
        spec.type_ids.push_back(type);
    }
    spec.validate();
    return spec;
}

PopulationSpec build_teacher_cnn(std::int64_t n_types, std::int64_t units_per_type,
                                 std::int64_t stim_height, std::int64_t stim_width,
                                 std::uint64_t seed) {
    if (n_types < 1) throw contract_error("build_teacher_cnn: n_types >= 1");
    PopulationSpec spec;
    spec.kind = PopulationKind::teacher_cnn;
    spec.n_neurons = n_types * units_per_type;
    spec.n_types = n_types;
    spec.stim_height = stim_height;
    spec.stim_width = stim_width;
    spec.seed = seed;
    const std::int64_t c1 = 16;
    const std::int64_t c2 = std::max<std::int64_t>(n_types, 16);
    rng gen(mix_seed(seed, 0x30u));
    // He initialization: variance 2 / fan_in
    spec.teacher_w1 = Tensor::randn({c1, 1, 5, 5}, gen, 0.0, std::sqrt(2.0 / 25.0));
    spec.teacher_w2 = Tensor::randn({c2, c1, 9, 9}, gen, 0.0, std::sqrt(2.0 / (c1 * 81.0)));
    const std::int64_t gh = spec.grid_height(), gw = spec.grid_width();
    if (gh < 8 || gw < 8)
        throw contract_error("build_teacher_cnn: stimulus too small, output grid " +
                             std::to_string(gh) + "x" + std::to_string(gw) + " < 8x8");

    // negative biases at half the pre-activation spread sparsify the code;
    // sized on an internal probe so the builder stays pure in its seed
    {
        Tensor probe = pink_noise_stimuli(256, stim_height, stim_width, mix_seed(seed, 0x31u));
        Graph g;
        Tensor z1 = conv2d(g, probe, spec.teacher_w1);
        std::vector<double> s1 = channel_std(z1);
        spec.teacher_b1 = Tensor({c1});
        for (std::int64_t c = 0; c < c1; ++c) spec.teacher_b1.data()[c] = -0.5 * s1[c];
        add_channel_bias(z1, spec.teacher_b1);
        Tensor a1 = pointwise(g, z1, Activation::relu);
        Tensor z2 = conv2d(g, a1, spec.teacher_w2);
        std::vector<double> s2 = channel_std(z2);
        spec.teacher_b2 = Tensor({c2});
        for (std::int64_t c = 0; c < c2; ++c) spec.teacher_b2.data()[c] = -0.5 * s2[c];
    }

    for (std::int64_t t = 0; t < n_types; ++t)
        for (std::int64_t u = 0; u < units_per_type; ++u) {
            spec.teacher_channel.push_back(t);
            spec.loc_row.push_back(std::int64_t(gen.below(std::uint64_t(gh))));
            spec.loc_col.push_back(std::int64_t(gen.below(std::uint64_t(gw))));
            spec.type_ids.push_back(int(t));
        }
    spec.validate();
    return spec;
}

// ---- simulators ------------------------------------------------------------------

namespace {

Tensor simulate_linear(const PopulationSpec& spec, const Tensor& stimuli) {
    const std::int64_t S = stimuli.dim(0), H = stimuli.dim(2), W = stimuli.dim(3);
    const std::int64_t N = spec.n_neurons, k = spec.kernels.dim(1);
    if (H != spec.stim_height || W != spec.stim_width)
        throw dim_error("simulate: stimuli " + shape_str(stimuli.shape()) +
                        " vs population stimulus size " + std::to_string(spec.stim_height) +
                        "x" + std::to_string(spec.stim_width));
    Tensor rates({S, N});
    for (std::int64_t s = 0; s < S; ++s) {
        const double* stim = stimuli.data() + s * H * W;
        for (std::int64_t n = 0; n < N; ++n) {
            const double* kern = spec.kernels.data() + n * k * k;
            const double* patch = stim + spec.loc_row[n] * W + spec.loc_col[n];
            double acc = 0.0;
            for (std::int64_t u = 0; u < k; ++u) {
                const double* prow = patch + u * W;
                const double* krow = kern + u * k;
                for (std::int64_t v = 0; v < k; ++v) acc += prow[v] * krow[v];
            }
            rates.data()[s * N + n] = spec.output_scale * acc;
        }
    }
    return rates;
}

void add_channel_bias(Tensor& x, const Tensor& bias) {
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            double* p = x.data() + (b * C + c) * HW;
            const double v = bias.data()[c];
            for (std::int64_t i = 0; i < HW; ++i) p[i] += v;
        }
}

// Teacher activations [B, C2, gh, gw]; nothing requires grad here.
Tensor teacher_features(const PopulationSpec& spec, const Tensor& batch) {
    Graph g;
    Tensor z1 = conv2d(g, batch, spec.teacher_w1);
    if (spec.teacher_b1.defined()) add_channel_bias(z1, spec.teacher_b1);
    Tensor a1 = pointwise(g, z1, Activation::relu);
    Tensor z2 = conv2d(g, a1, spec.teacher_w2);
    if (spec.teacher_b2.defined()) add_channel_bias(z2, spec.teacher_b2);
    return pointwise(g, z2, Activation::relu);
}

Tensor simulate_teacher(const PopulationSpec& spec, const Tensor& stimuli) {
    const std::int64_t S = stimuli.dim(0);
    const std::int64_t N = spec.n_neurons;
    Tensor rates({S, N});
    // process in chunks to bound the activation memory
    const std::int64_t chunk = 256;
    for (std::int64_t s0 = 0; s0 < S; s0 += chunk) {
        const std::int64_t B = std::min(chunk, S - s0);
        Tensor batch = Tensor({B, stimuli.dim(1), stimuli.dim(2), stimuli.dim(3)});
        std::copy(stimuli.data() + s0 * stimuli.dim(1) * stimuli.dim(2) * stimuli.dim(3),
                  stimuli.data() + (s0 + B) * stimuli.dim(1) * stimuli.dim(2) * stimuli.dim(3),
                  batch.data());
        Tensor a2 = teacher_features(spec, batch);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t n = 0; n < N; ++n)
                rates.data()[(s0 + b) * N + n] =
                    spec.output_scale *
                    a2.at({b, spec.teacher_channel[n], spec.loc_row[n], spec.loc_col[n]});
    }
    return rates;
}

// Per-channel std of a [B,C,H,W] activation around zero mean removed.
std::vector<double> channel_std(const Tensor& x) {
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(C);
    for (std::int64_t c = 0; c < C; ++c) {
        double mean = 0.0, m2 = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double* p = x.data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
                mean += p[i];
                m2 += p[i] * p[i];
            }
        }
        const double M = double(B * HW);
        mean /= M;
        out[c] = std::sqrt(std::max(m2 / M - mean * mean, 1e-12));
    }
    return out;
}

}  // namespace

Tensor simulate_rates(const PopulationSpec& spec, const Tensor& stimuli) {
    spec.validate();
    return spec.kind == PopulationKind::linear ? simulate_linear(spec, stimuli)
                                               : simulate_teacher(spec, stimuli);
}

double calibrate_scale(PopulationSpec& spec, const Tensor& stimuli, double target_mean_abs) {
    if (stimuli.dim(0) < 1000)
        throw contract_error("calibrate_scale: need >= 1000 calibration stimuli, got " +
                             std::to_string(stimuli.dim(0)));
    Tensor rates = simulate_rates(spec, stimuli);
    double mean_abs = 0.0;
    for (std::int64_t i = 0; i < rates.numel(); ++i) mean_abs += std::abs(rates.data()[i]);
    mean_abs /= double(rates.numel());
    if (mean_abs == 0.0)
        throw contract_error("calibrate_scale: degenerate population, all rates zero");
    spec.output_scale *= target_mean_abs / mean_abs;
    return spec.output_scale;
}

Tensor add_poisson_like_noise(const Tensor& rates, std::uint64_t seed) {
    rng gen(mix_seed(seed, 0x40u));
    Tensor y(rates.shape());
    for (std::int64_t i = 0; i < rates.numel(); ++i) {
        const double r = rates.data()[i];
        y.data()[i] = r + std::sqrt(std::abs(r)) * gen.gaussian();
    }
    return y;
}

Dataset build_dataset(PopulationSpec& spec, const StimulusSource& source, std::int64_t n_train,
                      std::int64_t n_test, std::uint64_t seed, std::int64_t n_repeats) {
    // calibration uses its own stimulus stream so small datasets stay unbiased
    Tensor calib = make_stimuli(2048, spec.stim_height, spec.stim_width, mix_seed(seed, 1), source);
    calibrate_scale(spec, calib);

    const std::int64_t S = n_train + n_test;
    Dataset ds;
    ds.stimuli = make_stimuli(S, spec.stim_height, spec.stim_width, mix_seed(seed, 2), source);
    ds.rates = simulate_rates(spec, ds.stimuli);
    ds.responses = add_poisson_like_noise(ds.rates, mix_seed(seed, 3));
    for (std::int64_t i = 0; i < n_train; ++i) ds.train_idx.push_back(i);
    for (std::int64_t i = n_train; i < S; ++i) ds.test_idx.push_back(i);
    if (n_repeats > 0) {
        const std::int64_t N = spec.n_neurons;
        ds.repeats = Tensor({n_test, n_repeats, N});
        rng gen(mix_seed(seed, 4));
        for (std::int64_t s = 0; s < n_test; ++s)
            for (std::int64_t r = 0; r < n_repeats; ++r)
                for (std::int64_t n = 0; n < N; ++n) {
                    const double rate = ds.rates.data()[(n_train + s) * N + n];
                    ds.repeats.data()[(s * n_repeats + r) * N + n] =
                        rate + std::sqrt(std::abs(rate)) * gen.gaussian();
                }
    }
    ds.validate();
    return ds;
}

}  // namespace nsi
