#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nsi/tensor.hpp"

namespace nsi {

// Paired stimulus/response data. `rates` holds the noiseless ground truth
// and is present only for synthetic datasets. `repeats` holds repeated test
// presentations [S_test, R, N] when available.
struct Dataset {
    Tensor stimuli;    // [S, C, H, W]
    Tensor responses;  // [S, N]
    Tensor rates;      // [S, N], synthetic only
    Tensor repeats;    // [S_test, R, N], optional
    std::vector<std::int64_t> train_idx, val_idx, test_idx;

    bool has_rates() const { return rates.defined(); }
    bool has_repeats() const { return repeats.defined(); }
    std::int64_t n_samples() const { return stimuli.defined() ? stimuli.dim(0) : 0; }
    std::int64_t n_neurons() const { return responses.defined() ? responses.dim(1) : 0; }

    // Checks split disjointness/coverage and shape agreement.
    void validate() const;
};

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// ---- generic section container (shared by datasets and model checkpoints) --

// Single-file little-endian binary: magic "NSID", version u32, section
// headers (name, kind, dims), then all payloads in declared order.
class Container {
public:
    void add_tensor(const std::string& name, Tensor t);
    void add_blob(const std::string& name, std::string text);

    const Tensor* find_tensor(const std::string& name) const;
    const std::string* find_blob(const std::string& name) const;

    void save(const std::string& path) const;  // atomic: tmp file + rename
    static Container load(const std::string& path);

    static constexpr std::uint32_t kVersion = 1;

private:
    struct Entry {
        std::string name;
        bool is_blob = false;
        Tensor tensor;
        std::string blob;
    };
    std::vector<Entry> entries_;
};

}  // namespace nsi
