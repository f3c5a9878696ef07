#include "nsi/dataset.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

namespace nsi {

static_assert(std::endian::native == std::endian::little,
              "container format is little-endian only");

void Dataset::validate() const {
    if (!stimuli.defined() || !responses.defined())
        throw contract_error("dataset: stimuli and responses are required");
    if (responses.dim(0) != stimuli.dim(0))
        throw dim_error("dataset: responses rows " + std::to_string(responses.dim(0)) +
                        " vs stimuli rows " + std::to_string(stimuli.dim(0)));
    if (has_rates() && rates.shape() != responses.shape())
        throw dim_error("dataset: rates shape " + shape_str(rates.shape()) +
                        " vs responses " + shape_str(responses.shape()));
    std::set<std::int64_t> seen;
    auto check_split = [&](const std::vector<std::int64_t>& idx, const char* name) {
        for (auto i : idx) {
            if (i < 0 || i >= n_samples())
                throw contract_error(std::string("dataset: ") + name + " index " +
                                     std::to_string(i) + " out of range");
            if (!seen.insert(i).second)
                throw contract_error(std::string("dataset: index ") + std::to_string(i) +
                                     " appears in more than one split");
        }
    };
    check_split(train_idx, "train");
    check_split(val_idx, "val");
    check_split(test_idx, "test");
}

// ---- container --------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'N', 'S', 'I', 'D'};

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw format_error(format_error::kind::truncated, "container: truncated header");
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 8))
        throw format_error(format_error::kind::truncated, "container: truncated header");
    return v;
}

}  // namespace

void Container::add_tensor(const std::string& name, Tensor t) {
    entries_.push_back({name, false, std::move(t), {}});
}

void Container::add_blob(const std::string& name, std::string text) {
    entries_.push_back({name, true, {}, std::move(text)});
}

const Tensor* Container::find_tensor(const std::string& name) const {
    for (const auto& e : entries_)
        if (!e.is_blob && e.name == name) return &e.tensor;
    return nullptr;
}

const std::string* Container::find_blob(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.is_blob && e.name == name) return &e.blob;
    return nullptr;
}

void Container::save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw format_error(format_error::kind::io, "container: cannot open " + tmp);
        os.write(kMagic, 4);
        write_u32(os, kVersion);
        write_u32(os, static_cast<std::uint32_t>(entries_.size()));
        for (const auto& e : entries_) {
            write_u32(os, static_cast<std::uint32_t>(e.name.size()));
            os.write(e.name.data(), std::streamsize(e.name.size()));
            os.put(e.is_blob ? 1 : 0);
            if (e.is_blob) {
                write_u64(os, e.blob.size());
            } else {
                write_u32(os, static_cast<std::uint32_t>(e.tensor.rank()));
                for (auto d : e.tensor.shape()) write_u64(os, std::uint64_t(d));
            }
        }
        for (const auto& e : entries_) {
            if (e.is_blob)
                os.write(e.blob.data(), std::streamsize(e.blob.size()));
            else
                os.write(reinterpret_cast<const char*>(e.tensor.data()),
                         std::streamsize(e.tensor.numel() * 8));
        }
        if (!os) throw format_error(format_error::kind::io, "container: write failed on " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Container Container::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error(format_error::kind::io, "container: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4))
        throw format_error(format_error::kind::truncated, "container: file shorter than magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw format_error(format_error::kind::bad_magic, "container: bad magic in " + path);
    const std::uint32_t version = read_u32(is);
    if (version != kVersion)
        throw format_error(format_error::kind::version_mismatch,
                           "container: version " + std::to_string(version) + ", expected " +
                               std::to_string(kVersion));
    const std::uint32_t n_sections = read_u32(is);
    Container c;
    std::uint64_t payload_bytes = 0;
    for (std::uint32_t i = 0; i < n_sections; ++i) {
        const std::uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len))
            throw format_error(format_error::kind::truncated, "container: truncated name");
        const int kind = is.get();
        if (kind < 0)
            throw format_error(format_error::kind::truncated, "container: truncated kind byte");
        Entry e;
        e.name = std::move(name);
        e.is_blob = kind == 1;
        if (e.is_blob) {
            const std::uint64_t len = read_u64(is);
            e.blob.assign(len, '\0');
            payload_bytes += len;
        } else {
            const std::uint32_t ndim = read_u32(is);
            shape_t shape(ndim);
            std::uint64_t numel = 1;
            for (std::uint32_t d = 0; d < ndim; ++d) {
                shape[d] = std::int64_t(read_u64(is));
                if (shape[d] < 0 || (numel > 0 && std::uint64_t(shape[d]) > (1ull << 40) / std::max<std::uint64_t>(numel, 1)))
                    throw format_error(format_error::kind::shape_inconsistent,
                                       "container: implausible shape in header");
                numel *= std::uint64_t(shape[d]);
            }
            e.tensor = Tensor(shape);
            payload_bytes += numel * 8;
        }
        c.entries_.push_back(std::move(e));
    }
    const auto header_end = is.tellg();
    is.seekg(0, std::ios::end);
    const std::uint64_t remaining = std::uint64_t(is.tellg() - header_end);
    if (remaining < payload_bytes)
        throw format_error(format_error::kind::truncated,
                           "container: payload shorter than header declares (" +
                               std::to_string(remaining) + " < " + std::to_string(payload_bytes) +
                               " bytes)");
    if (remaining > payload_bytes)
        throw format_error(format_error::kind::shape_inconsistent,
                           "container: file larger than header-declared shapes (" +
                               std::to_string(remaining) + " > " + std::to_string(payload_bytes) +
                               " bytes)");
    is.seekg(header_end);
    for (auto& e : c.entries_) {
        if (e.is_blob) {
            if (!is.read(e.blob.data(), std::streamsize(e.blob.size())))
                throw format_error(format_error::kind::truncated, "container: truncated blob");
        } else {
            if (!is.read(reinterpret_cast<char*>(e.tensor.data()),
                         std::streamsize(e.tensor.numel() * 8)))
                throw format_error(format_error::kind::truncated, "container: truncated tensor");
        }
    }
    return c;
}

// ---- dataset <-> container ---------------------------------------------------

namespace {

Tensor indices_to_tensor(const std::vector<std::int64_t>& idx) {
    Tensor t({std::int64_t(idx.size())});
    for (std::size_t i = 0; i < idx.size(); ++i) t.data()[i] = double(idx[i]);
    return t;
}

std::vector<std::int64_t> tensor_to_indices(const Tensor& t) {
    std::vector<std::int64_t> idx(t.numel());
    for (std::int64_t i = 0; i < t.numel(); ++i) idx[i] = std::int64_t(t.data()[i]);
    return idx;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
    ds.validate();
    Container c;
    c.add_tensor("stimuli", ds.stimuli);
    c.add_tensor("responses", ds.responses);
    if (ds.has_rates()) c.add_tensor("rates", ds.rates);
    if (ds.has_repeats()) c.add_tensor("repeats", ds.repeats);
    c.add_tensor("split_train", indices_to_tensor(ds.train_idx));
    c.add_tensor("split_val", indices_to_tensor(ds.val_idx));
    c.add_tensor("split_test", indices_to_tensor(ds.test_idx));
    c.save(path);
}

Dataset load_dataset(const std::string& path) {
    Container c = Container::load(path);
    Dataset ds;
    const Tensor* stim = c.find_tensor("stimuli");
    const Tensor* resp = c.find_tensor("responses");
    if (!stim || !resp)
        throw format_error(format_error::kind::shape_inconsistent,
                           "dataset: missing stimuli/responses sections in " + path);
    ds.stimuli = *stim;
    ds.responses = *resp;
    if (const Tensor* r = c.find_tensor("rates")) ds.rates = *r;
    if (const Tensor* r = c.find_tensor("repeats")) ds.repeats = *r;
    if (const Tensor* t = c.find_tensor("split_train")) ds.train_idx = tensor_to_indices(*t);
    if (const Tensor* t = c.find_tensor("split_val")) ds.val_idx = tensor_to_indices(*t);
    if (const Tensor* t = c.find_tensor("split_test")) ds.test_idx = tensor_to_indices(*t);
    ds.validate();
    return ds;
}

}  // namespace nsi
