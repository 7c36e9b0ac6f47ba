// params.hpp - named parameter storage shared across forward passes, the
// Adam optimizer, and the .ckpt named-tensor archive format.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphmark/ad.hpp"
#include "morphmark/rng.hpp"

namespace morphmark {

// Flat registry of named parameter tensors. A model forward pass materializes
// leaves through a Bindings object; after backward the bindings push leaf
// gradients back into the store, which keeps graphs per-pair independent (and
// lets pairs be processed on worker threads with a deterministic merge).
class ParamStore {
public:
    struct Entry {
        std::string name;
        ad::Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
    };

    int add(std::string name, ad::Shape shape, std::vector<double> init) {
        if (init.size() != ad::numel(shape))
            throw std::invalid_argument("ParamStore::add: init size mismatch for " + name);
        for (const auto& e : entries_)
            if (e.name == name) throw std::invalid_argument("ParamStore::add: duplicate name " + name);
        entries_.push_back({std::move(name), std::move(shape), std::move(init),
                            std::vector<double>(init.size(), 0.0)});
        entries_.back().grad.assign(entries_.back().value.size(), 0.0);
        return static_cast<int>(entries_.size()) - 1;
    }

    int add_zeros(std::string name, ad::Shape shape) {
        std::vector<double> v(ad::numel(shape), 0.0);
        return add(std::move(name), std::move(shape), std::move(v));
    }

    // He-style fan-in scaled normal init
    int add_randn(std::string name, ad::Shape shape, Rng& rng, double scale) {
        std::vector<double> v(ad::numel(shape));
        for (double& x : v) x = rng.normal(0.0, scale);
        return add(std::move(name), std::move(shape), std::move(v));
    }

    std::size_t count() const { return entries_.size(); }
    Entry& operator[](int id) { return entries_[static_cast<std::size_t>(id)]; }
    const Entry& operator[](int id) const { return entries_[static_cast<std::size_t>(id)]; }

    void zero_grad() {
        for (auto& e : entries_) std::fill(e.grad.begin(), e.grad.end(), 0.0);
    }

    double grad_norm_sq(int id) const {
        double s = 0.0;
        for (double g : entries_[static_cast<std::size_t>(id)].grad) s += g * g;
        return s;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

private:
    std::vector<Entry> entries_;
};

// Leaf tensors created for one forward pass, remembered so their gradients
// can be merged back into the store after backward().
class Bindings {
public:
    Bindings() = default;
    // record=false: parameters come out as plain constants (inference /
    // fixed-target passes build no graph)
    explicit Bindings(bool record) : record_(record) {}

    ad::Tensor leaf(ParamStore& store, int id, bool requires_grad = true) {
        auto& e = store[id];
        requires_grad = requires_grad && record_;
        ad::Tensor t = ad::Tensor::leaf(e.shape, e.value, requires_grad);
        if (requires_grad) items_.emplace_back(id, t.node());
        return t;
    }

    // add accumulated leaf gradients into the store, in creation order
    void collect(ParamStore& store) const {
        for (const auto& [id, node] : items_) {
            if (node->grad.empty()) continue;
            auto& g = store[id].grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += node->grad[i];
        }
    }

private:
    bool record_ = true;
    std::vector<std::pair<int, std::shared_ptr<ad::Node>>> items_;
};

// ---------------------------------------------------------------------------
// Adam (beta1 = 0.99, beta2 = 0.0 per the training setup; with beta2 = 0 the
// second moment equals the squared current gradient exactly)
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.99;
    double beta2 = 0.0;
    double eps = 1e-8;
    double weight_decay = 1e-4;  // L2, added to the gradient
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    long step_count() const { return step_; }

    void step(ParamStore& store, double lr) {
        if (m_.size() != store.count()) {
            m_.resize(store.count());
            v_.resize(store.count());
            for (std::size_t i = 0; i < store.count(); ++i) {
                m_[i].assign(store[static_cast<int>(i)].value.size(), 0.0);
                v_[i].assign(store[static_cast<int>(i)].value.size(), 0.0);
            }
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < store.count(); ++i) {
            auto& e = store[static_cast<int>(i)];
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < e.value.size(); ++j) {
                const double g = e.grad[j] + cfg_.weight_decay * e.value[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                // With beta2 = 0 the normalized step is mhat/(|g|+eps), which
                // diverges toward mhat/eps when the current gradient vanishes
                // while momentum has not (dead relu units hit this on the
                // first epochs). Clamp to the +-1 sign-step it asymptotes to.
                const double n = std::clamp(mhat / (std::sqrt(vhat) + cfg_.eps), -1.0, 1.0);
                e.value[j] -= lr * n;
            }
        }
    }

    const std::vector<double>& first_moment(int id) const { return m_[static_cast<std::size_t>(id)]; }
    const std::vector<double>& second_moment(int id) const { return v_[static_cast<std::size_t>(id)]; }

private:
    AdamConfig cfg_;
    long step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// .ckpt archive: magic, u32 manifest length, JSON manifest of
// {name, shape, offset} records, then a little-endian float32 data blob.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const ParamStore& store) {
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& e : store.entries()) {
        manifest.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}});
        offset += e.value.size() * 4;
    }
    const std::string mstr = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write("MMCK", 4);
    const std::uint32_t mlen = static_cast<std::uint32_t>(mstr.size());
    out.write(reinterpret_cast<const char*>(&mlen), 4);
    out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& e : store.entries()) {
        std::vector<float> buf(e.value.size());
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(e.value[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * 4));
    }
    if (!out) throw std::runtime_error("short write on checkpoint: " + path);
}

// restores values into a store whose layout (names + shapes) must match
inline void load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint for reading: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MMCK", 4) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    std::uint32_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), 4);
    std::string mstr(mlen, '\0');
    in.read(mstr.data(), mlen);
    if (!in) throw std::runtime_error("truncated checkpoint manifest: " + path);
    const nlohmann::json manifest = nlohmann::json::parse(mstr);
    if (manifest.size() != store.count())
        throw std::runtime_error("checkpoint entry count mismatch: " + path);
    const std::streampos data_start = in.tellg();
    for (std::size_t i = 0; i < store.count(); ++i) {
        auto& e = store[static_cast<int>(i)];
        const auto& rec = manifest[i];
        if (rec.at("name").get<std::string>() != e.name ||
            rec.at("shape").get<ad::Shape>() != e.shape)
            throw std::runtime_error("checkpoint layout mismatch at '" + e.name + "': " + path);
        in.seekg(data_start + static_cast<std::streamoff>(rec.at("offset").get<std::uint64_t>()));
        std::vector<float> buf(e.value.size());
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * 4));
        if (!in) throw std::runtime_error("truncated checkpoint data: " + path);
        for (std::size_t j = 0; j < buf.size(); ++j) e.value[j] = buf[j];
    }
}

}  // namespace morphmark
