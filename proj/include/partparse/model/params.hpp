#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "partparse/autodiff.hpp"
#include "partparse/tensor.hpp"

namespace partparse::model {

struct AdamConfig {
    real lr = 2e-4;
    real beta1 = 0.9;
    real beta2 = 0.999;
    real eps = 1e-8;
    real weight_decay = 1e-4;
};

// Named parameter registry with AdamW state, gradient accumulation, and a
// binary checkpoint format (JSON header + raw little-endian doubles).
class ParamStore {
public:
    int add(const std::string& name, Tensor init, bool decay = true);

    int count() const { return static_cast<int>(params_.size()); }
    const std::string& name(int id) const { return params_[static_cast<size_t>(id)].name; }
    Tensor& value(int id) { return params_[static_cast<size_t>(id)].value; }
    const Tensor& value(int id) const { return params_[static_cast<size_t>(id)].value; }
    long total_size() const;

    // Leases every parameter onto a graph as a differentiable leaf; index by id.
    std::vector<ad::Var> bind(ad::Graph& g) const;

    // Gradient accumulation across a batch.
    void zero_grad();
    void accumulate(ad::Graph& g, const std::vector<ad::Var>& leases);
    const Tensor& grad(int id) const { return grads_[static_cast<size_t>(id)]; }

    // One AdamW update from the accumulated gradients (scaled by grad_scale).
    void adamw_step(const AdamConfig& cfg, real grad_scale);
    long step_count() const { return step_; }

    void save_checkpoint(const std::filesystem::path& path, const std::string& config_echo) const;
    // Loads values into matching parameters; returns the stored config echo.
    std::string load_checkpoint(const std::filesystem::path& path);

private:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor m, v;
        bool decay = true;
    };
    std::vector<Entry> params_;
    std::vector<Tensor> grads_;
    long step_ = 0;
};

// Deterministic initializers.
Tensor init_normal(std::vector<int> shape, real std, std::uint64_t seed);
Tensor init_he_conv(std::vector<int> shape, std::uint64_t seed);     // [K,C,kh,kw]
Tensor init_xavier(std::vector<int> shape, std::uint64_t seed);      // [in,out]
Tensor init_const(std::vector<int> shape, real v);

}  // namespace partparse::model
