#include "partparse/model/params.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>

namespace partparse::model {

using nlohmann::json;

int ParamStore::add(const std::string& name, Tensor init, bool decay) {
    for (const auto& e : params_)
        PP_CHECK(e.name != name, "ParamStore: duplicate parameter " + name);
    Entry e;
    e.name = name;
    e.m = Tensor(init.shape());
    e.v = Tensor(init.shape());
    e.value = std::move(init);
    e.decay = decay;
    params_.push_back(std::move(e));
    grads_.push_back(Tensor(params_.back().value.shape()));
    return static_cast<int>(params_.size()) - 1;
}

long ParamStore::total_size() const {
    long n = 0;
    for (const auto& e : params_) n += e.value.numel();
    return n;
}

std::vector<ad::Var> ParamStore::bind(ad::Graph& g) const {
    std::vector<ad::Var> vars;
    vars.reserve(params_.size());
    for (const auto& e : params_) vars.push_back(g.leaf(e.value, true));
    return vars;
}

void ParamStore::zero_grad() {
    for (auto& t : grads_) t.fill(0);
}

void ParamStore::accumulate(ad::Graph& g, const std::vector<ad::Var>& leases) {
    PP_CHECK(leases.size() == params_.size(), "ParamStore::accumulate: lease count mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
        const Tensor& gt = g.grad(leases[i]);
        Tensor& acc = grads_[i];
        for (long j = 0; j < acc.numel(); ++j) acc[j] += gt[j];
    }
}

void ParamStore::adamw_step(const AdamConfig& cfg, real grad_scale) {
    ++step_;
    real bc1 = 1 - std::pow(cfg.beta1, static_cast<real>(step_));
    real bc2 = 1 - std::pow(cfg.beta2, static_cast<real>(step_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Entry& e = params_[i];
        const Tensor& grad = grads_[i];
        for (long j = 0; j < e.value.numel(); ++j) {
            real gj = grad[j] * grad_scale;
            PP_CHECK(std::isfinite(gj), "adamw_step: non-finite gradient in " + e.name);
            e.m[j] = cfg.beta1 * e.m[j] + (1 - cfg.beta1) * gj;
            e.v[j] = cfg.beta2 * e.v[j] + (1 - cfg.beta2) * gj * gj;
            real mhat = e.m[j] / bc1;
            real vhat = e.v[j] / bc2;
            real upd = mhat / (std::sqrt(vhat) + cfg.eps);
            if (e.decay) upd += cfg.weight_decay * e.value[j];
            e.value[j] -= cfg.lr * upd;
        }
    }
}

namespace {
constexpr char kMagic[] = "PPCK1";
}

void ParamStore::save_checkpoint(const std::filesystem::path& path,
                                 const std::string& config_echo) const {
    json header;
    header["format_version"] = 1;
    header["config"] = config_echo;
    header["step"] = step_;
    json tensors = json::array();
    for (const auto& e : params_) {
        json t;
        t["name"] = e.name;
        t["shape"] = e.value.shape();
        tensors.push_back(std::move(t));
    }
    header["tensors"] = std::move(tensors);
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    PP_CHECK(f.good(), "save_checkpoint: cannot open " + path.string());
    f.write(kMagic, 5);
    std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& e : params_)
        f.write(reinterpret_cast<const char*>(e.value.data()),
                static_cast<std::streamsize>(e.value.numel() * sizeof(real)));
    PP_CHECK(f.good(), "save_checkpoint: write failed");
}

std::string ParamStore::load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    PP_CHECK(f.good(), "load_checkpoint: cannot open " + path.string());
    char magic[5];
    f.read(magic, 5);
    PP_CHECK(f.gcount() == 5 && std::memcmp(magic, kMagic, 5) == 0,
             "load_checkpoint: bad magic in " + path.string());
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(hs);
    PP_CHECK(header.at("format_version").get<int>() == 1,
             "load_checkpoint: unsupported version");
    const auto& tensors = header.at("tensors");
    PP_CHECK(tensors.size() == params_.size(),
             "load_checkpoint: parameter count mismatch (model config differs?)");
    for (size_t i = 0; i < params_.size(); ++i) {
        PP_CHECK(tensors[i].at("name").get<std::string>() == params_[i].name,
                 "load_checkpoint: parameter name mismatch at index " + std::to_string(i));
        std::vector<int> shape = tensors[i].at("shape").get<std::vector<int>>();
        PP_CHECK(shape == params_[i].value.shape(), "load_checkpoint: shape mismatch for " +
                                                        params_[i].name);
        f.read(reinterpret_cast<char*>(params_[i].value.data()),
               static_cast<std::streamsize>(params_[i].value.numel() * sizeof(real)));
        PP_CHECK(f.good(), "load_checkpoint: truncated tensor data");
    }
    step_ = header.value("step", 0L);
    return header.value("config", std::string());
}

Tensor init_normal(std::vector<int> shape, real std, std::uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (long i = 0; i < t.numel(); ++i) t[i] = std * rng.next_normal();
    return t;
}

Tensor init_he_conv(std::vector<int> shape, std::uint64_t seed) {
    PP_CHECK(shape.size() == 4, "init_he_conv: expected [K,C,kh,kw]");
    real fan_in = static_cast<real>(shape[1]) * shape[2] * shape[3];
    return init_normal(std::move(shape), std::sqrt(real(2) / fan_in), seed);
}

Tensor init_xavier(std::vector<int> shape, std::uint64_t seed) {
    PP_CHECK(shape.size() == 2, "init_xavier: expected [in,out]");
    real std = std::sqrt(real(2) / (shape[0] + shape[1]));
    return init_normal(std::move(shape), std, seed);
}

Tensor init_const(std::vector<int> shape, real v) { return Tensor::full(std::move(shape), v); }

}  // namespace partparse::model
