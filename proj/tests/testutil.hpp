#ifndef ADAPTSEG_TESTUTIL_HPP
#define ADAPTSEG_TESTUTIL_HPP

#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "adaptseg/data.hpp"
#include "adaptseg/model.hpp"
#include "adaptseg/synth.hpp"

namespace testutil {

class TempDir {
public:
    TempDir() {
        auto pattern = (std::filesystem::temp_directory_path() / "adaptseg_XXXXXX").string();
        if (mkdtemp(pattern.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
        path_ = pattern;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

/// Central-difference gradient oracle, independent of autograd.
inline torch::Tensor fd_gradient(const std::function<double(const torch::Tensor&)>& f,
                                 const torch::Tensor& x, double h = 1e-4) {
    auto grad = torch::zeros_like(x);
    auto grad_flat = grad.reshape(-1);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        auto xp = x.clone();
        xp.reshape(-1)[i] += h;
        auto xm = x.clone();
        xm.reshape(-1)[i] -= h;
        grad_flat[i] = (f(xp) - f(xm)) / (2.0 * h);
    }
    return grad;
}

/// max |a - b| / max(max |b|, eps)
inline double rel_err(const torch::Tensor& a, const torch::Tensor& b, double eps = 1e-12) {
    const double denom = std::max(b.abs().max().item<double>(), eps);
    return (a - b).abs().max().item<double>() / denom;
}

/// Small architecture for fast tests; hw must be a multiple of 8.
inline adaptseg::ArchConfig tiny_arch(int hw = 32) {
    adaptseg::ArchConfig arch;
    arch.input_height = hw;
    arch.input_width = hw;
    arch.encoder_widths = {8, 16, 24};
    arch.encoder_units = {0, 1, 1};
    arch.decoder_units = {1, 1};
    arch.discriminator_widths = {8, 16};
    return arch;
}

/// In-memory labeled pool of tiny synthetic crack images.
inline adaptseg::MemorySource tiny_pool(int n, std::uint64_t seed, int hw = 32,
                                        adaptseg::Domain domain = adaptseg::Domain::source) {
    auto params = adaptseg::synth_domain_a(seed);
    params.height = hw;
    params.width = hw;
    auto dataset = adaptseg::generate_synthetic_domain(params, n, domain);
    return adaptseg::MemorySource(std::move(dataset.samples));
}

inline std::size_t numel_sum(const adaptseg::NamedTensors& group) {
    std::size_t n = 0;
    for (const auto& t : group.tensors) n += static_cast<std::size_t>(t.numel());
    return n;
}

inline std::vector<torch::Tensor> clone_all(const adaptseg::NamedTensors& group) {
    std::vector<torch::Tensor> out;
    for (const auto& t : group.tensors) out.push_back(t.detach().clone());
    return out;
}

}  // namespace testutil

#endif
