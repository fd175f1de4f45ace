#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "doublyaware/autodiff.hpp"
#include "doublyaware/tensor.hpp"

namespace doublyaware::ad {

enum class Activation { elu, tanh };

// Fully connected network: activation on hidden layers, linear output.
// Layer l owns segments "l<l>.weight" (in x out) and "l<l>.bias" (out).
class Mlp {
 public:
  Mlp() = default;
  // All parameters zero.
  explicit Mlp(std::vector<std::size_t> layer_sizes, Activation activation = Activation::elu);
  // Uniform He-style fan-in initialization: W ~ U(-sqrt(6/in), sqrt(6/in)), b = 0.
  static Mlp he_uniform(std::vector<std::size_t> layer_sizes, std::uint64_t seed,
                        Activation activation = Activation::elu);

  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t output_dim() const { return sizes_.back(); }
  std::size_t num_layers() const { return sizes_.size() - 1; }
  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
  Activation activation() const { return activation_; }

  const ParamVector& params() const { return params_; }
  ParamVector& params() { return params_; }
  std::span<double> weight(std::size_t layer) { return params_.segment(2 * layer); }
  std::span<double> bias(std::size_t layer) { return params_.segment(2 * layer + 1); }

  Matrix forward(const Matrix& x) const;
  std::vector<double> forward(std::span<const double> x) const;
  Var forward(ParamHandle& handle, Var x) const;

 private:
  std::vector<std::size_t> sizes_;
  Activation activation_ = Activation::elu;
  ParamVector params_;
};

std::size_t parameter_count(const std::vector<std::size_t>& layer_sizes);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

// In-place Adam update with bias correction.
void adam_step(ParamVector& params, std::span<const double> grad, AdamState& state, double lr,
               const AdamConfig& cfg = {});
// Plain gradient descent: theta <- theta - lr * grad.
void sgd_step(ParamVector& params, std::span<const double> grad, double lr);

// Checkpoint file: "DAPV" magic, u32 version, u32 segment count, then per
// segment {u32 name length, name bytes, u32 rank, u32 dims...}, then every
// value as a little-endian IEEE-754 double in layout order.
void save_params(const std::filesystem::path& path, const ParamVector& params);
ParamVector load_params(const std::filesystem::path& path);
// Loads into `params`, requiring an identical layout (VersionError otherwise).
void load_params_into(const std::filesystem::path& path, ParamVector& params);

}  // namespace doublyaware::ad
