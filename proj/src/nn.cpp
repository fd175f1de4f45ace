#include "doublyaware/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "doublyaware/common.hpp"
#include "doublyaware/kernels.hpp"

namespace doublyaware::ad {

namespace {

std::vector<std::pair<std::string, std::vector<std::uint32_t>>> mlp_layout(
    const std::vector<std::size_t>& sizes) {
  std::vector<std::pair<std::string, std::vector<std::uint32_t>>> layout;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const auto in = static_cast<std::uint32_t>(sizes[l]);
    const auto out = static_cast<std::uint32_t>(sizes[l + 1]);
    layout.push_back({"l" + std::to_string(l) + ".weight", {in, out}});
    layout.push_back({"l" + std::to_string(l) + ".bias", {out}});
  }
  return layout;
}

void activate(Activation act, std::span<double> v) {
  if (act == Activation::elu)
    kernels::elu(v, v);
  else
    for (double& x : v) x = std::tanh(x);
}

}  // namespace

std::size_t parameter_count(const std::vector<std::size_t>& sizes) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) n += (sizes[l] + 1) * sizes[l + 1];
  return n;
}

Mlp::Mlp(std::vector<std::size_t> layer_sizes, Activation activation)
    : sizes_(std::move(layer_sizes)), activation_(activation) {
  require(sizes_.size() >= 2, "Mlp: need at least input and output sizes");
  for (auto s : sizes_) require(s > 0, "Mlp: layer sizes must be positive");
  params_ = ParamVector(mlp_layout(sizes_));
}

Mlp Mlp::he_uniform(std::vector<std::size_t> layer_sizes, std::uint64_t seed, Activation activation) {
  Mlp net(std::move(layer_sizes), activation);
  Rng rng(seed);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const double bound = std::sqrt(6.0 / static_cast<double>(net.sizes_[l]));
    for (double& w : net.weight(l)) w = rng.uniform(-bound, bound);
  }
  return net;
}

Matrix Mlp::forward(const Matrix& x) const {
  require(x.cols == input_dim(), "Mlp::forward: input dimension mismatch");
  Matrix h = x;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Matrix y(h.rows, sizes_[l + 1]);
    kernels::affine(h.data, h.rows, sizes_[l], params_.segment(2 * l), params_.segment(2 * l + 1), sizes_[l + 1],
                    y.data);
    if (l + 1 < num_layers()) activate(activation_, y.data);
    h = std::move(y);
  }
  return h;
}

std::vector<double> Mlp::forward(std::span<const double> x) const {
  return forward(Matrix::row_vector(x)).data;
}

Var Mlp::forward(ParamHandle& handle, Var x) const {
  require(handle.tape().value(x).cols == input_dim(), "Mlp::forward: input dimension mismatch");
  Var h = x;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    h = affine(h, handle.segment(2 * l), handle.segment(2 * l + 1));
    if (l + 1 < num_layers()) h = activation_ == Activation::elu ? elu(h) : tanh(h);
  }
  return h;
}

void adam_step(ParamVector& params, std::span<const double> grad, AdamState& state, double lr,
               const AdamConfig& cfg) {
  require(lr >= 0.0, "adam_step: learning rate must be non-negative");
  require(grad.size() == params.size(), "adam_step: gradient length mismatch");
  if (!all_finite(grad)) throw NumericError("adam_step", "gradient");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.t = 0;
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  auto theta = params.values();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    theta[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + cfg.eps);
  }
  if (!all_finite(theta)) throw NumericError("adam_step", "parameters");
}

void sgd_step(ParamVector& params, std::span<const double> grad, double lr) {
  require(lr >= 0.0, "sgd_step: learning rate must be non-negative");
  require(grad.size() == params.size(), "sgd_step: gradient length mismatch");
  if (!all_finite(grad)) throw NumericError("sgd_step", "gradient");
  auto theta = params.values();
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
}

namespace {

constexpr char kMagic[4] = {'D', 'A', 'P', 'V'};
constexpr std::uint32_t kVersion = 1;

constexpr std::uint32_t swap_bytes(std::uint32_t v) { return __builtin_bswap32(v); }
constexpr std::uint64_t swap_bytes(std::uint64_t v) { return __builtin_bswap64(v); }

template <class T>
void put_le(std::ostream& os, T v) {
  if constexpr (std::endian::native == std::endian::big) v = swap_bytes(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) v = swap_bytes(v);
  return v;
}

}  // namespace

void save_params(const std::filesystem::path& path, const ParamVector& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.layout().size()));
  for (const auto& seg : params.layout()) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(seg.name.size()));
    os.write(seg.name.data(), static_cast<std::streamsize>(seg.name.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(seg.shape.size()));
    for (auto d : seg.shape) put_le<std::uint32_t>(os, d);
  }
  for (double v : params.values()) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw IoError("failed writing " + path.string());
}

ParamVector load_params(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw VersionError(path.string() + ": not a parameter file");
  if (get_le<std::uint32_t>(is) != kVersion) throw VersionError(path.string() + ": unsupported version");
  const auto count = get_le<std::uint32_t>(is);
  std::vector<std::pair<std::string, std::vector<std::uint32_t>>> layout;
  for (std::uint32_t s = 0; s < count; ++s) {
    std::string name(get_le<std::uint32_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    std::vector<std::uint32_t> shape(get_le<std::uint32_t>(is));
    for (auto& d : shape) d = get_le<std::uint32_t>(is);
    layout.emplace_back(std::move(name), std::move(shape));
  }
  ParamVector params(std::move(layout));
  for (double& v : params.values()) v = std::bit_cast<double>(get_le<std::uint64_t>(is));
  return params;
}

void load_params_into(const std::filesystem::path& path, ParamVector& params) {
  ParamVector loaded = load_params(path);
  if (!loaded.same_layout(params)) throw VersionError(path.string() + ": parameter layout mismatch");
  params = std::move(loaded);
}

}  // namespace doublyaware::ad
