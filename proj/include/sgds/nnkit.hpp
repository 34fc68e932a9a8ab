#pragma once

// Small differentiable MLP kit: tanh hidden layers, identity output,
// hand-written reverse mode, Glorot init, Adam, checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgds/error.hpp"
#include "sgds/rng.hpp"

namespace sgds {

struct MLPSpec {
  std::vector<int> widths;  // input, hidden..., output

  MLPSpec() = default;
  explicit MLPSpec(std::vector<int> w) : widths(std::move(w)) { validate(); }

  void validate() const {
    require(widths.size() >= 2, "MLPSpec needs at least two widths");
    for (int w : widths) require(w >= 1, "MLPSpec widths must be >= 1");
  }
  std::size_t layers() const { return widths.size() - 1; }
  std::size_t input_size() const { return static_cast<std::size_t>(widths.front()); }
  std::size_t output_size() const { return static_cast<std::size_t>(widths.back()); }
  std::size_t fan_in(std::size_t l) const { return static_cast<std::size_t>(widths[l]); }
  std::size_t fan_out(std::size_t l) const { return static_cast<std::size_t>(widths[l + 1]); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layers(); ++l) n += fan_out(l) * fan_in(l) + fan_out(l);
    return n;
  }
  bool operator==(const MLPSpec&) const = default;
};

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;

  std::size_t size() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }
  bool operator==(const TensorInfo&) const = default;
};

// Flat parameter store. The manifest names each tensor and fixes its place
// in `values`; an MLP block is laid out layer0.weight, layer0.bias, ...
struct ParamVector {
  std::vector<double> values;
  std::vector<TensorInfo> manifest;
  std::vector<int> spec;                      // MLP widths this store was built for, if any
  std::map<std::string, std::string> meta;    // free-form tags carried through checkpoints

  std::size_t manifest_size() const {
    std::size_t n = 0;
    for (const auto& t : manifest) n += t.size();
    return n;
  }

  std::size_t offset_of(const std::string& name) const {
    std::size_t off = 0;
    for (const auto& t : manifest) {
      if (t.name == name) return off;
      off += t.size();
    }
    throw ContractViolation("no tensor named " + name);
  }

  const TensorInfo& info(const std::string& name) const {
    for (const auto& t : manifest)
      if (t.name == name) return t;
    throw ContractViolation("no tensor named " + name);
  }

  std::span<const double> view(const std::string& name) const {
    return {values.data() + offset_of(name), info(name).size()};
  }
  std::span<double> view(const std::string& name) {
    return {values.data() + offset_of(name), info(name).size()};
  }

  void append(const std::string& name, std::vector<std::size_t> shape, std::span<const double> data) {
    TensorInfo t{name, std::move(shape)};
    require_shape(t.size() == data.size(), "append: data does not match shape of " + name);
    manifest.push_back(std::move(t));
    values.insert(values.end(), data.begin(), data.end());
  }

  bool operator==(const ParamVector&) const = default;
};

// Manifest entries for an MLP block, optionally name-prefixed.
inline std::vector<TensorInfo> mlp_manifest(const MLPSpec& spec, const std::string& prefix = "") {
  std::vector<TensorInfo> m;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::string base = prefix + "layer" + std::to_string(l);
    m.push_back({base + ".weight", {spec.fan_out(l), spec.fan_in(l)}});
    m.push_back({base + ".bias", {spec.fan_out(l)}});
  }
  return m;
}

// Glorot-uniform weights into `out` (length spec.param_count()); zero biases.
inline void init_mlp_block(const MLPSpec& spec, Rng& rng, std::span<double> out) {
  require_shape(out.size() == spec.param_count(), "init_mlp_block: wrong block size");
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(spec.fan_in(l) + spec.fan_out(l)));
    const std::size_t nw = spec.fan_out(l) * spec.fan_in(l);
    for (std::size_t i = 0; i < nw; ++i) out[off + i] = rng.uniform(-limit, limit);
    off += nw;
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(off), spec.fan_out(l), 0.0);
    off += spec.fan_out(l);
  }
}

inline ParamVector init_params(const MLPSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamVector p;
  p.manifest = mlp_manifest(spec);
  p.values.assign(spec.param_count(), 0.0);
  p.spec = spec.widths;
  Rng rng(seed);
  init_mlp_block(spec, rng, p.values);
  return p;
}

namespace kernel {

// y = W x + b, W row-major [out x in].
inline void affine(std::span<const double> W, std::span<const double> b, std::span<const double> x,
                   std::span<double> y) {
  const std::size_t n_out = y.size();
  const std::size_t n_in = x.size();
  for (std::size_t o = 0; o < n_out; ++o) {
    const double* w = W.data() + o * n_in;
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n_in; i += 4) {
      a0 += w[i] * x[i];
      a1 += w[i + 1] * x[i + 1];
      a2 += w[i + 2] * x[i + 2];
      a3 += w[i + 3] * x[i + 3];
    }
    for (; i < n_in; ++i) a0 += w[i] * x[i];
    y[o] = b[o] + ((a0 + a1) + (a2 + a3));
  }
}

// gx += W^T g
inline void affine_transpose_acc(std::span<const double> W, std::span<const double> g, std::span<double> gx) {
  const std::size_t n_in = gx.size();
  for (std::size_t o = 0; o < g.size(); ++o) {
    const double go = g[o];
    if (go == 0.0) continue;
    const double* w = W.data() + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) gx[i] += go * w[i];
  }
}

// gW += g x^T, gb += g
inline void outer_acc(std::span<const double> g, std::span<const double> x, std::span<double> gW,
                      std::span<double> gb) {
  const std::size_t n_in = x.size();
  for (std::size_t o = 0; o < g.size(); ++o) {
    const double go = g[o];
    gb[o] += go;
    if (go == 0.0) continue;
    double* w = gW.data() + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) w[i] += go * x[i];
  }
}

}  // namespace kernel

// Activations of one forward pass; acts[0] is the input, acts.back() the output.
struct MlpTape {
  std::vector<std::vector<double>> acts;
  std::span<const double> output() const { return acts.back(); }
};

inline void mlp_forward_tape(const MLPSpec& spec, std::span<const double> params, std::span<const double> input,
                             MlpTape& tape) {
  require_shape(params.size() == spec.param_count(), "mlp_forward: parameter count mismatch");
  require_shape(input.size() == spec.input_size(),
                "mlp_forward: input length " + std::to_string(input.size()) + " != " +
                    std::to_string(spec.input_size()));
  tape.acts.resize(spec.widths.size());
  tape.acts[0].assign(input.begin(), input.end());
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t nw = spec.fan_out(l) * spec.fan_in(l);
    auto W = params.subspan(off, nw);
    auto b = params.subspan(off + nw, spec.fan_out(l));
    off += nw + spec.fan_out(l);
    auto& y = tape.acts[l + 1];
    y.resize(spec.fan_out(l));
    kernel::affine(W, b, tape.acts[l], y);
    if (l + 1 < spec.layers())
      for (auto& v : y) v = std::tanh(v);
  }
}

// Reverse pass over a recorded tape. Either output may be null; grad_params
// is accumulated into, grad_input is overwritten.
inline void mlp_backward(const MLPSpec& spec, std::span<const double> params, const MlpTape& tape,
                         std::span<const double> cotangent, std::vector<double>* grad_input,
                         std::span<double> grad_params_acc = {}) {
  require_shape(cotangent.size() == spec.output_size(), "mlp_vjp: cotangent length mismatch");
  const bool want_params = !grad_params_acc.empty();
  if (want_params) require_shape(grad_params_acc.size() == params.size(), "mlp_vjp: grad buffer mismatch");

  std::vector<std::size_t> offsets(spec.layers());
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    offsets[l] = off;
    off += spec.fan_out(l) * spec.fan_in(l) + spec.fan_out(l);
  }

  std::vector<double> g(cotangent.begin(), cotangent.end());
  std::vector<double> gx;
  for (std::size_t l = spec.layers(); l-- > 0;) {
    if (l + 1 < spec.layers()) {
      const auto& a = tape.acts[l + 1];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - a[i] * a[i];
    }
    const std::size_t nw = spec.fan_out(l) * spec.fan_in(l);
    auto W = params.subspan(offsets[l], nw);
    if (want_params)
      kernel::outer_acc(g, tape.acts[l], grad_params_acc.subspan(offsets[l], nw),
                        grad_params_acc.subspan(offsets[l] + nw, spec.fan_out(l)));
    if (l == 0 && grad_input == nullptr) break;
    gx.assign(spec.fan_in(l), 0.0);
    kernel::affine_transpose_acc(W, g, gx);
    g.swap(gx);
  }
  if (grad_input != nullptr) *grad_input = std::move(g);
}

inline std::vector<double> mlp_forward(const MLPSpec& spec, std::span<const double> params,
                                       std::span<const double> input) {
  MlpTape tape;
  mlp_forward_tape(spec, params, input, tape);
  return std::move(tape.acts.back());
}

struct ValueGrad {
  std::vector<double> value;
  std::vector<double> grad_input;
  std::vector<double> grad_params;
};

// Value and vector-Jacobian product of <cotangent, mlp(input)>.
inline ValueGrad mlp_vjp(const MLPSpec& spec, std::span<const double> params, std::span<const double> input,
                         std::span<const double> cotangent, bool want_input = true, bool want_params = true) {
  MlpTape tape;
  mlp_forward_tape(spec, params, input, tape);
  ValueGrad out;
  if (want_params) out.grad_params.assign(params.size(), 0.0);
  mlp_backward(spec, params, tape, cotangent, want_input ? &out.grad_input : nullptr,
               want_params ? std::span<double>(out.grad_params) : std::span<double>{});
  out.value = tape.acts.back();
  return out;
}

// Max relative error between an analytic gradient and central differences.
using ScalarWithGrad = std::function<double(std::span<const double>, std::vector<double>* grad)>;

inline double grad_check(const ScalarWithGrad& f, std::span<const double> x, double eps) {
  require(eps > 0.0, "grad_check: eps must be positive");
  std::vector<double> analytic;
  f(x, &analytic);
  require_shape(analytic.size() == x.size(), "grad_check: gradient length mismatch");
  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(probe, nullptr);
    probe[i] = x[i] - eps;
    const double down = f(probe, nullptr);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// ---- optimizer ----------------------------------------------------------

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double dropout_ctx = 0.1;
  double dropout_txt = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 0, "epochs must be >= 0");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(learning_rate > 0.0, "learning_rate must be > 0");
    require(dropout_ctx >= 0.0 && dropout_ctx < 1.0, "dropout_ctx must be in [0,1)");
    require(dropout_txt >= 0.0 && dropout_txt < 1.0, "dropout_txt must be in [0,1)");
  }
};

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m, v;
  long step_count = 0;

  explicit Adam(double learning_rate, std::size_t n) : lr(learning_rate), m(n, 0.0), v(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    require_shape(params.size() == m.size() && grad.size() == m.size(), "Adam: size mismatch");
    ++step_count;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

// ---- checkpoints --------------------------------------------------------

class CheckpointError : public Error {
 public:
  enum class Kind { UnrecognizedFormat, MalformedManifest, PayloadLengthMismatch };

  CheckpointError(Kind kind, const std::string& detail) : Error(describe(kind) + ": " + detail), kind_(kind) {}
  Kind kind() const { return kind_; }

  static std::string describe(Kind k) {
    switch (k) {
      case Kind::UnrecognizedFormat: return "unrecognized format";
      case Kind::MalformedManifest: return "malformed manifest";
      case Kind::PayloadLengthMismatch: return "payload length mismatch";
    }
    return "checkpoint error";
  }

 private:
  Kind kind_;
};

inline constexpr char kCheckpointMagic[] = "SGDS1";

inline void save_params(const ParamVector& p, const std::string& path) {
  require_shape(p.manifest_size() == p.values.size(), "save_params: manifest does not cover values");
  nlohmann::ordered_json manifest;
  manifest["spec"] = p.spec;
  manifest["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : p.manifest) manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
  if (!p.meta.empty()) manifest["meta"] = p.meta;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 5);
  os << manifest.dump() << '\n';
  for (double v : p.values) {
    const float f = static_cast<float>(v);
    char buf[4];
    std::memcpy(buf, &f, 4);
    os.write(buf, 4);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline ParamVector load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[5] = {};
  is.read(magic, 5);
  if (is.gcount() != 5 || std::memcmp(magic, kCheckpointMagic, 5) != 0)
    throw CheckpointError(CheckpointError::Kind::UnrecognizedFormat, path);

  std::string line;
  if (!std::getline(is, line) || is.eof())
    throw CheckpointError(CheckpointError::Kind::MalformedManifest, "missing manifest line in " + path);
  ParamVector p;
  try {
    const auto manifest = nlohmann::json::parse(line);
    p.spec = manifest.at("spec").get<std::vector<int>>();
    for (const auto& t : manifest.at("tensors"))
      p.manifest.push_back({t.at("name").get<std::string>(), t.at("shape").get<std::vector<std::size_t>>()});
    if (manifest.contains("meta")) p.meta = manifest["meta"].get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::MalformedManifest, e.what());
  }

  const std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t expected = p.manifest_size();
  if (payload.size() != expected * 4)
    throw CheckpointError(CheckpointError::Kind::PayloadLengthMismatch,
                          "expected " + std::to_string(expected * 4) + " bytes, found " +
                              std::to_string(payload.size()));
  p.values.resize(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    float f;
    std::memcpy(&f, payload.data() + 4 * i, 4);
    p.values[i] = static_cast<double>(f);
  }
  return p;
}

// Rounds every value to 32-bit precision, i.e. what a checkpoint round trip keeps.
inline void round_to_f32(ParamVector& p) {
  for (auto& v : p.values) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace sgds
