#pragma once

// Chunk-level joint-embedding predictive model: an encoder, a next-chunk
// predictor trained in representation space against an EMA copy of the
// encoder, and the cosine surprise score with its input gradient.

#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgds/error.hpp"
#include "sgds/nnkit.hpp"
#include "sgds/worldsim.hpp"

namespace sgds {

using Embedding = std::vector<double>;

struct JepaConfig {
  int E = 16;
  std::vector<int> encoder_hidden{64};
  std::vector<int> predictor_hidden{32};
  double momentum = 0.99;
};

struct JepaHandles {
  MLPSpec encoder_spec;
  std::vector<double> encoder;
  std::vector<double> ema_target;
  MLPSpec predictor_spec;
  std::vector<double> predictor;
  double momentum = 0.99;

  std::size_t embedding_size() const { return encoder_spec.output_size(); }
  std::size_t chunk_size() const { return encoder_spec.input_size(); }
};

// Anything that scores a candidate chunk against the chunk before it.
class SurpriseModel {
 public:
  virtual ~SurpriseModel() = default;
  virtual double surprise(const FrameChunk& context, const FrameChunk& candidate) const = 0;
  virtual std::vector<double> surprise_grad(const FrameChunk& context, const FrameChunk& candidate) const = 0;
};

inline JepaHandles make_jepa(std::size_t chunk_size, const JepaConfig& cfg, std::uint64_t seed) {
  require(cfg.momentum >= 0.0 && cfg.momentum <= 1.0, "momentum must be in [0,1]");
  std::vector<int> enc{static_cast<int>(chunk_size)};
  enc.insert(enc.end(), cfg.encoder_hidden.begin(), cfg.encoder_hidden.end());
  enc.push_back(cfg.E);
  std::vector<int> pred{cfg.E};
  pred.insert(pred.end(), cfg.predictor_hidden.begin(), cfg.predictor_hidden.end());
  pred.push_back(cfg.E);

  JepaHandles h;
  h.encoder_spec = MLPSpec(enc);
  h.predictor_spec = MLPSpec(pred);
  h.encoder = init_params(h.encoder_spec, stream_seed(seed, 0)).values;
  h.predictor = init_params(h.predictor_spec, stream_seed(seed, 1)).values;
  h.ema_target = h.encoder;
  h.momentum = cfg.momentum;
  return h;
}

inline Embedding encode(const JepaHandles& h, const FrameChunk& chunk) {
  require_shape(chunk.size() == h.chunk_size(), "encode: chunk size mismatch");
  return mlp_forward(h.encoder_spec, h.encoder, chunk.values);
}

inline Embedding encode_target(const JepaHandles& h, const FrameChunk& chunk) {
  require_shape(chunk.size() == h.chunk_size(), "encode_target: chunk size mismatch");
  return mlp_forward(h.encoder_spec, h.ema_target, chunk.values);
}

inline Embedding predict_next(const JepaHandles& h, std::span<const double> ctx_embedding) {
  require_shape(ctx_embedding.size() == h.embedding_size(), "predict_next: embedding size mismatch");
  return mlp_forward(h.predictor_spec, h.predictor, ctx_embedding);
}

namespace detail {

struct CosineParts {
  double dot, norm_u, norm_v;
};

inline CosineParts cosine_parts(std::span<const double> u, std::span<const double> v) {
  require_shape(u.size() == v.size(), "cosine_surprise: length mismatch");
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  CosineParts c{dot, std::sqrt(uu), std::sqrt(vv)};
  if (c.norm_u <= 1e-12 || c.norm_v <= 1e-12) throw DegenerateEmbedding();
  return c;
}

}  // namespace detail

// 1 - cos(u, v), in [0, 2]. Low means the two embeddings agree.
inline double cosine_surprise(std::span<const double> u, std::span<const double> v) {
  const auto c = detail::cosine_parts(u, v);
  return std::clamp(1.0 - c.dot / (c.norm_u * c.norm_v), 0.0, 2.0);
}

// d/dv of cosine_surprise(u, v).
inline std::vector<double> cosine_surprise_grad_v(std::span<const double> u, std::span<const double> v) {
  const auto c = detail::cosine_parts(u, v);
  const double inv = 1.0 / (c.norm_u * c.norm_v);
  const double cos = c.dot * inv;
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) g[i] = -(u[i] * inv - cos * v[i] / (c.norm_v * c.norm_v));
  return g;
}

inline double surprise(const JepaHandles& h, const FrameChunk& context, const FrameChunk& candidate) {
  const auto predicted = predict_next(h, encode(h, context));
  return cosine_surprise(predicted, encode(h, candidate));
}

inline std::vector<double> surprise_grad(const JepaHandles& h, const FrameChunk& context,
                                         const FrameChunk& candidate) {
  require_shape(candidate.size() == h.chunk_size(), "surprise_grad: chunk size mismatch");
  const auto predicted = predict_next(h, encode(h, context));
  MlpTape tape;
  mlp_forward_tape(h.encoder_spec, h.encoder, candidate.values, tape);
  const auto dv = cosine_surprise_grad_v(predicted, tape.output());
  std::vector<double> grad;
  mlp_backward(h.encoder_spec, h.encoder, tape, dv, &grad);
  return grad;
}

class JepaSurprise final : public SurpriseModel {
 public:
  explicit JepaSurprise(const JepaHandles& h) : h_(&h) {}
  double surprise(const FrameChunk& context, const FrameChunk& candidate) const override {
    return sgds::surprise(*h_, context, candidate);
  }
  std::vector<double> surprise_grad(const FrameChunk& context, const FrameChunk& candidate) const override {
    return sgds::surprise_grad(*h_, context, candidate);
  }

 private:
  const JepaHandles* h_;
};

struct JepaLoss {
  double loss = 0.0;
  std::vector<double> grad_encoder;
  std::vector<double> grad_predictor;
};

// Next-chunk prediction loss over consecutive pairs of each sequence,
// averaged over all pairs. The EMA target is a constant.
inline JepaLoss jepa_loss(const JepaHandles& h, std::span<const std::vector<FrameChunk>> sequences) {
  JepaLoss out;
  out.grad_encoder.assign(h.encoder.size(), 0.0);
  out.grad_predictor.assign(h.predictor.size(), 0.0);
  std::size_t pairs = 0;
  for (const auto& seq : sequences) {
    require(seq.size() >= 2, "jepa_loss: need at least two chunks per sequence");
    pairs += seq.size() - 1;
  }
  if (pairs == 0) return out;
  const double E = static_cast<double>(h.embedding_size());
  const double scale = 1.0 / (E * static_cast<double>(pairs));

  MlpTape enc_tape, pred_tape;
  std::vector<double> cot(h.embedding_size()), grad_z;
  for (const auto& seq : sequences) {
    for (std::size_t k = 0; k + 1 < seq.size(); ++k) {
      mlp_forward_tape(h.encoder_spec, h.encoder, seq[k].values, enc_tape);
      mlp_forward_tape(h.predictor_spec, h.predictor, enc_tape.output(), pred_tape);
      const auto target = encode_target(h, seq[k + 1]);
      const auto p = pred_tape.output();
      for (std::size_t i = 0; i < cot.size(); ++i) {
        const double d = p[i] - target[i];
        out.loss += d * d * scale;
        cot[i] = 2.0 * d * scale;
      }
      mlp_backward(h.predictor_spec, h.predictor, pred_tape, cot, &grad_z, out.grad_predictor);
      mlp_backward(h.encoder_spec, h.encoder, enc_tape, grad_z, nullptr, out.grad_encoder);
    }
  }
  return out;
}

inline void ema_update(JepaHandles& h) {
  const double m = h.momentum;
  require(m >= 0.0 && m <= 1.0, "ema_update: momentum must be in [0,1]");
  for (std::size_t i = 0; i < h.ema_target.size(); ++i)
    h.ema_target[i] = m * h.ema_target[i] + (1.0 - m) * h.encoder[i];
}

struct JepaTrainLog {
  std::vector<double> epoch_loss;
};

inline JepaHandles train_jepa(const std::vector<std::vector<FrameChunk>>& sequences, const TrainConfig& cfg,
                              const JepaConfig& jcfg, JepaTrainLog* log = nullptr) {
  cfg.validate();
  require(!sequences.empty(), "train_jepa: empty dataset");
  JepaHandles h = make_jepa(sequences.front().front().size(), jcfg, cfg.seed);
  Adam opt_enc(cfg.learning_rate, h.encoder.size());
  Adam opt_pred(cfg.learning_rate, h.predictor.size());
  Rng rng(stream_seed(cfg.seed, 2));

  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<FrameChunk>> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(sequences[order[i]]);
      auto l = jepa_loss(h, batch);
      opt_enc.step(h.encoder, l.grad_encoder);
      opt_pred.step(h.predictor, l.grad_predictor);
      ema_update(h);
      total += l.loss;
      ++steps;
    }
    if (log) log->epoch_loss.push_back(total / static_cast<double>(std::max<std::size_t>(steps, 1)));
  }
  return h;
}

// ---- checkpoint: <prefix>.encoder.ckpt, <prefix>.predictor.ckpt, <prefix>.json

inline void save_jepa(const JepaHandles& h, const std::string& prefix,
                      const std::map<std::string, std::string>& meta = {}) {
  ParamVector enc;
  enc.spec = h.encoder_spec.widths;
  enc.meta = meta;
  std::size_t off = 0;
  for (const auto& t : mlp_manifest(h.encoder_spec, "online.")) {
    enc.append(t.name, t.shape, std::span<const double>(h.encoder).subspan(off, t.size()));
    off += t.size();
  }
  off = 0;
  for (const auto& t : mlp_manifest(h.encoder_spec, "ema.")) {
    enc.append(t.name, t.shape, std::span<const double>(h.ema_target).subspan(off, t.size()));
    off += t.size();
  }
  ParamVector pred;
  pred.spec = h.predictor_spec.widths;
  pred.manifest = mlp_manifest(h.predictor_spec);
  pred.values = h.predictor;
  pred.meta = meta;
  save_params(enc, prefix + ".encoder.ckpt");
  save_params(pred, prefix + ".predictor.ckpt");

  nlohmann::ordered_json side{{"E", h.embedding_size()}, {"momentum", h.momentum}};
  std::ofstream os(prefix + ".json");
  if (!os) throw IoError("cannot write " + prefix + ".json");
  os << side.dump() << '\n';
}

inline JepaHandles load_jepa(const std::string& prefix, std::map<std::string, std::string>* meta = nullptr) {
  const auto enc = load_params(prefix + ".encoder.ckpt");
  const auto pred = load_params(prefix + ".predictor.ckpt");
  std::ifstream is(prefix + ".json");
  if (!is) throw IoError("cannot open " + prefix + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad sidecar " + prefix + ".json: " + e.what());
  }

  JepaHandles h;
  h.encoder_spec = MLPSpec(enc.spec);
  h.predictor_spec = MLPSpec(pred.spec);
  h.momentum = side.at("momentum").get<double>();
  const std::size_t n = h.encoder_spec.param_count();
  if (enc.values.size() != 2 * n || pred.values.size() != h.predictor_spec.param_count())
    throw CheckpointError(CheckpointError::Kind::PayloadLengthMismatch, "jepa tensors do not match specs");
  if (side.at("E").get<std::size_t>() != h.embedding_size())
    throw CheckpointError(CheckpointError::Kind::MalformedManifest, "sidecar E does not match encoder");
  h.encoder.assign(enc.values.begin(), enc.values.begin() + static_cast<std::ptrdiff_t>(n));
  h.ema_target.assign(enc.values.begin() + static_cast<std::ptrdiff_t>(n), enc.values.end());
  h.predictor = pred.values;
  if (meta) *meta = enc.meta;
  return h;
}

}  // namespace sgds
