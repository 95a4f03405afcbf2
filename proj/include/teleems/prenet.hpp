#ifndef TELEEMS_PRENET_HPP
#define TELEEMS_PRENET_HPP

// Multimodal multitask network: hash-embedding text encoder and GRU vitals
// encoder feed a concatenated joint embedding, read by four task heads.
// Gradients are exact (hand-written backpropagation); LoRA adapters can be
// attached to any dense layer.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "teleems/domain.hpp"
#include "teleems/error.hpp"
#include "teleems/random.hpp"

namespace teleems::prenet {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct PreNetConfig {
  std::size_t vocab_buckets = 4096;
  std::size_t d_t = 64;
  std::size_t d_v = 32;
  std::size_t d_in = 1;  // vitals channels per step
  std::size_t k1 = 2;
  std::size_t k2 = 2;
  std::size_t k4 = 2;
  double init_scale = 1.0;
  std::uint64_t seed = 0;

  std::size_t d_c() const { return d_t + d_v; }
  bool operator==(const PreNetConfig&) const = default;
};

enum class Task { Protocol, MedType, Quantity, Procedure };
inline constexpr std::array<Task, 4> kTasks = {Task::Protocol, Task::MedType, Task::Quantity, Task::Procedure};

inline std::string to_string(Task t) {
  switch (t) {
    case Task::Protocol: return "protocol";
    case Task::MedType: return "medtype";
    case Task::Quantity: return "quantity";
    case Task::Procedure: return "procedure";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  for (Task t : kTasks)
    if (to_string(t) == s) return t;
  fail(ErrorCode::InvalidArgument, "unknown task '" + std::string(s) + "'");
}

struct TaskMode {
  bool multi = true;
  Task task = Task::Protocol;

  static TaskMode multi_task() { return {}; }
  static TaskMode single(Task t) { return {false, t}; }
  bool active(Task t) const { return multi || task == t; }
  std::string str() const { return multi ? "multi" : "single:" + to_string(task); }
};

inline TaskMode parse_task_mode(std::string_view s) {
  if (s == "multi") return TaskMode::multi_task();
  if (s.starts_with("single:")) return TaskMode::single(parse_task(s.substr(7)));
  fail(ErrorCode::InvalidArgument, "mode must be multi or single:<task>");
}

enum class Modality { Fused, TextOnly, VitalsOnly };

inline std::string to_string(Modality m) {
  return m == Modality::Fused ? "fused" : m == Modality::TextOnly ? "text_only" : "vitals_only";
}

struct Labels {
  int protocol = 0;
  int med_type = 0;
  double quantity = 0.0;
  std::set<int> procedures;
};

struct Sample {
  std::vector<std::string> tokens;
  std::vector<std::vector<double>> vitals;  // steps x channels, values in [0, 1]
  Labels labels;
};

struct TaskOutputs {
  VectorXd protocol_probs;
  VectorXd medtype_probs;
  double quantity = 0.0;
  VectorXd procedure_probs;
};

struct LoraAdapter {
  MatrixXd A;  // r x d_in
  MatrixXd B;  // d_out x r
  std::size_t rank() const { return static_cast<std::size_t>(A.rows()); }
};

// ---------------------------------------------------------------------------
// Model

/// Parameter tensors in declaration (and checkpoint) order.
enum Param : std::size_t {
  TextE, TextB,
  GruWz, GruUz, GruBz, GruWr, GruUr, GruBr, GruWh, GruUh, GruBh,
  ProtoW, ProtoB, MedW, MedB, QtyW, QtyB, ProcW, ProcB,
  kParamCount
};

inline constexpr std::array<std::string_view, kParamCount> kParamNames = {
    "text.embedding", "text.bias",
    "gru.Wz", "gru.Uz", "gru.bz", "gru.Wr", "gru.Ur", "gru.br", "gru.Wh", "gru.Uh", "gru.bh",
    "head.protocol.W", "head.protocol.b", "head.medtype.W", "head.medtype.b",
    "head.quantity.W", "head.quantity.b", "head.procedure.W", "head.procedure.b"};

inline std::optional<Param> param_by_name(std::string_view name) {
  for (std::size_t i = 0; i < kParamCount; ++i)
    if (kParamNames[i] == name) return static_cast<Param>(i);
  return std::nullopt;
}

inline bool is_bias(Param p) {
  return p == TextB || p == GruBz || p == GruBr || p == GruBh || p == ProtoB || p == MedB || p == QtyB || p == ProcB;
}

/// Dense layers that accept adapters.
inline bool adaptable(Param p) {
  switch (p) {
    case GruWz: case GruUz: case GruWr: case GruUr: case GruWh: case GruUh:
    case ProtoW: case MedW: case QtyW: case ProcW:
      return true;
    default:
      return false;
  }
}

struct PreNetModel {
  PreNetConfig cfg;
  std::vector<MatrixXd> params;  // biases are d x 1
  std::map<Param, LoraAdapter> adapters;

  const MatrixXd& operator[](Param p) const { return params[p]; }
  MatrixXd& operator[](Param p) { return params[p]; }

  /// With adapters attached only adapter matrices and the heads' own
  /// non-adapted tensors train; everything else is frozen.
  bool trainable(Param p) const {
    if (adapters.empty()) return true;
    if (adapters.count(p)) return false;
    return p >= ProtoW;
  }
};

inline std::array<std::pair<std::size_t, std::size_t>, kParamCount> param_shapes(const PreNetConfig& c) {
  const auto v = c.d_v, x = c.d_in, dc = c.d_c();
  return {{{c.vocab_buckets, c.d_t}, {c.d_t, 1},
           {v, x}, {v, v}, {v, 1}, {v, x}, {v, v}, {v, 1}, {v, x}, {v, v}, {v, 1},
           {c.k1, dc}, {c.k1, 1}, {c.k2, dc}, {c.k2, 1}, {1, dc}, {1, 1}, {c.k4, dc}, {c.k4, 1}}};
}

inline void validate_config(const PreNetConfig& c) {
  if (c.vocab_buckets == 0 || c.d_t == 0 || c.d_v == 0 || c.d_in == 0)
    fail(ErrorCode::ShapeError, "model dimensions must be positive");
  if (c.k1 < 2 || c.k2 < 2 || c.k4 < 1) fail(ErrorCode::ShapeError, "need K1, K2 >= 2 and K4 >= 1");
}

/// Seeded uniform init in +-init_scale/sqrt(fan_in); embeddings in
/// +-init_scale/2; biases zero.
inline PreNetModel make_model(const PreNetConfig& cfg) {
  validate_config(cfg);
  PreNetModel m;
  m.cfg = cfg;
  const auto shapes = param_shapes(cfg);
  Rng rng(cfg.seed);
  for (std::size_t i = 0; i < kParamCount; ++i) {
    MatrixXd t = MatrixXd::Zero(static_cast<Eigen::Index>(shapes[i].first), static_cast<Eigen::Index>(shapes[i].second));
    if (!is_bias(static_cast<Param>(i))) {
      const double s = i == TextE ? 0.5 * cfg.init_scale : cfg.init_scale / std::sqrt(static_cast<double>(t.cols()));
      for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = rng.uniform(-s, s);
    }
    m.params.push_back(std::move(t));
  }
  return m;
}

inline PreNetModel zero_model(const PreNetConfig& cfg) {
  PreNetModel m = make_model(cfg);
  for (auto& p : m.params) p.setZero();
  return m;
}

inline std::size_t base_parameter_count(const PreNetModel& m) {
  std::size_t n = 0;
  for (const auto& p : m.params) n += static_cast<std::size_t>(p.size());
  return n;
}

// ---------------------------------------------------------------------------
// Dense layer with optional adapter: W0 x + B (A x)

namespace detail {

inline VectorXd apply(const PreNetModel& m, Param p, const VectorXd& x) {
  VectorXd y = m[p] * x;
  if (auto it = m.adapters.find(p); it != m.adapters.end()) y += it->second.B * (it->second.A * x);
  return y;
}

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

inline VectorXd sigmoid(const VectorXd& z) { return z.unaryExpr([](double v) { return sigmoid(v); }); }

inline VectorXd softmax(const VectorXd& z) {
  VectorXd e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

inline double log_sum_exp(const VectorXd& z) {
  const double mx = z.maxCoeff();
  return mx + std::log((z.array() - mx).exp().sum());
}

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoders and heads

inline std::size_t bucket_of(std::string_view token, std::size_t buckets) { return fnv1a(token) % buckets; }

/// F_T = tanh(mean of bucket embeddings + bias); empty input gives tanh(bias).
inline VectorXd encode_text(const std::vector<std::string>& tokens, const PreNetModel& m) {
  VectorXd a = VectorXd::Zero(static_cast<Eigen::Index>(m.cfg.d_t));
  for (const auto& t : tokens)
    a += m[TextE].row(static_cast<Eigen::Index>(bucket_of(t, m.cfg.vocab_buckets))).transpose();
  if (!tokens.empty()) a /= static_cast<double>(tokens.size());
  a += m[TextB].col(0);
  return a.array().tanh().matrix();
}

namespace detail {
struct GruStep {
  VectorXd x, h_prev, z, r, rh, hh;
};

inline VectorXd gru_run(const std::vector<std::vector<double>>& series, const PreNetModel& m,
                        std::vector<GruStep>* cache) {
  if (series.empty()) fail(ErrorCode::EmptySeries, "vitals series is empty");
  VectorXd h = VectorXd::Zero(static_cast<Eigen::Index>(m.cfg.d_v));
  for (const auto& step : series) {
    if (step.size() != m.cfg.d_in)
      fail(ErrorCode::ShapeError, "vitals step has " + std::to_string(step.size()) + " channels, model expects " +
                                      std::to_string(m.cfg.d_in));
    GruStep s;
    s.x = Eigen::Map<const VectorXd>(step.data(), static_cast<Eigen::Index>(step.size()));
    s.h_prev = h;
    s.z = sigmoid(VectorXd(apply(m, GruWz, s.x) + apply(m, GruUz, h) + m[GruBz].col(0)));
    s.r = sigmoid(VectorXd(apply(m, GruWr, s.x) + apply(m, GruUr, h) + m[GruBr].col(0)));
    s.rh = s.r.cwiseProduct(h);
    s.hh = (apply(m, GruWh, s.x) + apply(m, GruUh, s.rh) + m[GruBh].col(0)).array().tanh().matrix();
    h = (VectorXd::Ones(h.size()) - s.z).cwiseProduct(h) + s.z.cwiseProduct(s.hh);
    if (cache) cache->push_back(std::move(s));
  }
  return h;
}
}  // namespace detail

/// Final hidden state of the gated recurrence started from h = 0.
inline VectorXd encode_vitals(const std::vector<std::vector<double>>& series, const PreNetModel& m) {
  return detail::gru_run(series, m, nullptr);
}

/// Single-kind series, one channel per step.
inline VectorXd encode_vitals(const domain::VitalsSeries& series, const PreNetModel& m) {
  std::vector<std::vector<double>> steps;
  for (double v : series.values) steps.push_back({v});
  return encode_vitals(steps, m);
}

struct JointEmbedding {
  VectorXd values;
  bool text_present = true;
  bool vitals_present = true;
};

/// [F_T, F_V]; an absent side is zero-filled and flagged.
inline JointEmbedding fuse(const std::optional<VectorXd>& ft, const std::optional<VectorXd>& fv, std::size_t d_t,
                           std::size_t d_v) {
  JointEmbedding j;
  j.values = VectorXd::Zero(static_cast<Eigen::Index>(d_t + d_v));
  if (ft) {
    if (static_cast<std::size_t>(ft->size()) != d_t) fail(ErrorCode::ShapeError, "text feature size mismatch");
    j.values.head(static_cast<Eigen::Index>(d_t)) = *ft;
  }
  if (fv) {
    if (static_cast<std::size_t>(fv->size()) != d_v) fail(ErrorCode::ShapeError, "vitals feature size mismatch");
    j.values.tail(static_cast<Eigen::Index>(d_v)) = *fv;
  }
  j.text_present = ft.has_value();
  j.vitals_present = fv.has_value();
  return j;
}

inline JointEmbedding fuse(const VectorXd& ft, const VectorXd& fv) {
  return fuse(std::optional<VectorXd>(ft), std::optional<VectorXd>(fv), static_cast<std::size_t>(ft.size()),
              static_cast<std::size_t>(fv.size()));
}

struct HeadLogits {
  VectorXd protocol, medtype, procedure;
  double quantity = 0.0;
};

inline HeadLogits head_logits(const VectorXd& fc, const PreNetModel& m) {
  if (static_cast<std::size_t>(fc.size()) != m.cfg.d_c())
    fail(ErrorCode::ShapeError, "joint embedding has size " + std::to_string(fc.size()) + ", model expects " +
                                    std::to_string(m.cfg.d_c()));
  HeadLogits l;
  l.protocol = detail::apply(m, ProtoW, fc) + m[ProtoB].col(0);
  l.medtype = detail::apply(m, MedW, fc) + m[MedB].col(0);
  l.quantity = detail::apply(m, QtyW, fc)(0) + m[QtyB](0, 0);
  l.procedure = detail::apply(m, ProcW, fc) + m[ProcB].col(0);
  return l;
}

inline TaskOutputs outputs_from_logits(const HeadLogits& l) {
  return {detail::softmax(l.protocol), detail::softmax(l.medtype), l.quantity, detail::sigmoid(l.procedure)};
}

inline TaskOutputs forward(const VectorXd& fc, const PreNetModel& m) { return outputs_from_logits(head_logits(fc, m)); }

inline JointEmbedding embed(const Sample& s, const PreNetModel& m, Modality mode) {
  std::optional<VectorXd> ft, fv;
  if (mode != Modality::VitalsOnly) ft = encode_text(s.tokens, m);
  if (mode != Modality::TextOnly) fv = encode_vitals(s.vitals, m);
  return fuse(ft, fv, m.cfg.d_t, m.cfg.d_v);
}

inline TaskOutputs predict(const Sample& s, const PreNetModel& m, Modality mode = Modality::Fused) {
  return forward(embed(s, m, mode).values, m);
}

// ---------------------------------------------------------------------------
// Loss

inline void validate_labels(const Labels& y, const PreNetConfig& c, TaskMode mode) {
  auto in = [](int v, std::size_t k) { return v >= 0 && static_cast<std::size_t>(v) < k; };
  if (mode.active(Task::Protocol) && !in(y.protocol, c.k1))
    fail(ErrorCode::LabelError, "protocol label " + std::to_string(y.protocol) + " out of range");
  if (mode.active(Task::MedType) && !in(y.med_type, c.k2))
    fail(ErrorCode::LabelError, "medtype label " + std::to_string(y.med_type) + " out of range");
  if (mode.active(Task::Quantity) && !std::isfinite(y.quantity))
    fail(ErrorCode::LabelError, "quantity label is not finite");
  if (mode.active(Task::Procedure))
    for (int p : y.procedures)
      if (!in(p, c.k4)) fail(ErrorCode::LabelError, "procedure label " + std::to_string(p) + " out of range");
}

/// CE + CE + squared error + mean BCE on probabilities, unit weights.
inline double loss(const TaskOutputs& out, const Labels& y, TaskMode mode) {
  const PreNetConfig shape{1, 1, 1, 1, static_cast<std::size_t>(out.protocol_probs.size()),
                           static_cast<std::size_t>(out.medtype_probs.size()),
                           static_cast<std::size_t>(out.procedure_probs.size())};
  validate_labels(y, shape, mode);
  auto nlog = [](double p) { return -std::log(std::max(p, 1e-300)); };
  double l = 0.0;
  if (mode.active(Task::Protocol)) l += nlog(out.protocol_probs(y.protocol));
  if (mode.active(Task::MedType)) l += nlog(out.medtype_probs(y.med_type));
  if (mode.active(Task::Quantity)) l += (out.quantity - y.quantity) * (out.quantity - y.quantity);
  if (mode.active(Task::Procedure)) {
    double b = 0.0;
    for (Eigen::Index k = 0; k < out.procedure_probs.size(); ++k) {
      const double p = out.procedure_probs(k);
      b += y.procedures.count(static_cast<int>(k)) ? nlog(p) : nlog(1.0 - p);
    }
    l += b / static_cast<double>(out.procedure_probs.size());
  }
  return l;
}

// ---------------------------------------------------------------------------
// Backpropagation

struct Gradients {
  std::vector<MatrixXd> params;
  std::map<Param, LoraAdapter> adapters;  // dA, dB

  static Gradients zeros_like(const PreNetModel& m) {
    Gradients g;
    for (const auto& p : m.params) g.params.push_back(MatrixXd::Zero(p.rows(), p.cols()));
    for (const auto& [k, a] : m.adapters)
      g.adapters[k] = {MatrixXd::Zero(a.A.rows(), a.A.cols()), MatrixXd::Zero(a.B.rows(), a.B.cols())};
    return g;
  }
};

namespace detail {

/// Accumulates gradients for y = W0 x + B A x (W0 included even when frozen)
/// and returns dL/dx.
inline VectorXd apply_backward(const PreNetModel& m, Param p, const VectorXd& x, const VectorXd& gy, Gradients& g) {
  g.params[p].noalias() += gy * x.transpose();
  auto it = m.adapters.find(p);
  if (it == m.adapters.end()) return m[p].transpose() * gy;
  const auto& a = it->second;
  auto& ga = g.adapters[p];
  const VectorXd ax = a.A * x;
  const VectorXd btg = a.B.transpose() * gy;
  ga.B.noalias() += gy * ax.transpose();
  ga.A.noalias() += btg * x.transpose();
  return m[p].transpose() * gy + a.A.transpose() * btg;
}

}  // namespace detail

/// Loss of one sample; gradients are added to `g` scaled by `weight`.
inline double backprop_sample(const PreNetModel& m, const Sample& s, TaskMode mode, Modality modality, Gradients& g,
                              double weight = 1.0) {
  validate_labels(s.labels, m.cfg, mode);
  const auto dt = static_cast<Eigen::Index>(m.cfg.d_t), dv = static_cast<Eigen::Index>(m.cfg.d_v);

  // Forward with caches.
  std::vector<std::size_t> ids;
  VectorXd ft = VectorXd::Zero(dt);
  if (modality != Modality::VitalsOnly) {
    for (const auto& t : s.tokens) ids.push_back(bucket_of(t, m.cfg.vocab_buckets));
    ft = encode_text(s.tokens, m);
  }
  std::vector<detail::GruStep> steps;
  VectorXd fv = VectorXd::Zero(dv);
  if (modality != Modality::TextOnly) fv = detail::gru_run(s.vitals, m, &steps);
  VectorXd fc(dt + dv);
  fc << ft, fv;
  const HeadLogits lg = head_logits(fc, m);

  // Loss and head gradients from logits.
  double l = 0.0;
  VectorXd dfc = VectorXd::Zero(dt + dv);
  auto head = [&](Param w, Param b, const VectorXd& dz) {
    g.params[b].col(0) += weight * dz;
    dfc += detail::apply_backward(m, w, fc, weight * dz, g);
  };
  if (mode.active(Task::Protocol)) {
    l += detail::log_sum_exp(lg.protocol) - lg.protocol(s.labels.protocol);
    VectorXd dz = detail::softmax(lg.protocol);
    dz(s.labels.protocol) -= 1.0;
    head(ProtoW, ProtoB, dz);
  }
  if (mode.active(Task::MedType)) {
    l += detail::log_sum_exp(lg.medtype) - lg.medtype(s.labels.med_type);
    VectorXd dz = detail::softmax(lg.medtype);
    dz(s.labels.med_type) -= 1.0;
    head(MedW, MedB, dz);
  }
  if (mode.active(Task::Quantity)) {
    const double e = lg.quantity - s.labels.quantity;
    l += e * e;
    head(QtyW, QtyB, VectorXd::Constant(1, 2.0 * e));
  }
  if (mode.active(Task::Procedure)) {
    const auto k4 = lg.procedure.size();
    VectorXd dz(k4);
    double b = 0.0;
    for (Eigen::Index k = 0; k < k4; ++k) {
      const double t = s.labels.procedures.count(static_cast<int>(k)) ? 1.0 : 0.0;
      b += detail::softplus(lg.procedure(k)) - t * lg.procedure(k);
      dz(k) = (detail::sigmoid(lg.procedure(k)) - t) / static_cast<double>(k4);
    }
    l += b / static_cast<double>(k4);
    head(ProcW, ProcB, dz);
  }

  // Text encoder.
  if (modality != Modality::VitalsOnly) {
    const VectorXd da = dfc.head(dt).cwiseProduct((VectorXd::Ones(dt) - ft.cwiseProduct(ft)));
    g.params[TextB].col(0) += da;
    if (!ids.empty()) {
      const VectorXd per = da / static_cast<double>(ids.size());
      for (auto id : ids) g.params[TextE].row(static_cast<Eigen::Index>(id)) += per.transpose();
    }
  }

  // GRU, backward through time.
  if (modality != Modality::TextOnly) {
    VectorXd dh = dfc.tail(dv);
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
      const auto& st = *it;
      const VectorXd ones = VectorXd::Ones(dv);
      const VectorXd dz = dh.cwiseProduct(st.hh - st.h_prev);
      const VectorXd dhh = dh.cwiseProduct(st.z);
      VectorXd dprev = dh.cwiseProduct(ones - st.z);

      const VectorXd dah = dhh.cwiseProduct(ones - st.hh.cwiseProduct(st.hh));
      g.params[GruBh].col(0) += dah;
      detail::apply_backward(m, GruWh, st.x, dah, g);
      const VectorXd drh = detail::apply_backward(m, GruUh, st.rh, dah, g);
      const VectorXd dr = drh.cwiseProduct(st.h_prev);
      dprev += drh.cwiseProduct(st.r);

      const VectorXd dar = dr.cwiseProduct(st.r.cwiseProduct(ones - st.r));
      g.params[GruBr].col(0) += dar;
      detail::apply_backward(m, GruWr, st.x, dar, g);
      dprev += detail::apply_backward(m, GruUr, st.h_prev, dar, g);

      const VectorXd daz = dz.cwiseProduct(st.z.cwiseProduct(ones - st.z));
      g.params[GruBz].col(0) += daz;
      detail::apply_backward(m, GruWz, st.x, daz, g);
      dprev += detail::apply_backward(m, GruUz, st.h_prev, daz, g);
      dh = dprev;
    }
  }
  return l;
}

/// Mean loss over the batch and its exact gradient.
inline double batch_gradients(const PreNetModel& m, const std::vector<Sample>& batch, TaskMode mode,
                              Modality modality, Gradients& g) {
  if (batch.empty()) fail(ErrorCode::InvalidArgument, "empty batch");
  g = Gradients::zeros_like(m);
  const double w = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& s : batch) total += backprop_sample(m, s, mode, modality, g, w);
  return total * w;
}

inline double batch_loss(const PreNetModel& m, const std::vector<Sample>& batch, TaskMode mode,
                         Modality modality = Modality::Fused) {
  double total = 0.0;
  for (const auto& s : batch) total += loss(predict(s, m, modality), s.labels, mode);
  return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void update(PreNetModel& m, const Gradients& g, double lr) = 0;
};

class Sgd : public Optimizer {
 public:
  void update(PreNetModel& m, const Gradients& g, double lr) override {
    for (std::size_t i = 0; i < kParamCount; ++i)
      if (m.trainable(static_cast<Param>(i))) m.params[i] -= lr * g.params[i];
    for (auto& [k, a] : m.adapters) {
      a.A -= lr * g.adapters.at(k).A;
      a.B -= lr * g.adapters.at(k).B;
    }
  }
};

class Adam : public Optimizer {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  void update(PreNetModel& m, const Gradients& g, double lr) override {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < kParamCount; ++i)
      if (m.trainable(static_cast<Param>(i))) step("p" + std::to_string(i), m.params[i], g.params[i], lr, c1, c2);
    for (auto& [k, a] : m.adapters) {
      step("A" + std::to_string(k), a.A, g.adapters.at(k).A, lr, c1, c2);
      step("B" + std::to_string(k), a.B, g.adapters.at(k).B, lr, c1, c2);
    }
  }

 private:
  void step(const std::string& key, MatrixXd& w, const MatrixXd& grad, double lr, double c1, double c2) {
    auto [it, fresh] = state_.try_emplace(key);
    if (fresh) it->second = {MatrixXd::Zero(w.rows(), w.cols()), MatrixXd::Zero(w.rows(), w.cols())};
    auto& [mom, vel] = it->second;
    mom = b1_ * mom + (1.0 - b1_) * grad;
    vel = b2_ * vel + (1.0 - b2_) * grad.cwiseProduct(grad);
    w.array() -= lr * (mom.array() / c1) / ((vel.array() / c2).sqrt() + eps_);
  }

  double b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::pair<MatrixXd, MatrixXd>> state_;
};

/// One gradient step. The default optimizer is plain gradient descent.
inline double train_step(PreNetModel& m, const std::vector<Sample>& batch, double lr, TaskMode mode = {},
                         Modality modality = Modality::Fused, Optimizer* opt = nullptr) {
  if (!(lr > 0.0)) fail(ErrorCode::InvalidArgument, "learning rate must be positive");
  Gradients g;
  const double l = batch_gradients(m, batch, mode, modality, g);
  if (!std::isfinite(l)) fail(ErrorCode::NonFiniteLoss, "loss is not finite");
  Sgd sgd;
  (opt ? *opt : static_cast<Optimizer&>(sgd)).update(m, g, lr);
  return l;
}

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  bool adam = true;
  TaskMode mode;
  Modality modality = Modality::Fused;
  std::uint64_t seed = 0;
};

/// Minibatches drawn from seeded epoch permutations; returns the loss of
/// every step.
inline std::vector<double> train(PreNetModel& m, const std::vector<Sample>& data, const TrainConfig& cfg) {
  if (data.empty()) fail(ErrorCode::InvalidArgument, "no training samples");
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  Adam adam;
  Sgd sgd;
  Optimizer& opt = cfg.adam ? static_cast<Optimizer&>(adam) : static_cast<Optimizer&>(sgd);
  std::vector<double> losses;
  std::vector<Sample> batch;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    batch.clear();
    while (batch.size() < std::min(cfg.batch_size, data.size())) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    losses.push_back(train_step(m, batch, cfg.lr, cfg.mode, cfg.modality, &opt));
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Ranking

/// Indices of the k largest probabilities, descending; ties to smaller index.
inline std::vector<int> predict_topk(const VectorXd& probs, std::size_t k) {
  if (k < 1 || k > static_cast<std::size_t>(probs.size()))
    fail(ErrorCode::RangeError, "k=" + std::to_string(k) + " outside 1.." + std::to_string(probs.size()));
  std::vector<int> idx(static_cast<std::size_t>(probs.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return probs(a) > probs(b); });
  idx.resize(k);
  return idx;
}

struct TopK {
  std::vector<int> protocol;
  std::vector<int> medtype;
};

inline TopK predict_topk(const TaskOutputs& out, std::size_t k) {
  return {predict_topk(out.protocol_probs, k), predict_topk(out.medtype_probs, k)};
}

// ---------------------------------------------------------------------------
// LoRA

/// A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)) seeded per layer, B = 0.
inline void lora_attach(PreNetModel& m, const std::vector<std::string>& layer_ids, std::size_t rank,
                        std::uint64_t seed) {
  std::vector<Param> layers;
  for (const auto& id : layer_ids) {
    auto p = param_by_name(id);
    if (!p || !adaptable(*p)) fail(ErrorCode::InvalidArgument, "'" + id + "' is not an adaptable layer");
    const auto d_out = static_cast<std::size_t>(m[*p].rows()), d_in = static_cast<std::size_t>(m[*p].cols());
    if (rank < 1 || rank > std::min(d_out, d_in))
      fail(ErrorCode::RankError, "rank " + std::to_string(rank) + " invalid for " + id + " (" +
                                     std::to_string(d_out) + "x" + std::to_string(d_in) + ")");
    layers.push_back(*p);
  }
  for (Param p : layers) {
    Rng rng(seed_for(seed, p));
    const auto r = static_cast<Eigen::Index>(rank);
    LoraAdapter a{MatrixXd(r, m[p].cols()), MatrixXd::Zero(m[p].rows(), r)};
    const double s = 1.0 / std::sqrt(static_cast<double>(m[p].cols()));
    for (Eigen::Index i = 0; i < a.A.rows(); ++i)
      for (Eigen::Index j = 0; j < a.A.cols(); ++j) a.A(i, j) = rng.uniform(-s, s);
    m.adapters[p] = std::move(a);
  }
}

/// Folds every adapter into its base weight: W0 + B A.
inline PreNetModel lora_merge(const PreNetModel& m) {
  PreNetModel out = m;
  for (const auto& [p, a] : m.adapters) out[p] += a.B * a.A;
  out.adapters.clear();
  return out;
}

inline std::size_t lora_trainable_count(const PreNetModel& m) {
  std::size_t n = 0;
  for (const auto& [p, a] : m.adapters) n += static_cast<std::size_t>(a.A.size() + a.B.size());
  return n;
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary

namespace detail {
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline void put_matrix(std::string& out, const MatrixXd& w) {
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) put_f64(out, w(r, c));
}

struct Reader {
  std::string_view data;
  std::size_t pos = 0;
  std::uint64_t u64() {
    if (pos + 8 > data.size()) fail(ErrorCode::Io, "checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void matrix(MatrixXd& w) {
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = f64();
  }
  void magic(std::string_view expect) {
    if (data.substr(0, 4) != expect) fail(ErrorCode::Io, "not a " + std::string(expect) + " file");
    pos = 4;
  }
};
}  // namespace detail

/// "PRNT", version, dims, K1/K2/K4, adapter ranks, then every tensor
/// row-major in declaration order. Adapters go in a separate file.
inline std::string checkpoint_bytes(const PreNetModel& m) {
  std::string out = "PRNT";
  detail::put_u64(out, detail::kCheckpointVersion);
  const auto& c = m.cfg;
  for (std::size_t v : {c.vocab_buckets, c.d_t, c.d_v, c.d_in, c.k1, c.k2, c.k4}) detail::put_u64(out, v);
  detail::put_u64(out, m.adapters.size());
  for (const auto& [p, a] : m.adapters) {
    detail::put_u64(out, p);
    detail::put_u64(out, a.rank());
  }
  for (const auto& w : m.params) detail::put_matrix(out, w);
  return out;
}

inline PreNetModel model_from_bytes(std::string_view bytes) {
  detail::Reader in{bytes};
  in.magic("PRNT");
  if (in.u64() != detail::kCheckpointVersion) fail(ErrorCode::Io, "unsupported checkpoint version");
  PreNetConfig c;
  for (std::size_t* f : {&c.vocab_buckets, &c.d_t, &c.d_v, &c.d_in, &c.k1, &c.k2, &c.k4})
    *f = static_cast<std::size_t>(in.u64());
  validate_config(c);
  const auto n_adapters = in.u64();
  for (std::uint64_t i = 0; i < 2 * n_adapters; ++i) in.u64();
  PreNetModel m = zero_model(c);
  for (auto& w : m.params) in.matrix(w);
  if (in.pos != bytes.size()) fail(ErrorCode::Io, "trailing bytes in checkpoint");
  return m;
}

inline std::string adapter_bytes(const PreNetModel& m) {
  std::string out = "PRLA";
  detail::put_u64(out, detail::kCheckpointVersion);
  detail::put_u64(out, m.adapters.size());
  for (const auto& [p, a] : m.adapters) {
    detail::put_u64(out, p);
    detail::put_u64(out, a.rank());
    detail::put_u64(out, static_cast<std::uint64_t>(a.B.rows()));
    detail::put_u64(out, static_cast<std::uint64_t>(a.A.cols()));
    detail::put_matrix(out, a.A);
    detail::put_matrix(out, a.B);
  }
  return out;
}

/// Replaces the model's adapters with those stored in `bytes`.
inline void load_adapters(PreNetModel& m, std::string_view bytes) {
  detail::Reader in{bytes};
  in.magic("PRLA");
  if (in.u64() != detail::kCheckpointVersion) fail(ErrorCode::Io, "unsupported adapter version");
  std::map<Param, LoraAdapter> loaded;
  for (auto n = in.u64(); n > 0; --n) {
    const auto p = in.u64();
    if (p >= kParamCount || !adaptable(static_cast<Param>(p))) fail(ErrorCode::Io, "bad adapter layer");
    const auto r = static_cast<Eigen::Index>(in.u64()), d_out = static_cast<Eigen::Index>(in.u64()),
               d_in = static_cast<Eigen::Index>(in.u64());
    const auto& w = m[static_cast<Param>(p)];
    if (d_out != w.rows() || d_in != w.cols()) fail(ErrorCode::ShapeError, "adapter shape does not match the model");
    LoraAdapter a{MatrixXd(r, d_in), MatrixXd(d_out, r)};
    in.matrix(a.A);
    in.matrix(a.B);
    loaded[static_cast<Param>(p)] = std::move(a);
  }
  if (in.pos != bytes.size()) fail(ErrorCode::Io, "trailing bytes in adapter file");
  m.adapters = std::move(loaded);
}

inline void save_checkpoint(const PreNetModel& m, const std::string& path) { domain::write_file(path, checkpoint_bytes(m)); }
inline PreNetModel load_checkpoint(const std::string& path) { return model_from_bytes(domain::read_file(path)); }

}  // namespace teleems::prenet

#endif  // TELEEMS_PRENET_HPP
