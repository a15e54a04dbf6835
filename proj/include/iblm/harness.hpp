#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "iblm/checkpoint.hpp"
#include "iblm/config.hpp"
#include "iblm/diagnostics.hpp"
#include "iblm/entropy.hpp"
#include "iblm/error.hpp"
#include "iblm/gapt.hpp"
#include "iblm/nets.hpp"
#include "iblm/ops.hpp"
#include "iblm/optim.hpp"
#include "iblm/runlog.hpp"
#include "iblm/tasks.hpp"
#include "iblm/tape.hpp"

namespace iblm::harness {

// ---------------------------------------------------------------------------
// Errors and small helpers.

struct AbortInfo {
  long step = 0;
  std::string phase;
  std::string quantity;
};

// Raised when a run meets a non-finite value; the partial log is already on disk.
class RunAborted : public Error {
 public:
  RunAborted(AbortInfo info, const std::string& detail)
      : Error("run aborted at step " + std::to_string(info.step) + " (" + info.phase + "): non-finite " + info.quantity +
              (detail.empty() ? "" : " [" + detail + "]")),
        info_(std::move(info)) {}
  const AbortInfo& info() const noexcept { return info_; }

 private:
  AbortInfo info_;
};

// Differentiable MBE; order 2 takes the trace identity.
inline Var mbe_var(Var r, const MbeConfig& c) {
  return c.alpha == 2.0 ? mbe_alpha2_fast(r, c.normalize, c.epsilon) : mbe(r, c);
}

inline double mbe_of(const Tensor& r, const MbeConfig& c) {
  return c.alpha == 2.0 ? mbe_alpha2_value(r, c.normalize, c.epsilon) : mbe_value(r, c);
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.storage())
    if (!std::isfinite(v)) return false;
  return true;
}

// Halts when a validation value exceeds the best earlier value by more than
// the threshold fraction, once past the activation step.
class EarlyStopper {
 public:
  EarlyStopper(double threshold_fraction, long activation_step, bool enabled = true)
      : fraction_(threshold_fraction), activation_(activation_step), enabled_(enabled) {
    if (!(threshold_fraction > 0.0)) throw ConfigError("early stop: threshold_fraction must be > 0");
  }

  bool observe(long step, double value) {
    if (!enabled_) return false;
    const bool halt = step > activation_ && value > best_ * (1.0 + fraction_);
    best_ = std::min(best_, value);
    return halt;
  }

  double best() const noexcept { return best_; }

 private:
  double fraction_;
  long activation_;
  bool enabled_;
  double best_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Experiments supply data, the model forward pass and evaluation.

struct TrainForward {
  Var ce;                   // scalar task loss
  std::vector<Var> layers;  // R_1 .. R_L
};

class Experiment {
 public:
  virtual ~Experiment() = default;
  virtual ParameterSet init_params() = 0;
  virtual int layer_count() const = 0;
  // Training batch for `step`, drawn from `rng`.
  virtual TrainForward forward(Tape& tape, const BoundParams& params, long step, std::mt19937_64& rng) = 0;
  virtual double validate(const ParameterSet& params) = 0;
  // MBE term of one layer of a training forward pass.
  virtual Var layer_mbe(const TrainForward& f, int layer, const MbeConfig& c) {
    return mbe_var(f.layers.at(static_cast<std::size_t>(layer - 1)), c);
  }
  // Experiment-specific fields of the final summary.
  virtual json summarize(const ParameterSet& params) = 0;
};

// Mean per-layer MBE over a set of fixed representations.
inline std::vector<double> mean_layer_mbe(const std::vector<std::vector<Tensor>>& per_batch, const MbeConfig& c) {
  std::vector<double> out;
  if (per_batch.empty()) return out;
  out.assign(per_batch.front().size(), 0.0);
  for (const auto& layers : per_batch)
    for (std::size_t l = 0; l < layers.size(); ++l) out[l] += mbe_of(layers[l], c);
  for (auto& v : out) v /= static_cast<double>(per_batch.size());
  return out;
}

inline double mean_over(const std::vector<double>& values, const std::set<int>& layers) {
  double total = 0.0;
  for (int l : layers) total += values.at(static_cast<std::size_t>(l - 1));
  return layers.empty() ? 0.0 : total / static_cast<double>(layers.size());
}

// Character-level language modeling on a byte corpus.
class LmExperiment : public Experiment {
 public:
  static constexpr std::uint64_t kCorpusSeed = 20240601;

  explicit LmExperiment(const RunConfig& c) : c_(c) {
    model_ = c.model;
    model_.vocab_size = 256;
    model_.seed = c.seed;
    std::vector<unsigned char> bytes;
    if (c.corpus.path.empty()) {
      const auto text = tasks::synthetic_text(c.corpus.synthetic_bytes, kCorpusSeed);
      bytes.assign(text.begin(), text.end());
    } else {
      bytes = tasks::read_bytes(c.corpus.path);
    }
    corpus_ = tasks::split_corpus(bytes, c.seq_len, c.corpus.val_fraction);
    val_ = tasks::fixed_lm_batches(corpus_.val, c.batch_size, c.seq_len, c.eval_batches);
  }

  ParameterSet init_params() override { return init_transformer(model_); }
  int layer_count() const override { return model_.layers; }

  TrainForward forward(Tape&, const BoundParams& params, long, std::mt19937_64& rng) override {
    const auto b = tasks::sample_lm_batch(corpus_.train, c_.batch_size, c_.seq_len, rng);
    auto out = transformer_forward(model_, params, b.tokens, b.batch, b.seq);
    return {softmax_cross_entropy(out.output, b.targets), out.layers};
  }

  double validate(const ParameterSet& params) override {
    double total = 0.0;
    for (const auto& b : val_) {
      Tape tape;
      BoundParams bound(tape, params, false);
      total += softmax_cross_entropy(transformer_forward(model_, bound, b.tokens, b.batch, b.seq).output, b.targets).item();
    }
    return total / static_cast<double>(val_.size());
  }

  json summarize(const ParameterSet& params) override {
    std::vector<std::vector<Tensor>> reps;
    for (const auto& b : val_) {
      Tape tape;
      BoundParams bound(tape, params, false);
      std::vector<Tensor> layers;
      for (const auto& v : transformer_forward(model_, bound, b.tokens, b.batch, b.seq).layers) layers.push_back(v.value());
      reps.push_back(std::move(layers));
    }
    MbeConfig raw = c_.mbe;
    raw.normalize = false;
    const auto mbe = mean_layer_mbe(reps, c_.mbe);
    return {{"final_mbe", mbe},
            {"final_mbe_raw", mean_layer_mbe(reps, raw)},
            {"mean_regularized_mbe", mean_over(mbe, c_.regularized_layers())},
            {"corpus_bytes", corpus_.train.size() + corpus_.val.size()}};
  }

  const tasks::CharCorpus& corpus() const noexcept { return corpus_; }

 private:
  RunConfig c_;
  TransformerConfig model_;
  tasks::CharCorpus corpus_;
  std::vector<tasks::SequenceBatch> val_;
};

// Multiplication with per-digit tokens; loss only on answer tokens.
class ArithmeticExperiment : public Experiment {
 public:
  static constexpr std::size_t kEvalChunk = 250;
  static constexpr std::size_t kMbeSample = 256;

  explicit ArithmeticExperiment(const RunConfig& c) : c_(c) {
    model_ = c.model;
    model_.vocab_size = tasks::DigitTokenizer::kVocabSize;
    model_.seed = c.seed;
    auto spec = c.arithmetic;
    spec.seed = c.seed;
    splits_ = tasks::gen_multiplication_data(spec);
  }

  ParameterSet init_params() override { return init_transformer(model_); }
  int layer_count() const override { return model_.layers; }

  TrainForward forward(Tape&, const BoundParams& params, long, std::mt19937_64& rng) override {
    std::uniform_int_distribution<std::size_t> pick(0, splits_.train.size() - 1);
    std::vector<tasks::Equation> eqs(c_.batch_size);
    for (auto& e : eqs) e = splits_.train[pick(rng)];
    const auto b = tasks::make_equation_batch(eqs);
    auto out = transformer_forward(model_, params, b.tokens, b.batch, b.seq);
    const auto rows = content_rows(b);
    TrainForward f{softmax_cross_entropy(out.output, b.targets), {}};
    for (const auto& layer : out.layers) f.layers.push_back(embedding(layer, rows));
    return f;
  }

  double validate(const ParameterSet& params) override { return evaluate(params, splits_.val_ood).ce; }

  json summarize(const ParameterSet& params) override {
    const auto id = evaluate(params, splits_.test_id);
    const auto ood = evaluate(params, splits_.test_ood);
    const auto mbe_id = sample_mbe(params, splits_.test_id);
    const auto mbe_ood = sample_mbe(params, splits_.test_ood);
    const auto reg = c_.regularized_layers();
    return {{"test_id_ce", id.ce},
            {"test_ood_ce", ood.ce},
            {"test_id_token_accuracy", id.token_accuracy},
            {"test_ood_token_accuracy", ood.token_accuracy},
            {"test_id_exact_match", id.exact_match},
            {"test_ood_exact_match", ood.exact_match},
            {"final_mbe", mbe_ood},
            {"final_mbe_id", mbe_id},
            {"mean_regularized_mbe", mean_over(mbe_ood, reg)},
            {"mean_layer_mbe", mean_over(mbe_ood, all_layers())}};
  }

  struct Evaluation {
    double ce = 0.0;
    double token_accuracy = 0.0;
    double exact_match = 0.0;
  };

  // Token-weighted CE and accuracy over answer positions, teacher forced.
  Evaluation evaluate(const ParameterSet& params, const std::vector<tasks::Equation>& eqs) const {
    double ce_sum = 0.0;
    std::size_t tokens = 0;
    std::size_t correct = 0;
    std::size_t exact = 0;
    for (std::size_t start = 0; start < eqs.size(); start += kEvalChunk) {
      const std::size_t n = std::min(kEvalChunk, eqs.size() - start);
      const auto b = tasks::make_equation_batch(std::span(eqs).subspan(start, n));
      Tape tape;
      BoundParams bound(tape, params, false);
      const auto logits = transformer_forward(model_, bound, b.tokens, b.batch, b.seq).output;
      std::size_t counted = 0;
      for (int t : b.targets) counted += t != kIgnoreTarget;
      ce_sum += softmax_cross_entropy(logits, b.targets).item() * static_cast<double>(counted);
      tokens += counted;
      const Tensor& lv = logits.value();
      const std::size_t v = lv.dim(1);
      for (std::size_t i = 0; i < b.batch; ++i) {
        bool all = true;
        for (std::size_t t = 0; t < b.seq; ++t) {
          const std::size_t r = i * b.seq + t;
          if (b.targets[r] == kIgnoreTarget) continue;
          const double* row = lv.values().data() + r * v;
          const auto arg = static_cast<int>(std::max_element(row, row + v) - row);
          if (arg == b.targets[r]) {
            ++correct;
          } else {
            all = false;
          }
        }
        exact += all;
      }
    }
    return {ce_sum / static_cast<double>(tokens), static_cast<double>(correct) / static_cast<double>(tokens),
            static_cast<double>(exact) / static_cast<double>(eqs.size())};
  }

  const tasks::ArithmeticSplits& splits() const noexcept { return splits_; }

 private:
  static std::vector<int> content_rows(const tasks::SequenceBatch& b) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < b.tokens.size(); ++i)
      if (b.tokens[i] != tasks::DigitTokenizer::kPad) rows.push_back(static_cast<int>(i));
    return rows;
  }

  std::set<int> all_layers() const {
    std::set<int> s;
    for (int l = 1; l <= model_.layers; ++l) s.insert(l);
    return s;
  }

  // Per-layer MBE of the non-pad token representations of a fixed sample.
  std::vector<double> sample_mbe(const ParameterSet& params, const std::vector<tasks::Equation>& eqs) const {
    const auto b = tasks::make_equation_batch(std::span(eqs).first(std::min(kMbeSample, eqs.size())));
    Tape tape;
    BoundParams bound(tape, params, false);
    const auto rows = content_rows(b);
    std::vector<double> out;
    for (const auto& layer : transformer_forward(model_, bound, b.tokens, b.batch, b.seq).layers) {
      out.push_back(mbe_of(embedding(layer, rows).value(), c_.mbe));
    }
    return out;
  }

  RunConfig c_;
  TransformerConfig model_;
  tasks::ArithmeticSplits splits_;
};

// Two regression tasks from a teacher MLP shifted in opposite directions.
class ConflictExperiment : public Experiment {
 public:
  explicit ConflictExperiment(const RunConfig& c) : c_(c) {
    if (c.conflict.strategy == "gapt-mbe" && c.controller != "gapt") {
      throw ConfigError("conflict strategy 'gapt-mbe' requires controller 'gapt'");
    }
    mlp_ = c.mlp;
    mlp_.input_dim = tasks::kConflictMean1.size();
    MlpConfig teacher = mlp_;
    teacher.seed = c.seed;
    const auto base = init_mlp(teacher);
    const auto delta = mlp_shift(teacher, c.conflict.shift_relative, c.seed + 1);
    tasks::ConflictTaskSpec spec{c.conflict.n_per_task, c.conflict.sigma, c.seed + 2};
    data_ = tasks::gen_conflict_data(spec, teacher, base, delta);
    student_ = mlp_;
    student_.seed = c.seed + 3;
  }

  ParameterSet init_params() override { return init_mlp(student_); }
  int layer_count() const override { return 1; }

  TrainForward forward(Tape& tape, const BoundParams& params, long step, std::mt19937_64& rng) override {
    const auto& s = c_.conflict.strategy;
    const bool first_half = step <= c_.total_steps / 2;
    std::size_t from_pos = 0;
    if (s == "pos-only" || (s == "pos-neg" && first_half) || (s == "neg-pos" && !first_half)) {
      from_pos = c_.batch_size;
    } else if (s == "mixed" || s == "gapt-mbe") {
      from_pos = c_.batch_size / 2;
    }
    const std::size_t n = c_.conflict.n_per_task;
    const std::size_t d = mlp_.input_dim;
    const std::size_t o = mlp_.output_dim;
    Tensor x({c_.batch_size, d});
    Tensor y({c_.batch_size, o});
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t i = 0; i < c_.batch_size; ++i) {
      const bool pos = i < from_pos;
      const Tensor& xs = pos ? data_.x1 : data_.x2;
      const Tensor& ys = pos ? data_.y1 : data_.y2;
      const std::size_t r = pick(rng);
      for (std::size_t j = 0; j < d; ++j) x(i, j) = xs(r, j);
      for (std::size_t j = 0; j < o; ++j) y(i, j) = ys(r, j);
    }
    auto out = mlp_forward(mlp_, params, tape.constant(std::move(x)));
    batch_pos_ = from_pos;
    return {l1_loss(out.output, y), out.layers};
  }

  // Per-task scope averages the MBE of each task's rows in the batch.
  Var layer_mbe(const TrainForward& f, int layer, const MbeConfig& c) override {
    Var h = f.layers.at(static_cast<std::size_t>(layer - 1));
    const std::size_t n = h.value().dim(0);
    if (c_.conflict.mbe_scope == "batch" || batch_pos_ == 0 || batch_pos_ == n) return mbe_var(h, c);
    std::vector<int> pos(batch_pos_);
    std::vector<int> neg(n - batch_pos_);
    std::iota(pos.begin(), pos.end(), 0);
    std::iota(neg.begin(), neg.end(), static_cast<int>(batch_pos_));
    return scale(add(mbe_var(embedding(h, pos), c), mbe_var(embedding(h, neg), c)), 0.5);
  }

  double validate(const ParameterSet& params) override { return 0.5 * (task_l1(params, true) + task_l1(params, false)); }

  json summarize(const ParameterSet& params) override {
    const auto rep = tasks::separation_metrics(hidden(params, true), hidden(params, false), c_.mbe);
    return {{"l1_pos", task_l1(params, true)},
            {"l1_neg", task_l1(params, false)},
            {"mbe_pos", rep.task_mbe[0]},
            {"mbe_neg", rep.task_mbe[1]},
            {"mean_task_mbe", 0.5 * (rep.task_mbe[0] + rep.task_mbe[1])},
            {"distance", rep.distance},
            {"separation_ratio", rep.separation_ratio},
            {"strategy", c_.conflict.strategy}};
  }

  double task_l1(const ParameterSet& params, bool pos) const {
    Tape tape;
    BoundParams bound(tape, params, false);
    const auto out = mlp_forward(mlp_, bound, tape.constant(pos ? data_.x1 : data_.x2));
    return l1_loss(out.output, pos ? data_.y1 : data_.y2).item();
  }

  Tensor hidden(const ParameterSet& params, bool pos) const {
    Tape tape;
    BoundParams bound(tape, params, false);
    return mlp_forward(mlp_, bound, tape.constant(pos ? data_.x1 : data_.x2)).layers.at(0).value();
  }

  const tasks::ConflictData& data() const noexcept { return data_; }

 private:
  RunConfig c_;
  MlpConfig mlp_;
  MlpConfig student_;
  tasks::ConflictData data_;
  std::size_t batch_pos_ = 0;
};

inline std::unique_ptr<Experiment> make_experiment(const RunConfig& c) {
  if (c.experiment == "conflict") return std::make_unique<ConflictExperiment>(c);
  if (c.experiment == "arithmetic") return std::make_unique<ArithmeticExperiment>(c);
  return std::make_unique<LmExperiment>(c);
}

// ---------------------------------------------------------------------------
// Gradient alignment scan.

// Concatenates the gradient of every parameter in a group, in parameter order.
inline std::vector<diag::GradientSnapshot> group_snapshots(long step, const ParameterSet& grads, diag::Source source) {
  std::map<diag::GroupId, std::vector<double>> groups;
  for (const auto& e : grads.entries()) {
    auto& v = groups[parameter_group(e.name)];
    v.insert(v.end(), e.value.storage().begin(), e.value.storage().end());
  }
  std::vector<diag::GradientSnapshot> out;
  for (auto& [g, v] : groups) out.push_back({step, g, source, std::move(v)});
  return out;
}

class GradScanRecorder {
 public:
  // Snapshots of any groups and batches for one step; grouped internally.
  std::vector<AlignmentRecord> record_snapshots(long step, const std::vector<diag::GradientSnapshot>& ce,
                                                const std::vector<diag::GradientSnapshot>& mbe) {
    std::map<diag::GroupId, std::pair<std::vector<diag::GradientSnapshot>, std::vector<diag::GradientSnapshot>>> by_group;
    for (const auto& s : ce) by_group[s.group].first.push_back(s);
    for (const auto& s : mbe) by_group[s.group].second.push_back(s);
    std::vector<AlignmentRecord> out;
    for (const auto& [g, pair] : by_group) {
      const auto& [c, m] = pair;
      if (c.empty() || m.empty()) throw DomainError("grad-scan: group " + g.str() + " lacks CE or MBE snapshots");
      AlignmentRecord r;
      r.step = step;
      r.group = g.str();
      if (c.size() >= 2) r.consistency = diag::cross_batch_consistency(c);
      r.alignment = diag::ce_mbe_alignment(c, m);
      auto it = series_.try_emplace(g, g).first;
      it->second.push(step, r.alignment);
      out.push_back(std::move(r));
    }
    return out;
  }

  // One gradient set per batch for each source.
  std::vector<AlignmentRecord> record(long step, const std::vector<ParameterSet>& ce, const std::vector<ParameterSet>& mbe) {
    std::vector<diag::GradientSnapshot> cs;
    std::vector<diag::GradientSnapshot> ms;
    for (const auto& g : ce)
      for (auto& s : group_snapshots(step, g, diag::Source::ce)) cs.push_back(std::move(s));
    for (const auto& g : mbe)
      for (auto& s : group_snapshots(step, g, diag::Source::mbe)) ms.push_back(std::move(s));
    return record_snapshots(step, cs, ms);
  }

  const std::map<diag::GroupId, diag::AlignmentSeries>& series() const noexcept { return series_; }

  // Stats for every group with a long enough series.
  std::vector<std::pair<diag::GroupId, diag::OscillationStats>> oscillation() const {
    std::vector<std::pair<diag::GroupId, diag::OscillationStats>> out;
    for (const auto& [g, s] : series_)
      if (s.size() >= diag::kMinOscillationLength) out.emplace_back(g, diag::oscillation_stats(s));
    return out;
  }

  void write_oscillation_csv(std::ostream& os) const {
    diag::write_oscillation_csv_header(os);
    for (const auto& [g, st] : oscillation()) diag::write_oscillation_csv_row(os, g, st);
  }

 private:
  std::map<diag::GroupId, diag::AlignmentSeries> series_;
};

// ---------------------------------------------------------------------------
// Training loop.

struct TrainOptions {
  bool write_files = true;
  // Replaces the experiment's validation value at eval steps (testing hook).
  std::function<std::optional<double>(long step)> val_override;
};

namespace detail {

inline std::map<int, Var> mbe_vars(Experiment& exp, const TrainForward& f, const std::set<int>& layers, const MbeConfig& c) {
  std::map<int, Var> out;
  for (int l : layers) out.emplace(l, exp.layer_mbe(f, l, c));
  return out;
}

inline Var sum_of(const std::map<int, Var>& vars) {
  std::optional<Var> total;
  for (const auto& [l, v] : vars) total = total ? add(*total, v) : v;
  return *total;
}

}  // namespace detail

inline RunLog train(const RunConfig& c, Experiment& exp, const TrainOptions& opt = {}) {
  c.validate();
  const int layers = exp.layer_count();
  const bool scan = c.grad_scan.enabled || c.experiment == "grad-scan";
  const auto gcfg = c.resolved_gapt();
  std::set<int> all_layers;
  for (int l = 1; l <= layers; ++l) all_layers.insert(l);

  RunWriter writer;
  if (opt.write_files) {
    writer = RunWriter(c.output_dir, layers, scan);
    writer.write_json("config.json", to_json(c));
  }

  ParameterSet params = exp.init_params();
  Optimizer optimizer(c.optimizer, params);
  std::mt19937_64 rng(c.seed);
  std::mt19937_64 scan_rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  std::optional<gapt::Controller> controller;
  if (c.controller == "gapt") controller.emplace(gcfg);
  EarlyStopper stopper(c.early_stop.threshold_fraction, c.early_stop_activation(), c.early_stop.enabled);
  GradScanRecorder recorder;

  RunLog log;
  double running_min = std::numeric_limits<double>::infinity();
  int transitions = 0;
  bool early_stopped = false;
  std::string phase = c.controller == "lagrangian" && gcfg.lambda_mbe > 0.0 ? "comp" : "mem";

  auto fail = [&](long step, const std::string& quantity, const std::string& detail) {
    json s = {{"status", "aborted"},
              {"experiment", c.experiment},
              {"controller", c.controller},
              {"seed", c.seed},
              {"steps_completed", log.steps.size()},
              {"abort", {{"step", step}, {"phase", phase}, {"quantity", quantity}, {"detail", detail}}}};
    log.summary = s;
    writer.write_json("summary.json", s);
    throw RunAborted({step, phase, quantity}, detail);
  };

  long step = 1;
  for (; step <= c.total_steps; ++step) {
    Tape tape;
    BoundParams bound(tape, params);
    TrainForward f = exp.forward(tape, bound, step, rng);
    const double ce = f.ce.item();
    if (!std::isfinite(ce)) fail(step, "train_ce", "");

    StepRecord rec;
    rec.step = step;
    const bool scan_step = scan && (step - 1) % c.grad_scan.stride == 0;
    for (int l = 1; l <= layers; ++l) {
      if (!all_finite(f.layers[static_cast<std::size_t>(l - 1)].value())) fail(step, "representation_L" + std::to_string(l), "");
    }
    auto vars = detail::mbe_vars(exp, f, all_layers, c.mbe);
    for (int l = 1; l <= layers; ++l) {
      const double v = vars.at(l).item();
      if (!std::isfinite(v)) fail(step, "mbe_L" + std::to_string(l), "");
      rec.mbe.push_back(v);
    }

    gapt::Directive d;
    if (controller) {
      std::map<int, double> reg;
      for (int l : gcfg.regularized_layers) reg[l] = rec.mbe[static_cast<std::size_t>(l - 1)];
      d = controller->update(ce, reg);
      const auto& st = controller->state();
      rec.stall_mem = st.stall_mem;
      rec.stall_comp = st.stall_comp;
      rec.ce_min = st.ce_min;
    } else {
      d = c.controller == "lagrangian" ? gapt::lagrangian_directive(gcfg) : gapt::ce_only_directive(gcfg);
      running_min = std::min(running_min, ce);
      rec.ce_min = running_min;
    }
    phase = gapt::to_string(d.phase);
    rec.phase = phase;
    if (d.transition) {
      rec.transition = gapt::to_string(d.transition->reason);
      ++transitions;
    }
    rec.train_ce = ce;
    Var loss = gapt::composite_loss(f.ce, vars, d);
    rec.loss = loss.item();
    if (!std::isfinite(rec.loss)) fail(step, "loss", "");

    ParameterSet grads;
    try {
      bool ce_only_loss = d.ce_weight == 1.0;
      for (const auto& [l, w] : d.mbe_weights) ce_only_loss = ce_only_loss && w == 0.0;
      if (scan_step) {
        std::vector<ParameterSet> ce_grads;
        std::vector<ParameterSet> mbe_grads;
        tape.backward(f.ce);
        ce_grads.push_back(bound.gradients());
        tape.reset_grads();
        tape.backward(detail::sum_of(vars));
        mbe_grads.push_back(bound.gradients());
        tape.reset_grads();
        for (std::size_t k = 1; k < c.grad_scan.k_batches; ++k) {
          Tape t2;
          BoundParams b2(t2, params);
          TrainForward f2 = exp.forward(t2, b2, step, scan_rng);
          auto v2 = detail::mbe_vars(exp, f2, all_layers, c.mbe);
          t2.backward(f2.ce);
          ce_grads.push_back(b2.gradients());
          t2.reset_grads();
          t2.backward(detail::sum_of(v2));
          mbe_grads.push_back(b2.gradients());
        }
        for (const auto& r : recorder.record(step, ce_grads, mbe_grads)) {
          writer.alignment(r);
          log.alignment.push_back(r);
        }
        if (ce_only_loss) {
          grads = std::move(ce_grads.front());
        } else {
          tape.backward(loss);
          grads = bound.gradients();
        }
      } else {
        tape.backward(loss);
        grads = bound.gradients();
      }
    } catch (const NonFiniteError& e) {
      fail(step, "gradient", e.what());
    }
    optimizer.step(params, grads);

    const bool eval_step = step % c.eval_every == 0 || step == c.total_steps;
    if (eval_step) {
      std::optional<double> val = opt.val_override ? opt.val_override(step) : std::nullopt;
      if (!val) val = exp.validate(params);
      if (!std::isfinite(*val)) fail(step, "val_ce", "");
      rec.val_ce = *val;
      log.evals.push_back({step, *val});
      writer.eval(log.evals.back());
      early_stopped = stopper.observe(step, *val);
    }
    writer.step(rec);
    log.steps.push_back(std::move(rec));
    if (early_stopped) break;
  }
  const long completed = static_cast<long>(log.steps.size());

  json s = {{"status", "completed"},
            {"experiment", c.experiment},
            {"controller", c.controller},
            {"seed", c.seed},
            {"steps_completed", completed},
            {"early_stopped", early_stopped},
            {"transitions", transitions},
            {"regularized_layers", std::vector<int>(gcfg.regularized_layers.begin(), gcfg.regularized_layers.end())}};
  // The last eval is the final validation value; an early stop ends on an eval step.
  s["final_val_ce"] = log.evals.empty() ? exp.validate(params) : log.evals.back().val_ce;
  s["final_train_ce"] = log.steps.empty() ? 0.0 : log.steps.back().train_ce;
  s["final_phase"] = phase;
  s.update(exp.summarize(params));
  if (scan) {
    json osc = json::array();
    for (const auto& [g, st] : recorder.oscillation()) {
      osc.push_back({{"group_id", g.str()}, {"std", st.std}, {"zcr", st.zero_crossing_rate}, {"psd_peak_to_mean", st.psd_peak_to_mean}});
    }
    s["oscillation"] = osc;
    if (writer.active()) {
      auto os = writer.open_extra("oscillation.csv");
      recorder.write_oscillation_csv(os);
    }
  }
  log.summary = s;
  if (writer.active()) {
    checkpoint::save(params, writer.dir() / "params.ckpt");
    writer.write_json("summary.json", s);
  }
  return log;
}

inline RunLog train(const RunConfig& c, const TrainOptions& opt = {}) {
  c.validate();
  auto exp = make_experiment(c);
  return train(c, *exp, opt);
}

// ---------------------------------------------------------------------------
// Conflict suite: six data strategies from one student initialization.

inline const std::vector<std::string>& conflict_strategies() {
  static const std::vector<std::string> s = {"pos-only", "neg-only", "pos-neg", "neg-pos", "mixed", "gapt-mbe"};
  return s;
}

struct ConflictRow {
  std::string strategy;
  double l1_pos = 0.0;
  double l1_neg = 0.0;
  double mbe_pos = 0.0;
  double mbe_neg = 0.0;
  double distance = 0.0;
  double separation_ratio = 0.0;
};

inline std::vector<ConflictRow> run_conflict_suite(const RunConfig& base, bool write_files = true) {
  std::vector<ConflictRow> rows;
  for (const auto& strategy : conflict_strategies()) {
    RunConfig c = base;
    c.experiment = "conflict";
    c.conflict.strategy = strategy;
    c.controller = strategy == "gapt-mbe" ? "gapt" : "ce-only";
    c.output_dir = (std::filesystem::path(base.output_dir) / strategy).string();
    const auto log = train(c, TrainOptions{write_files, {}});
    const auto& s = log.summary;
    auto num = [&](const char* k) { return s.at(k).get<double>(); };
    rows.push_back({strategy, num("l1_pos"), num("l1_neg"), num("mbe_pos"), num("mbe_neg"), num("distance"), num("separation_ratio")});
  }
  if (write_files) {
    std::filesystem::create_directories(base.output_dir);
    std::ofstream os(std::filesystem::path(base.output_dir) / "suite.csv");
    if (!os) throw ConfigError("cannot write suite.csv under " + base.output_dir);
    os << "strategy,l1_pos,l1_neg,mbe_pos,mbe_neg,distance,separation_ratio\n";
    for (const auto& r : rows) {
      os << r.strategy << ',' << format_double(r.l1_pos) << ',' << format_double(r.l1_neg) << ','
         << format_double(r.mbe_pos) << ',' << format_double(r.mbe_neg) << ',' << format_double(r.distance) << ','
         << format_double(r.separation_ratio) << '\n';
    }
  }
  return rows;
}

inline std::string format_suite_table(const std::vector<ConflictRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "strategy" << std::right << std::setw(10) << "L1(pos)" << std::setw(10) << "L1(neg)"
     << std::setw(10) << "MBE(pos)" << std::setw(10) << "MBE(neg)" << std::setw(10) << "distance" << std::setw(12)
     << "separation" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << r.strategy << std::right << std::setw(10) << r.l1_pos << std::setw(10) << r.l1_neg
       << std::setw(10) << r.mbe_pos << std::setw(10) << r.mbe_neg << std::setw(10) << r.distance << std::setw(12)
       << r.separation_ratio << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Report: baseline vs candidate summaries.

struct ReportRow {
  std::string metric;
  double baseline = 0.0;
  double candidate = 0.0;
  double delta = 0.0;
  std::optional<double> percent;  // absent when the baseline is zero
};

struct Report {
  std::string experiment;
  std::vector<ReportRow> metrics;  // scalar summary fields
  std::vector<ReportRow> layers;   // per-layer MBE
};

inline ReportRow make_row(std::string metric, double base, double cand) {
  ReportRow r{std::move(metric), base, cand, cand - base, std::nullopt};
  if (base != 0.0) r.percent = (cand - base) / std::abs(base) * 100.0;
  return r;
}

// Rounds half away from zero to two decimals and prints a sign.
inline std::string format_percent(double p) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << std::showpos << p << '%';
  return os.str();
}

inline Report make_report(const json& baseline, const json& candidate) {
  for (const auto* j : {&baseline, &candidate}) {
    if (!j->is_object() || !j->contains("experiment")) throw ConfigError("report: summary lacks an 'experiment' field");
  }
  if (baseline["experiment"] != candidate["experiment"]) {
    throw ConfigError("report: mismatched experiment kinds '" + baseline["experiment"].get<std::string>() + "' and '" +
                      candidate["experiment"].get<std::string>() + "'");
  }
  static const std::set<std::string> skip = {"seed", "steps_completed", "transitions", "corpus_bytes"};
  Report rep;
  rep.experiment = baseline["experiment"];
  for (auto it = baseline.begin(); it != baseline.end(); ++it) {
    if (!it.value().is_number() || it.value().is_boolean() || skip.count(it.key())) continue;
    if (!candidate.contains(it.key()) || !candidate[it.key()].is_number()) continue;
    rep.metrics.push_back(make_row(it.key(), it.value().get<double>(), candidate[it.key()].get<double>()));
  }
  if (baseline.contains("final_mbe") && candidate.contains("final_mbe")) {
    const auto& a = baseline["final_mbe"];
    const auto& b = candidate["final_mbe"];
    if (!a.is_array() || !b.is_array() || a.size() != b.size()) throw ConfigError("report: per-layer MBE lists differ in length");
    for (std::size_t l = 0; l < a.size(); ++l) {
      rep.layers.push_back(make_row("L" + std::to_string(l + 1), a[l].get<double>(), b[l].get<double>()));
    }
  }
  return rep;
}

inline std::string format_report_text(const Report& r) {
  std::ostringstream os;
  auto table = [&](const std::vector<ReportRow>& rows, const char* title) {
    if (rows.empty()) return;
    os << title << '\n';
    os << std::left << std::setw(26) << "metric" << std::right << std::setw(14) << "baseline" << std::setw(14) << "candidate"
       << std::setw(14) << "delta" << std::setw(12) << "change" << '\n';
    for (const auto& row : rows) {
      std::ostringstream b, c, d;
      b << std::setprecision(6) << row.baseline;
      c << std::setprecision(6) << row.candidate;
      d << std::setprecision(6) << row.delta;
      os << std::left << std::setw(26) << row.metric << std::right << std::setw(14) << b.str() << std::setw(14) << c.str()
         << std::setw(14) << d.str() << std::setw(12) << (row.percent ? format_percent(*row.percent) : "n/a") << '\n';
    }
  };
  os << "experiment: " << r.experiment << '\n';
  table(r.metrics, "summary");
  table(r.layers, "per-layer MBE");
  return os.str();
}

inline std::string format_report_csv(const Report& r) {
  std::ostringstream os;
  os << "section,metric,baseline,candidate,delta,percent\n";
  auto rows = [&](const std::vector<ReportRow>& v, const char* section) {
    for (const auto& row : v) {
      os << section << ',' << row.metric << ',' << format_double(row.baseline) << ',' << format_double(row.candidate) << ','
         << format_double(row.delta) << ',';
      if (row.percent) {
        std::ostringstream p;
        p << std::fixed << std::setprecision(2) << *row.percent;
        os << p.str();
      }
      os << '\n';
    }
  };
  rows(r.metrics, "summary");
  rows(r.layers, "mbe");
  return os.str();
}

}  // namespace iblm::harness
