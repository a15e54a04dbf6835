#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "iblm/error.hpp"

// Gradient alignment measurements and oscillation statistics of the
// resulting cosine-similarity series.
namespace iblm::diag {

enum class ParamKind { attention, mlp, embedding, other };

inline const char* to_string(ParamKind k) {
  switch (k) {
    case ParamKind::attention: return "attention";
    case ParamKind::mlp: return "mlp";
    case ParamKind::embedding: return "embedding";
    case ParamKind::other: return "other";
  }
  return "?";
}

struct GroupId {
  int layer = 0;  // 1-based block index; 0 for groups outside the blocks
  ParamKind kind = ParamKind::other;

  std::string str() const {
    if (kind == ParamKind::embedding || kind == ParamKind::other) return to_string(kind);
    return "L" + std::to_string(layer) + "." + to_string(kind);
  }
  auto operator<=>(const GroupId&) const = default;
};

enum class Source { ce, mbe };

struct GradientSnapshot {
  long step = 0;
  GroupId group;
  Source source = Source::ce;
  std::vector<double> vector;
};

inline constexpr double kDegenerateNorm = 1e-15;

struct Cosine {
  double value = 0.0;
  bool degenerate = false;
};

inline Cosine cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine-similarity", Shape{a.size()}, Shape{b.size()});
  }
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < kDegenerateNorm || nb < kDegenerateNorm) return {0.0, true};
  return {std::clamp(dot / (na * nb), -1.0, 1.0), false};
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) { return cosine(a, b).value; }

// Mean pairwise cosine similarity of CE gradients from k >= 2 batches.
inline double cross_batch_consistency(std::span<const GradientSnapshot> snapshots) {
  if (snapshots.size() < 2) throw DomainError("cross-batch-consistency: need at least 2 snapshots");
  for (const auto& s : snapshots) {
    if (s.group != snapshots.front().group) throw DomainError("cross-batch-consistency: group mismatch");
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    for (std::size_t j = i + 1; j < snapshots.size(); ++j) {
      total += cosine_similarity(snapshots[i].vector, snapshots[j].vector);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

// Mean cosine similarity over every (CE batch, MBE batch) pair.
inline double ce_mbe_alignment(std::span<const GradientSnapshot> ce, std::span<const GradientSnapshot> mbe) {
  if (ce.empty() || mbe.empty()) throw DomainError("ce-mbe-alignment: need at least one snapshot of each kind");
  const GroupId group = ce.front().group;
  for (const auto& s : ce)
    if (s.group != group) throw DomainError("ce-mbe-alignment: group mismatch");
  for (const auto& s : mbe)
    if (s.group != group) throw DomainError("ce-mbe-alignment: group mismatch");
  double total = 0.0;
  for (const auto& c : ce)
    for (const auto& m : mbe) total += cosine_similarity(c.vector, m.vector);
  return total / static_cast<double>(ce.size() * mbe.size());
}

class AlignmentSeries {
 public:
  AlignmentSeries() = default;
  explicit AlignmentSeries(GroupId group) : group_(group) {}

  void push(long step, double value) {
    if (!steps_.empty() && step <= steps_.back()) throw DomainError("alignment series: steps must increase");
    if (!(std::abs(value) <= 1.0 + 1e-9)) throw DomainError("alignment series: value outside [-1, 1]");
    steps_.push_back(step);
    values_.push_back(value);
  }

  const GroupId& group() const noexcept { return group_; }
  const std::vector<double>& values() const noexcept { return values_; }
  const std::vector<long>& steps() const noexcept { return steps_; }
  std::size_t size() const noexcept { return values_.size(); }

 private:
  GroupId group_;
  std::vector<double> values_;
  std::vector<long> steps_;
};

struct OscillationStats {
  double std = 0.0;
  double zero_crossing_rate = 0.0;
  double psd_peak_to_mean = 1.0;
};

// Squared DFT magnitudes at bins 1..floor(n/2) of the mean-removed series.
inline std::vector<double> periodogram(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  // centred on x[0] first so a constant series is exactly zero
  double mu = 0.0;
  for (double v : x) mu += v - x[0];
  mu = x[0] + mu / static_cast<double>(n);
  std::vector<double> cos_t(n);
  std::vector<double> sin_t(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double ang = 2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(n);
    cos_t[t] = std::cos(ang);
    sin_t[t] = std::sin(ang);
  }
  std::vector<double> power(n / 2);
  for (std::size_t k = 1; k <= n / 2; ++k) {
    double re = 0.0;
    double im = 0.0;
    std::size_t idx = 0;
    for (std::size_t t = 0; t < n; ++t) {
      const double v = (x[t] - x[0]) - (mu - x[0]);
      re += v * cos_t[idx];
      im -= v * sin_t[idx];
      idx += k;
      if (idx >= n) idx -= n;
    }
    power[k - 1] = re * re + im * im;
  }
  return power;
}

// Sign changes between consecutive samples divided by (n - 1). A zero takes
// the sign of the sample before it; leading zeros carry no sign.
inline double zero_crossing_rate(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  int prev = 0;
  std::size_t crossings = 0;
  for (double v : x) {
    const int s = v > 0.0 ? 1 : (v < 0.0 ? -1 : prev);
    if (prev != 0 && s != 0 && s != prev) ++crossings;
    if (s != 0) prev = s;
  }
  return static_cast<double>(crossings) / static_cast<double>(x.size() - 1);
}

inline constexpr std::size_t kMinOscillationLength = 8;

inline OscillationStats oscillation_stats(std::span<const double> x) {
  if (x.size() < kMinOscillationLength) {
    throw DomainError("oscillation-stats: series needs at least " + std::to_string(kMinOscillationLength) + " samples");
  }
  OscillationStats st;
  double mu = 0.0;
  for (double v : x) mu += v - x[0];
  mu /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - x[0] - mu) * (v - x[0] - mu);
  st.std = std::sqrt(var / static_cast<double>(x.size()));
  st.zero_crossing_rate = zero_crossing_rate(x);
  const auto power = periodogram(x);
  double peak = 0.0;
  double total = 0.0;
  for (double p : power) {
    peak = std::max(peak, p);
    total += p;
  }
  const double avg = total / static_cast<double>(power.size());
  st.psd_peak_to_mean = avg > 0.0 ? std::max(1.0, peak / avg) : 1.0;
  return st;
}

inline OscillationStats oscillation_stats(const AlignmentSeries& series) { return oscillation_stats(series.values()); }

inline void write_oscillation_csv_header(std::ostream& os) { os << "group_id,std,zcr,psd_peak_to_mean\n"; }

inline void write_oscillation_csv_row(std::ostream& os, const GroupId& g, const OscillationStats& s) {
  os << g.str() << ',' << s.std << ',' << s.zero_crossing_rate << ',' << s.psd_peak_to_mean << '\n';
}

}  // namespace iblm::diag
