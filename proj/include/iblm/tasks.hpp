#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iblm/entropy.hpp"
#include "iblm/error.hpp"
#include "iblm/nets.hpp"

namespace iblm::tasks {

// ---------------------------------------------------------------------------
// Conflicting-memory regression task: two Gaussian input clouds whose targets
// come from the same MLP with parameters shifted in opposite directions.

inline constexpr std::array<double, 10> kConflictMean1 = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
inline constexpr std::array<double, 10> kConflictMean2 = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};

struct ConflictTaskSpec {
  std::size_t n_per_task = 256;
  double sigma = 0.25;  // 0 is accepted as the degenerate limit
  std::uint64_t seed = 0;

  void validate() const {
    if (n_per_task == 0) throw ConfigError("conflict task: n_per_task must be positive");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("conflict task: sigma must be finite and >= 0");
  }
};

struct ConflictData {
  Tensor x1, y1;  // "pos" task: teacher theta + delta
  Tensor x2, y2;  // "neg" task: teacher theta - delta
};

inline Tensor sample_gaussian_cloud(std::span<const double> mean, std::size_t n, double sigma, std::mt19937_64& rng) {
  Tensor x({n, mean.size()});
  std::normal_distribution<double> z(0.0, 1.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < mean.size(); ++c) x(r, c) = mean[c] + sigma * z(rng);
  return x;
}

inline Tensor mlp_predict(const MlpConfig& mlp, const ParameterSet& params, const Tensor& x) {
  Tape tape;
  BoundParams bound(tape, params, false);
  return mlp_forward(mlp, bound, tape.constant(x)).output.value();
}

inline ConflictData gen_conflict_data(const ConflictTaskSpec& spec, const MlpConfig& mlp, const ParameterSet& base,
                                      const ParameterSet& delta) {
  spec.validate();
  if (mlp.input_dim != kConflictMean1.size()) throw ConfigError("conflict task: MLP input_dim must be 10");
  std::mt19937_64 rng(spec.seed);
  ConflictData d;
  d.x1 = sample_gaussian_cloud(kConflictMean1, spec.n_per_task, spec.sigma, rng);
  d.x2 = sample_gaussian_cloud(kConflictMean2, spec.n_per_task, spec.sigma, rng);
  d.y1 = mlp_predict(mlp, shifted_params(base, delta, +1), d.x1);
  d.y2 = mlp_predict(mlp, shifted_params(base, delta, -1), d.x2);
  return d;
}

// ---------------------------------------------------------------------------
// Per-digit tokenizer: digits 0-9, '*', '=', end-of-sequence, pad.

class DigitTokenizer {
 public:
  static constexpr int kStar = 10;
  static constexpr int kEquals = 11;
  static constexpr int kEos = 12;
  static constexpr int kPad = 13;
  static constexpr int kVocabSize = 14;

  class Error : public iblm::Error {
   public:
    Error(const std::string& what, std::size_t position)
        : iblm::Error(what + " at position " + std::to_string(position)), position_(position) {}
    std::size_t position() const noexcept { return position_; }

   private:
    std::size_t position_;
  };

  static std::vector<int> encode(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      const char ch = text[i];
      if (ch >= '0' && ch <= '9') {
        ids.push_back(ch - '0');
      } else if (ch == '*') {
        ids.push_back(kStar);
      } else if (ch == '=') {
        ids.push_back(kEquals);
      } else {
        throw Error(std::string("encode: unknown character '") + ch + "'", i);
      }
    }
    return ids;
  }

  // Stops at end-of-sequence; pad ids are skipped.
  static std::string decode(std::span<const int> ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const int id = ids[i];
      if (id >= 0 && id <= 9) {
        out.push_back(static_cast<char>('0' + id));
      } else if (id == kStar) {
        out.push_back('*');
      } else if (id == kEquals) {
        out.push_back('=');
      } else if (id == kEos) {
        break;
      } else if (id != kPad) {
        throw Error("decode: unknown id " + std::to_string(id), i);
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Multiplication corpus "a*b=c".

struct DigitRange {
  int lo = 1;
  int hi = 1;
  friend bool operator==(const DigitRange&, const DigitRange&) = default;
};

struct ArithmeticSpec {
  DigitRange train{1, 2};
  DigitRange ood{3, 3};
  std::size_t count_train = 100000;
  std::size_t count_test_id = 5000;
  std::size_t count_test_ood = 5000;
  std::size_t count_val_ood = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    for (const auto& r : {train, ood}) {
      if (r.lo < 1 || r.hi < r.lo || r.hi > 9) throw ConfigError("arithmetic: digit ranges must satisfy 1 <= lo <= hi <= 9");
    }
    if (ood.lo <= train.hi) throw ConfigError("arithmetic: OOD range must lie above the training range");
  }
};

struct Equation {
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  std::uint64_t product() const { return a * b; }
  std::string text() const { return std::to_string(a) + "*" + std::to_string(b) + "=" + std::to_string(product()); }
  auto operator<=>(const Equation&) const = default;
};

struct ArithmeticSplits {
  std::vector<Equation> train;
  std::vector<Equation> test_id;
  std::vector<Equation> test_ood;
  std::vector<Equation> val_ood;
};

inline std::uint64_t pow10(int e) {
  std::uint64_t v = 1;
  for (int i = 0; i < e; ++i) v *= 10;
  return v;
}

inline std::uint64_t numbers_in_range(DigitRange r) {
  std::uint64_t n = 0;
  for (int len = r.lo; len <= r.hi; ++len) n += len == 1 ? 10 : pow10(len) - pow10(len - 1);
  return n;
}

inline std::uint64_t numbers_of_length(int len) { return len == 1 ? 10 : pow10(len) - pow10(len - 1); }

inline std::uint64_t sample_of_length(int len, std::mt19937_64& rng) {
  const std::uint64_t lo = len == 1 ? 0 : pow10(len - 1);
  std::uniform_int_distribution<std::uint64_t> num(lo, pow10(len) - 1);
  return num(rng);
}

// Length uniform over the range, then a uniform number of that length
// (no leading zeros; 0 counts as a 1-digit number).
inline std::uint64_t sample_operand(DigitRange r, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len_dist(r.lo, r.hi);
  return sample_of_length(len_dist(rng), rng);
}

namespace detail {

using PairSet = std::set<std::pair<std::uint64_t, std::uint64_t>>;

// Distinct pairs with operand lengths drawn uniformly. `cell_share` caps the
// fraction of any (len_a, len_b) cell this split may take; a draw landing in
// a full cell redraws the lengths.
inline std::vector<Equation> sample_distinct(DigitRange r, std::size_t count, PairSet& used, std::mt19937_64& rng,
                                             const char* split, double cell_share = 1.0) {
  const int span = r.hi - r.lo + 1;
  std::vector<std::uint64_t> cap(static_cast<std::size_t>(span * span));
  std::vector<std::uint64_t> taken(cap.size(), 0);
  std::uint64_t available = 0;
  for (int la = r.lo; la <= r.hi; ++la) {
    for (int lb = r.lo; lb <= r.hi; ++lb) {
      const auto cell = static_cast<std::size_t>((la - r.lo) * span + (lb - r.lo));
      cap[cell] = static_cast<std::uint64_t>(cell_share * static_cast<double>(numbers_of_length(la) * numbers_of_length(lb)));
      available += cap[cell];
    }
  }
  for (const auto& [a, b] : used) {
    const int la = static_cast<int>(std::to_string(a).size());
    const int lb = static_cast<int>(std::to_string(b).size());
    if (la < r.lo || la > r.hi || lb < r.lo || lb > r.hi) continue;
    const auto cell = static_cast<std::size_t>((la - r.lo) * span + (lb - r.lo));
    if (taken[cell] < cap[cell]) {
      ++taken[cell];
      --available;
    }
  }
  if (count > available) {
    throw ConfigError(std::string("arithmetic: split '") + split + "' requests " + std::to_string(count) +
                      " distinct pairs but only " + std::to_string(available) + " are available");
  }
  std::uniform_int_distribution<int> len_dist(r.lo, r.hi);
  std::vector<Equation> out;
  out.reserve(count);
  while (out.size() < count) {
    const int la = len_dist(rng);
    const int lb = len_dist(rng);
    const auto cell = static_cast<std::size_t>((la - r.lo) * span + (lb - r.lo));
    if (taken[cell] >= cap[cell]) continue;
    for (;;) {
      const Equation e{sample_of_length(la, rng), sample_of_length(lb, rng)};
      if (used.insert({e.a, e.b}).second) {
        out.push_back(e);
        ++taken[cell];
        break;
      }
    }
  }
  return out;
}

}  // namespace detail

// Evaluation splits hold distinct (a, b) pairs. The in-domain test split takes
// at most half of each operand-length cell, and the training split samples with
// replacement from the rest, lengths uniform, so every cell stays trainable.
inline ArithmeticSplits gen_multiplication_data(const ArithmeticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  detail::PairSet in_domain;
  detail::PairSet out_domain;
  ArithmeticSplits s;
  s.test_id = detail::sample_distinct(spec.train, spec.count_test_id, in_domain, rng, "test_id", 0.5);
  std::uniform_int_distribution<int> len_dist(spec.train.lo, spec.train.hi);
  s.train.reserve(spec.count_train);
  while (s.train.size() < spec.count_train) {
    const int la = len_dist(rng);
    const int lb = len_dist(rng);
    Equation e;
    do {
      e = {sample_of_length(la, rng), sample_of_length(lb, rng)};
    } while (in_domain.count({e.a, e.b}));
    s.train.push_back(e);
  }
  s.test_ood = detail::sample_distinct(spec.ood, spec.count_test_ood, out_domain, rng, "test_ood");
  s.val_ood = detail::sample_distinct(spec.ood, spec.count_val_ood, out_domain, rng, "val_ood");
  return s;
}

struct SequenceBatch {
  std::vector<int> tokens;   // batch x seq
  std::vector<int> targets;  // batch x seq, kIgnoreTarget where masked
  std::size_t batch = 0;
  std::size_t seq = 0;
};

// "a*b=c<eos>" padded to the longest sequence; only positions that predict
// answer tokens (after '=') carry targets.
inline SequenceBatch make_equation_batch(std::span<const Equation> eqs) {
  SequenceBatch b;
  b.batch = eqs.size();
  std::vector<std::vector<int>> seqs;
  seqs.reserve(eqs.size());
  for (const auto& e : eqs) {
    auto ids = DigitTokenizer::encode(e.text());
    ids.push_back(DigitTokenizer::kEos);
    b.seq = std::max(b.seq, ids.size());
    seqs.push_back(std::move(ids));
  }
  b.tokens.assign(b.batch * b.seq, DigitTokenizer::kPad);
  b.targets.assign(b.batch * b.seq, kIgnoreTarget);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& ids = seqs[i];
    std::copy(ids.begin(), ids.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.seq));
    const auto eq = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), DigitTokenizer::kEquals) - ids.begin());
    for (std::size_t t = eq; t + 1 < ids.size(); ++t) b.targets[i * b.seq + t] = ids[t + 1];
  }
  return b;
}

// ---------------------------------------------------------------------------
// Byte-level character corpus.

struct CharCorpus {
  std::vector<int> train;
  std::vector<int> val;
  std::size_t context_length = 0;
  std::size_t train_blocks = 0;
  std::size_t val_blocks = 0;
};

// Splits `bytes` into whole blocks of `context_length`; the final
// `split_fraction` of blocks (rounded) becomes validation.
inline CharCorpus split_corpus(std::span<const unsigned char> bytes, std::size_t context_length, double split_fraction) {
  if (context_length == 0) throw ConfigError("char-corpus: context length must be positive");
  if (!(split_fraction >= 0.0 && split_fraction < 1.0)) throw ConfigError("char-corpus: split fraction must lie in [0, 1)");
  if (bytes.size() < context_length) throw ConfigError("char-corpus: corpus is shorter than one context");
  CharCorpus c;
  c.context_length = context_length;
  const std::size_t blocks = bytes.size() / context_length;
  c.val_blocks = static_cast<std::size_t>(std::llround(static_cast<double>(blocks) * split_fraction));
  c.train_blocks = blocks - c.val_blocks;
  c.train.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(c.train_blocks * context_length));
  c.val.assign(bytes.begin() + static_cast<std::ptrdiff_t>(c.train_blocks * context_length),
               bytes.begin() + static_cast<std::ptrdiff_t>(blocks * context_length));
  return c;
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline CharCorpus char_corpus(const std::filesystem::path& path, std::size_t context_length, double split_fraction) {
  const auto bytes = read_bytes(path);
  return split_corpus(bytes, context_length, split_fraction);
}

// Random windows of seq+1 bytes from `stream`: inputs are the first seq bytes,
// targets the following ones.
inline SequenceBatch sample_lm_batch(std::span<const int> stream, std::size_t batch, std::size_t seq, std::mt19937_64& rng) {
  if (stream.size() < seq + 1) throw ConfigError("lm batch: stream shorter than one window");
  std::uniform_int_distribution<std::size_t> start(0, stream.size() - seq - 1);
  SequenceBatch b;
  b.batch = batch;
  b.seq = seq;
  b.tokens.resize(batch * seq);
  b.targets.resize(batch * seq);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t s = start(rng);
    for (std::size_t t = 0; t < seq; ++t) {
      b.tokens[i * seq + t] = stream[s + t];
      b.targets[i * seq + t] = stream[s + t + 1];
    }
  }
  return b;
}

// Consecutive non-overlapping windows from the start of `stream`.
inline std::vector<SequenceBatch> fixed_lm_batches(std::span<const int> stream, std::size_t batch, std::size_t seq,
                                                   std::size_t max_batches) {
  std::vector<SequenceBatch> out;
  const std::size_t windows = stream.size() > seq ? (stream.size() - 1) / seq : 0;
  std::size_t w = 0;
  while (out.size() < max_batches && w + batch <= windows) {
    SequenceBatch b;
    b.batch = batch;
    b.seq = seq;
    b.tokens.resize(batch * seq);
    b.targets.resize(batch * seq);
    for (std::size_t i = 0; i < batch; ++i, ++w) {
      for (std::size_t t = 0; t < seq; ++t) {
        b.tokens[i * seq + t] = stream[w * seq + t];
        b.targets[i * seq + t] = stream[w * seq + t + 1];
      }
    }
    out.push_back(std::move(b));
  }
  if (out.empty()) throw ConfigError("lm batch: validation stream too short for one batch");
  return out;
}

// Deterministic English-like text from a small stochastic grammar, used as a
// self-contained stand-in corpus for character-level language modeling.
inline std::string synthetic_text(std::size_t bytes, std::uint64_t seed) {
  static const std::vector<std::string> nouns = {
      "river", "garden", "window", "teacher", "machine", "city", "letter", "mountain", "child", "market",
      "engine", "forest", "signal", "painter", "harbor", "question", "village", "doctor", "station", "story",
      "bridge", "farmer", "island", "lamp", "memory", "pattern", "soldier", "kitchen", "valley", "record",
      "student", "network", "ocean", "window", "library", "number", "theory", "winter", "voice", "answer"};
  static const std::vector<std::string> verbs = {
      "finds", "carries", "builds", "watches", "follows", "remembers", "opens", "measures", "paints", "answers",
      "crosses", "writes", "keeps", "moves", "names", "changes", "hears", "counts", "repairs", "teaches"};
  static const std::vector<std::string> adjectives = {
      "old", "quiet", "bright", "small", "distant", "green", "heavy", "careful", "strange", "early",
      "broken", "warm", "narrow", "simple", "silver", "patient", "hidden", "ancient", "sudden", "gentle"};
  static const std::vector<std::string> adverbs = {"slowly", "often", "never", "again", "quietly",
                                                   "carefully", "always", "rarely", "soon", "together"};
  static const std::vector<std::string> preps = {"near", "under", "behind", "across", "inside", "beyond", "along", "over"};
  static const std::vector<std::string> names = {"Anna", "Tomas", "Mira", "Oskar", "Lena", "Pavel", "Ines", "Hugo"};
  static const std::vector<std::string> conj = {"and", "but", "while", "because", "until"};

  std::mt19937_64 rng(seed);
  // Zipf-like preference for early list entries.
  auto pick = [&](const std::vector<std::string>& words) -> const std::string& {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double x = u(rng);
    auto idx = static_cast<std::size_t>(std::floor(std::pow(x, 2.0) * static_cast<double>(words.size())));
    return words[std::min(idx, words.size() - 1)];
  };
  auto chance = [&](double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; };
  auto noun_phrase = [&] {
    if (chance(0.15)) return pick(names);
    std::string np = chance(0.6) ? "the " : "a ";
    if (np == "a " && chance(0.5)) np = "the ";
    if (chance(0.5)) np += pick(adjectives) + " ";
    np += pick(nouns);
    if (chance(0.2)) np += " " + pick(preps) + " the " + pick(nouns);
    return np;
  };
  auto clause = [&] {
    std::string c = noun_phrase();
    if (chance(0.25)) c += " " + pick(adverbs);
    c += " " + pick(verbs) + " " + noun_phrase();
    return c;
  };

  std::string text;
  text.reserve(bytes + 256);
  std::size_t sentences_in_paragraph = 0;
  while (text.size() < bytes) {
    std::string s = clause();
    if (chance(0.35)) s += ", " + pick(conj) + " " + clause();
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    s += chance(0.1) ? "?" : ".";
    text += s;
    if (++sentences_in_paragraph >= 4 && chance(0.3)) {
      text += "\n\n";
      sentences_in_paragraph = 0;
    } else {
      text += " ";
    }
  }
  text.resize(bytes);
  return text;
}

// ---------------------------------------------------------------------------
// Representation separation between two tasks' hidden activations.

struct SeparationReport {
  double distance = 0.0;
  double separation_ratio = 0.0;
  std::vector<double> task_mbe;
};

inline std::vector<double> centroid(const Tensor& reps) {
  std::vector<double> c(reps.dim(1), 0.0);
  for (std::size_t r = 0; r < reps.dim(0); ++r)
    for (std::size_t j = 0; j < reps.dim(1); ++j) c[j] += reps(r, j);
  for (auto& v : c) v /= static_cast<double>(reps.dim(0));
  return c;
}

inline double mean_distance_to(const Tensor& reps, const std::vector<double>& c) {
  double total = 0.0;
  for (std::size_t r = 0; r < reps.dim(0); ++r) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < reps.dim(1); ++j) d2 += (reps(r, j) - c[j]) * (reps(r, j) - c[j]);
    total += std::sqrt(d2);
  }
  return total / static_cast<double>(reps.dim(0));
}

inline constexpr double kSeparationFloor = 1e-12;

// distance = ||centroid_1 - centroid_2||; ratio = distance / (mean within-task
// spread + 1e-12). Per-task MBE uses `mbe_config`; an all-zero cloud scores 0.
inline SeparationReport separation_metrics(const Tensor& reps1, const Tensor& reps2, const MbeConfig& mbe_config = {}) {
  if (reps1.rank() != 2 || reps2.rank() != 2) throw ShapeError("separation-metrics", reps1.shape(), reps2.shape());
  if (reps1.dim(1) != reps2.dim(1)) throw ShapeError("separation-metrics", reps1.shape(), reps2.shape());
  const auto c1 = centroid(reps1);
  const auto c2 = centroid(reps2);
  double d2 = 0.0;
  for (std::size_t j = 0; j < c1.size(); ++j) d2 += (c1[j] - c2[j]) * (c1[j] - c2[j]);
  SeparationReport rep;
  rep.distance = std::sqrt(d2);
  const double spread = 0.5 * (mean_distance_to(reps1, c1) + mean_distance_to(reps2, c2));
  rep.separation_ratio = rep.distance / (spread + kSeparationFloor);
  for (const Tensor* reps : {&reps1, &reps2}) {
    double value = 0.0;
    try {
      value = mbe_value(*reps, mbe_config);
    } catch (const DomainError&) {
      value = 0.0;
    }
    rep.task_mbe.push_back(value);
  }
  return rep;
}

}  // namespace iblm::tasks
