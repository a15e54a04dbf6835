#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "iblm/error.hpp"

namespace iblm::harness {

using nlohmann::json;

// One record per optimizer step.
struct StepRecord {
  long step = 0;
  std::string phase;                // "mem" or "comp"
  double train_ce = 0.0;
  double loss = 0.0;                // composite objective actually minimized
  std::optional<double> val_ce;     // present on eval steps
  std::vector<double> mbe;          // per layer, index 0 is layer 1
  int stall_mem = 0;
  int stall_comp = 0;
  double ce_min = std::numeric_limits<double>::infinity();
  std::string transition;           // empty, or the transition reason
};

struct EvalRecord {
  long step = 0;
  double val_ce = 0.0;
};

struct AlignmentRecord {
  long step = 0;
  std::string group;
  std::optional<double> consistency;  // absent with a single batch
  double alignment = 0.0;
};

// In-memory mirror of what a run writes to disk.
struct RunLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::vector<AlignmentRecord> alignment;
  json summary = json::object();
};

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_steps_header(std::ostream& os, int layers) {
  os << "step,phase,train_ce,loss,val_ce";
  for (int l = 1; l <= layers; ++l) os << ",mbe_L" << l;
  os << ",stall_mem,stall_comp,ce_min,transition\n";
}

inline void write_step_row(std::ostream& os, const StepRecord& r) {
  os << r.step << ',' << r.phase << ',' << format_double(r.train_ce) << ',' << format_double(r.loss) << ',';
  if (r.val_ce) os << format_double(*r.val_ce);
  for (double m : r.mbe) os << ',' << format_double(m);
  os << ',' << r.stall_mem << ',' << r.stall_comp << ',' << format_double(r.ce_min) << ',' << r.transition << '\n';
}

inline void write_alignment_row(std::ostream& os, const AlignmentRecord& r) {
  os << r.step << ',' << r.group << ',';
  if (r.consistency) os << format_double(*r.consistency);
  os << ',' << format_double(r.alignment) << '\n';
}

// Single-writer file sink. Every row is flushed whole so that an interrupted
// run leaves only complete records behind.
class RunWriter {
 public:
  RunWriter() = default;

  RunWriter(const std::filesystem::path& dir, int layers, bool with_alignment) : dir_(dir) {
    std::filesystem::create_directories(dir_);
    open(steps_, "steps.csv");
    write_steps_header(steps_, layers);
    open(evals_, "eval.csv");
    evals_ << "step,val_ce\n";
    if (with_alignment) {
      open(alignment_, "alignment.csv");
      alignment_ << "step,group,consistency,alignment\n";
    }
    flush_all();
  }

  bool active() const noexcept { return !dir_.empty(); }
  const std::filesystem::path& dir() const noexcept { return dir_; }

  void step(const StepRecord& r) {
    if (!active()) return;
    write_step_row(steps_, r);
    steps_.flush();
  }

  void eval(const EvalRecord& r) {
    if (!active()) return;
    evals_ << r.step << ',' << format_double(r.val_ce) << '\n';
    evals_.flush();
  }

  void alignment(const AlignmentRecord& r) {
    if (!active() || !alignment_.is_open()) return;
    write_alignment_row(alignment_, r);
    alignment_.flush();
  }

  void write_json(const std::string& name, const json& j) const {
    if (!active()) return;
    std::ofstream os(dir_ / name);
    if (!os) throw ConfigError("cannot write " + (dir_ / name).string());
    os << j.dump(2) << '\n';
  }

  std::ofstream open_extra(const std::string& name) const {
    std::ofstream os(dir_ / name);
    if (!os) throw ConfigError("cannot write " + (dir_ / name).string());
    return os;
  }

 private:
  void open(std::ofstream& os, const std::string& name) {
    os.open(dir_ / name);
    if (!os) throw ConfigError("cannot write " + (dir_ / name).string());
  }

  void flush_all() {
    steps_.flush();
    evals_.flush();
    if (alignment_.is_open()) alignment_.flush();
  }

  std::filesystem::path dir_;
  std::ofstream steps_;
  std::ofstream evals_;
  std::ofstream alignment_;
};

// Reads a steps.csv back into records; used by tests and the report command.
inline std::vector<StepRecord> read_steps_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw ConfigError(path.string() + ": empty log");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 9 || header[0] != "step") throw ConfigError(path.string() + ": not a steps log");
  const std::size_t layers = header.size() - 9;
  auto parse = [&](const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    try {
      return std::stod(s);
    } catch (const std::exception&) {
      throw ConfigError(path.string() + ": bad number '" + s + "'");
    }
  };
  std::vector<StepRecord> out;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != header.size()) throw ConfigError(path.string() + ": torn record '" + line + "'");
    StepRecord r;
    r.step = std::stol(cells[0]);
    r.phase = cells[1];
    r.train_ce = parse(cells[2]);
    r.loss = parse(cells[3]);
    if (!cells[4].empty()) r.val_ce = parse(cells[4]);
    for (std::size_t l = 0; l < layers; ++l) r.mbe.push_back(parse(cells[5 + l]));
    r.stall_mem = std::stoi(cells[5 + layers]);
    r.stall_comp = std::stoi(cells[6 + layers]);
    r.ce_min = parse(cells[7 + layers]);
    r.transition = cells[8 + layers];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace iblm::harness
