#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "iblm/iblm.hpp"

namespace fs = std::filesystem;
using namespace iblm;
using namespace iblm::harness;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitAborted = 3;

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.path, "RunConfig JSON file");
  cmd->add_option("--set", args.overrides, "Override a config field, key=value (dotted keys)")->take_all();
}

RunConfig load_config(const ConfigArgs& args, const std::vector<std::string>& forced = {}) {
  json file = args.path.empty() ? json::object() : load_json_file(args.path);
  std::vector<std::string> all = args.overrides;
  all.insert(all.end(), forced.begin(), forced.end());
  return resolve_config(file, all);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
}

void write_matrix_csv(const fs::path& path, const Tensor& x, const Tensor& y) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  for (std::size_t j = 0; j < x.dim(1); ++j) os << 'x' << j << ',';
  for (std::size_t j = 0; j < y.dim(1); ++j) os << 'y' << j << (j + 1 < y.dim(1) ? "," : "\n");
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    for (std::size_t j = 0; j < x.dim(1); ++j) os << format_double(x(r, j)) << ',';
    for (std::size_t j = 0; j < y.dim(1); ++j) os << format_double(y(r, j)) << (j + 1 < y.dim(1) ? "," : "\n");
  }
}

void gen_data(const std::string& kind, const RunConfig& c, const fs::path& out) {
  fs::create_directories(out);
  json manifest = {{"kind", kind}, {"seed", c.seed}};
  if (kind == "conflict") {
    RunConfig cc = c;
    cc.experiment = "conflict";
    cc.controller = "ce-only";
    ConflictExperiment exp(cc);
    write_matrix_csv(out / "task_pos.csv", exp.data().x1, exp.data().y1);
    write_matrix_csv(out / "task_neg.csv", exp.data().x2, exp.data().y2);
    manifest["n_per_task"] = c.conflict.n_per_task;
    manifest["sigma"] = c.conflict.sigma;
    manifest["shift_relative"] = c.conflict.shift_relative;
    manifest["files"] = {"task_pos.csv", "task_neg.csv"};
  } else if (kind == "arithmetic") {
    auto spec = c.arithmetic;
    spec.seed = c.seed;
    const auto s = tasks::gen_multiplication_data(spec);
    auto dump = [&](const std::string& name, const std::vector<tasks::Equation>& eqs) {
      std::ostringstream os;
      for (const auto& e : eqs) os << e.text() << '\n';
      write_text(out / name, os.str());
      manifest["files"][name] = eqs.size();
    };
    dump("train.txt", s.train);
    dump("test_id.txt", s.test_id);
    dump("test_ood.txt", s.test_ood);
    dump("val_ood.txt", s.val_ood);
    manifest["train_digits"] = {spec.train.lo, spec.train.hi};
    manifest["ood_digits"] = {spec.ood.lo, spec.ood.hi};
  } else if (kind == "corpus") {
    const auto text = tasks::synthetic_text(c.corpus.synthetic_bytes, LmExperiment::kCorpusSeed);
    write_text(out / "corpus.txt", text);
    manifest["bytes"] = text.size();
    manifest["files"] = {"corpus.txt"};
  } else {
    throw ConfigError("gen-data: unknown kind '" + kind + "' (conflict, arithmetic, corpus)");
  }
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << kind << " data to " << out.string() << '\n';
}

void print_summary(const RunLog& log, double seconds) {
  const auto& s = log.summary;
  std::cout << "status: " << s.value("status", "?") << "  steps: " << s.value("steps_completed", 0)
            << "  final_val_ce: " << s.value("final_val_ce", 0.0) << "  transitions: " << s.value("transitions", 0)
            << "  early_stopped: " << (s.value("early_stopped", false) ? "yes" : "no") << "  (" << seconds << " s)\n";
}

json load_summary(const std::string& arg) {
  fs::path p(arg);
  if (fs::is_directory(p)) p /= "summary.json";
  return load_json_file(p.string());
}

std::vector<double> parse_numbers(const std::string& text) {
  std::vector<double> out;
  std::string cleaned = text;
  for (auto& ch : cleaned)
    if (ch == ',' || ch == '[' || ch == ']') ch = ' ';
  std::istringstream is(cleaned);
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + tok + "'");
    }
  }
  return out;
}

std::vector<double> numbers_or_stdin(const std::string& arg) {
  if (!arg.empty() && arg != "-") return parse_numbers(arg);
  std::stringstream ss;
  ss << std::cin.rdbuf();
  return parse_numbers(ss.str());
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Keep freed tensor buffers in the heap instead of returning them to the OS
  // after every step.
  mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif

  CLI::App app{"Information-bottleneck language modeling toolkit"};
  app.require_subcommand(1);

  ConfigArgs gen_args;
  std::string gen_kind;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("gen-data", "Generate task data files from a spec");
  gen->add_option("kind", gen_kind, "conflict, arithmetic or corpus")->required();
  gen->add_option("-o,--out", gen_out, "Output directory");
  add_config_options(gen, gen_args);

  ConfigArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train one run; writes logs to output_dir");
  add_config_options(train_cmd, train_args);

  ConfigArgs scan_args;
  auto* scan_cmd = app.add_subcommand("grad-scan", "Train with CE/MBE gradient alignment recording");
  add_config_options(scan_cmd, scan_args);

  ConfigArgs suite_args;
  auto* suite_cmd = app.add_subcommand("conflict-suite", "Train all six conflict strategies from one init");
  add_config_options(suite_cmd, suite_args);

  std::string rep_base, rep_cand, rep_csv;
  auto* report_cmd = app.add_subcommand("report", "Compare a baseline and a candidate run summary");
  report_cmd->add_option("baseline", rep_base, "Baseline summary.json or run directory")->required();
  report_cmd->add_option("candidate", rep_cand, "Candidate summary.json or run directory")->required();
  report_cmd->add_option("--csv", rep_csv, "Also write the comparison as CSV to this path");

  auto* bounds_cmd = app.add_subcommand("bounds", "Entropy and bound calculators (results in bits)");
  bounds_cmd->require_subcommand(1);
  std::string probs;
  auto* shannon_cmd = bounds_cmd->add_subcommand("shannon", "Shannon entropy of a distribution");
  shannon_cmd->add_option("-p,--probs", probs, "Probabilities, comma separated; '-' or absent reads stdin");
  auto* beta_cmd = bounds_cmd->add_subcommand("beta", "beta = H(p) / log2 n");
  beta_cmd->add_option("-p,--probs", probs, "Probabilities, comma separated; '-' or absent reads stdin");
  int mp_n = 0;
  double mp_alpha = 0.0;
  auto* minprob_cmd = bounds_cmd->add_subcommand("min-prob", "Minimum entropy under a probability floor");
  minprob_cmd->add_option("-n", mp_n, "Number of outcomes")->required();
  minprob_cmd->add_option("-a,--alpha-min", mp_alpha, "Smallest allowed probability")->required();
  BoundInputs gap_in;
  std::string gap_entropies;
  auto* gap_cmd = bounds_cmd->add_subcommand("gap", "Generalization gap bound, up to a constant");
  gap_cmd->add_option("-N,--samples", gap_in.sample_count, "Sample count")->required();
  gap_cmd->add_option("-H,--entropies", gap_entropies, "Per-layer entropies in bits, comma separated")->required();
  gap_cmd->add_option("-a,--alpha", gap_in.alpha_exponent, "Exponent (>= 1)");
  gap_cmd->add_option("--beta", gap_in.beta, "beta in (0, 1]");
  gap_cmd->add_option("--omega", gap_in.omega_size, "Outcome space size");
  gap_cmd->add_option("--min-prob", gap_in.min_prob, "Minimum probability");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const auto t0 = std::chrono::steady_clock::now();
    auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

    if (*gen) {
      gen_data(gen_kind, load_config(gen_args), gen_out);
    } else if (*train_cmd) {
      const auto c = load_config(train_args);
      const auto log = train(c);
      print_summary(log, seconds());
      std::cout << "run directory: " << c.output_dir << '\n';
    } else if (*scan_cmd) {
      const auto c = load_config(scan_args, {"experiment=grad-scan", "grad_scan.enabled=true"});
      const auto log = train(c);
      print_summary(log, seconds());
      std::cout << "group_id,std,zcr,psd_peak_to_mean\n";
      for (const auto& row : log.summary["oscillation"]) {
        std::cout << row["group_id"].get<std::string>() << ',' << row["std"].get<double>() << ','
                  << row["zcr"].get<double>() << ',' << row["psd_peak_to_mean"].get<double>() << '\n';
      }
      std::cout << "run directory: " << c.output_dir << '\n';
    } else if (*suite_cmd) {
      const auto c = load_config(suite_args, {"experiment=conflict"});
      const auto rows = run_conflict_suite(c);
      std::cout << format_suite_table(rows) << "suite directory: " << c.output_dir << '\n';
    } else if (*report_cmd) {
      const auto r = make_report(load_summary(rep_base), load_summary(rep_cand));
      std::cout << format_report_text(r);
      if (!rep_csv.empty()) write_text(rep_csv, format_report_csv(r));
    } else if (*bounds_cmd) {
      json out;
      if (*shannon_cmd) {
        const auto p = numbers_or_stdin(probs);
        out = {{"shannon_bits", shannon_entropy(p)}};
      } else if (*beta_cmd) {
        const auto p = numbers_or_stdin(probs);
        out = {{"beta", beta_for_distribution(p)}, {"shannon_bits", shannon_entropy(p)}};
      } else if (*minprob_cmd) {
        const auto b = min_prob_entropy_bound(mp_n, mp_alpha);
        out = {{"exact_bits", b.exact}, {"approx_bits", b.approx}};
      } else if (*gap_cmd) {
        gap_in.layer_entropy_bits = parse_numbers(gap_entropies);
        out = {{"gap_bound", generalization_gap_bound(gap_in)}};
      }
      std::cout << out.dump() << '\n';
    }
    return kExitOk;
  } catch (const RunAborted& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return kExitAborted;
  } catch (const NonFiniteError& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return kExitAborted;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DomainError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
