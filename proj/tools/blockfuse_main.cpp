#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "blockfuse/dot.hpp"
#include "blockfuse/engine.hpp"
#include "blockfuse/interpreter.hpp"
#include "blockfuse/lowering.hpp"
#include "blockfuse/metrics.hpp"
#include "blockfuse/pseudocode.hpp"
#include "blockfuse/serialize.hpp"

namespace fs = std::filesystem;
using namespace blockfuse;

namespace {

int log_level() {
  const char* env = std::getenv("BLOCKFUSE_LOG");
  if (!env) return 1;
  std::string v = env;
  if (v == "quiet") return 0;
  if (v == "debug") return 2;
  return 1;
}

void info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "blockfuse: " << msg << "\n";
}
void debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "blockfuse[debug]: " << msg << "\n";
}

std::string read_input(const std::string& path) {
  if (path == "-" || path.empty()) {
    std::ostringstream ss;
    ss << std::cin.rdbuf();
    return ss.str();
  }
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_output(const std::string& path, const std::string& text) {
  if (path == "-" || path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << text;
}

ParsedProgram load_program(const std::string& path) {
  ParsedProgram p = parse_program(read_input(path));
  for (const std::string& w : p.warnings) info("warning: " + w);
  return p;
}

// "M=2,N=4" -> counts per dimension
void parse_dims(const std::string& s, DimBinding& b) {
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw Error("bad --dims entry '" + item + "'");
    b.dims[item.substr(0, eq)].count = std::stoi(item.substr(eq + 1));
  }
}

// "4x4" -> block edge length applied to every dimension (square blocks)
void parse_block(const std::string& s, DimBinding& b) {
  auto x = s.find('x');
  if (x == std::string::npos) throw Error("bad --block value '" + s + "' (expected RxC)");
  int r = std::stoi(s.substr(0, x));
  int c = std::stoi(s.substr(x + 1));
  if (r != c) throw Error("--block requires square blocks; use --len for per-dimension lengths");
  for (auto& [d, e] : b.dims) e.block_len = r;
  b.free_len = r;
}

void parse_lens(const std::string& s, DimBinding& b) {
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw Error("bad --len entry '" + item + "'");
    b.dims[item.substr(0, eq)].block_len = std::stoi(item.substr(eq + 1));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"block-program fusion driver"};
  app.require_subcommand(1);

  // examples
  auto* cmd_examples = app.add_subcommand("examples", "emit a built-in array program");
  std::string example_name;
  std::string examples_out = "-";
  cmd_examples->add_option("name", example_name, "attention | layernorm-matmul | rms-swiglu")
      ->required();
  cmd_examples->add_option("-o,--output", examples_out, "output file (default stdout)");

  // lower
  auto* cmd_lower = app.add_subcommand("lower", "lower an array program to a block program");
  std::string lower_in = "-", lower_out = "-";
  cmd_lower->add_option("input", lower_in, "input file (default stdin)");
  cmd_lower->add_option("-o,--output", lower_out, "output file (default stdout)");

  // fuse
  auto* cmd_fuse = app.add_subcommand("fuse", "fuse a program and dump every snapshot");
  std::string fuse_in = "-", fuse_dir = "fused";
  bool fuse_peel = false;
  int fuse_max_rounds = 10000;
  cmd_fuse->add_option("input", fuse_in, "input file (default stdin)");
  cmd_fuse->add_option("--out-dir", fuse_dir, "directory for snapshots and traces")->required();
  cmd_fuse->add_flag("--enable-peel", fuse_peel, "also apply the peeling rule");
  cmd_fuse->add_option("--max-rounds", fuse_max_rounds, "rule application budget");

  // verify
  auto* cmd_verify = app.add_subcommand("verify", "check two programs compute the same function");
  std::string verify_a, verify_b, verify_dims, verify_block = "4x4", verify_lens;
  int verify_trials = 20;
  unsigned long long verify_seed = 42;
  double verify_tol = 1e-8;
  cmd_verify->add_option("first", verify_a, "first program")->required();
  cmd_verify->add_option("second", verify_b, "second program")->required();
  cmd_verify->add_option("--dims", verify_dims, "block counts, e.g. M=2,N=2")->required();
  cmd_verify->add_option("--block", verify_block, "square block shape, e.g. 4x4");
  cmd_verify->add_option("--len", verify_lens, "per-dimension block lengths, e.g. M=4,N=8");
  cmd_verify->add_option("--trials", verify_trials, "random instances to test");
  cmd_verify->add_option("--seed", verify_seed, "seed for input generation");
  cmd_verify->add_option("--tol", verify_tol, "relative tolerance");

  // metrics
  auto* cmd_metrics = app.add_subcommand("metrics", "report buffered edges, kernels and traffic");
  std::string metrics_in = "-", metrics_dims, metrics_block = "4x4", metrics_lens;
  int metrics_elem_bytes = 8;
  cmd_metrics->add_option("input", metrics_in, "input file (default stdin)");
  cmd_metrics->add_option("--dims", metrics_dims, "block counts, e.g. M=2,N=2")->required();
  cmd_metrics->add_option("--block", metrics_block, "square block shape, e.g. 4x4");
  cmd_metrics->add_option("--len", metrics_lens, "per-dimension block lengths");
  cmd_metrics->add_option("--elem-bytes", metrics_elem_bytes, "bytes per element");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_examples) {
      ArrayProgram p;
      if (example_name == "attention") p = examples::attention();
      else if (example_name == "layernorm-matmul") p = examples::layernorm_matmul();
      else if (example_name == "rms-swiglu") p = examples::rms_ffn_swiglu();
      else throw Error("unknown example '" + example_name + "'");
      write_output(examples_out, serialize_program(p));
      return 0;
    }

    if (*cmd_lower) {
      ParsedProgram p = load_program(lower_in);
      if (!p.is_array()) {
        info("input is already a block program; passing it through");
        write_output(lower_out, serialize_program(p.block()));
        return 0;
      }
      BlockGraph g = lower(p.array());
      debug("lowered to " + std::to_string(kernel_count(g)) + " top-level operators");
      write_output(lower_out, serialize_program(g));
      return 0;
    }

    if (*cmd_fuse) {
      BlockGraph g = load_program(fuse_in).to_block();
      EngineConfig cfg;
      cfg.enable_peel = fuse_peel;
      cfg.max_rounds = fuse_max_rounds;
      FuseResult result = fuse(g, cfg);

      fs::create_directories(fuse_dir);
      for (size_t i = 0; i < result.snapshots.size(); ++i) {
        const Snapshot& s = result.snapshots[i];
        std::string stem = fuse_dir + "/snapshot_" + std::to_string(i + 1);
        write_output(stem + ".json", serialize_program(s.program));
        write_output(stem + ".dot", to_dot(s.program));
        write_output(stem + ".pseudo.txt", to_pseudocode(s.program));
        write_output(stem + ".trace.txt", trace_str(s.trace));
        std::cout << "snapshot " << (i + 1) << ": " << s.trace.size()
                  << " rule applications, internal buffered edges = "
                  << internal_buffered_edges(s.program) << "\n";
      }
      write_output(fuse_dir + "/trace.log", trace_str(result.trace));
      info("wrote " + std::to_string(result.snapshots.size()) + " snapshots to " + fuse_dir);
      return 0;
    }

    if (*cmd_verify) {
      DimBinding b;
      parse_dims(verify_dims, b);
      parse_block(verify_block, b);
      if (!verify_lens.empty()) parse_lens(verify_lens, b);
      BlockGraph p1 = load_program(verify_a).to_block();
      BlockGraph p2 = load_program(verify_b).to_block();
      auto rep = check_equivalence(p1, p2, b, verify_trials, verify_seed, verify_tol);
      std::cout << "trials: " << rep.trials << "\n"
                << "max relative error: " << rep.max_rel << "\n"
                << "verdict: " << (rep.pass ? "equivalent" : "NOT equivalent") << "\n";
      if (!rep.pass && !rep.detail.empty()) std::cout << rep.detail << "\n";
      return rep.pass ? 0 : 2;
    }

    if (*cmd_metrics) {
      DimBinding b;
      parse_dims(metrics_dims, b);
      parse_block(metrics_block, b);
      if (!metrics_lens.empty()) parse_lens(metrics_lens, b);
      BlockGraph g = load_program(metrics_in).to_block();
      auto rep = metrics_report(g, b, TrafficModel{metrics_elem_bytes});
      Json j;
      j["internal_buffered_edges"] = rep.internal_buffered;
      j["kernel_count"] = rep.kernels;
      j["traffic_bytes"] = rep.traffic;
      std::cout << j.dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "blockfuse: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
