#pragma once

#include <deque>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "blockfuse/ir.hpp"
#include "blockfuse/metrics.hpp"
#include "blockfuse/rules.hpp"

namespace blockfuse {

struct EngineConfig {
  // Companion rules run before fusion rules; extension is handled separately.
  std::vector<RuleId> priority = {
      RuleId::R8_duplicate_scale, RuleId::R4_scale_dot,  RuleId::R5_shift_dot,
      RuleId::R9_elementwise,     RuleId::R3_map_reduction, RuleId::R1_consecutive_maps,
      RuleId::R2_sibling_maps,
  };
  bool enable_peel = false;  // appends peeling after the sibling rule
  int max_rounds = 10000;
};

struct TraceEntry {
  int step = 0;
  RuleMatch match;

  std::string str() const {
    std::ostringstream os;
    os << "step " << step << ": " << match.str();
    return os.str();
  }
};

using Trace = std::vector<TraceEntry>;

inline std::string trace_str(const Trace& t) {
  std::string out;
  for (const TraceEntry& e : t) out += e.str() + "\n";
  return out;
}

/// A fusion fixpoint: the program as it stood when no more rule applied, plus
/// the rule applications that led here from the previous snapshot.
struct Snapshot {
  BlockGraph program;
  Trace trace;
  int round_index = 0;
};

struct FuseResult {
  std::vector<Snapshot> snapshots;
  Trace trace;
};

namespace engine_detail {

inline std::optional<RuleMatch> match_rule(const BlockGraph& program, const GraphPath& path,
                                           RuleId rule) {
  switch (rule) {
    case RuleId::R1_consecutive_maps: return match_consecutive_maps(program, path);
    case RuleId::R2_sibling_maps: return match_sibling_maps(program, path);
    case RuleId::R3_map_reduction: return match_map_reduction(program, path);
    case RuleId::R4_scale_dot: return match_scale_dot(program, path);
    case RuleId::R5_shift_dot: return match_shift_dot(program, path);
    case RuleId::R8_duplicate_scale: return match_duplicate_scale(program, path);
    case RuleId::R9_elementwise: return match_elementwise(program, path);
    case RuleId::R7_peel: return match_peel(program, path);
    case RuleId::R6_extend: throw Error("extension is driven by bfs_extend, not the priority list");
  }
  return std::nullopt;
}

struct Budget {
  int used = 0;
  int limit = 10000;
  void spend(const Trace& t) {
    if (++used > limit)
      throw Error("rule application budget exceeded; last steps:\n" +
                  trace_str(Trace(t.end() - std::min<size_t>(t.size(), 10), t.end())));
  }
};

inline void fuse_one_graph(BlockGraph& program, const GraphPath& path, const EngineConfig& cfg,
                           Trace& trace, Budget& budget) {
  std::vector<RuleId> rules = cfg.priority;
  if (cfg.enable_peel &&
      std::find(rules.begin(), rules.end(), RuleId::R7_peel) == rules.end())
    rules.push_back(RuleId::R7_peel);

  bool progressed = true;
  while (progressed) {
    progressed = false;
    for (RuleId rule : rules) {
      auto m = match_rule(program, path, rule);
      if (!m) continue;
      int buffered_before = total_buffered_edges(program);
      int nodes_before = total_node_count(program);
      apply(program, *m);
      // the fusion rules owe a strictly shrinking measure; enforce it
      if (rule == RuleId::R1_consecutive_maps || rule == RuleId::R2_sibling_maps ||
          rule == RuleId::R3_map_reduction) {
        if (total_buffered_edges(program) >= buffered_before)
          throw Error(std::string(rule_name(rule)) + " failed to remove a buffered edge");
      }
      if (rule == RuleId::R9_elementwise && total_node_count(program) >= nodes_before)
        throw Error("elementwise fusion failed to shrink the graph");
      trace.push_back({static_cast<int>(trace.size()) + 1, *m});
      budget.spend(trace);
      progressed = true;
      break;
    }
  }
}

}  // namespace engine_detail

/// Applies the highest-priority matching rule (extension excluded) until the
/// given graph has no matches left.
inline void fuse_no_extend(BlockGraph& program, const GraphPath& path, const EngineConfig& cfg,
                           Trace& trace) {
  engine_detail::Budget budget{0, cfg.max_rounds};
  engine_detail::fuse_one_graph(program, path, cfg, trace, budget);
}

/// Runs fuse_no_extend over every graph of the hierarchy in breadth-first
/// order. Graphs merged while a level is processed are visited with the next
/// level.
inline void bfs_fuse_no_extend(BlockGraph& program, const EngineConfig& cfg, Trace& trace) {
  engine_detail::Budget budget{0, cfg.max_rounds};
  std::vector<GraphPath> level{GraphPath{}};
  while (!level.empty()) {
    for (const GraphPath& path : level)
      engine_detail::fuse_one_graph(program, path, cfg, trace, budget);
    std::vector<GraphPath> next;
    for (const GraphPath& path : level) {
      const BlockGraph& g = resolve_path(program, path);
      for (const auto& [id, n] : g.nodes)
        if (n.kind == NodeKind::Map) {
          GraphPath sub = path;
          sub.push_back(id);
          next.push_back(sub);
        }
    }
    level = std::move(next);
  }
}

/// Finds the first opportunity to extend a map (breadth-first over the
/// hierarchy) and applies it. Returns whether anything changed.
inline bool bfs_extend(BlockGraph& program, Trace& trace) {
  auto m = match_extend(program);
  if (!m) return false;
  apply(program, *m);
  trace.push_back({static_cast<int>(trace.size()) + 1, *m});
  return true;
}

/// The top-level driver: fuse to a fixpoint, snapshot, extend one map, and
/// repeat until no extension exists. Every snapshot is a complete program
/// equivalent to the input.
inline FuseResult fuse(const BlockGraph& input, const EngineConfig& cfg = {}) {
  FuseResult result;
  BlockGraph p = input;
  int round = 0;
  Trace segment;
  while (true) {
    bfs_fuse_no_extend(p, cfg, segment);
    auto violations = validate(p);
    if (!violations.empty())
      throw Error("fusion produced an invalid program: " + violations.front());
    Snapshot snap;
    snap.program = deep_clone(p).graph;
    snap.round_index = round;
    snap.trace = segment;
    for (const TraceEntry& e : segment) result.trace.push_back(e);
    result.snapshots.push_back(std::move(snap));
    segment.clear();

    Trace ext;
    if (!bfs_extend(p, ext)) break;
    // extension entries flush with the next snapshot's segment
    for (const TraceEntry& e : ext) segment.push_back(e);
    round++;
  }
  // renumber steps globally so the trace reads as one sequence
  for (size_t i = 0; i < result.trace.size(); ++i) result.trace[i].step = static_cast<int>(i) + 1;
  return result;
}

}  // namespace blockfuse
