#pragma once

#include <array>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "ebnet/arch/arch.hpp"

namespace ebnet::arch {

enum class Direction { blocks, depth, width, groups };

std::string_view to_string(Direction d);
Direction parse_direction(std::string_view s);

/// One value along one direction, applied on top of a seed spec.
struct Setting {
  Direction direction = Direction::groups;
  std::array<int, 4> values{};  // blocks / groups
  int scalar = 0;               // depth (blocks of `depth_stage`) / width (E)

  ArchSpec apply(ArchSpec spec, int depth_stage) const;
  friend bool operator==(const Setting&, const Setting&) = default;
};

struct SearchConfig {
  std::vector<Direction> directions{Direction::depth, Direction::groups};
  std::uint64_t max_bops = 0;
  std::uint64_t max_flops = 0;
  /// Phases: odd rounds sweep each direction alone, even rounds train the
  /// cross-product of the best per-direction settings.
  int rounds = 4;
  int keep_top = 2;
  int depth_stage = 2;
  // Explicit candidate values; empty lists are generated around the seed.
  std::vector<std::array<int, 4>> block_options;
  std::vector<int> depth_options;
  std::vector<int> width_options;
  std::vector<std::array<int, 4>> group_options;

  void validate() const;
};

struct Candidate {
  ArchSpec spec;
  double score = 0;
  CostReport cost;
};

struct SearchPhase {
  int round = 0;
  bool combine = false;
  std::vector<Candidate> rows;
};

struct SearchResult {
  bool empty = false;
  std::vector<SearchPhase> phases;
  std::vector<Candidate> ranking;  // unique specs, best first, ties by first evaluation
};

using ProxyEval = std::function<double(const ArchSpec&)>;

std::vector<Setting> direction_settings(const ArchSpec& seed, const SearchConfig& cfg, Direction d);
bool within_budget(const CostReport& cost, const SearchConfig& cfg);

SearchResult search(const ArchSpec& seed, const SearchConfig& cfg, const ProxyEval& proxy);

/// Deterministic stand-in proxy for dry runs and tests: grows with BOPs,
/// depth and experts, no training involved.
double mock_proxy(const ArchSpec& spec);

void write_candidates_csv(std::ostream& os, const std::vector<Candidate>& rows);

}  // namespace ebnet::arch
