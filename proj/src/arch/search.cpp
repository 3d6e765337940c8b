#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "ebnet/arch/search.hpp"

namespace ebnet::arch {

std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::blocks: return "blocks";
    case Direction::depth: return "depth";
    case Direction::width: return "width";
    case Direction::groups: return "groups";
  }
  return "groups";
}

Direction parse_direction(std::string_view s) {
  if (s == "blocks") return Direction::blocks;
  if (s == "depth") return Direction::depth;
  if (s == "width") return Direction::width;
  if (s == "groups") return Direction::groups;
  throw ConfigError("unknown search direction '" + std::string(s) + "'");
}

ArchSpec Setting::apply(ArchSpec spec, int depth_stage) const {
  switch (direction) {
    case Direction::blocks: spec.blocks = values; break;
    case Direction::depth: spec.blocks[static_cast<std::size_t>(depth_stage)] = scalar; break;
    case Direction::width: spec.expansion = scalar; break;
    case Direction::groups: spec.groups = values; break;
  }
  return spec;
}

void SearchConfig::validate() const {
  if (max_bops == 0 || max_flops == 0) throw ConfigError("search budget must be positive");
  if (rounds < 1) throw ConfigError("search needs at least one round");
  if (keep_top < 1) throw ConfigError("keep_top must be >= 1");
  if (directions.empty()) throw ConfigError("search needs at least one direction");
  if (depth_stage < 0 || depth_stage > 3) throw ConfigError("depth stage must be in [0, 3]");
}

bool within_budget(const CostReport& cost, const SearchConfig& cfg) {
  return cost.bops <= cfg.max_bops && cost.flops <= cfg.max_flops;
}

std::vector<Setting> direction_settings(const ArchSpec& seed, const SearchConfig& cfg, Direction d) {
  std::vector<Setting> out;
  switch (d) {
    case Direction::blocks: {
      auto opts = cfg.block_options;
      if (opts.empty()) {
        const int total = seed.blocks[0] + seed.blocks[1] + seed.blocks[2] + seed.blocks[3];
        for (int a = 1; a <= 9; ++a)
          for (int b = 1; b <= 9; ++b)
            for (int c = 1; c <= 9; ++c) {
              const int e = total - a - b - c;
              if (e >= 1 && e <= 9) opts.push_back({a, b, c, e});
            }
      }
      for (const auto& v : opts) out.push_back({d, v, 0});
      break;
    }
    case Direction::depth: {
      auto opts = cfg.depth_options;
      if (opts.empty()) {
        const int n = seed.blocks[static_cast<std::size_t>(cfg.depth_stage)];
        for (int v : {n - 2, n, n + 2})
          if (v >= 1 && v <= 9) opts.push_back(v);
      }
      for (int v : opts) out.push_back({d, {}, v});
      break;
    }
    case Direction::width: {
      auto opts = cfg.width_options;
      if (opts.empty())
        for (int v : {seed.expansion - 1, seed.expansion, seed.expansion + 1})
          if (v >= 1) opts.push_back(v);
      for (int v : opts) out.push_back({d, {}, v});
      break;
    }
    case Direction::groups: {
      auto opts = cfg.group_options;
      if (opts.empty()) {
        opts.push_back(seed.groups);
        std::array<int, 4> half = seed.groups, twice = seed.groups;
        bool half_ok = false;
        for (std::size_t i = 0; i < 4; ++i) {
          if (half[i] % 2 == 0) {
            half[i] /= 2;
            half_ok = true;
          }
          twice[i] *= 2;
        }
        if (half_ok) opts.insert(opts.begin(), half);
        opts.push_back(twice);
      }
      for (const auto& v : opts) out.push_back({d, v, 0});
      break;
    }
  }
  return out;
}

namespace {

struct Evaluator {
  const SearchConfig& cfg;
  const ProxyEval& proxy;
  std::vector<Candidate> seen;  // first-evaluation order
  std::map<std::string, std::size_t> index;

  static std::string key(const ArchSpec& s) {
    return format_arch(s) + "/" + std::to_string(s.n_experts) + "/" + std::string(to_string(s.group_mix));
  }

  // Returns nullptr when the spec is invalid or over budget.
  const Candidate* eval(const ArchSpec& spec) {
    const std::string k = key(spec);
    if (auto it = index.find(k); it != index.end()) return &seen[it->second];
    CostReport cost;
    try {
      cost = cost_model(spec);
    } catch (const ConfigError&) {
      return nullptr;
    }
    if (!within_budget(cost, cfg)) return nullptr;
    seen.push_back({spec, proxy(spec), cost});
    index[k] = seen.size() - 1;
    return &seen.back();
  }
};

bool better(const Candidate& a, const Candidate& b) { return a.score > b.score; }

}  // namespace

SearchResult search(const ArchSpec& seed, const SearchConfig& cfg, const ProxyEval& proxy) {
  cfg.validate();
  SearchResult result;
  if (!within_budget(cost_model(seed), cfg)) {
    result.empty = true;
    return result;
  }
  Evaluator ev{cfg, proxy, {}, {}};
  ArchSpec base = seed;
  std::vector<std::vector<std::pair<Setting, double>>> scored;  // per direction, from the last sweep

  for (int round = 1; round <= cfg.rounds; ++round) {
    SearchPhase phase;
    phase.round = round;
    phase.combine = round % 2 == 0;
    if (!phase.combine) {
      scored.assign(cfg.directions.size(), {});
      for (std::size_t d = 0; d < cfg.directions.size(); ++d)
        for (const Setting& s : direction_settings(base, cfg, cfg.directions[d]))
          if (const Candidate* c = ev.eval(s.apply(base, cfg.depth_stage))) {
            phase.rows.push_back(*c);
            scored[d].emplace_back(s, c->score);
          }
    } else {
      std::vector<std::vector<Setting>> top(cfg.directions.size());
      for (std::size_t d = 0; d < scored.size(); ++d) {
        auto ranked = scored[d];
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(cfg.keep_top); ++i)
          top[d].push_back(ranked[i].first);
      }
      std::vector<ArchSpec> combos{base};
      for (const auto& settings : top) {
        if (settings.empty()) continue;
        std::vector<ArchSpec> next;
        for (const ArchSpec& c : combos)
          for (const Setting& s : settings) next.push_back(s.apply(c, cfg.depth_stage));
        combos = std::move(next);
      }
      for (const ArchSpec& c : combos)
        if (const Candidate* cand = ev.eval(c)) phase.rows.push_back(*cand);
    }
    result.phases.push_back(std::move(phase));
    if (!ev.seen.empty()) {
      base = std::min_element(ev.seen.begin(), ev.seen.end(), better)->spec;
    }
  }

  result.ranking = ev.seen;
  std::stable_sort(result.ranking.begin(), result.ranking.end(), better);
  result.empty = result.ranking.empty();
  return result;
}

double mock_proxy(const ArchSpec& spec) {
  const CostReport c = cost_model(spec);
  const int depth = spec.blocks[0] + spec.blocks[1] + spec.blocks[2] + spec.blocks[3];
  return 100.0 * (1.0 - std::exp(-static_cast<double>(c.bops) / 2e9)) + 0.1 * depth + 0.5 * std::log2(spec.n_experts);
}

void write_candidates_csv(std::ostream& os, const std::vector<Candidate>& rows) {
  os << "spec,score,bops,flops,size_bytes\n";
  for (const Candidate& c : rows)
    os << format_arch(c.spec) << ',' << c.score << ',' << c.cost.bops << ',' << c.cost.flops << ','
       << c.cost.model_size_bytes << '\n';
}

}  // namespace ebnet::arch
