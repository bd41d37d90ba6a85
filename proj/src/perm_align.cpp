#include "perm_align.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "param_merge.hpp"

namespace basinmerge {

using json = nlohmann::json;

Permutation Permutation::identity(std::size_t k) {
  Permutation p;
  p.map.resize(k);
  std::iota(p.map.begin(), p.map.end(), std::int64_t{0});
  return p;
}

bool Permutation::is_identity() const {
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (map[i] != static_cast<std::int64_t>(i)) return false;
  }
  return true;
}

bool Permutation::is_bijection() const {
  std::vector<bool> seen(map.size(), false);
  for (auto v : map) {
    if (v < 0 || v >= static_cast<std::int64_t>(map.size()) || seen[static_cast<std::size_t>(v)]) {
      return false;
    }
    seen[static_cast<std::size_t>(v)] = true;
  }
  return true;
}

Permutation Permutation::inverse() const {
  Permutation inv;
  inv.map.resize(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    inv.map[static_cast<std::size_t>(map[i])] = static_cast<std::int64_t>(i);
  }
  return inv;
}

Permutation compose(const Permutation& p, const Permutation& q) {
  if (p.size() != q.size()) throw Error(ErrorCode::shape, "cannot compose permutations of different sizes");
  Permutation r;
  r.map.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) r.map[i] = q.map[static_cast<std::size_t>(p.map[i])];
  return r;
}

PermutationSet PermutationSet::identity(const ArchSpec& arch) {
  PermutationSet s;
  for (const auto& g : arch.hidden_groups()) {
    s.per_layer.push_back(Permutation::identity(static_cast<std::size_t>(g.width)));
  }
  return s;
}

bool PermutationSet::all_identity() const {
  return std::all_of(per_layer.begin(), per_layer.end(),
                     [](const Permutation& p) { return p.is_identity(); });
}

PermutationSet PermutationSet::inverse() const {
  PermutationSet s;
  for (const auto& p : per_layer) s.per_layer.push_back(p.inverse());
  return s;
}

std::string PermutationSet::to_json() const {
  json layers = json::array();
  for (const auto& p : per_layer) layers.push_back(p.map);
  return json{{"per_layer", layers}}.dump();
}

PermutationSet PermutationSet::from_json(std::string_view text) {
  PermutationSet s;
  try {
    const auto j = json::parse(text);
    for (const auto& layer : j.at("per_layer")) {
      Permutation p;
      p.map = layer.get<std::vector<std::int64_t>>();
      if (!p.is_bijection()) throw Error(ErrorCode::validation, "permutation JSON: not a bijection");
      s.per_layer.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("permutation JSON: ") + e.what());
  }
  return s;
}

PermutationSet compose(const PermutationSet& p, const PermutationSet& q) {
  if (p.per_layer.size() != q.per_layer.size()) {
    throw Error(ErrorCode::shape, "cannot compose permutation sets of different depth");
  }
  PermutationSet r;
  for (std::size_t l = 0; l < p.per_layer.size(); ++l) {
    r.per_layer.push_back(compose(p.per_layer[l], q.per_layer[l]));
  }
  return r;
}

double assignment_objective(std::span<const double> profit, const Permutation& p) {
  const std::size_t k = p.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += profit[i * k + static_cast<std::size_t>(p.map[i])];
  return sum;
}

namespace {

struct HungarianResult {
  std::vector<std::size_t> row_to_col;
  std::vector<double> reduced;  // cost - u - v, row-major, >= 0 up to rounding
};

// Shortest augmenting path Hungarian algorithm on cost = -profit (minimize).
HungarianResult hungarian(std::span<const double> profit, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  auto cost = [&](std::size_t i, std::size_t j) { return -profit[(i - 1) * n + (j - 1)]; };

  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  HungarianResult r;
  r.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) r.row_to_col[p[j] - 1] = j - 1;
  r.reduced.resize(n * n);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= n; ++j)
      r.reduced[(i - 1) * n + (j - 1)] = cost(i, j) - u[i] - v[j];
  return r;
}

// Rewrites an optimal matching into the lexicographically smallest perfect
// matching of the tight-edge graph. Row i tries columns in ascending order;
// a switch i -> j is feasible when the current owner of j can reach i's old
// column along an alternating path through rows > i.
std::vector<std::size_t> lexicographic_tight_matching(std::vector<std::size_t> row_to_col,
                                                      const std::vector<bool>& tight,
                                                      std::size_t n) {
  std::vector<std::size_t> col_to_row(n);
  for (std::size_t i = 0; i < n; ++i) col_to_row[row_to_col[i]] = i;

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < row_to_col[i]; ++j) {
      if (!tight[i * n + j]) continue;
      const std::size_t owner = col_to_row[j];
      if (owner < i) continue;  // column held by a fixed row
      const std::size_t target = row_to_col[i];

      // BFS over rows; parent_col[r] = column through which r was reached.
      std::vector<std::size_t> parent_row(n, n), via_col(n, n);
      std::vector<bool> seen(n, false);
      std::deque<std::size_t> queue{owner};
      seen[owner] = true;
      std::size_t end_row = n;
      while (!queue.empty() && end_row == n) {
        const std::size_t r = queue.front();
        queue.pop_front();
        for (std::size_t c = 0; c < n; ++c) {
          if (!tight[r * n + c] || c == j || c == row_to_col[r]) continue;
          if (c == target) {
            end_row = r;
            break;
          }
          const std::size_t next = col_to_row[c];
          if (next <= i || seen[next]) continue;
          seen[next] = true;
          parent_row[next] = r;
          via_col[next] = c;
          queue.push_back(next);
        }
      }
      if (end_row == n) continue;

      // Shift columns along the path: end_row takes target, each row on the
      // path takes the column its successor held.
      std::size_t r = end_row;
      std::size_t take = target;
      while (true) {
        const std::size_t freed = row_to_col[r];
        row_to_col[r] = take;
        col_to_row[take] = r;
        if (r == owner) break;
        take = freed;
        r = parent_row[r];
      }
      row_to_col[i] = j;
      col_to_row[j] = i;
      break;
    }
  }
  return row_to_col;
}

}  // namespace

Permutation solve_lap(std::span<const double> profit, std::size_t k) {
  if (profit.size() != k * k) {
    throw Error(ErrorCode::domain, "solve_lap: profit matrix is not " + std::to_string(k) + "x" +
                                       std::to_string(k));
  }
  double scale = 1.0;
  for (double x : profit) {
    if (!std::isfinite(x)) throw Error(ErrorCode::domain, "solve_lap: non-finite profit entry");
    scale = std::max(scale, std::abs(x));
  }
  if (k == 0) return {};

  const auto h = hungarian(profit, k);
  Permutation optimal;
  optimal.map.assign(h.row_to_col.begin(), h.row_to_col.end());

  const double tol = 1e-9 * scale;
  std::vector<bool> tight(k * k);
  for (std::size_t e = 0; e < k * k; ++e) tight[e] = h.reduced[e] <= tol;
  const auto lex = lexicographic_tight_matching(h.row_to_col, tight, k);
  Permutation tie_broken;
  tie_broken.map.assign(lex.begin(), lex.end());

  if (assignment_objective(profit, tie_broken) >= assignment_objective(profit, optimal)) {
    return tie_broken;
  }
  return optimal;
}

namespace {

struct GroupTensors {
  std::string producer_w, producer_b, consumer_w;
  std::vector<std::string> vectors;  // bias + batchnorm per-unit vectors
  std::size_t width = 0;
  std::size_t producer_in = 0;
  std::size_t consumer_out = 0;
};

std::vector<GroupTensors> group_tensors(const ArchSpec& arch) {
  std::vector<GroupTensors> out;
  for (const auto& g : arch.hidden_groups()) {
    GroupTensors t;
    t.producer_w = g.producer + ".weight";
    t.producer_b = g.producer + ".bias";
    t.consumer_w = g.consumer + ".weight";
    t.vectors.push_back(t.producer_b);
    for (const auto& bn : g.batchnorms) {
      t.vectors.push_back(bn + ".weight");
      t.vectors.push_back(bn + ".bias");
      t.vectors.push_back(bn + std::string(kRunningMeanSuffix));
      t.vectors.push_back(bn + std::string(kRunningVarSuffix));
    }
    t.width = static_cast<std::size_t>(g.width);
    for (const auto& l : arch.layers) {
      if (l.name == g.producer) t.producer_in = static_cast<std::size_t>(l.in);
      if (l.name == g.consumer) t.consumer_out = static_cast<std::size_t>(l.out);
    }
    out.push_back(std::move(t));
  }
  return out;
}

void check_perms(const PermutationSet& perms, const std::vector<GroupTensors>& groups) {
  if (perms.per_layer.size() != groups.size()) {
    throw Error(ErrorCode::validation, "permutation set has " +
                                           std::to_string(perms.per_layer.size()) +
                                           " layers, arch has " + std::to_string(groups.size()) +
                                           " hidden groups");
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (perms.per_layer[g].size() != groups[g].width) {
      throw Error(ErrorCode::validation, "permutation " + std::to_string(g) + " has width " +
                                             std::to_string(perms.per_layer[g].size()) +
                                             ", group width is " +
                                             std::to_string(groups[g].width));
    }
    if (!perms.per_layer[g].is_bijection()) {
      throw Error(ErrorCode::validation, "permutation " + std::to_string(g) + " is not a bijection");
    }
  }
}

std::size_t idx(const Permutation* p, std::size_t i) {
  return p ? static_cast<std::size_t>(p->map[i]) : i;
}

// profit[i, k]: objective contribution of placing target unit k in slot i,
// with the neighbouring groups' permutations held fixed.
std::vector<double> group_profit(const Checkpoint& ref, const Checkpoint& tgt,
                                 const GroupTensors& t, const Permutation* prev,
                                 const Permutation* next) {
  const std::size_t w = t.width;
  std::vector<double> profit(w * w, 0.0);

  const auto ref_p = ref.at(t.producer_w).to_f64();
  const auto tgt_p = tgt.at(t.producer_w).to_f64();
  const std::size_t in = t.producer_in;
  std::vector<double> tgt_p_cols(tgt_p.size());  // columns gathered by prev
  for (std::size_t k = 0; k < w; ++k)
    for (std::size_t j = 0; j < in; ++j) tgt_p_cols[k * in + j] = tgt_p[k * in + idx(prev, j)];
  for (std::size_t i = 0; i < w; ++i)
    for (std::size_t k = 0; k < w; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < in; ++j) s += ref_p[i * in + j] * tgt_p_cols[k * in + j];
      profit[i * w + k] += s;
    }

  const auto ref_c = ref.at(t.consumer_w).to_f64();
  const auto tgt_c = tgt.at(t.consumer_w).to_f64();
  const std::size_t out = t.consumer_out;
  for (std::size_t r = 0; r < out; ++r) {
    const double* ref_row = ref_c.data() + r * w;
    const double* tgt_row = tgt_c.data() + idx(next, r) * w;
    for (std::size_t i = 0; i < w; ++i)
      for (std::size_t k = 0; k < w; ++k) profit[i * w + k] += ref_row[i] * tgt_row[k];
  }

  for (const auto& name : t.vectors) {
    const auto a = ref.at(name).to_f64();
    const auto b = tgt.at(name).to_f64();
    for (std::size_t i = 0; i < w; ++i)
      for (std::size_t k = 0; k < w; ++k) profit[i * w + k] += a[i] * b[k];
  }
  return profit;
}

}  // namespace

Checkpoint apply_permutations(const Checkpoint& ckpt, const PermutationSet& perms,
                              const ArchSpec& arch) {
  check_checkpoint_against_arch(arch, ckpt);
  const auto groups = group_tensors(arch);
  check_perms(perms, groups);

  Checkpoint out = ckpt;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& t = groups[g];
    const auto& p = perms.per_layer[g];
    if (p.is_identity()) continue;

    const auto src_w = out.at(t.producer_w);
    auto& dst_w = out.at(t.producer_w);
    const std::size_t in = t.producer_in;
    for (std::size_t i = 0; i < t.width; ++i)
      for (std::size_t j = 0; j < in; ++j)
        dst_w.set(i * in + j, src_w.get(static_cast<std::size_t>(p.map[i]) * in + j));

    for (const auto& name : t.vectors) {
      const auto& src = ckpt.at(name);
      auto& dst = out.at(name);
      for (std::size_t i = 0; i < t.width; ++i) dst.set(i, src.get(static_cast<std::size_t>(p.map[i])));
    }

    // Producer rows and consumer columns are gathered from `out`: a dense
    // layer between two groups is permuted on both axes.
    const auto consumer = out.at(t.consumer_w);
    auto& dst_c = out.at(t.consumer_w);
    for (std::size_t r = 0; r < t.consumer_out; ++r)
      for (std::size_t i = 0; i < t.width; ++i)
        dst_c.set(r * t.width + i, consumer.get(r * t.width + static_cast<std::size_t>(p.map[i])));
  }
  return out;
}

double alignment_objective(const Checkpoint& ref, const Checkpoint& target,
                           const PermutationSet& perms, const ArchSpec& arch) {
  const auto permuted = apply_permutations(target, perms, arch);
  const auto groups = group_tensors(arch);
  double total = 0.0;
  auto dot = [&](const std::string& name) {
    const auto& a = ref.at(name);
    const auto& b = permuted.at(name);
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.get(i) * b.get(i);
    total += s;
  };
  for (const auto& l : arch.layers) {
    if (l.kind == LayerKind::dense) {
      dot(l.name + ".weight");
      dot(l.name + ".bias");
    }
  }
  for (const auto& t : groups) {
    for (std::size_t v = 1; v < t.vectors.size(); ++v) dot(t.vectors[v]);
  }
  return total;
}

WeightMatchingResult weight_matching(const Checkpoint& ref, const Checkpoint& target,
                                     const ArchSpec& arch, int max_sweeps) {
  if (max_sweeps < 1) throw Error(ErrorCode::domain, "max_sweeps must be >= 1");
  check_checkpoint_against_arch(arch, ref);
  check_checkpoint_against_arch(arch, target);
  const auto groups = group_tensors(arch);

  WeightMatchingResult result;
  result.perms = PermutationSet::identity(arch);
  auto& perms = result.perms.per_layer;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool changed = false;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const Permutation* prev = g > 0 ? &perms[g - 1] : nullptr;
      const Permutation* next = g + 1 < groups.size() ? &perms[g + 1] : nullptr;
      const auto profit = group_profit(ref, target, groups[g], prev, next);
      auto p = solve_lap(profit, groups[g].width);
      // Keep the incumbent unless the new assignment strictly improves.
      if (p != perms[g] &&
          assignment_objective(profit, p) > assignment_objective(profit, perms[g])) {
        perms[g] = std::move(p);
        changed = true;
      }
    }
    ++result.sweeps;
    result.objective.push_back(alignment_objective(ref, target, result.perms, arch));
    if (!changed) {
      result.converged = true;
      break;
    }
  }
  return result;
}

AlignedMerge align_and_merge(const Checkpoint& ref, const Checkpoint& target, const ArchSpec& arch,
                             double lambda, BufferPolicy buffers, int max_sweeps) {
  AlignedMerge out;
  out.matching = weight_matching(ref, target, arch, max_sweeps);
  const auto aligned = apply_permutations(target, out.matching.perms, arch);
  out.merged = interpolate(ref, aligned, lambda, buffers);
  out.merged.meta["align.sweeps"] = std::to_string(out.matching.sweeps);
  out.merged.meta["align.identity"] = out.matching.perms.all_identity() ? "true" : "false";
  return out;
}

}  // namespace basinmerge
