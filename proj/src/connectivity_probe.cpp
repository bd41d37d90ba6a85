#include "connectivity_probe.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "metrics.hpp"
#include "parallel.hpp"
#include "param_merge.hpp"

namespace basinmerge {

using json = nlohmann::json;

std::vector<double> lambda_grid(int steps) {
  if (steps < 2) throw Error(ErrorCode::domain, "sweep needs steps >= 2, got " + std::to_string(steps));
  std::vector<double> out(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(i) / (steps - 1);
  out.back() = 1.0;
  return out;
}

double barrier(const std::vector<double>& lambdas, const std::vector<double>& curve) {
  if (lambdas.size() != curve.size() || curve.size() < 2) {
    throw Error(ErrorCode::shape, "barrier needs equal-length lambda and metric lists of size >= 2");
  }
  const double h0 = curve.front();
  const double h1 = curve.back();
  double worst = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const double lam = lambdas[i];
    const double chord = h0 == h1 ? h0 : (1.0 - lam) * h0 + lam * h1;
    worst = std::max(worst, chord - curve[i]);
  }
  return worst;
}

double barrier(const SweepReport& report) { return barrier(report.lambdas, report.harmonic); }

SweepReport sweep(const Checkpoint& a, const Checkpoint& b, const DomainSet& domains,
                  const ArchSpec& arch, int steps, BufferPolicy buffers, int threads) {
  if (domains.empty()) throw Error(ErrorCode::domain, "sweep needs at least one evaluation domain");
  SweepReport r;
  r.lambdas = lambda_grid(steps);
  {
    const Checkpoint* pair[] = {&a, &b};
    require_compatible(pair);
  }
  check_checkpoint_against_arch(arch, a);
  check_checkpoint_against_arch(arch, b);

  for (const auto& [tag, data] : domains) r.domains.push_back(tag);
  const std::size_t n = r.lambdas.size();
  r.per_domain.assign(domains.size(), std::vector<double>(n, 0.0));
  r.harmonic.assign(n, 0.0);

  parallel_for(n, threads, [&](std::size_t i) {
    const double lam = r.lambdas[i];
    try {
      Checkpoint merged;
      const Checkpoint* model = nullptr;
      if (i == 0) {
        model = &b;
      } else if (i + 1 == n) {
        model = &a;
      } else {
        merged = interpolate(a, b, lam, buffers);
        model = &merged;
      }
      std::vector<double> scores;
      for (std::size_t d = 0; d < domains.size(); ++d) {
        const double acc = evaluate(arch, *model, domains[d].second).accuracy;
        r.per_domain[d][i] = acc;
        scores.push_back(acc);
      }
      r.harmonic[i] = harmonic_mean(scores);
    } catch (const Error& e) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "at lambda=%.4f: ", lam);
      throw Error(e.code(), buf + std::string(e.what()));
    }
  });

  r.barrier = barrier(r);
  r.meta["buffer_policy"] = buffer_policy_name(buffers);
  r.meta["steps"] = std::to_string(steps);
  r.meta["arch"] = arch.to_json();
  auto source = [](const Checkpoint& c) {
    auto it = c.meta.find("domain");
    return it == c.meta.end() ? std::string() : it->second;
  };
  r.meta["model_a"] = source(a);
  r.meta["model_b"] = source(b);
  return r;
}

std::string SweepReport::to_json() const {
  json per = json::object();
  for (std::size_t d = 0; d < domains.size(); ++d) per[domains[d]] = per_domain[d];
  json j{{"barrier", barrier},   {"domains", domains}, {"harmonic", harmonic},
         {"lambdas", lambdas},   {"meta", meta},       {"per_domain", per}};
  return j.dump(2);
}

std::string SweepReport::to_csv() const {
  std::ostringstream out;
  out << "lambda";
  for (const auto& d : domains) out << ',' << d;
  out << ",harmonic\n";
  char buf[64];
  auto cell = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    out << cell(lambdas[i]);
    for (const auto& col : per_domain) out << ',' << cell(col[i]);
    out << ',' << cell(harmonic[i]) << '\n';
  }
  return out.str();
}

}  // namespace basinmerge
