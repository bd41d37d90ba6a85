#include "experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "metrics.hpp"
#include "parallel.hpp"
#include "param_merge.hpp"

namespace basinmerge {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::pair<Scenario, const char*> kScenarioNames[] = {
    {Scenario::shared_pretrain, "shared_pretrain"},
    {Scenario::random_init, "random_init"},
    {Scenario::shared_init_no_pretrain, "shared_init_no_pretrain"},
    {Scenario::split_source, "split_source"},
    {Scenario::disjoint_subsets, "disjoint_subsets"},
    {Scenario::buffer_ablation, "buffer_ablation"},
};

}  // namespace

const char* scenario_name(Scenario s) {
  for (const auto& [v, n] : kScenarioNames)
    if (v == s) return n;
  return "?";
}

Scenario parse_scenario(std::string_view name) {
  for (const auto& [v, n] : kScenarioNames)
    if (name == n) return v;
  throw Error(ErrorCode::validation, "unknown scenario '" + std::string(name) + "'");
}

std::vector<Scenario> all_scenarios() {
  std::vector<Scenario> out;
  for (const auto& [v, n] : kScenarioNames) out.push_back(v);
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over a combined state
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + stream * 0xD1B54A32D192ED03ULL + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

ArchSpec ScenarioConfig::resolved_arch() const {
  if (!arch.layers.empty()) {
    ArchSpec a = arch;
    a.resolve();
    return a;
  }
  const std::int64_t hidden[] = {64, 64};
  return ArchSpec::mlp(domain.dims, hidden, domain.classes, true);
}

void ScenarioConfig::validate() const {
  if (seeds.empty()) throw Error(ErrorCode::validation, "scenario needs at least one seed");
  if (domain.dims < 1 || domain.classes < 2 || domain.clusters_per_class < 1) {
    throw Error(ErrorCode::validation, "scenario domain geometry is invalid");
  }
  if (domain.train_size < 4 || domain.eval_size < 1) {
    throw Error(ErrorCode::validation, "scenario dataset sizes are too small");
  }
  for (const Recipe* r : {&pretrain, &finetune, &scratch}) {
    if (r->epochs < 0 || r->batch_size < 2 || !(r->lr > 0.0)) {
      throw Error(ErrorCode::validation, "scenario training recipe is invalid");
    }
  }
  if (steps < 2) throw Error(ErrorCode::validation, "scenario sweep needs steps >= 2");
  const auto a = resolved_arch();
  if (a.input_dim() != domain.dims || a.num_classes() != domain.classes) {
    throw Error(ErrorCode::validation, "scenario arch does not match domain geometry");
  }
}

SummaryStat summarize(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorCode::domain, "summary of an empty list");
  std::sort(values.begin(), values.end());
  SummaryStat s;
  s.min = values.front();
  s.max = values.back();
  const std::size_t n = values.size();
  s.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return s;
}

namespace {

struct SeedData {
  Dataset train_a, train_b, eval_a, eval_b, base;
};

SyntheticDomain domain_spec(const DomainParams& p, std::uint64_t seed, bool shifted) {
  SyntheticDomain d;
  d.task_seed = derive_seed(seed, 1);
  d.dims = p.dims;
  d.classes = p.classes;
  d.clusters_per_class = p.clusters_per_class;
  d.center_scale = p.center_scale;
  d.cluster_std = p.cluster_std;
  d.label_noise = p.label_noise;
  if (shifted) {
    d.rotation = random_rotation(p.dims, derive_seed(seed, 2), p.rotation_strength);
    std::mt19937_64 rng(derive_seed(seed, 3));
    std::normal_distribution<double> normal(0.0, 1.0);
    d.shift.resize(static_cast<std::size_t>(p.dims));
    double norm = 0.0;
    for (auto& v : d.shift) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : d.shift) v *= norm > 0.0 ? p.shift_norm / norm : 0.0;
  }
  return d;
}

Dataset sample(SyntheticDomain d, std::uint64_t seed, std::int64_t size) {
  d.seed = seed;
  d.size = size;
  return generate_domain(d);
}

SeedData build_data(const ScenarioConfig& cfg, std::uint64_t seed) {
  const auto a = domain_spec(cfg.domain, seed, false);
  const auto b = domain_spec(cfg.domain, seed, true);
  SeedData s;
  s.train_a = sample(a, derive_seed(seed, 10), cfg.domain.train_size);
  s.train_b = sample(b, derive_seed(seed, 11), cfg.domain.train_size);
  s.eval_a = sample(a, derive_seed(seed, 12), cfg.domain.eval_size);
  s.eval_b = sample(b, derive_seed(seed, 13), cfg.domain.eval_size);
  s.base = Dataset::concat(sample(a, derive_seed(seed, 14), cfg.domain.train_size),
                           sample(b, derive_seed(seed, 15), cfg.domain.train_size));
  return s;
}

TrainConfig recipe_config(const Recipe& r, std::uint64_t order_seed) {
  TrainConfig t;
  t.seed = order_seed;
  t.epochs = r.epochs;
  t.batch_size = r.batch_size;
  t.lr = r.lr;
  t.momentum = r.momentum;
  t.weight_decay = r.weight_decay;
  return t;
}

Checkpoint finetune(const ScenarioConfig& cfg, const ArchSpec& arch, const Checkpoint& init,
                    const Dataset& data, std::uint64_t order_seed, const std::string& tag) {
  auto t = recipe_config(cfg.finetune, order_seed);
  t.init = init;
  auto c = train(arch, data, t);
  c.meta["domain"] = tag;
  return c;
}

Checkpoint from_scratch(const ScenarioConfig& cfg, const ArchSpec& arch, std::uint64_t init_seed,
                        const Dataset& data, std::uint64_t order_seed, const std::string& tag) {
  auto t = recipe_config(cfg.scratch, order_seed);
  t.init_seed = init_seed;
  auto c = train(arch, data, t);
  c.meta["domain"] = tag;
  return c;
}

Checkpoint pretrain(const ScenarioConfig& cfg, const ArchSpec& arch, const SeedData& d,
                    std::uint64_t seed) {
  auto t = recipe_config(cfg.pretrain, derive_seed(seed, 20));
  t.init_seed = derive_seed(seed, 21);
  auto c = train(arch, d.base, t);
  c.meta["domain"] = "base";
  return c;
}

std::pair<Dataset, Dataset> split_halves(const Dataset& data, std::uint64_t seed) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(data.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto half = idx.size() / 2;
  std::vector<std::int64_t> first(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<std::int64_t> second(idx.begin() + static_cast<std::ptrdiff_t>(half), idx.end());
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {data.subset(first), data.subset(second)};
}

double harmonic_accuracy(const ArchSpec& arch, const Checkpoint& c, const DomainSet& domains) {
  std::vector<double> scores;
  for (const auto& [tag, data] : domains) scores.push_back(evaluate(arch, c, data).accuracy);
  return harmonic_mean(scores);
}

void record_sweep(SeedResult& r, const std::string& curve, SweepReport rep) {
  const std::string key = curve == "main" ? "barrier" : "barrier." + curve;
  r.values[key] = rep.barrier;
  r.values[(curve == "main" ? std::string("harmonic") : "harmonic." + curve) + ".min"] =
      *std::min_element(rep.harmonic.begin(), rep.harmonic.end());
  r.values[(curve == "main" ? std::string("harmonic") : "harmonic." + curve) + ".endpoint_min"] =
      std::min(rep.harmonic.front(), rep.harmonic.back());
  r.sweeps.push_back({curve, std::move(rep)});
}

SeedResult run_seed(const ScenarioConfig& cfg, const ArchSpec& arch, std::uint64_t seed,
                    bool keep) {
  SeedResult r;
  r.seed = seed;
  const auto d = build_data(cfg, seed);
  const DomainSet both{{"A", d.eval_a}, {"B", d.eval_b}};
  const DomainSet only_a{{"A", d.eval_a}};
  SeedArtifacts art;

  switch (cfg.name) {
    case Scenario::shared_pretrain:
    case Scenario::buffer_ablation: {
      const auto base = pretrain(cfg, arch, d, seed);
      art.a = finetune(cfg, arch, base, d.train_a, derive_seed(seed, 30), "A");
      art.b = finetune(cfg, arch, base, d.train_b, derive_seed(seed, 31), "B");
      art.eval = both;
      if (cfg.name == Scenario::shared_pretrain) {
        record_sweep(r, "main", sweep(art.a, art.b, both, arch, cfg.steps, cfg.buffers));
        auto wm = weight_matching(art.a, art.b, arch);
        r.values["matching.identity"] = wm.perms.all_identity() ? 1.0 : 0.0;
        r.values["matching.sweeps"] = wm.sweeps;
        r.matching = std::move(wm.perms);
      } else {
        r.values["harmonic.endpoint_a"] = harmonic_accuracy(arch, art.a, both);
        r.values["harmonic.endpoint_b"] = harmonic_accuracy(arch, art.b, both);
        for (auto policy : {BufferPolicy::keep_first, BufferPolicy::gaussian, BufferPolicy::average}) {
          const auto merged = midpoint(art.a, art.b, policy);
          r.values[std::string("harmonic.") + buffer_policy_name(policy)] =
              harmonic_accuracy(arch, merged, both);
        }
      }
      art.extra.push_back({"base", base});
      break;
    }
    case Scenario::random_init:
    case Scenario::shared_init_no_pretrain: {
      const auto init_a = derive_seed(seed, 40);
      const auto init_b = cfg.name == Scenario::random_init ? derive_seed(seed, 41) : init_a;
      art.a = from_scratch(cfg, arch, init_a, d.train_a, derive_seed(seed, 30), "A");
      art.b = from_scratch(cfg, arch, init_b, d.train_b, derive_seed(seed, 31), "B");
      art.eval = both;
      record_sweep(r, "main", sweep(art.a, art.b, both, arch, cfg.steps, cfg.buffers));
      break;
    }
    case Scenario::split_source: {
      const auto base = pretrain(cfg, arch, d, seed);
      const auto [h1, h2] = split_halves(d.train_a, derive_seed(seed, 50));
      art.a = finetune(cfg, arch, base, h1, derive_seed(seed, 30), "A1");
      art.b = finetune(cfg, arch, base, h2, derive_seed(seed, 31), "A2");
      art.eval = only_a;
      record_sweep(r, "main", sweep(art.a, art.b, only_a, arch, cfg.steps, cfg.buffers));
      art.extra.push_back({"base", base});
      break;
    }
    case Scenario::disjoint_subsets: {
      const auto base = pretrain(cfg, arch, d, seed);
      const auto [h1, h2] = split_halves(d.train_a, derive_seed(seed, 50));
      art.a = finetune(cfg, arch, base, h1, derive_seed(seed, 30), "A1");
      art.b = finetune(cfg, arch, base, h2, derive_seed(seed, 31), "A2");
      art.eval = only_a;
      record_sweep(r, "shared_pretrain",
                   sweep(art.a, art.b, only_a, arch, cfg.steps, cfg.buffers));
      auto ra = from_scratch(cfg, arch, derive_seed(seed, 40), h1, derive_seed(seed, 32), "A1");
      auto rb = from_scratch(cfg, arch, derive_seed(seed, 41), h2, derive_seed(seed, 33), "A2");
      record_sweep(r, "random_init", sweep(ra, rb, only_a, arch, cfg.steps, cfg.buffers));
      art.extra.push_back({"base", base});
      art.extra.push_back({"random_a", std::move(ra)});
      art.extra.push_back({"random_b", std::move(rb)});
      break;
    }
  }
  if (keep) r.artifacts = std::move(art);
  return r;
}

json config_json(const ScenarioConfig& c) {
  auto recipe = [](const Recipe& r) {
    return json{{"batch_size", r.batch_size}, {"epochs", r.epochs}, {"lr", r.lr},
                {"momentum", r.momentum},     {"weight_decay", r.weight_decay}};
  };
  const auto& d = c.domain;
  return json{
      {"arch", json::parse(c.resolved_arch().to_json())},
      {"buffers", buffer_policy_name(c.buffers)},
      {"domain",
       {{"center_scale", d.center_scale},
        {"classes", d.classes},
        {"cluster_std", d.cluster_std},
        {"clusters_per_class", d.clusters_per_class},
        {"dims", d.dims},
        {"eval_size", d.eval_size},
        {"label_noise", d.label_noise},
        {"rotation_strength", d.rotation_strength},
        {"shift_norm", d.shift_norm},
        {"train_size", d.train_size}}},
      {"finetune", recipe(c.finetune)},
      {"pretrain", recipe(c.pretrain)},
      {"scenario", scenario_name(c.name)},
      {"scratch", recipe(c.scratch)},
      {"seeds", c.seeds},
      {"steps", c.steps},
  };
}

}  // namespace

ScenarioReport run_scenario(const ScenarioConfig& cfg, bool keep_artifacts) {
  cfg.validate();
  const auto arch = cfg.resolved_arch();
  ScenarioReport report;
  report.config = cfg;
  report.seeds.resize(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), cfg.threads, [&](std::size_t i) {
    const auto seed = cfg.seeds[i];
    try {
      report.seeds[i] = run_seed(cfg, arch, seed, keep_artifacts);
    } catch (const Error& e) {
      throw Error(e.code(), std::string(scenario_name(cfg.name)) + " seed " +
                                std::to_string(seed) + ": " + e.what());
    }
  });

  std::map<std::string, std::vector<double>> columns;
  for (const auto& s : report.seeds)
    for (const auto& [k, v] : s.values) columns[k].push_back(v);
  for (auto& [k, vals] : columns) report.summary[k] = summarize(std::move(vals));
  return report;
}

std::string ScenarioReport::to_json() const {
  json seeds_json = json::array();
  for (const auto& s : seeds) {
    json sweeps_json = json::object();
    for (const auto& ns : s.sweeps) sweeps_json[ns.curve] = json::parse(ns.report.to_json());
    json entry{{"seed", s.seed}, {"sweeps", sweeps_json}, {"values", s.values}};
    if (s.matching) entry["matching"] = json::parse(s.matching->to_json());
    seeds_json.push_back(std::move(entry));
  }
  json summary_json = json::object();
  for (const auto& [k, v] : summary) {
    summary_json[k] = {{"max", v.max}, {"median", v.median}, {"min", v.min}};
  }
  return json{{"config", config_json(config)}, {"seeds", seeds_json}, {"summary", summary_json}}
      .dump(2);
}

std::string ScenarioReport::plot_csv() const {
  std::ostringstream out;
  out << "seed,curve,series,lambda,value\n";
  char buf[64];
  for (const auto& s : seeds) {
    for (const auto& ns : s.sweeps) {
      const auto& rep = ns.report;
      auto emit = [&](const std::string& series, const std::vector<double>& vals) {
        for (std::size_t i = 0; i < rep.lambdas.size(); ++i) {
          std::snprintf(buf, sizeof buf, "%.4f,%.4f", rep.lambdas[i], vals[i]);
          out << s.seed << ',' << ns.curve << ',' << series << ',' << buf << '\n';
        }
      };
      for (std::size_t dd = 0; dd < rep.domains.size(); ++dd) emit(rep.domains[dd], rep.per_domain[dd]);
      emit("harmonic", rep.harmonic);
    }
  }
  return out.str();
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw Error(ErrorCode::io, "cannot write " + path.string());
}

}  // namespace

void write_scenario(const ScenarioReport& report, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "report.json", report.to_json() + "\n");
  write_text(dir / "plot.csv", report.plot_csv());
  const auto arch = report.config.resolved_arch();
  for (const auto& s : report.seeds) {
    const fs::path sd = dir / ("seed_" + std::to_string(s.seed));
    fs::create_directories(sd, ec);
    if (ec) throw Error(ErrorCode::io, "cannot create " + sd.string() + ": " + ec.message());
    for (const auto& ns : s.sweeps) {
      const std::string stem = ns.curve == "main" ? "sweep" : "sweep_" + ns.curve;
      write_text(sd / (stem + ".csv"), ns.report.to_csv());
    }
    if (!s.artifacts) continue;
    const auto& art = *s.artifacts;
    save_checkpoint(art.a, sd / "a.tmc");
    save_checkpoint(art.b, sd / "b.tmc");
    for (const auto& [name, c] : art.extra) save_checkpoint(c, sd / (name + ".tmc"));
    write_text(sd / "arch.json", arch.to_json() + "\n");
    json doms = json::array();
    for (const auto& [tag, data] : art.eval) {
      const std::string file = "eval_" + tag + ".tmc";
      save_checkpoint(data.to_checkpoint(), sd / file);
      doms.push_back({{"data", file}, {"tag", tag}});
    }
    write_text(sd / "domains.json", json{{"domains", doms}}.dump(2) + "\n");
  }
}

DomainSet load_domain_set(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::io, "cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  DomainSet out;
  try {
    const auto j = json::parse(ss.str());
    for (const auto& d : j.at("domains")) {
      const auto tag = d.at("tag").get<std::string>();
      fs::path data = fs::u8path(d.at("data").get<std::string>());
      if (data.is_relative()) data = path.parent_path() / data;
      out.emplace_back(tag, Dataset::from_checkpoint(load_checkpoint(data)));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, path.string() + ": " + e.what());
  }
  if (out.empty()) throw Error(ErrorCode::validation, path.string() + ": no domains listed");
  return out;
}

}  // namespace basinmerge
