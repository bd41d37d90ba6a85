// basinmerge command-line front end. Talks to the library only through the C API.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "basinmerge/basinmerge.h"

namespace fs = std::filesystem;

namespace {

struct Failure {
  bm_status status;
  std::string message;
};

void check(bm_status s) {
  if (s != BM_OK) throw Failure{s, bm_last_error()};
}

[[noreturn]] void usage_error(const std::string& msg) { throw Failure{BM_ERR_INVALID_ARGUMENT, msg}; }

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Ckpt = std::unique_ptr<bm_checkpoint, Deleter<bm_checkpoint, bm_checkpoint_free>>;
using Arch = std::unique_ptr<bm_arch, Deleter<bm_arch, bm_arch_free>>;
using Data = std::unique_ptr<bm_dataset, Deleter<bm_dataset, bm_dataset_free>>;
using Perms = std::unique_ptr<bm_perms, Deleter<bm_perms, bm_perms_free>>;
using Sweep = std::unique_ptr<bm_sweep, Deleter<bm_sweep, bm_sweep_free>>;
using Scenario = std::unique_ptr<bm_scenario, Deleter<bm_scenario, bm_scenario_free>>;

std::string take(char* s) {
  std::string out = s ? s : "";
  bm_string_free(s);
  return out;
}

Ckpt load(const std::string& path) {
  bm_checkpoint* c = nullptr;
  check(bm_checkpoint_load(path.c_str(), &c));
  return Ckpt(c);
}

Arch load_arch(const std::string& path) {
  bm_arch* a = nullptr;
  check(bm_arch_load(path.c_str(), &a));
  return Arch(a);
}

bm_buffer_policy buffers(const std::string& name) {
  bm_buffer_policy p{};
  check(bm_parse_buffer_policy(name.c_str(), &p));
  return p;
}

void save(const bm_checkpoint* c, const std::string& path) { check(bm_checkpoint_save(c, path.c_str())); }

void write_file(const fs::path& path, const std::string& text) {
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw Failure{BM_ERR_IO, "cannot write " + path.string()};
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
  if (std::fclose(f) != 0 || !ok) throw Failure{BM_ERR_IO, "cannot write " + path.string()};
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{BM_ERR_IO, "cannot create " + dir.string() + ": " + ec.message()};
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "-o-dir") a = "--out-dir";
    else if (a.rfind("-o-dir=", 0) == 0) a = "--out-dir=" + a.substr(7);
    args.push_back(std::move(a));
  }
  std::reverse(args.begin(), args.end());

  CLI::App app{"Training-free model merging: merge, align, sweep and evaluate checkpoints.",
               "basinmerge"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads for parallel sections")
      ->envname("BASINMERGE_THREADS")
      ->check(CLI::PositiveNumber);

  std::string ckpt_path, a_path, b_path;

  auto* inspect = app.add_subcommand("inspect", "summarize a checkpoint as JSON");
  inspect->add_option("ckpt", ckpt_path)->required();

  auto* validate = app.add_subcommand("validate", "check two checkpoints are mergeable");
  validate->add_option("a", a_path)->required();
  validate->add_option("b", b_path)->required();

  std::vector<std::string> inputs, prefixes;
  std::vector<double> weights;
  double lambda = 0.5;
  std::string buffers_name = "gaussian", out_path, out_dir;
  auto* merge = app.add_subcommand("merge", "merge two or more checkpoints");
  auto* lambda_opt = merge->add_option("--lambda", lambda, "weight of the first input (two inputs)");
  auto* weights_opt = merge->add_option("--weights", weights, "comma-separated weights")
                          ->delimiter(',')
                          ->allow_extra_args(false);
  lambda_opt->excludes(weights_opt);
  merge->add_option("--prefix", prefixes, "merge only tensors with this name prefix")
      ->allow_extra_args(false);
  merge->add_option("--buffers", buffers_name, "gaussian | keep_first | average");
  merge->add_option("-o,--output", out_path, "output checkpoint");
  merge->add_option("--out-dir", out_dir, "output directory for --prefix merges (also -o-dir)");
  merge->add_option("inputs", inputs)->required()->expected(-2);

  std::string ref_path, target_path, arch_path, perms_out;
  int max_sweeps = 100;
  bool apply = false;
  auto* align = app.add_subcommand("align", "weight-match a target checkpoint to a reference");
  align->add_option("--ref", ref_path)->required();
  align->add_option("--target", target_path)->required();
  align->add_option("--arch", arch_path)->required();
  align->add_option("--max-sweeps", max_sweeps)->check(CLI::PositiveNumber);
  auto* apply_flag = align->add_flag("--apply", apply, "write the permuted target to -o");
  auto* align_lambda = align->add_option("--lambda", lambda, "write the aligned merge to -o");
  apply_flag->excludes(align_lambda);
  align->add_option("--buffers", buffers_name);
  align->add_option("-o,--output", out_path);
  align->add_option("--perms-out", perms_out, "write the permutations as JSON");

  int steps = 11;
  std::string domains_path;
  auto* sweep = app.add_subcommand("sweep", "evaluate the linear path between two checkpoints");
  sweep->add_option("--steps", steps)->check(CLI::Range(2, 1 << 20));
  sweep->add_option("--arch", arch_path)->required();
  sweep->add_option("--domains", domains_path)->required();
  sweep->add_option("--buffers", buffers_name);
  sweep->add_option("-o,--output", out_dir, "report directory")->required();
  sweep->add_option("a", a_path)->required();
  sweep->add_option("b", b_path)->required();

  std::string data_path;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--arch", arch_path)->required();
  eval->add_option("--data", data_path)->required();
  eval->add_option("ckpt", ckpt_path)->required();

  std::string scenario_name;
  std::vector<std::uint64_t> seeds;
  auto* experiment = app.add_subcommand("experiment", "run a seeded toy scenario");
  experiment->add_option("--scenario", scenario_name)->required();
  experiment->add_option("--seeds", seeds, "comma-separated seeds")
      ->required()
      ->delimiter(',')
      ->allow_extra_args(false);
  experiment->add_option("-o,--output", out_dir, "output directory")->required();

  std::vector<double> values;
  auto* hmean = app.add_subcommand("hmean", "harmonic mean of comma-separated values");
  hmean->add_option("values", values)->required()->delimiter(',');

  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cout << app.help();
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 1;
  }

  try {
    if (*inspect) {
      std::cout << take([&] {
        char* s = nullptr;
        check(bm_checkpoint_inspect(load(ckpt_path).get(), &s));
        return s;
      }()) << "\n";
    } else if (*validate) {
      auto a = load(a_path);
      auto b = load(b_path);
      int compatible = 0;
      char* report = nullptr;
      check(bm_validate_compatibility(a.get(), b.get(), &compatible, &report));
      std::cout << take(report) << "\n";
      if (!compatible) throw Failure{BM_ERR_COMPATIBILITY, "checkpoints are not compatible"};
    } else if (*merge) {
      const auto policy = buffers(buffers_name);
      std::vector<Ckpt> owned;
      std::vector<const bm_checkpoint*> in;
      for (const auto& p : inputs) {
        owned.push_back(load(p));
        in.push_back(owned.back().get());
      }
      std::vector<double> w;
      if (*lambda_opt) {
        if (in.size() != 2) usage_error("--lambda takes exactly two inputs");
        w = {lambda, 1.0 - lambda};
      } else if (*weights_opt) {
        if (weights.size() != in.size()) usage_error("--weights needs one weight per input");
        w = weights;
      }
      if (!prefixes.empty()) {
        if (out_dir.empty() || !out_path.empty()) usage_error("--prefix merges write to -o-dir, not -o");
        std::set<std::string> names;
        for (const auto& p : inputs) {
          if (!names.insert(fs::u8path(p).filename().string()).second) {
            usage_error("inputs share the file name '" + fs::u8path(p).filename().string() + "'");
          }
        }
        std::vector<const char*> pre;
        for (const auto& p : prefixes) pre.push_back(p.c_str());
        std::vector<bm_checkpoint*> outs(in.size(), nullptr);
        check(bm_prefix_merge(in.data(), in.size(), pre.data(), pre.size(),
                              w.empty() ? nullptr : w.data(), policy, outs.data()));
        std::vector<Ckpt> merged;
        for (auto* o : outs) merged.emplace_back(o);
        make_dir(fs::u8path(out_dir));
        for (std::size_t i = 0; i < merged.size(); ++i) {
          const auto dst = fs::u8path(out_dir) / fs::u8path(inputs[i]).filename();
          save(merged[i].get(), dst.string());
          std::cout << dst.string() << "\n";
        }
      } else {
        if (out_path.empty() || !out_dir.empty()) usage_error("merge writes a single output with -o");
        bm_checkpoint* out = nullptr;
        if (*lambda_opt) {
          check(bm_interpolate(in[0], in[1], lambda, policy, &out));
        } else {
          if (w.empty()) w.assign(in.size(), 1.0 / static_cast<double>(in.size()));
          check(bm_weighted_merge(in.data(), w.data(), in.size(), policy, &out));
        }
        Ckpt merged(out);
        save(merged.get(), out_path);
        std::cout << out_path << "\n";
      }
    } else if (*align) {
      const auto policy = buffers(buffers_name);
      if ((apply || *align_lambda) && out_path.empty()) usage_error("--apply and --lambda need -o");
      auto ref = load(ref_path);
      auto target = load(target_path);
      auto arch = load_arch(arch_path);
      bm_perms* p = nullptr;
      char* report = nullptr;
      check(bm_weight_matching(ref.get(), target.get(), arch.get(), max_sweeps, &p, &report));
      Perms perms(p);
      const std::string report_text = take(report);
      if (!perms_out.empty()) {
        char* j = nullptr;
        check(bm_perms_to_json(perms.get(), &j));
        write_file(fs::u8path(perms_out), take(j) + "\n");
      }
      if (apply) {
        bm_checkpoint* out = nullptr;
        check(bm_apply_permutations(target.get(), perms.get(), arch.get(), &out));
        Ckpt c(out);
        save(c.get(), out_path);
      } else if (*align_lambda) {
        bm_checkpoint* out = nullptr;
        check(bm_align_and_merge(ref.get(), target.get(), arch.get(), lambda, policy, max_sweeps,
                                 &out, nullptr));
        Ckpt c(out);
        save(c.get(), out_path);
      }
      std::cout << report_text << "\n";
    } else if (*sweep) {
      const auto policy = buffers(buffers_name);
      auto a = load(a_path);
      auto b = load(b_path);
      auto arch = load_arch(arch_path);
      bm_sweep* s = nullptr;
      check(bm_sweep_run_file(a.get(), b.get(), domains_path.c_str(), arch.get(), steps, policy,
                              threads, &s));
      Sweep rep(s);
      char* j = nullptr;
      char* csv = nullptr;
      check(bm_sweep_to_json(rep.get(), &j));
      const std::string json_text = take(j);
      check(bm_sweep_to_csv(rep.get(), &csv));
      const std::string csv_text = take(csv);
      const auto dir = fs::u8path(out_dir);
      make_dir(dir);
      write_file(dir / "sweep.json", json_text + "\n");
      write_file(dir / "sweep.csv", csv_text);
      double barrier = 0.0;
      check(bm_sweep_barrier(rep.get(), &barrier));
      std::printf("barrier %.4f\n", barrier);
    } else if (*eval) {
      auto arch = load_arch(arch_path);
      auto ckpt = load(ckpt_path);
      bm_dataset* d = nullptr;
      check(bm_dataset_load(data_path.c_str(), &d));
      Data data(d);
      double acc = 0.0, miou = 0.0;
      check(bm_evaluate(arch.get(), ckpt.get(), data.get(), &acc, &miou));
      std::printf("{\"accuracy\":%.4f,\"miou\":%.4f}\n", acc, miou);
    } else if (*experiment) {
      bm_scenario* s = nullptr;
      check(bm_scenario_run(scenario_name.c_str(), seeds.data(), seeds.size(), threads, 1, &s));
      Scenario rep(s);
      check(bm_scenario_write(rep.get(), out_dir.c_str()));
      std::cout << (fs::u8path(out_dir) / "report.json").string() << "\n";
    } else if (*hmean) {
      double h = 0.0;
      check(bm_harmonic_mean(values.data(), values.size(), &h));
      std::printf("%.4f\n", h);
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << bm_status_name(f.status) << ": " << one_line(f.message) << "\n";
    return f.status == BM_ERR_INTERNAL ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << "\n";
    return 2;
  }
  return 0;
}
