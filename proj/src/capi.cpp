#include "basinmerge/basinmerge.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>
#include <vector>

#include "experiments.hpp"
#include "metrics.hpp"
#include "param_merge.hpp"
#include "perm_align.hpp"

#include "json.hpp"

using namespace basinmerge;

struct bm_checkpoint {
  Checkpoint value;
};
struct bm_arch {
  ArchSpec value;
};
struct bm_dataset {
  Dataset value;
};
struct bm_perms {
  PermutationSet value;
};
struct bm_sweep {
  SweepReport value;
};
struct bm_scenario {
  ScenarioReport value;
};

namespace {

thread_local std::string g_last_error;

bm_status to_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::format: return BM_ERR_FORMAT;
    case ErrorCode::size: return BM_ERR_SIZE;
    case ErrorCode::validation: return BM_ERR_VALIDATION;
    case ErrorCode::io: return BM_ERR_IO;
    case ErrorCode::domain: return BM_ERR_DOMAIN;
    case ErrorCode::shape: return BM_ERR_SHAPE;
    case ErrorCode::compatibility: return BM_ERR_COMPATIBILITY;
    case ErrorCode::divergence: return BM_ERR_DIVERGENCE;
    case ErrorCode::undefined_metric: return BM_ERR_UNDEFINED_METRIC;
    case ErrorCode::internal: return BM_ERR_INTERNAL;
  }
  return BM_ERR_INTERNAL;
}

bm_status fail(bm_status s, std::string msg) {
  g_last_error = std::move(msg);
  return s;
}

struct ArgumentError {
  std::string what;
};

void need(const void* p, const char* name) {
  if (!p) throw ArgumentError{std::string(name) + " must not be NULL"};
}

template <typename Fn>
bm_status guard(Fn&& fn) {
  try {
    fn();
    return BM_OK;
  } catch (const ArgumentError& e) {
    return fail(BM_ERR_INVALID_ARGUMENT, e.what);
  } catch (const Error& e) {
    return fail(to_status(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(BM_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(BM_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(BM_ERR_INTERNAL, "unknown failure");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

BufferPolicy policy(bm_buffer_policy p) {
  switch (p) {
    case BM_BUFFERS_GAUSSIAN: return BufferPolicy::gaussian;
    case BM_BUFFERS_KEEP_FIRST: return BufferPolicy::keep_first;
    case BM_BUFFERS_AVERAGE: return BufferPolicy::average;
  }
  throw ArgumentError{"unknown buffer policy " + std::to_string(static_cast<int>(p))};
}

bm_checkpoint* wrap(Checkpoint c) { return new bm_checkpoint{std::move(c)}; }

}  // namespace

extern "C" {

const char* bm_version(void) { return "1.0.0"; }

const char* bm_status_name(bm_status status) {
  switch (status) {
    case BM_OK: return "ok";
    case BM_ERR_FORMAT: return "format";
    case BM_ERR_SIZE: return "size";
    case BM_ERR_VALIDATION: return "validation";
    case BM_ERR_IO: return "io";
    case BM_ERR_DOMAIN: return "domain";
    case BM_ERR_SHAPE: return "shape";
    case BM_ERR_COMPATIBILITY: return "compatibility";
    case BM_ERR_DIVERGENCE: return "divergence";
    case BM_ERR_UNDEFINED_METRIC: return "undefined_metric";
    case BM_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case BM_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* bm_last_error(void) { return g_last_error.c_str(); }

void bm_string_free(char* s) { std::free(s); }
void bm_bytes_free(uint8_t* bytes) { std::free(bytes); }

bm_status bm_parse_buffer_policy(const char* name, bm_buffer_policy* out) {
  return guard([&] {
    need(name, "name");
    need(out, "out");
    switch (parse_buffer_policy(name)) {
      case BufferPolicy::gaussian: *out = BM_BUFFERS_GAUSSIAN; break;
      case BufferPolicy::keep_first: *out = BM_BUFFERS_KEEP_FIRST; break;
      case BufferPolicy::average: *out = BM_BUFFERS_AVERAGE; break;
    }
  });
}

bm_status bm_checkpoint_load(const char* path, bm_checkpoint** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = wrap(load_checkpoint(std::filesystem::u8path(path)));
  });
}

bm_status bm_checkpoint_parse(const uint8_t* bytes, size_t len, bm_checkpoint** out) {
  return guard([&] {
    if (len > 0) need(bytes, "bytes");
    need(out, "out");
    *out = wrap(parse_checkpoint(std::span<const std::uint8_t>(bytes, len)));
  });
}

bm_status bm_checkpoint_save(const bm_checkpoint* ckpt, const char* path) {
  return guard([&] {
    need(ckpt, "ckpt");
    need(path, "path");
    save_checkpoint(ckpt->value, std::filesystem::u8path(path));
  });
}

bm_status bm_checkpoint_serialize(const bm_checkpoint* ckpt, uint8_t** bytes, size_t* len) {
  return guard([&] {
    need(ckpt, "ckpt");
    need(bytes, "bytes");
    need(len, "len");
    const auto data = serialize_checkpoint(ckpt->value);
    auto* buf = static_cast<uint8_t*>(std::malloc(data.empty() ? 1 : data.size()));
    if (!buf) throw std::bad_alloc();
    std::memcpy(buf, data.data(), data.size());
    *bytes = buf;
    *len = data.size();
  });
}

bm_status bm_checkpoint_clone(const bm_checkpoint* ckpt, bm_checkpoint** out) {
  return guard([&] {
    need(ckpt, "ckpt");
    need(out, "out");
    *out = wrap(ckpt->value);
  });
}

bm_status bm_checkpoint_equal(const bm_checkpoint* a, const bm_checkpoint* b, int* equal) {
  return guard([&] {
    need(a, "a");
    need(b, "b");
    need(equal, "equal");
    *equal = a->value.bit_equal(b->value) ? 1 : 0;
  });
}

bm_status bm_checkpoint_inspect(const bm_checkpoint* ckpt, char** json) {
  return guard([&] {
    need(ckpt, "ckpt");
    need(json, "json");
    *json = dup_string(summary_to_json(inspect(ckpt->value)));
  });
}

bm_status bm_checkpoint_meta(const bm_checkpoint* ckpt, const char* key, char** value) {
  return guard([&] {
    need(ckpt, "ckpt");
    need(key, "key");
    need(value, "value");
    auto it = ckpt->value.meta.find(key);
    if (it == ckpt->value.meta.end()) {
      throw Error(ErrorCode::validation, std::string("no meta key '") + key + "'");
    }
    *value = dup_string(it->second);
  });
}

void bm_checkpoint_free(bm_checkpoint* ckpt) { delete ckpt; }

bm_status bm_validate_compatibility(const bm_checkpoint* a, const bm_checkpoint* b,
                                    int* compatible, char** report_json) {
  return guard([&] {
    need(a, "a");
    need(b, "b");
    need(compatible, "compatible");
    const auto report = validate_compatibility(a->value, b->value);
    *compatible = report.compatible ? 1 : 0;
    if (report_json) *report_json = dup_string(compat_report_to_json(report));
  });
}

bm_status bm_interpolate(const bm_checkpoint* a, const bm_checkpoint* b, double lambda,
                         bm_buffer_policy buffers, bm_checkpoint** out) {
  return guard([&] {
    need(a, "a");
    need(b, "b");
    need(out, "out");
    *out = wrap(interpolate(a->value, b->value, lambda, policy(buffers)));
  });
}

bm_status bm_weighted_merge(const bm_checkpoint* const* inputs, const double* weights, size_t n,
                            bm_buffer_policy buffers, bm_checkpoint** out) {
  return guard([&] {
    need(inputs, "inputs");
    need(weights, "weights");
    need(out, "out");
    std::vector<WeightedInput> w;
    for (size_t i = 0; i < n; ++i) {
      need(inputs[i], "inputs[i]");
      w.push_back({&inputs[i]->value, weights[i]});
    }
    *out = wrap(weighted_merge(w, policy(buffers)));
  });
}

bm_status bm_prefix_merge(const bm_checkpoint* const* inputs, size_t n, const char* const* prefixes,
                          size_t n_prefixes, const double* weights, bm_buffer_policy buffers,
                          bm_checkpoint** outs) {
  return guard([&] {
    need(inputs, "inputs");
    need(outs, "outs");
    if (n_prefixes > 0) need(prefixes, "prefixes");
    std::vector<const Checkpoint*> in;
    for (size_t i = 0; i < n; ++i) {
      need(inputs[i], "inputs[i]");
      in.push_back(&inputs[i]->value);
    }
    std::vector<std::string> p;
    for (size_t i = 0; i < n_prefixes; ++i) {
      need(prefixes[i], "prefixes[i]");
      p.emplace_back(prefixes[i]);
    }
    std::vector<double> w;
    if (weights) w.assign(weights, weights + n);
    auto merged = prefix_merge(in, p, w, policy(buffers));
    for (size_t i = 0; i < n; ++i) outs[i] = wrap(std::move(merged[i]));
  });
}

bm_status bm_arch_load(const char* path, bm_arch** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new bm_arch{ArchSpec::load(std::filesystem::u8path(path))};
  });
}

bm_status bm_arch_from_json(const char* json, bm_arch** out) {
  return guard([&] {
    need(json, "json");
    need(out, "out");
    *out = new bm_arch{ArchSpec::from_json(json)};
  });
}

bm_status bm_arch_to_json(const bm_arch* arch, char** json) {
  return guard([&] {
    need(arch, "arch");
    need(json, "json");
    *json = dup_string(arch->value.to_json());
  });
}

void bm_arch_free(bm_arch* arch) { delete arch; }

bm_status bm_weight_matching(const bm_checkpoint* ref, const bm_checkpoint* target,
                             const bm_arch* arch, int max_sweeps, bm_perms** out,
                             char** report_json) {
  return guard([&] {
    need(ref, "ref");
    need(target, "target");
    need(arch, "arch");
    need(out, "out");
    auto r = weight_matching(ref->value, target->value, arch->value, max_sweeps);
    if (report_json) {
      nlohmann::json j{{"converged", r.converged},
                       {"identity", r.perms.all_identity()},
                       {"objective", r.objective},
                       {"sweeps", r.sweeps}};
      *report_json = dup_string(j.dump());
    }
    *out = new bm_perms{std::move(r.perms)};
  });
}

bm_status bm_apply_permutations(const bm_checkpoint* ckpt, const bm_perms* perms,
                                const bm_arch* arch, bm_checkpoint** out) {
  return guard([&] {
    need(ckpt, "ckpt");
    need(perms, "perms");
    need(arch, "arch");
    need(out, "out");
    *out = wrap(apply_permutations(ckpt->value, perms->value, arch->value));
  });
}

bm_status bm_align_and_merge(const bm_checkpoint* ref, const bm_checkpoint* target,
                             const bm_arch* arch, double lambda, bm_buffer_policy buffers,
                             int max_sweeps, bm_checkpoint** out, bm_perms** perms_out) {
  return guard([&] {
    need(ref, "ref");
    need(target, "target");
    need(arch, "arch");
    need(out, "out");
    auto r = align_and_merge(ref->value, target->value, arch->value, lambda, policy(buffers),
                             max_sweeps);
    if (perms_out) *perms_out = new bm_perms{std::move(r.matching.perms)};
    *out = wrap(std::move(r.merged));
  });
}

bm_status bm_perms_to_json(const bm_perms* perms, char** json) {
  return guard([&] {
    need(perms, "perms");
    need(json, "json");
    *json = dup_string(perms->value.to_json());
  });
}

bm_status bm_perms_from_json(const char* json, bm_perms** out) {
  return guard([&] {
    need(json, "json");
    need(out, "out");
    *out = new bm_perms{PermutationSet::from_json(json)};
  });
}

bm_status bm_perms_is_identity(const bm_perms* perms, int* identity) {
  return guard([&] {
    need(perms, "perms");
    need(identity, "identity");
    *identity = perms->value.all_identity() ? 1 : 0;
  });
}

void bm_perms_free(bm_perms* perms) { delete perms; }

bm_status bm_dataset_load(const char* path, bm_dataset** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new bm_dataset{Dataset::from_checkpoint(load_checkpoint(std::filesystem::u8path(path)))};
  });
}

void bm_dataset_free(bm_dataset* data) { delete data; }

bm_status bm_evaluate(const bm_arch* arch, const bm_checkpoint* ckpt, const bm_dataset* data,
                      double* accuracy, double* miou) {
  return guard([&] {
    need(arch, "arch");
    need(ckpt, "ckpt");
    need(data, "data");
    need(accuracy, "accuracy");
    const auto r = evaluate(arch->value, ckpt->value, data->value);
    *accuracy = r.accuracy;
    if (miou) *miou = r.miou;
  });
}

bm_status bm_sweep_run(const bm_checkpoint* a, const bm_checkpoint* b, const char* const* tags,
                       const bm_dataset* const* data, size_t n_domains, const bm_arch* arch,
                       int steps, bm_buffer_policy buffers, int threads, bm_sweep** out) {
  return guard([&] {
    need(a, "a");
    need(b, "b");
    need(arch, "arch");
    need(out, "out");
    if (n_domains > 0) {
      need(tags, "tags");
      need(data, "data");
    }
    DomainSet domains;
    for (size_t i = 0; i < n_domains; ++i) {
      need(tags[i], "tags[i]");
      need(data[i], "data[i]");
      domains.emplace_back(tags[i], data[i]->value);
    }
    *out = new bm_sweep{sweep(a->value, b->value, domains, arch->value, steps, policy(buffers),
                              threads)};
  });
}

bm_status bm_sweep_run_file(const bm_checkpoint* a, const bm_checkpoint* b,
                            const char* domains_json, const bm_arch* arch, int steps,
                            bm_buffer_policy buffers, int threads, bm_sweep** out) {
  return guard([&] {
    need(a, "a");
    need(b, "b");
    need(domains_json, "domains_json");
    need(arch, "arch");
    need(out, "out");
    const auto domains = load_domain_set(std::filesystem::u8path(domains_json));
    *out = new bm_sweep{sweep(a->value, b->value, domains, arch->value, steps, policy(buffers),
                              threads)};
  });
}

bm_status bm_sweep_barrier(const bm_sweep* s, double* barrier) {
  return guard([&] {
    need(s, "sweep");
    need(barrier, "barrier");
    *barrier = s->value.barrier;
  });
}

bm_status bm_sweep_to_json(const bm_sweep* s, char** json) {
  return guard([&] {
    need(s, "sweep");
    need(json, "json");
    *json = dup_string(s->value.to_json());
  });
}

bm_status bm_sweep_to_csv(const bm_sweep* s, char** csv) {
  return guard([&] {
    need(s, "sweep");
    need(csv, "csv");
    *csv = dup_string(s->value.to_csv());
  });
}

void bm_sweep_free(bm_sweep* s) { delete s; }

bm_status bm_scenario_run(const char* name, const uint64_t* seeds, size_t n_seeds, int threads,
                          int keep_artifacts, bm_scenario** out) {
  return guard([&] {
    need(name, "name");
    need(out, "out");
    if (n_seeds > 0) need(seeds, "seeds");
    ScenarioConfig cfg;
    cfg.name = parse_scenario(name);
    cfg.seeds.assign(seeds, seeds + n_seeds);
    cfg.threads = threads;
    *out = new bm_scenario{run_scenario(cfg, keep_artifacts != 0)};
  });
}

bm_status bm_scenario_to_json(const bm_scenario* s, char** json) {
  return guard([&] {
    need(s, "scenario");
    need(json, "json");
    *json = dup_string(s->value.to_json());
  });
}

bm_status bm_scenario_write(const bm_scenario* s, const char* dir) {
  return guard([&] {
    need(s, "scenario");
    need(dir, "dir");
    write_scenario(s->value, std::filesystem::u8path(dir));
  });
}

bm_status bm_scenario_summary(const bm_scenario* s, const char* key, double* median, double* min,
                              double* max) {
  return guard([&] {
    need(s, "scenario");
    need(key, "key");
    auto it = s->value.summary.find(key);
    if (it == s->value.summary.end()) {
      throw Error(ErrorCode::validation, std::string("scenario has no value '") + key + "'");
    }
    if (median) *median = it->second.median;
    if (min) *min = it->second.min;
    if (max) *max = it->second.max;
  });
}

void bm_scenario_free(bm_scenario* s) { delete s; }

bm_status bm_harmonic_mean(const double* values, size_t n, double* out) {
  return guard([&] {
    if (n > 0) need(values, "values");
    need(out, "out");
    *out = harmonic_mean(std::span<const double>(values, n));
  });
}

}  // extern "C"
