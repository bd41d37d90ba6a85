#include "mini_runtime.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace basinmerge {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// ArchSpec

void ArchSpec::resolve() {
  if (layers.empty()) throw Error(ErrorCode::validation, "arch: no layers");
  if (layers.back().kind != LayerKind::dense) {
    throw Error(ErrorCode::validation, "arch: final layer must be dense (logits)");
  }
  std::int64_t width = -1;
  int dense_index = 0;
  std::set<std::string> names;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& layer = layers[i];
    const std::string where = "arch layer " + std::to_string(i);
    switch (layer.kind) {
      case LayerKind::dense:
        if (layer.in <= 0 || layer.out <= 0) {
          throw Error(ErrorCode::validation, where + ": dense widths must be positive");
        }
        if (width >= 0 && layer.in != width) {
          throw Error(ErrorCode::validation, where + ": dense input " + std::to_string(layer.in) +
                                                 " does not match width " + std::to_string(width));
        }
        width = layer.out;
        ++dense_index;
        if (layer.name.empty()) layer.name = "l" + std::to_string(dense_index);
        break;
      case LayerKind::batchnorm:
        if (layer.width <= 0) throw Error(ErrorCode::validation, where + ": batchnorm width must be positive");
        if (width >= 0 && layer.width != width) {
          throw Error(ErrorCode::validation, where + ": batchnorm width " +
                                                 std::to_string(layer.width) +
                                                 " does not match width " + std::to_string(width));
        }
        width = layer.width;
        if (layer.name.empty()) layer.name = "bn" + std::to_string(dense_index);
        break;
      case LayerKind::relu:
        if (width < 0) throw Error(ErrorCode::validation, where + ": relu before any sized layer");
        break;
    }
    if (layer.kind != LayerKind::relu && !names.insert(layer.name).second) {
      throw Error(ErrorCode::validation, where + ": duplicate layer name '" + layer.name + "'");
    }
  }
  if (head_prefix.empty()) head_prefix = layers.back().name + ".";
}

std::int64_t ArchSpec::input_dim() const {
  for (const auto& l : layers) {
    if (l.kind == LayerKind::dense) return l.in;
    if (l.kind == LayerKind::batchnorm) return l.width;
  }
  throw Error(ErrorCode::validation, "arch: no sized layer");
}

std::int64_t ArchSpec::num_classes() const { return layers.back().out; }

std::vector<HiddenGroup> ArchSpec::hidden_groups() const {
  std::vector<HiddenGroup> groups;
  HiddenGroup current;
  bool open = false;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::dense) {
      if (open) {
        current.consumer = l.name;
        groups.push_back(current);
      }
      current = HiddenGroup{};
      current.producer = l.name;
      current.width = l.out;
      open = true;
    } else if (l.kind == LayerKind::batchnorm && open) {
      current.batchnorms.push_back(l.name);
    }
  }
  return groups;
}

ArchSpec ArchSpec::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::validation, std::string("arch JSON: ") + e.what());
  }
  ArchSpec arch;
  try {
    for (const auto& l : j.at("layers")) {
      LayerSpec spec;
      const auto type = l.at("type").get<std::string>();
      if (type == "dense") {
        spec.kind = LayerKind::dense;
        spec.in = l.at("in").get<std::int64_t>();
        spec.out = l.at("out").get<std::int64_t>();
      } else if (type == "batchnorm") {
        spec.kind = LayerKind::batchnorm;
        spec.width = l.at("width").get<std::int64_t>();
      } else if (type == "relu") {
        spec.kind = LayerKind::relu;
      } else {
        throw Error(ErrorCode::validation, "arch JSON: unknown layer type '" + type + "'");
      }
      if (l.contains("name")) spec.name = l.at("name").get<std::string>();
      arch.layers.push_back(spec);
    }
    if (j.contains("head_prefix")) arch.head_prefix = j.at("head_prefix").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("arch JSON: ") + e.what());
  }
  arch.resolve();
  return arch;
}

ArchSpec ArchSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open arch file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string ArchSpec::to_json() const {
  json layers_json = json::array();
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::dense:
        layers_json.push_back({{"type", "dense"}, {"in", l.in}, {"out", l.out}, {"name", l.name}});
        break;
      case LayerKind::batchnorm:
        layers_json.push_back({{"type", "batchnorm"}, {"width", l.width}, {"name", l.name}});
        break;
      case LayerKind::relu:
        layers_json.push_back({{"type", "relu"}});
        break;
    }
  }
  return json{{"layers", layers_json}, {"head_prefix", head_prefix}}.dump();
}

ArchSpec ArchSpec::mlp(std::int64_t in, std::span<const std::int64_t> hidden,
                       std::int64_t classes, bool batchnorm) {
  ArchSpec arch;
  std::int64_t width = in;
  for (auto h : hidden) {
    arch.layers.push_back({LayerKind::dense, width, h, 0, ""});
    if (batchnorm) arch.layers.push_back({LayerKind::batchnorm, 0, 0, h, ""});
    arch.layers.push_back({LayerKind::relu, 0, 0, 0, ""});
    width = h;
  }
  arch.layers.push_back({LayerKind::dense, width, classes, 0, ""});
  arch.resolve();
  return arch;
}

namespace {

struct ExpectedTensor {
  std::string name;
  Shape shape;
  Role role;
};

std::vector<ExpectedTensor> expected_tensors(const ArchSpec& arch) {
  std::vector<ExpectedTensor> out;
  for (const auto& l : arch.layers) {
    if (l.kind == LayerKind::dense) {
      out.push_back({l.name + ".weight", {l.out, l.in}, Role::param});
      out.push_back({l.name + ".bias", {l.out}, Role::param});
    } else if (l.kind == LayerKind::batchnorm) {
      out.push_back({l.name + ".weight", {l.width}, Role::param});
      out.push_back({l.name + ".bias", {l.width}, Role::param});
      out.push_back({l.name + std::string(kRunningMeanSuffix), {l.width}, Role::buffer});
      out.push_back({l.name + std::string(kRunningVarSuffix), {l.width}, Role::buffer});
      out.push_back({l.name + std::string(kNumBatchesSuffix), {}, Role::count});
    }
  }
  return out;
}

}  // namespace

void check_checkpoint_against_arch(const ArchSpec& arch, const Checkpoint& ckpt) {
  const auto expected = expected_tensors(arch);
  for (const auto& t : expected) {
    auto it = ckpt.tensors.find(t.name);
    if (it == ckpt.tensors.end()) {
      throw Error(ErrorCode::validation, "checkpoint lacks tensor '" + t.name + "' required by arch");
    }
    if (it->second.shape != t.shape) {
      throw Error(ErrorCode::validation, "tensor '" + t.name + "' has shape " +
                                             shape_string(it->second.shape) + ", arch expects " +
                                             shape_string(t.shape));
    }
    if (it->second.role != t.role) {
      throw Error(ErrorCode::validation, "tensor '" + t.name + "' has role " +
                                             role_name(it->second.role) + ", arch expects " +
                                             role_name(t.role));
    }
    if (t.role != Role::count && it->second.dtype == DType::i64) {
      throw Error(ErrorCode::validation, "tensor '" + t.name + "' must be floating point");
    }
  }
  if (ckpt.tensors.size() != expected.size()) {
    std::set<std::string> names;
    for (const auto& t : expected) names.insert(t.name);
    for (const auto& [name, e] : ckpt.tensors) {
      if (!names.count(name)) {
        throw Error(ErrorCode::validation, "tensor '" + name + "' is not part of the arch");
      }
    }
  }
}

Checkpoint init_checkpoint(const ArchSpec& arch, std::uint64_t seed, DType dtype) {
  if (dtype == DType::i64) throw Error(ErrorCode::domain, "init dtype must be floating point");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Checkpoint ckpt;
  for (const auto& l : arch.layers) {
    if (l.kind == LayerKind::dense) {
      auto w = TensorEntry::zeros(dtype, {l.out, l.in}, Role::param);
      const double scale = std::sqrt(2.0 / static_cast<double>(l.in));
      for (std::size_t i = 0; i < w.numel(); ++i) w.set(i, scale * normal(rng));
      ckpt.tensors.emplace(l.name + ".weight", std::move(w));
      ckpt.tensors.emplace(l.name + ".bias", TensorEntry::zeros(dtype, {l.out}, Role::param));
    } else if (l.kind == LayerKind::batchnorm) {
      std::vector<double> ones(static_cast<std::size_t>(l.width), 1.0);
      ckpt.tensors.emplace(l.name + ".weight",
                           TensorEntry::from_f64(dtype, {l.width}, Role::param, ones));
      ckpt.tensors.emplace(l.name + ".bias", TensorEntry::zeros(dtype, {l.width}, Role::param));
      ckpt.tensors.emplace(l.name + std::string(kRunningMeanSuffix),
                           TensorEntry::zeros(dtype, {l.width}, Role::buffer));
      ckpt.tensors.emplace(l.name + std::string(kRunningVarSuffix),
                           TensorEntry::from_f64(dtype, {l.width}, Role::buffer, ones));
      ckpt.tensors.emplace(l.name + std::string(kNumBatchesSuffix), TensorEntry::count_scalar(0));
    }
  }
  ckpt.meta["init.seed"] = std::to_string(seed);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Datasets

Dataset Dataset::subset(std::span<const std::int64_t> indices) const {
  Dataset out;
  out.dims = dims;
  out.classes = classes;
  out.features.reserve(indices.size() * static_cast<std::size_t>(dims));
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i < 0 || i >= size()) throw Error(ErrorCode::domain, "subset index out of range");
    auto r = row(i);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

Dataset Dataset::concat(const Dataset& a, const Dataset& b) {
  if (a.dims != b.dims || a.classes != b.classes) {
    throw Error(ErrorCode::shape, "cannot concatenate datasets of different geometry");
  }
  Dataset out = a;
  out.features.insert(out.features.end(), b.features.begin(), b.features.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

Checkpoint Dataset::to_checkpoint() const {
  Checkpoint ckpt;
  TensorEntry f;
  f.dtype = DType::f64;
  f.role = Role::buffer;
  f.shape = {size(), dims};
  f.data = features;
  TensorEntry l;
  l.dtype = DType::i64;
  l.role = Role::buffer;
  l.shape = {size()};
  l.data = labels;
  ckpt.tensors.emplace("features", std::move(f));
  ckpt.tensors.emplace("labels", std::move(l));
  ckpt.meta["kind"] = "dataset";
  ckpt.meta["classes"] = std::to_string(classes);
  return ckpt;
}

Dataset Dataset::from_checkpoint(const Checkpoint& ckpt) {
  const auto& f = ckpt.at("features");
  const auto& l = ckpt.at("labels");
  if (f.shape.size() != 2 || l.shape.size() != 1 || f.shape[0] != l.shape[0] ||
      l.dtype != DType::i64) {
    throw Error(ErrorCode::validation,
                "dataset container needs features [n, dims] and i64 labels [n]");
  }
  Dataset d;
  d.dims = f.shape[1];
  d.features = f.to_f64();
  d.labels = std::vector<std::int64_t>(l.view<std::int64_t>().begin(), l.view<std::int64_t>().end());
  auto it = ckpt.meta.find("classes");
  if (it != ckpt.meta.end()) {
    d.classes = std::stoll(it->second);
  } else {
    d.classes = d.labels.empty() ? 1 : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  }
  for (auto y : d.labels) {
    if (y < 0 || y >= d.classes) throw Error(ErrorCode::validation, "dataset label out of range");
  }
  return d;
}

std::vector<double> random_rotation(std::int64_t dims, std::uint64_t seed, double strength) {
  const auto n = static_cast<std::size_t>(dims);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Columns of M = I + strength * G, orthonormalized with modified Gram-Schmidt.
  std::vector<double> m(n * n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) m[r * n + c] = (r == c ? 1.0 : 0.0) + strength * normal(rng);
  }
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t r = 0; r < n; ++r) dot += m[r * n + c] * m[r * n + p];
      for (std::size_t r = 0; r < n; ++r) m[r * n + c] -= dot * m[r * n + p];
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < n; ++r) norm += m[r * n + c] * m[r * n + c];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw Error(ErrorCode::domain, "random_rotation: degenerate draw");
    for (std::size_t r = 0; r < n; ++r) m[r * n + c] /= norm;
  }
  return m;
}

Dataset generate_domain(const SyntheticDomain& d) {
  if (d.dims < 1 || d.classes < 2 || d.clusters_per_class < 1 || d.size < 0) {
    throw Error(ErrorCode::domain, "synthetic domain: invalid geometry");
  }
  if (!(d.label_noise >= 0.0 && d.label_noise < 1.0)) {
    throw Error(ErrorCode::domain, "synthetic domain: label_noise must be in [0, 1)");
  }
  const auto dims = static_cast<std::size_t>(d.dims);
  if (!d.rotation.empty() && d.rotation.size() != dims * dims) {
    throw Error(ErrorCode::shape, "synthetic domain: rotation must be dims x dims");
  }
  if (!d.shift.empty() && d.shift.size() != dims) {
    throw Error(ErrorCode::shape, "synthetic domain: shift must have dims entries");
  }

  std::mt19937_64 task_rng(d.task_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto components = static_cast<std::size_t>(d.classes * d.clusters_per_class);
  std::vector<double> centers(components * dims);
  for (auto& c : centers) c = d.center_scale * normal(task_rng);
  normal.reset();

  std::mt19937_64 rng(d.seed);
  std::uniform_int_distribution<std::int64_t> pick_class(0, d.classes - 1);
  std::uniform_int_distribution<std::int64_t> pick_cluster(0, d.clusters_per_class - 1);
  std::uniform_int_distribution<std::int64_t> pick_other(0, d.classes - 2);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  Dataset out;
  out.dims = d.dims;
  out.classes = d.classes;
  out.features.resize(static_cast<std::size_t>(d.size) * dims);
  out.labels.resize(static_cast<std::size_t>(d.size));
  std::vector<double> x(dims);
  for (std::int64_t i = 0; i < d.size; ++i) {
    std::int64_t y = pick_class(rng);
    const auto comp = static_cast<std::size_t>(y * d.clusters_per_class + pick_cluster(rng));
    for (std::size_t k = 0; k < dims; ++k) {
      x[k] = centers[comp * dims + k] + d.cluster_std * normal(rng);
    }
    const double flip = coin(rng);
    const std::int64_t other = pick_other(rng);
    if (flip < d.label_noise) y = other >= y ? other + 1 : other;

    double* dst = out.features.data() + static_cast<std::size_t>(i) * dims;
    for (std::size_t r = 0; r < dims; ++r) {
      double v = 0.0;
      if (d.rotation.empty()) {
        v = x[r];
      } else {
        for (std::size_t c = 0; c < dims; ++c) v += d.rotation[r * dims + c] * x[c];
      }
      dst[r] = v + (d.shift.empty() ? 0.0 : d.shift[r]);
    }
    out.labels[static_cast<std::size_t>(i)] = y;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network

namespace {

template <typename T>
struct Layer {
  LayerKind kind;
  std::string name;
  std::int64_t in = 0, out = 0;  // dense in/out; batchnorm in = out = width
  std::vector<T> w, b;           // dense weight/bias, batchnorm gamma/beta
  std::vector<T> mean, var;      // batchnorm running stats
  std::int64_t count = 0;
};

template <typename T>
std::vector<T> read_as(const TensorEntry& e) {
  std::vector<T> out(e.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(e.get(i));
  return out;
}

template <typename T>
std::vector<Layer<T>> load_layers(const ArchSpec& arch, const Checkpoint& ckpt) {
  check_checkpoint_against_arch(arch, ckpt);
  std::vector<Layer<T>> layers;
  for (const auto& l : arch.layers) {
    Layer<T> layer;
    layer.kind = l.kind;
    layer.name = l.name;
    if (l.kind == LayerKind::dense) {
      layer.in = l.in;
      layer.out = l.out;
      layer.w = read_as<T>(ckpt.at(l.name + ".weight"));
      layer.b = read_as<T>(ckpt.at(l.name + ".bias"));
    } else if (l.kind == LayerKind::batchnorm) {
      layer.in = layer.out = l.width;
      layer.w = read_as<T>(ckpt.at(l.name + ".weight"));
      layer.b = read_as<T>(ckpt.at(l.name + ".bias"));
      layer.mean = read_as<T>(ckpt.at(l.name + std::string(kRunningMeanSuffix)));
      layer.var = read_as<T>(ckpt.at(l.name + std::string(kRunningVarSuffix)));
      layer.count = ckpt.at(l.name + std::string(kNumBatchesSuffix)).view<std::int64_t>()[0];
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

void store_layers(const std::vector<Layer<double>>& layers, Checkpoint& ckpt) {
  auto write = [&ckpt](const std::string& name, const std::vector<double>& v) {
    auto& e = ckpt.at(name);
    for (std::size_t i = 0; i < v.size(); ++i) e.set(i, v[i]);
  };
  for (const auto& l : layers) {
    if (l.kind == LayerKind::relu) continue;
    write(l.name + ".weight", l.w);
    write(l.name + ".bias", l.b);
    if (l.kind == LayerKind::batchnorm) {
      write(l.name + std::string(kRunningMeanSuffix), l.mean);
      write(l.name + std::string(kRunningVarSuffix), l.var);
      ckpt.at(l.name + std::string(kNumBatchesSuffix)).view_mut<std::int64_t>()[0] = l.count;
    }
  }
}

// Per-layer values kept by a train-mode pass for backprop.
struct Tape {
  std::vector<std::vector<double>> inputs;
  std::vector<std::vector<double>> xhat;
  std::vector<std::vector<double>> inv_std;
};

struct BatchStats {
  std::vector<std::vector<double>> mean, var;  // per layer (empty for non-BN)
};

template <typename T>
std::vector<T> run_forward(const std::vector<Layer<T>>& layers, std::vector<T> x, std::size_t n,
                           ForwardMode mode, Tape* tape, BatchStats* stats) {
  if (tape) {
    tape->inputs.assign(layers.size(), {});
    tape->xhat.assign(layers.size(), {});
    tape->inv_std.assign(layers.size(), {});
  }
  if (stats) {
    stats->mean.assign(layers.size(), {});
    stats->var.assign(layers.size(), {});
  }
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& layer = layers[li];
    if constexpr (std::is_same_v<T, double>) {
      if (tape) tape->inputs[li] = x;
    }
    switch (layer.kind) {
      case LayerKind::dense: {
        const auto in = static_cast<std::size_t>(layer.in);
        const auto out = static_cast<std::size_t>(layer.out);
        std::vector<T> y(n * out);
        for (std::size_t s = 0; s < n; ++s) {
          const T* xs = x.data() + s * in;
          T* ys = y.data() + s * out;
          for (std::size_t o = 0; o < out; ++o) {
            const T* wo = layer.w.data() + o * in;
            T acc = layer.b[o];
            for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xs[i];
            ys[o] = acc;
          }
        }
        x = std::move(y);
        break;
      }
      case LayerKind::batchnorm: {
        const auto c = static_cast<std::size_t>(layer.out);
        std::vector<T> mean(c), inv_std(c);
        if (mode == ForwardMode::eval) {
          for (std::size_t k = 0; k < c; ++k) {
            mean[k] = layer.mean[k];
            inv_std[k] = T(1) / std::sqrt(layer.var[k] + static_cast<T>(kBatchNormEps));
          }
        } else {
          std::vector<T> var(c, T(0));
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t k = 0; k < c; ++k) mean[k] += x[s * c + k];
          for (std::size_t k = 0; k < c; ++k) mean[k] /= static_cast<T>(n);
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t k = 0; k < c; ++k) {
              const T d = x[s * c + k] - mean[k];
              var[k] += d * d;
            }
          for (std::size_t k = 0; k < c; ++k) {
            var[k] /= static_cast<T>(n);
            inv_std[k] = T(1) / std::sqrt(var[k] + static_cast<T>(kBatchNormEps));
          }
          if constexpr (std::is_same_v<T, double>) {
            if (stats) {
              stats->mean[li] = mean;
              stats->var[li] = var;
            }
          }
        }
        std::vector<T> xhat(n * c);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t k = 0; k < c; ++k) {
            xhat[s * c + k] = (x[s * c + k] - mean[k]) * inv_std[k];
            x[s * c + k] = layer.w[k] * xhat[s * c + k] + layer.b[k];
          }
        if constexpr (std::is_same_v<T, double>) {
          if (tape) {
            tape->xhat[li] = std::move(xhat);
            tape->inv_std[li] = std::move(inv_std);
          }
        }
        break;
      }
      case LayerKind::relu:
        for (auto& v : x) v = v > T(0) ? v : T(0);
        break;
    }
  }
  return x;
}

struct Grads {
  std::vector<std::vector<double>> w, b;  // per layer
};

// Softmax cross-entropy (mean). Returns loss; fills dlogits when non-null.
double softmax_xent(std::span<const double> logits, std::span<const std::int64_t> labels,
                    std::size_t classes, std::vector<double>* dlogits) {
  const std::size_t n = labels.size();
  double loss = 0.0;
  if (dlogits) dlogits->assign(n * classes, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const double* z = logits.data() + s * classes;
    const double zmax = *std::max_element(z, z + classes);
    double sum = 0.0;
    for (std::size_t k = 0; k < classes; ++k) sum += std::exp(z[k] - zmax);
    const double log_sum = std::log(sum) + zmax;
    loss += log_sum - z[labels[s]];
    if (dlogits) {
      for (std::size_t k = 0; k < classes; ++k) {
        const double p = std::exp(z[k] - log_sum);
        (*dlogits)[s * classes + k] =
            (p - (static_cast<std::int64_t>(k) == labels[s] ? 1.0 : 0.0)) / static_cast<double>(n);
      }
    }
  }
  return loss / static_cast<double>(n);
}

Grads run_backward(const std::vector<Layer<double>>& layers, const Tape& tape,
                   std::vector<double> dy, std::size_t n) {
  Grads g;
  g.w.assign(layers.size(), {});
  g.b.assign(layers.size(), {});
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& layer = layers[li];
    const auto& x = tape.inputs[li];
    switch (layer.kind) {
      case LayerKind::dense: {
        const auto in = static_cast<std::size_t>(layer.in);
        const auto out = static_cast<std::size_t>(layer.out);
        std::vector<double> dw(out * in, 0.0), db(out, 0.0), dx(n * in, 0.0);
        for (std::size_t s = 0; s < n; ++s) {
          const double* xs = x.data() + s * in;
          const double* dys = dy.data() + s * out;
          double* dxs = dx.data() + s * in;
          for (std::size_t o = 0; o < out; ++o) {
            const double d = dys[o];
            db[o] += d;
            double* dwo = dw.data() + o * in;
            const double* wo = layer.w.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) {
              dwo[i] += d * xs[i];
              dxs[i] += d * wo[i];
            }
          }
        }
        g.w[li] = std::move(dw);
        g.b[li] = std::move(db);
        dy = std::move(dx);
        break;
      }
      case LayerKind::batchnorm: {
        const auto c = static_cast<std::size_t>(layer.out);
        const auto& xhat = tape.xhat[li];
        const auto& inv_std = tape.inv_std[li];
        std::vector<double> dgamma(c, 0.0), dbeta(c, 0.0), sum_dxhat(c, 0.0),
            sum_dxhat_xhat(c, 0.0);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t k = 0; k < c; ++k) {
            const double d = dy[s * c + k];
            const double xh = xhat[s * c + k];
            dgamma[k] += d * xh;
            dbeta[k] += d;
            const double dxh = d * layer.w[k];
            sum_dxhat[k] += dxh;
            sum_dxhat_xhat[k] += dxh * xh;
          }
        const double nn = static_cast<double>(n);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t k = 0; k < c; ++k) {
            const double dxh = dy[s * c + k] * layer.w[k];
            dy[s * c + k] = inv_std[k] / nn *
                            (nn * dxh - sum_dxhat[k] - xhat[s * c + k] * sum_dxhat_xhat[k]);
          }
        g.w[li] = std::move(dgamma);
        g.b[li] = std::move(dbeta);
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < dy.size(); ++i) {
          if (!(x[i] > 0.0)) dy[i] = 0.0;
        }
        break;
    }
  }
  return g;
}

void check_batch(const ArchSpec& arch, std::span<const double> batch) {
  const auto dims = static_cast<std::size_t>(arch.input_dim());
  if (batch.size() % dims != 0) {
    throw Error(ErrorCode::validation, "batch of " + std::to_string(batch.size()) +
                                           " scalars is not a multiple of input width " +
                                           std::to_string(dims));
  }
}

bool all_f32(const Checkpoint& ckpt) {
  bool any_float = false;
  for (const auto& [name, e] : ckpt.tensors) {
    if (e.dtype == DType::f64) return false;
    any_float = any_float || e.dtype == DType::f32;
  }
  return any_float;
}

// Cumulative average: after k updates the running value is the mean of the
// k batch statistics seen.
void track_batch_stats(std::vector<Layer<double>>& layers, const BatchStats& stats) {
  for (std::size_t li = 0; li < layers.size(); ++li) {
    auto& l = layers[li];
    if (l.kind != LayerKind::batchnorm) continue;
    const double k = static_cast<double>(l.count + 1);
    for (std::size_t c = 0; c < l.mean.size(); ++c) {
      l.mean[c] += (stats.mean[li][c] - l.mean[c]) / k;
      l.var[c] += (stats.var[li][c] - l.var[c]) / k;
    }
    ++l.count;
  }
}

}  // namespace

std::vector<double> forward(const ArchSpec& arch, const Checkpoint& ckpt,
                            std::span<const double> batch, ForwardMode mode) {
  check_batch(arch, batch);
  const std::size_t n = batch.size() / static_cast<std::size_t>(arch.input_dim());
  if (mode == ForwardMode::train && n < 2) {
    throw Error(ErrorCode::validation, "train-mode forward needs at least 2 samples");
  }
  if (all_f32(ckpt)) {
    const auto layers = load_layers<float>(arch, ckpt);
    std::vector<float> x(batch.begin(), batch.end());
    const auto y = run_forward(layers, std::move(x), n, mode, nullptr, nullptr);
    return {y.begin(), y.end()};
  }
  const auto layers = load_layers<double>(arch, ckpt);
  return run_forward(layers, std::vector<double>(batch.begin(), batch.end()), n, mode, nullptr,
                     nullptr);
}

double cross_entropy(const ArchSpec& arch, const Checkpoint& ckpt, std::span<const double> batch,
                     std::span<const std::int64_t> labels, ForwardMode mode) {
  const auto logits = forward(arch, ckpt, batch, mode);
  return softmax_xent(logits, labels, static_cast<std::size_t>(arch.num_classes()), nullptr);
}

LossAndGrad loss_and_grad(const ArchSpec& arch, const Checkpoint& ckpt,
                          std::span<const double> batch, std::span<const std::int64_t> labels) {
  check_batch(arch, batch);
  const std::size_t n = batch.size() / static_cast<std::size_t>(arch.input_dim());
  if (labels.size() != n) throw Error(ErrorCode::shape, "label count does not match batch");
  if (n < 2) throw Error(ErrorCode::validation, "loss_and_grad needs at least 2 samples");
  const auto layers = load_layers<double>(arch, ckpt);
  Tape tape;
  const auto logits = run_forward(layers, std::vector<double>(batch.begin(), batch.end()), n,
                                  ForwardMode::train, &tape, nullptr);
  std::vector<double> dlogits;
  LossAndGrad out;
  out.loss = softmax_xent(logits, labels, static_cast<std::size_t>(arch.num_classes()), &dlogits);
  const auto g = run_backward(layers, tape, std::move(dlogits), n);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    if (l.kind == LayerKind::relu) continue;
    const auto& wshape = ckpt.at(l.name + ".weight").shape;
    const auto& bshape = ckpt.at(l.name + ".bias").shape;
    out.grad.tensors.emplace(l.name + ".weight",
                             TensorEntry::from_f64(DType::f64, wshape, Role::param, g.w[li]));
    out.grad.tensors.emplace(l.name + ".bias",
                             TensorEntry::from_f64(DType::f64, bshape, Role::param, g.b[li]));
  }
  return out;
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw Error(ErrorCode::domain, "batch_size must be >= 2 for batchnorm");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::domain, "lr must be finite and >= 0");
  if (epochs < 0) throw Error(ErrorCode::domain, "epochs must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorCode::domain, "momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::domain, "weight_decay must be >= 0");
}

Checkpoint train(const ArchSpec& arch, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.dims != arch.input_dim() || data.classes != arch.num_classes()) {
    throw Error(ErrorCode::validation, "dataset geometry (" + std::to_string(data.dims) + " dims, " +
                                           std::to_string(data.classes) +
                                           " classes) does not match arch");
  }
  if (data.size() < 2) throw Error(ErrorCode::validation, "training needs at least 2 samples");

  Checkpoint ckpt =
      cfg.init ? *cfg.init : init_checkpoint(arch, cfg.init_seed.value_or(cfg.seed), cfg.dtype);
  auto layers = load_layers<double>(arch, ckpt);

  std::vector<std::vector<double>> vel_w(layers.size()), vel_b(layers.size());
  for (std::size_t li = 0; li < layers.size(); ++li) {
    vel_w[li].assign(layers[li].w.size(), 0.0);
    vel_b[li].assign(layers[li].b.size(), 0.0);
  }

  const auto dims = static_cast<std::size_t>(data.dims);
  const auto classes = static_cast<std::size_t>(data.classes);
  const auto total = static_cast<std::size_t>(data.size());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  auto gather = [&](std::span<const std::int64_t> idx, std::vector<double>& x,
                    std::vector<std::int64_t>& y) {
    x.resize(idx.size() * dims);
    y.resize(idx.size());
    for (std::size_t s = 0; s < idx.size(); ++s) {
      auto r = data.row(idx[s]);
      std::copy(r.begin(), r.end(), x.begin() + static_cast<std::ptrdiff_t>(s * dims));
      y[s] = data.labels[static_cast<std::size_t>(idx[s])];
    }
  };

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::int64_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> x;
  std::vector<std::int64_t> y;
  Tape tape;
  BatchStats stats;
  std::vector<double> dlogits;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < total; start += bs, ++batch_index) {
      const std::size_t m = std::min(bs, total - start);
      if (m < 2) break;
      gather(std::span(order).subspan(start, m), x, y);
      const auto logits = run_forward(layers, x, m, ForwardMode::train, &tape, &stats);
      const double loss = softmax_xent(logits, y, classes, &dlogits);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::divergence, "non-finite loss at epoch " + std::to_string(epoch) +
                                               ", batch " + std::to_string(batch_index));
      }
      track_batch_stats(layers, stats);
      const auto g = run_backward(layers, tape, dlogits, m);
      for (std::size_t li = 0; li < layers.size(); ++li) {
        auto& l = layers[li];
        if (l.kind == LayerKind::relu) continue;
        auto step = [&](std::vector<double>& p, std::vector<double>& v,
                        const std::vector<double>& grad) {
          for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = grad[i] + cfg.weight_decay * p[i];
            v[i] = cfg.momentum * v[i] + gi;
            p[i] -= cfg.lr * v[i];
          }
        };
        step(l.w, vel_w[li], g.w[li]);
        step(l.b, vel_b[li], g.b[li]);
      }
    }
  }

  if (cfg.recalibrate_bn) {
    for (auto& l : layers) {
      if (l.kind != LayerKind::batchnorm) continue;
      std::fill(l.mean.begin(), l.mean.end(), 0.0);
      std::fill(l.var.begin(), l.var.end(), 1.0);
      l.count = 0;
    }
    std::vector<std::int64_t> sequential(total);
    std::iota(sequential.begin(), sequential.end(), 0);
    for (std::size_t start = 0; start < total; start += bs) {
      const std::size_t m = std::min(bs, total - start);
      if (m < 2) break;
      gather(std::span(sequential).subspan(start, m), x, y);
      run_forward(layers, x, m, ForwardMode::train, nullptr, &stats);
      track_batch_stats(layers, stats);
    }
  }

  store_layers(layers, ckpt);
  ckpt.meta["train.seed"] = std::to_string(cfg.seed);
  ckpt.meta["train.epochs"] = std::to_string(cfg.epochs);
  return ckpt;
}

std::vector<std::int64_t> predict(const ArchSpec& arch, const Checkpoint& ckpt,
                                  const Dataset& data) {
  if (data.dims != arch.input_dim()) {
    throw Error(ErrorCode::validation, "dataset dims do not match arch input width");
  }
  const auto logits = forward(arch, ckpt, data.features, ForwardMode::eval);
  const auto k = static_cast<std::size_t>(arch.num_classes());
  std::vector<std::int64_t> pred(static_cast<std::size_t>(data.size()));
  for (std::size_t s = 0; s < pred.size(); ++s) {
    const double* z = logits.data() + s * k;
    pred[s] = std::max_element(z, z + k) - z;
  }
  return pred;
}

EvalRecord evaluate(const ArchSpec& arch, const Checkpoint& ckpt, const Dataset& data) {
  if (data.classes != arch.num_classes()) {
    throw Error(ErrorCode::validation, "dataset classes do not match arch output width");
  }
  const auto pred = predict(arch, ckpt, data);
  EvalRecord r;
  r.accuracy = accuracy(pred, data.labels);
  r.confusion = confusion(pred, data.labels, data.classes);
  r.miou = miou(r.confusion).miou;
  return r;
}

}  // namespace basinmerge
