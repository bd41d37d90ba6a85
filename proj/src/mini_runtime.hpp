#pragma once

// A small dense + batchnorm + ReLU runtime: enough to train toy models from
// shared or distinct initializations, and to evaluate checkpoints.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metrics.hpp"
#include "tensor_container.hpp"

namespace basinmerge {

enum class LayerKind { dense, batchnorm, relu };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::int64_t in = 0;     // dense
  std::int64_t out = 0;    // dense
  std::int64_t width = 0;  // batchnorm
  std::string name;        // tensor prefix; filled by ArchSpec::resolve when empty
};

// Units produced by dense layer `producer` and consumed by `consumer`; the
// batchnorms in between act on the same units.
struct HiddenGroup {
  std::string producer;
  std::string consumer;
  std::vector<std::string> batchnorms;
  std::int64_t width = 0;
};

struct ArchSpec {
  std::vector<LayerSpec> layers;
  std::string head_prefix;

  // dense i -> "l<i>", batchnorm after dense g -> "bn<g>" unless named.
  // Checks width agreement and that the last layer is dense.
  void resolve();

  std::int64_t input_dim() const;
  std::int64_t num_classes() const;
  std::vector<HiddenGroup> hidden_groups() const;

  static ArchSpec from_json(std::string_view text);
  static ArchSpec load(const std::filesystem::path& path);
  std::string to_json() const;

  // dense(in, h0) [bn] relu ... dense(h_last, classes); head = last dense.
  static ArchSpec mlp(std::int64_t in, std::span<const std::int64_t> hidden,
                      std::int64_t classes, bool batchnorm = true);
};

// Throws Error(validation) unless ckpt holds exactly the tensors arch names,
// with matching shapes and roles.
void check_checkpoint_against_arch(const ArchSpec& arch, const Checkpoint& ckpt);

// He-normal weights, zero biases, unit BN affine, fresh BN stats (count 0).
Checkpoint init_checkpoint(const ArchSpec& arch, std::uint64_t seed, DType dtype = DType::f64);

struct Dataset {
  std::int64_t dims = 0;
  std::int64_t classes = 0;
  std::vector<double> features;  // size() x dims, row-major
  std::vector<std::int64_t> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::span<const double> row(std::int64_t i) const {
    return std::span<const double>(features).subspan(static_cast<std::size_t>(i * dims),
                                                     static_cast<std::size_t>(dims));
  }
  Dataset subset(std::span<const std::int64_t> indices) const;
  static Dataset concat(const Dataset& a, const Dataset& b);

  // Cached as TMC1: "features" f64 [n, dims], "labels" i64 [n].
  Checkpoint to_checkpoint() const;
  static Dataset from_checkpoint(const Checkpoint& ckpt);
};

struct SyntheticDomain {
  std::uint64_t seed = 0;       // sampling
  std::uint64_t task_seed = 0;  // mixture centers shared by related domains
  std::int64_t dims = 2;
  std::int64_t classes = 2;
  std::int64_t clusters_per_class = 1;
  double center_scale = 3.0;
  double cluster_std = 1.0;
  std::vector<double> rotation;  // dims x dims orthogonal; empty = identity
  std::vector<double> shift;     // dims; empty = zero
  double label_noise = 0.0;
  std::int64_t size = 0;
};

Dataset generate_domain(const SyntheticDomain& domain);

// Orthonormalized (I + strength * G) for a Gaussian G drawn from seed.
std::vector<double> random_rotation(std::int64_t dims, std::uint64_t seed, double strength);

struct TrainConfig {
  std::uint64_t seed = 0;  // data order
  std::optional<std::uint64_t> init_seed;  // fresh init seed; defaults to seed
  std::optional<Checkpoint> init;          // start from this checkpoint instead
  int epochs = 1;
  int batch_size = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool recalibrate_bn = true;
  DType dtype = DType::f64;

  void validate() const;
};

Checkpoint train(const ArchSpec& arch, const Dataset& data, const TrainConfig& cfg);

enum class ForwardMode { train, eval };

inline constexpr double kBatchNormEps = 1e-5;

// Logits [n, classes] row-major. Computed in f32 when every floating tensor
// of ckpt is f32, in f64 otherwise.
std::vector<double> forward(const ArchSpec& arch, const Checkpoint& ckpt,
                            std::span<const double> batch, ForwardMode mode);

struct LossAndGrad {
  double loss = 0.0;
  Checkpoint grad;  // same names/shapes as the param tensors, f64
};

// Mean softmax cross-entropy over the batch (train-mode BN) and its gradient
// with respect to every parameter tensor.
LossAndGrad loss_and_grad(const ArchSpec& arch, const Checkpoint& ckpt,
                          std::span<const double> batch, std::span<const std::int64_t> labels);

double cross_entropy(const ArchSpec& arch, const Checkpoint& ckpt, std::span<const double> batch,
                     std::span<const std::int64_t> labels, ForwardMode mode);

std::vector<std::int64_t> predict(const ArchSpec& arch, const Checkpoint& ckpt,
                                  const Dataset& data);

struct EvalRecord {
  double accuracy = 0.0;
  double miou = 0.0;
  ConfusionMatrix confusion;
};

EvalRecord evaluate(const ArchSpec& arch, const Checkpoint& ckpt, const Dataset& data);

}  // namespace basinmerge
