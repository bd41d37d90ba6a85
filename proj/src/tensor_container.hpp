#pragma once

// Named-tensor checkpoints and the TMC1 container format.
//
// Layout on disk:
//   bytes 0..3    magic "TMC1"
//   bytes 4..11   header length H, little-endian u64
//   bytes 12..    H bytes of compact JSON with sorted keys
//   remainder     payload: tensors back to back in header order, row-major,
//                 little-endian, no padding

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "error.hpp"

namespace basinmerge {

enum class DType { f32, f64, i64 };
enum class Role { param, buffer, count };

const char* dtype_name(DType dtype) noexcept;
const char* role_name(Role role) noexcept;
DType parse_dtype(std::string_view name);
Role parse_role(std::string_view name);
std::size_t dtype_size(DType dtype) noexcept;

using Shape = std::vector<std::int64_t>;

// Number of scalars for a shape; the empty shape is a scalar.
std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

using TensorData =
    std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>>;

struct TensorEntry {
  DType dtype = DType::f32;
  Shape shape;
  TensorData data;
  Role role = Role::param;

  std::size_t numel() const;
  std::size_t nbytes() const { return numel() * dtype_size(dtype); }

  // Scalar i widened to double (i64 converted).
  double get(std::size_t i) const;
  // Stores v rounded once into the entry's dtype.
  void set(std::size_t i, double v);

  std::vector<double> to_f64() const;

  template <typename T>
  std::span<const T> view() const {
    return std::get<std::vector<T>>(data);
  }
  template <typename T>
  std::span<T> view_mut() {
    return std::get<std::vector<T>>(data);
  }

  // Bitwise equality of dtype, shape, role and scalar bytes (NaN-safe).
  bool bit_equal(const TensorEntry& other) const;

  static TensorEntry zeros(DType dtype, Shape shape, Role role);
  static TensorEntry from_f64(DType dtype, Shape shape, Role role,
                              std::span<const double> values);
  static TensorEntry count_scalar(std::int64_t n);
};

inline constexpr std::string_view kRunningMeanSuffix = ".running_mean";
inline constexpr std::string_view kRunningVarSuffix = ".running_var";
inline constexpr std::string_view kNumBatchesSuffix = ".num_batches_tracked";

struct Checkpoint {
  // Iteration order is name order, which is also the serialized order.
  std::map<std::string, TensorEntry> tensors;
  std::map<std::string, std::string> meta;

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  const TensorEntry& at(const std::string& name) const;
  TensorEntry& at(const std::string& name);

  // Prefixes P with a P.running_mean / P.running_var / P.num_batches_tracked
  // member, sorted.
  std::vector<std::string> bn_prefixes() const;

  bool bit_equal(const Checkpoint& other) const;  // tensors and meta
  bool tensors_bit_equal(const Checkpoint& other) const;
};

// Throws Error(validation) naming the first offending tensor.
void validate_checkpoint(const Checkpoint& ckpt);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

Checkpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

enum class MismatchReason { missing, shape, dtype, role };
const char* mismatch_reason_name(MismatchReason reason) noexcept;

struct Mismatch {
  std::string name;
  MismatchReason reason;
  bool operator==(const Mismatch&) const = default;
};

struct CompatReport {
  bool compatible = true;
  std::vector<Mismatch> mismatches;
};

CompatReport validate_compatibility(const Checkpoint& a, const Checkpoint& b);

class CompatibilityError : public Error {
 public:
  explicit CompatibilityError(CompatReport report);
  const CompatReport& report() const noexcept { return report_; }

 private:
  CompatReport report_;
};

// Throws CompatibilityError if any pair of inputs differs structurally.
void require_compatible(std::span<const Checkpoint* const> inputs);

struct CheckpointSummary {
  std::size_t params = 0;
  std::size_t buffers = 0;
  std::size_t counts = 0;
  std::int64_t total_scalars = 0;
  std::vector<std::string> bn_prefixes;
  std::map<std::string, std::string> meta;
};

CheckpointSummary inspect(const Checkpoint& ckpt);

// Versioned, key-sorted JSON rendering of a summary (stable across runs).
std::string summary_to_json(const CheckpointSummary& summary);
std::string compat_report_to_json(const CompatReport& report);

}  // namespace basinmerge
