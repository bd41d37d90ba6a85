#include "tensor_container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

namespace basinmerge {

using json = nlohmann::json;

namespace {

constexpr char kMagic[4] = {'T', 'M', 'C', '1'};
constexpr std::size_t kPreambleSize = 12;
constexpr int kFormatVersion = 1;

template <typename T>
T byteswap_value(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  std::reverse(buf, buf + sizeof(T));
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

template <typename T>
void append_le(std::vector<std::uint8_t>& out, std::span<const T> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size_bytes());
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, values.data(), values.size_bytes());
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      T v = byteswap_value(values[i]);
      std::memcpy(out.data() + start + i * sizeof(T), &v, sizeof(T));
    }
  }
}

template <typename T>
std::vector<T> read_le(const std::uint8_t* src, std::size_t count) {
  std::vector<T> values(count);
  std::memcpy(values.data(), src, count * sizeof(T));
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : values) v = byteswap_value(v);
  }
  return values;
}

bool has_suffix(std::string_view s, std::string_view suffix) {
  return s.size() > suffix.size() &&
         s.substr(s.size() - suffix.size()) == suffix;
}

bool is_floating(DType d) { return d == DType::f32 || d == DType::f64; }

// Duplicate keys are legal JSON but ambiguous here, so the parse callback
// keeps one key set per open object.
json parse_header(std::string_view text, std::size_t header_offset) {
  std::vector<std::set<std::string>> open_objects;
  std::string duplicate;
  auto callback = [&](int /*depth*/, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        open_objects.emplace_back();
        break;
      case json::parse_event_t::object_end:
        if (!open_objects.empty()) open_objects.pop_back();
        break;
      case json::parse_event_t::key:
        if (!open_objects.empty() && parsed.is_string()) {
          auto key = parsed.get<std::string>();
          if (!open_objects.back().insert(key).second && duplicate.empty()) {
            duplicate = key;
          }
        }
        break;
      default:
        break;
    }
    return true;
  };
  json header;
  try {
    header = json::parse(text.begin(), text.end(), callback);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed header JSON: ") + e.what(),
                      header_offset + (e.byte > 0 ? e.byte - 1 : 0));
  }
  if (!duplicate.empty()) {
    throw Error(ErrorCode::validation, "duplicate name in header: '" + duplicate + "'");
  }
  return header;
}

}  // namespace

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::format: return "format";
    case ErrorCode::size: return "size";
    case ErrorCode::validation: return "validation";
    case ErrorCode::io: return "io";
    case ErrorCode::domain: return "domain";
    case ErrorCode::shape: return "shape";
    case ErrorCode::compatibility: return "compatibility";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::undefined_metric: return "undefined_metric";
    case ErrorCode::internal: return "internal";
  }
  return "internal";
}

const char* dtype_name(DType dtype) noexcept {
  switch (dtype) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i64: return "i64";
  }
  return "?";
}

const char* role_name(Role role) noexcept {
  switch (role) {
    case Role::param: return "param";
    case Role::buffer: return "buffer";
    case Role::count: return "count";
  }
  return "?";
}

DType parse_dtype(std::string_view name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  if (name == "i64") return DType::i64;
  throw Error(ErrorCode::format, "unknown dtype '" + std::string(name) + "'");
}

Role parse_role(std::string_view name) {
  if (name == "param") return Role::param;
  if (name == "buffer") return Role::buffer;
  if (name == "count") return Role::count;
  throw Error(ErrorCode::format, "unknown role '" + std::string(name) + "'");
}

std::size_t dtype_size(DType dtype) noexcept {
  return dtype == DType::f32 ? 4 : 8;
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw Error(ErrorCode::validation, "negative dimension in shape " + shape_string(shape));
    if (d != 0 && n > std::numeric_limits<std::int64_t>::max() / d) {
      throw Error(ErrorCode::validation, "shape too large: " + shape_string(shape));
    }
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t TensorEntry::numel() const {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

double TensorEntry::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, data);
}

void TensorEntry::set(std::size_t i, double v) {
  std::visit(
      [i, v](auto& vec) {
        using T = typename std::decay_t<decltype(vec)>::value_type;
        vec[i] = static_cast<T>(v);
      },
      data);
}

std::vector<double> TensorEntry::to_f64() const {
  return std::visit(
      [](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data);
}

bool TensorEntry::bit_equal(const TensorEntry& other) const {
  if (dtype != other.dtype || shape != other.shape || role != other.role) return false;
  if (data.index() != other.data.index() || numel() != other.numel()) return false;
  return std::visit(
      [&other](const auto& v) {
        using V = std::decay_t<decltype(v)>;
        const auto& w = std::get<V>(other.data);
        return v.empty() ||
               std::memcmp(v.data(), w.data(), v.size() * sizeof(typename V::value_type)) == 0;
      },
      data);
}

TensorEntry TensorEntry::zeros(DType dtype, Shape shape, Role role) {
  TensorEntry e;
  e.dtype = dtype;
  e.role = role;
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  e.shape = std::move(shape);
  switch (dtype) {
    case DType::f32: e.data = std::vector<float>(n, 0.0f); break;
    case DType::f64: e.data = std::vector<double>(n, 0.0); break;
    case DType::i64: e.data = std::vector<std::int64_t>(n, 0); break;
  }
  return e;
}

TensorEntry TensorEntry::from_f64(DType dtype, Shape shape, Role role,
                                  std::span<const double> values) {
  TensorEntry e = zeros(dtype, std::move(shape), role);
  if (values.size() != e.numel()) {
    throw Error(ErrorCode::shape, "value count " + std::to_string(values.size()) +
                                      " does not match shape " + shape_string(e.shape));
  }
  for (std::size_t i = 0; i < values.size(); ++i) e.set(i, values[i]);
  return e;
}

TensorEntry TensorEntry::count_scalar(std::int64_t n) {
  TensorEntry e;
  e.dtype = DType::i64;
  e.role = Role::count;
  e.data = std::vector<std::int64_t>{n};
  return e;
}

const TensorEntry& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorCode::validation, "missing tensor '" + name + "'");
  return it->second;
}

TensorEntry& Checkpoint::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorCode::validation, "missing tensor '" + name + "'");
  return it->second;
}

std::vector<std::string> Checkpoint::bn_prefixes() const {
  std::set<std::string> prefixes;
  for (const auto& [name, entry] : tensors) {
    for (auto suffix : {kRunningMeanSuffix, kRunningVarSuffix, kNumBatchesSuffix}) {
      if (has_suffix(name, suffix)) {
        prefixes.insert(name.substr(0, name.size() - suffix.size()));
      }
    }
  }
  return {prefixes.begin(), prefixes.end()};
}

bool Checkpoint::bit_equal(const Checkpoint& other) const {
  return meta == other.meta && tensors_bit_equal(other);
}

bool Checkpoint::tensors_bit_equal(const Checkpoint& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  auto it = other.tensors.begin();
  for (const auto& [name, entry] : tensors) {
    if (name != it->first || !entry.bit_equal(it->second)) return false;
    ++it;
  }
  return true;
}

void validate_checkpoint(const Checkpoint& ckpt) {
  for (const auto& [name, e] : ckpt.tensors) {
    if (name.empty()) throw Error(ErrorCode::validation, "tensor with empty name");
    const auto expected_index = static_cast<std::size_t>(e.dtype);
    if (e.data.index() != expected_index) {
      throw Error(ErrorCode::validation,
                  "tensor '" + name + "': storage does not match dtype " + dtype_name(e.dtype));
    }
    if (static_cast<std::int64_t>(e.numel()) != shape_numel(e.shape)) {
      throw Error(ErrorCode::validation, "tensor '" + name + "': " +
                                             std::to_string(e.numel()) +
                                             " scalars for shape " + shape_string(e.shape));
    }
    if (e.role == Role::count && (e.dtype != DType::i64 || !e.shape.empty())) {
      throw Error(ErrorCode::validation,
                  "tensor '" + name + "': count tensors must be scalar i64");
    }
  }
  for (const auto& prefix : ckpt.bn_prefixes()) {
    const auto mean_name = prefix + std::string(kRunningMeanSuffix);
    const auto var_name = prefix + std::string(kRunningVarSuffix);
    const auto count_name = prefix + std::string(kNumBatchesSuffix);
    for (const auto& member : {mean_name, var_name, count_name}) {
      if (!ckpt.contains(member)) {
        throw Error(ErrorCode::validation,
                    "batchnorm '" + prefix + "': missing triple member '" + member + "'");
      }
    }
    const auto& mean = ckpt.at(mean_name);
    const auto& var = ckpt.at(var_name);
    const auto& count = ckpt.at(count_name);
    if (mean.role != Role::buffer || !is_floating(mean.dtype)) {
      throw Error(ErrorCode::validation, "tensor '" + mean_name + "' must be a floating buffer");
    }
    if (var.role != Role::buffer || !is_floating(var.dtype)) {
      throw Error(ErrorCode::validation, "tensor '" + var_name + "' must be a floating buffer");
    }
    if (count.role != Role::count || count.dtype != DType::i64 || !count.shape.empty()) {
      throw Error(ErrorCode::validation,
                  "tensor '" + count_name + "' must be a scalar i64 count");
    }
    if (mean.shape != var.shape) {
      throw Error(ErrorCode::validation, "batchnorm '" + prefix + "': mean shape " +
                                             shape_string(mean.shape) + " != var shape " +
                                             shape_string(var.shape));
    }
  }
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  validate_checkpoint(ckpt);

  json tensors = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, e] : ckpt.tensors) {
    tensors[name] = {{"dtype", dtype_name(e.dtype)},
                     {"shape", e.shape},
                     {"offset", offset},
                     {"role", role_name(e.role)}};
    offset += e.nbytes();
  }
  json header = {{"version", kFormatVersion}, {"meta", ckpt.meta}, {"tensors", tensors}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kPreambleSize + text.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  const std::uint64_t header_len = text.size();
  append_le(out, std::span<const std::uint64_t>(&header_len, 1));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, e] : ckpt.tensors) {
    std::visit([&out](const auto& v) { append_le(out, std::span(v)); }, e.data);
  }
  return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPreambleSize) {
    throw FormatError("file shorter than the 12-byte preamble", bytes.size());
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (bytes[i] != static_cast<std::uint8_t>(kMagic[i])) {
      throw FormatError("bad magic, expected \"TMC1\"", i);
    }
  }
  const auto header_len = read_le<std::uint64_t>(bytes.data() + 4, 1)[0];
  if (header_len > bytes.size() - kPreambleSize) {
    throw FormatError("header length " + std::to_string(header_len) + " exceeds file size",
                      4);
  }
  const std::string_view text(reinterpret_cast<const char*>(bytes.data()) + kPreambleSize,
                              header_len);
  const json header = parse_header(text, kPreambleSize);

  auto header_error = [](const std::string& what) {
    return FormatError("invalid header: " + what, kPreambleSize);
  };
  if (!header.is_object()) throw header_error("not a JSON object");
  if (!header.contains("version") || header["version"] != kFormatVersion) {
    throw header_error("unsupported or missing version");
  }
  if (!header.contains("tensors") || !header["tensors"].is_object()) {
    throw header_error("missing \"tensors\" object");
  }

  Checkpoint ckpt;
  if (header.contains("meta")) {
    const auto& meta = header["meta"];
    if (!meta.is_object()) throw header_error("\"meta\" must be an object");
    for (const auto& [k, v] : meta.items()) {
      if (!v.is_string()) throw header_error("meta value for '" + k + "' is not a string");
      ckpt.meta[k] = v.get<std::string>();
    }
  }

  const std::size_t payload_start = kPreambleSize + header_len;
  const std::size_t payload_size = bytes.size() - payload_start;
  std::uint64_t cursor = 0;
  for (const auto& [name, spec] : header["tensors"].items()) {
    if (!spec.is_object()) throw header_error("tensor '" + name + "' is not an object");
    for (const char* field : {"dtype", "shape", "offset", "role"}) {
      if (!spec.contains(field)) {
        throw header_error("tensor '" + name + "' lacks field \"" + field + "\"");
      }
    }
    if (!spec["dtype"].is_string() || !spec["role"].is_string() || !spec["shape"].is_array() ||
        !spec["offset"].is_number_unsigned()) {
      throw header_error("tensor '" + name + "' has mistyped fields");
    }
    TensorEntry e;
    try {
      e.dtype = parse_dtype(spec["dtype"].get<std::string>());
      e.role = parse_role(spec["role"].get<std::string>());
    } catch (const Error& err) {
      throw header_error("tensor '" + name + "': " + err.what());
    }
    for (const auto& d : spec["shape"]) {
      if (!d.is_number_integer() || d.get<std::int64_t>() < 0) {
        throw header_error("tensor '" + name + "' has an invalid dimension");
      }
      e.shape.push_back(d.get<std::int64_t>());
    }
    const auto numel = static_cast<std::uint64_t>(shape_numel(e.shape));
    const std::uint64_t offset = spec["offset"].get<std::uint64_t>();
    if (numel > std::numeric_limits<std::uint64_t>::max() / 8) {
      throw header_error("tensor '" + name + "' is too large");
    }
    const std::uint64_t nbytes = numel * dtype_size(e.dtype);
    if (offset > payload_size || nbytes > payload_size - offset) {
      throw Error(ErrorCode::size, "tensor '" + name + "' spans payload bytes [" +
                                       std::to_string(offset) + ", " +
                                       std::to_string(offset + nbytes) + ") but payload has " +
                                       std::to_string(payload_size) + " bytes");
    }
    if (offset != cursor) {
      throw FormatError("tensor '" + name + "' is not stored contiguously (offset " +
                            std::to_string(offset) + ", expected " + std::to_string(cursor) +
                            ")",
                        payload_start + offset);
    }
    const std::uint8_t* src = bytes.data() + payload_start + offset;
    switch (e.dtype) {
      case DType::f32: e.data = read_le<float>(src, numel); break;
      case DType::f64: e.data = read_le<double>(src, numel); break;
      case DType::i64: e.data = read_le<std::int64_t>(src, numel); break;
    }
    cursor += nbytes;
    ckpt.tensors.emplace(name, std::move(e));
  }
  if (cursor != payload_size) {
    throw FormatError(std::to_string(payload_size - cursor) + " trailing payload bytes",
                      payload_start + cursor);
  }
  validate_checkpoint(ckpt);
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::io, "read failed for '" + path.string() + "'");
  return parse_checkpoint(bytes);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw Error(ErrorCode::io, "write failed for '" + path.string() + "'");
}

const char* mismatch_reason_name(MismatchReason reason) noexcept {
  switch (reason) {
    case MismatchReason::missing: return "missing";
    case MismatchReason::shape: return "shape";
    case MismatchReason::dtype: return "dtype";
    case MismatchReason::role: return "role";
  }
  return "?";
}

CompatReport validate_compatibility(const Checkpoint& a, const Checkpoint& b) {
  CompatReport report;
  auto ia = a.tensors.begin();
  auto ib = b.tensors.begin();
  while (ia != a.tensors.end() || ib != b.tensors.end()) {
    if (ib == b.tensors.end() || (ia != a.tensors.end() && ia->first < ib->first)) {
      report.mismatches.push_back({ia->first, MismatchReason::missing});
      ++ia;
    } else if (ia == a.tensors.end() || ib->first < ia->first) {
      report.mismatches.push_back({ib->first, MismatchReason::missing});
      ++ib;
    } else {
      const auto& ea = ia->second;
      const auto& eb = ib->second;
      if (ea.dtype != eb.dtype) {
        report.mismatches.push_back({ia->first, MismatchReason::dtype});
      } else if (ea.shape != eb.shape) {
        report.mismatches.push_back({ia->first, MismatchReason::shape});
      } else if (ea.role != eb.role) {
        report.mismatches.push_back({ia->first, MismatchReason::role});
      }
      ++ia;
      ++ib;
    }
  }
  report.compatible = report.mismatches.empty();
  return report;
}

namespace {

std::string describe_mismatches(const CompatReport& report) {
  std::string s = std::to_string(report.mismatches.size()) + " mismatch(es)";
  const std::size_t shown = std::min<std::size_t>(report.mismatches.size(), 3);
  for (std::size_t i = 0; i < shown; ++i) {
    s += i ? ", " : ": ";
    s += report.mismatches[i].name + " (" + mismatch_reason_name(report.mismatches[i].reason) +
         ")";
  }
  if (shown < report.mismatches.size()) s += ", ...";
  return s;
}

}  // namespace

CompatibilityError::CompatibilityError(CompatReport report)
    : Error(ErrorCode::compatibility,
            "incompatible checkpoints: " + describe_mismatches(report)),
      report_(std::move(report)) {}

void require_compatible(std::span<const Checkpoint* const> inputs) {
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    auto report = validate_compatibility(*inputs[0], *inputs[i]);
    if (!report.compatible) throw CompatibilityError(std::move(report));
  }
}

CheckpointSummary inspect(const Checkpoint& ckpt) {
  CheckpointSummary s;
  for (const auto& [name, e] : ckpt.tensors) {
    switch (e.role) {
      case Role::param: ++s.params; break;
      case Role::buffer: ++s.buffers; break;
      case Role::count: ++s.counts; break;
    }
    s.total_scalars += static_cast<std::int64_t>(e.numel());
  }
  s.bn_prefixes = ckpt.bn_prefixes();
  s.meta = ckpt.meta;
  return s;
}

std::string summary_to_json(const CheckpointSummary& summary) {
  json j = {{"format_version", 1},
            {"roles",
             {{"param", summary.params}, {"buffer", summary.buffers}, {"count", summary.counts}}},
            {"total_scalars", summary.total_scalars},
            {"bn_prefixes", summary.bn_prefixes},
            {"meta", summary.meta}};
  return j.dump();
}

std::string compat_report_to_json(const CompatReport& report) {
  json mismatches = json::array();
  for (const auto& m : report.mismatches) {
    mismatches.push_back({{"name", m.name}, {"reason", mismatch_reason_name(m.reason)}});
  }
  return json{{"compatible", report.compatible}, {"mismatches", mismatches}}.dump();
}

}  // namespace basinmerge
