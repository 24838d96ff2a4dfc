#include "evim/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace evim::io {

namespace {

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class T>
void put_payload(std::string& out, const Tensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(T));
  } else {
    out.reserve(out.size() + t.size() * sizeof(T));
    for (T v : t.data()) put_le(out, std::bit_cast<Bits>(v));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  template <class U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::uint64_t n, const char* what) {
    need(n, what);
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <class T>
  Tensor<T> payload(Shape shape, const char* what) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const std::uint64_t count = numel(shape);
    if (count > (bytes_.size() - pos_) / sizeof(T)) throw FormatError(std::string("truncated ") + what, pos_);
    Tensor<T> t(std::move(shape));
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(t.data().data(), bytes_.data() + pos_, count * sizeof(T));
      pos_ += count * sizeof(T);
    } else {
      for (auto& v : t.data()) v = std::bit_cast<T>(le<Bits>(what));
    }
    return t;
  }

 private:
  void need(std::uint64_t n, const char* what) {
    if (n > bytes_.size() - pos_) throw FormatError(std::string("truncated ") + what, pos_);
  }

  std::string_view bytes_;
  std::uint64_t pos_ = 0;
};

// Extents beyond this are treated as corruption rather than allocated.
constexpr std::uint32_t kMaxRank = 8;

template <class T>
void collect(WeightFile& f, const ModelWeights<Tensor<T>>& w) {
  for_each_param(w, [&](const std::string& name, const Tensor<T>& t) { f.add(name, t); });
  for_each_buffer(w, [&](const std::string& name, const Tensor<T>& t) { f.add(name, t); });
}

}  // namespace

FormatError::FormatError(const std::string& what, std::uint64_t offset)
    : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}

const Entry* WeightFile::find(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

DType dtype_of(const AnyTensor& t) { return t.index() == 0 ? DType::f32 : DType::f64; }

const Shape& shape_of(const AnyTensor& t) {
  return std::visit([](const auto& v) -> const Shape& { return v.shape(); }, t);
}

std::string encode(const WeightFile& file) {
  std::string out = "EVIM";
  put_le(out, kFormatVersion);
  put_le(out, static_cast<std::uint32_t>(file.entries.size()));
  std::set<std::string_view> seen;
  for (const auto& e : file.entries) {
    if (e.name.empty()) throw ContractViolation("encode: empty tensor name");
    if (!seen.insert(e.name).second) throw ContractViolation("encode: duplicate tensor name '" + e.name + "'");
    const Shape& shape = shape_of(e.value);
    if (shape.empty()) throw ContractViolation("encode: tensor '" + e.name + "' is empty");
    put_le(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put_le(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_le(out, static_cast<std::uint64_t>(d));
    put_le(out, static_cast<std::uint32_t>(dtype_of(e.value)));
    std::visit([&](const auto& t) { put_payload(out, t); }, e.value);
  }
  return out;
}

WeightFile decode(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != "EVIM") throw FormatError("bad magic (expected \"EVIM\")", 0);
  const std::uint64_t version_at = r.pos();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kFormatVersion) throw FormatError("unsupported format version " + std::to_string(version), version_at);
  const auto count = r.le<std::uint32_t>("tensor count");
  WeightFile f;
  std::set<std::string, std::less<>> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t start = r.pos();
    const auto name_len = r.le<std::uint32_t>("name length");
    if (name_len == 0) throw FormatError("empty tensor name", start);
    std::string name(r.take(name_len, "name"));
    if (!seen.insert(name).second) throw FormatError("duplicate tensor name '" + name + "'", start);
    const std::uint64_t rank_at = r.pos();
    const auto rank = r.le<std::uint32_t>("rank");
    if (rank == 0 || rank > kMaxRank) throw FormatError("invalid rank " + std::to_string(rank), rank_at);
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t at = r.pos();
      const auto ext = r.le<std::uint64_t>("extent");
      if (ext == 0 || ext > (std::uint64_t(1) << 40)) throw FormatError("invalid extent " + std::to_string(ext), at);
      shape.push_back(static_cast<std::size_t>(ext));
    }
    const std::uint64_t dtype_at = r.pos();
    const auto tag = r.le<std::uint32_t>("dtype");
    if (tag == 0) {
      f.entries.push_back({std::move(name), r.payload<float>(std::move(shape), "payload"), start});
    } else if (tag == 1) {
      f.entries.push_back({std::move(name), r.payload<double>(std::move(shape), "payload"), start});
    } else {
      throw FormatError("unknown dtype tag " + std::to_string(tag), dtype_at);
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor", r.pos());
  return f;
}

void save(const std::filesystem::path& path, const WeightFile& file) {
  const std::string bytes = encode(file);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write to '" + path.string() + "' failed");
}

WeightFile load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode(ss.str());
}

template <class T>
WeightFile to_weight_file(const ModelWeights<Tensor<T>>& w) {
  WeightFile f;
  collect(f, w);
  return f;
}

template <class T>
void from_weight_file(const WeightFile& file, ModelWeights<Tensor<T>>& w) {
  std::size_t used = 0;
  auto fill = [&](const std::string& name, Tensor<T>& t) {
    const Entry* e = file.find(name);
    if (!e) throw FormatError("missing tensor '" + name + "'", 0);
    const auto* v = std::get_if<Tensor<T>>(&e->value);
    if (!v)
      throw FormatError("tensor '" + name + "' has dtype " + dtype_name(dtype_of(e->value)) + ", expected " +
                            dtype_name(evim::dtype_of<T>()),
                        e->offset);
    if (v->shape() != t.shape())
      throw FormatError("tensor '" + name + "' has shape " + to_string(v->shape()) + ", expected " +
                            to_string(t.shape()),
                        e->offset);
    t = *v;
    ++used;
  };
  for_each_param(w, fill);
  for_each_buffer(w, fill);
  if (used != file.entries.size()) {
    WeightFile known;
    collect(known, w);
    for (const auto& e : file.entries)
      if (!known.find(e.name)) throw FormatError("unexpected tensor '" + e.name + "'", e.offset);
  }
}

template WeightFile to_weight_file(const ModelWeights<Tensor<float>>&);
template WeightFile to_weight_file(const ModelWeights<Tensor<double>>&);
template void from_weight_file(const WeightFile&, ModelWeights<Tensor<float>>&);
template void from_weight_file(const WeightFile&, ModelWeights<Tensor<double>>&);

// Configs ------------------------------------------------------------------------------

DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw ConfigError("dtype must be \"f32\" or \"f64\", got \"" + std::string(s) + "\"");
}

namespace {

using nlohmann::json;

template <class U>
U get_as(const json& j, const char* key) {
  try {
    return j.get<U>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

std::array<std::size_t, 3> triple(const json& j, const char* key) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(std::string("config key '") + key + "' needs 3 integers");
  std::array<std::size_t, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!j[i].is_number_unsigned()) throw ConfigError(std::string("config key '") + key + "' needs 3 integers");
    out[i] = j[i].get<std::size_t>();
  }
  return out;
}

std::size_t count_value(const json& j, const char* key) {
  if (!j.is_number_unsigned()) throw ConfigError(std::string("config key '") + key + "' must be a non-negative integer");
  return j.get<std::size_t>();
}

}  // namespace

RunConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{"variant", "blocks", "channels", "states", "height",
                                           "width",   "num_classes", "msf",  "dtype",  "seed"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");

  RunConfig rc;
  if (j.contains("variant")) {
    const auto v = get_as<std::string>(j["variant"], "variant");
    if (v == "M1" || v == "M2" || v == "M3" || v == "M4") {
      rc.model = ModelConfig::preset(v);
    } else {
      rc.model.variant_name = v;
    }
  }
  if (j.contains("blocks")) rc.model.blocks = triple(j["blocks"], "blocks");
  if (j.contains("channels")) rc.model.channels = triple(j["channels"], "channels");
  if (j.contains("states")) rc.model.states = triple(j["states"], "states");
  if (j.contains("height")) rc.model.height = count_value(j["height"], "height");
  if (j.contains("width")) rc.model.width = count_value(j["width"], "width");
  if (j.contains("num_classes")) rc.model.num_classes = count_value(j["num_classes"], "num_classes");
  if (j.contains("msf")) {
    if (!j["msf"].is_boolean()) throw ConfigError("config key 'msf' must be a boolean");
    rc.model.msf = j["msf"].get<bool>();
  }
  if (j.contains("dtype")) rc.dtype = parse_dtype(get_as<std::string>(j["dtype"], "dtype"));
  if (j.contains("seed")) rc.seed = count_value(j["seed"], "seed");
  try {
    rc.model.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  return rc;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& rc) {
  const auto& m = rc.model;
  json j = {{"variant", m.variant_name},
            {"blocks", m.blocks},
            {"channels", m.channels},
            {"states", m.states},
            {"height", m.height},
            {"width", m.width},
            {"num_classes", m.num_classes},
            {"msf", m.msf},
            {"dtype", dtype_name(rc.dtype)},
            {"seed", rc.seed}};
  return j.dump(2) + "\n";
}

RunConfig resolve_model(std::string_view s) {
  if (s == "M1" || s == "M2" || s == "M3" || s == "M4") return {ModelConfig::preset(s), DType::f32, 0};
  if (s.empty()) throw ConfigError("empty model name");
  if (!std::filesystem::exists(std::filesystem::path(s)))
    throw ConfigError("model must be M1..M4 or a config path, got '" + std::string(s) + "'");
  return load_config(std::filesystem::path(s));
}

}  // namespace evim::io
