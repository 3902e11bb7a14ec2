#include "hdca/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>
#include <sstream>

#include "hdca/netpbm.hpp"

namespace hdca {

namespace {

constexpr char kMagic[4] = {'H', 'D', 'C', 'A'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void tensor(const NamedTensor& t) {
    if (t.name.size() > 0xffff) throw CheckpointError("tensor name too long: " + t.name.substr(0, 64));
    if (t.value.rank() > 0xff) throw CheckpointError("tensor rank too large: " + t.name);
    uint<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    bytes(t.name.data(), t.name.size());
    out.push_back(static_cast<std::uint8_t>(t.value.dtype()));
    out.push_back(static_cast<std::uint8_t>(t.value.rank()));
    for (auto d : t.value.shape()) uint<std::uint64_t>(d);
    dispatch(t.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      for (T v : t.value.data<T>()) uint<Bits>(std::bit_cast<Bits>(v));
    });
  }
  void block(const std::vector<NamedTensor>& ts) {
    uint<std::uint32_t>(static_cast<std::uint32_t>(ts.size()));
    for (const auto& t : ts) tensor(t);
  }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  bool done() const { return pos_ == b_.size(); }
  std::size_t position() const { return pos_; }

  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw CheckpointError("truncated checkpoint: need " + std::to_string(n) + " bytes for " + what +
                            " at offset " + std::to_string(pos_) + ", " +
                            std::to_string(b_.size() - pos_) + " available");
    }
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  NamedTensor tensor() {
    NamedTensor t;
    const auto len = uint<std::uint16_t>("name length");
    need(len, "tensor name");
    t.name.assign(reinterpret_cast<const char*>(b_.data() + pos_), len);
    pos_ += len;
    const auto code = uint<std::uint8_t>("dtype");
    if (code != 1 && code != 2) {
      throw CheckpointError("tensor " + t.name + ": unknown dtype code " + std::to_string(code));
    }
    const auto rank = uint<std::uint8_t>("rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = uint<std::uint64_t>("dimension");
      if (d > (std::uint64_t{1} << 32)) throw CheckpointError("tensor " + t.name + ": implausible dimension");
      numel *= d;
    }
    const auto dtype = static_cast<DType>(code);
    const std::size_t width = dtype == DType::Float32 ? 4 : 8;
    if (numel > (b_.size() - pos_) / width) need(numel * width, "tensor data");
    t.value = Tensor(shape, dtype);
    dispatch(dtype, [&](auto tag) {
      using T = decltype(tag);
      using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      for (T& v : t.value.data<T>()) v = std::bit_cast<T>(uint<Bits>("tensor data"));
    });
    return t;
  }
  std::vector<NamedTensor> block() {
    const auto count = uint<std::uint32_t>("tensor count");
    std::vector<NamedTensor> ts;
    for (std::uint32_t i = 0; i < count; ++i) ts.push_back(tensor());
    return ts;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

NamedTensor meta_scalar(std::string name, double v) {
  return {std::move(name), Tensor::scalar(v, DType::Float64)};
}

NamedTensor meta_vector(std::string name, const std::vector<int>& v) {
  Tensor t({v.size()}, DType::Float64);
  for (std::size_t i = 0; i < v.size(); ++i) t.set(i, v[i]);
  return {std::move(name), std::move(t)};
}

class MetaLookup {
 public:
  explicit MetaLookup(const CheckpointData& data) {
    for (const auto& t : data.tensors) {
      if (t.name.rfind("meta.", 0) == 0) map_.emplace(t.name, &t.value);
    }
  }
  const Tensor& get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw CheckpointError("checkpoint lacks config tensor " + name);
    return *it->second;
  }
  double scalar(const std::string& name) const {
    const Tensor& t = get(name);
    if (t.numel() != 1) throw CheckpointError("config tensor " + name + " is not a scalar");
    return t.at(0);
  }
  int integer(const std::string& name) const { return static_cast<int>(scalar(name)); }
  std::vector<int> vector(const std::string& name) const {
    const Tensor& t = get(name);
    std::vector<int> v(t.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int>(t.at(i));
    return v;
  }

 private:
  std::map<std::string, const Tensor*> map_;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data) {
  Writer w;
  w.bytes(kMagic, 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.block(data.tensors);
  if (data.optimizer) w.block(*data.optimizer);
  return std::move(w.out);
}

CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw BadMagicError("bad magic: not an HDCA checkpoint");
  }
  Reader r(bytes.subspan(4));
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw BadVersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointData data;
  data.tensors = r.block();
  if (!r.done()) {
    data.optimizer = r.block();
    for (const auto& t : *data.optimizer) {
      if (t.name.rfind("opt.", 0) != 0) throw CheckpointError("optimizer section holds non-opt tensor " + t.name);
    }
    if (!r.done()) {
      throw CheckpointError("trailing bytes after optimizer section at offset " +
                            std::to_string(r.position() + 4));
    }
  }
  return data;
}

CheckpointData snapshot(const SegModel& model, const OptimizerState* optimizer) {
  const ModelConfig& c = model.config();
  CheckpointData data;
  auto& t = data.tensors;
  t.push_back(meta_scalar("meta.num_classes", c.num_classes));
  t.push_back(meta_scalar("meta.ignore_index", c.ignore_index));
  t.push_back(meta_scalar("meta.dtype", static_cast<double>(static_cast<int>(c.dtype))));
  t.push_back({"meta.init_seed", Tensor::from({2}, {static_cast<double>(c.init_seed >> 32),
                                                   static_cast<double>(c.init_seed & 0xffffffffu)},
                                              DType::Float64)});
  t.push_back(meta_scalar("meta.backbone.stem_channels", c.backbone.stem_channels));
  t.push_back(meta_vector("meta.backbone.stage_channels", c.backbone.stage_channels));
  t.push_back(meta_vector("meta.backbone.stage_dilations", c.backbone.stage_dilations));
  t.push_back(meta_scalar("meta.backbone.out_channels", c.backbone.out_channels));
  t.push_back(meta_scalar("meta.backbone.reduced_channels", c.backbone.reduced_channels));
  // Zero-length tensors are not representable, so the level count is stored
  // separately and the schedule only when nonempty.
  t.push_back(meta_scalar("meta.hdca.levels", static_cast<double>(c.hdca.region_schedule.size())));
  if (!c.hdca.region_schedule.empty()) {
    t.push_back(meta_vector("meta.hdca.region_schedule", c.hdca.region_schedule));
  }
  t.push_back(meta_scalar("meta.hdca.context_channels", c.hdca.context_channels));
  t.push_back(meta_scalar("meta.hdca.hidden_channels", c.hdca.hidden_channels));
  t.push_back(meta_scalar("meta.hdca.region_epsilon", c.hdca.region_epsilon));
  t.push_back(meta_scalar("meta.hdca.include_reduced_features", c.hdca.include_reduced_features ? 1 : 0));
  for (const Parameter* p : model.parameters().all()) t.push_back({p->name, p->value});

  if (optimizer) {
    std::vector<NamedTensor> opt;
    opt.push_back(meta_scalar("opt.iter", static_cast<double>(optimizer->iter)));
    opt.push_back(meta_scalar("opt.iter_max", static_cast<double>(optimizer->iter_max)));
    opt.push_back(meta_scalar("opt.base_lr", optimizer->base_lr));
    opt.push_back(meta_scalar("opt.momentum", optimizer->momentum));
    opt.push_back(meta_scalar("opt.weight_decay", optimizer->weight_decay));
    for (const auto& [name, v] : optimizer->velocity) opt.push_back({"opt.velocity." + name, v});
    data.optimizer = std::move(opt);
  }
  return data;
}

ModelConfig config_from_checkpoint(const CheckpointData& data) {
  const MetaLookup m(data);
  ModelConfig c;
  c.num_classes = m.integer("meta.num_classes");
  c.ignore_index = m.integer("meta.ignore_index");
  const int dtype = m.integer("meta.dtype");
  if (dtype != 1 && dtype != 2) throw CheckpointError("meta.dtype holds unknown code " + std::to_string(dtype));
  c.dtype = static_cast<DType>(dtype);
  const Tensor& seed = m.get("meta.init_seed");
  if (seed.numel() != 2) throw CheckpointError("meta.init_seed must hold two words");
  c.init_seed = (static_cast<std::uint64_t>(seed.at(0)) << 32) | static_cast<std::uint64_t>(seed.at(1));
  c.backbone.stem_channels = m.integer("meta.backbone.stem_channels");
  c.backbone.stage_channels = m.vector("meta.backbone.stage_channels");
  c.backbone.stage_dilations = m.vector("meta.backbone.stage_dilations");
  c.backbone.out_channels = m.integer("meta.backbone.out_channels");
  c.backbone.reduced_channels = m.integer("meta.backbone.reduced_channels");
  if (m.integer("meta.hdca.levels") > 0) c.hdca.region_schedule = m.vector("meta.hdca.region_schedule");
  else c.hdca.region_schedule.clear();
  if (c.hdca.region_schedule.size() != static_cast<std::size_t>(m.integer("meta.hdca.levels"))) {
    throw CheckpointError("meta.hdca.region_schedule disagrees with meta.hdca.levels");
  }
  c.hdca.context_channels = m.integer("meta.hdca.context_channels");
  c.hdca.hidden_channels = m.integer("meta.hdca.hidden_channels");
  c.hdca.region_epsilon = m.scalar("meta.hdca.region_epsilon");
  c.hdca.include_reduced_features = m.scalar("meta.hdca.include_reduced_features") != 0.0;
  c.validate();
  return c;
}

void restore_parameters(SegModel& model, const CheckpointData& data) {
  std::map<std::string, const Tensor*> stored;
  for (const auto& t : data.tensors) {
    if (t.name.rfind("meta.", 0) != 0) stored.emplace(t.name, &t.value);
  }
  std::ostringstream diff;
  int problems = 0;
  for (const Parameter* p : model.parameters().all()) {
    auto it = stored.find(p->name);
    if (it == stored.end()) {
      diff << "\n  missing from checkpoint: " << p->name << " " << to_string(p->value.shape());
      ++problems;
    } else if (it->second->shape() != p->value.shape() || it->second->dtype() != p->value.dtype()) {
      diff << "\n  mismatched: " << p->name << " model " << to_string(p->value.shape()) << " "
           << to_string(p->value.dtype()) << ", checkpoint " << to_string(it->second->shape()) << " "
           << to_string(it->second->dtype());
      ++problems;
    }
  }
  for (const auto& [name, t] : stored) {
    if (!model.parameters().find(name)) {
      diff << "\n  unexpected in checkpoint: " << name << " " << to_string(t->shape());
      ++problems;
    }
  }
  if (problems > 0) {
    throw CheckpointMismatchError("checkpoint does not match model (" + std::to_string(problems) +
                                  " differences):" + diff.str());
  }
  for (Parameter* p : model.parameters().all()) p->value = *stored.at(p->name);
}

OptimizerState restore_optimizer(const CheckpointData& data) {
  if (!data.optimizer) throw CheckpointError("checkpoint has no optimizer state");
  std::map<std::string, const Tensor*> m;
  for (const auto& t : *data.optimizer) m.emplace(t.name, &t.value);
  auto scalar = [&](const std::string& name) {
    auto it = m.find(name);
    if (it == m.end() || it->second->numel() != 1) throw CheckpointError("optimizer state lacks " + name);
    return it->second->at(0);
  };
  OptimizerState s;
  s.iter = static_cast<std::int64_t>(scalar("opt.iter"));
  s.iter_max = static_cast<std::int64_t>(scalar("opt.iter_max"));
  s.base_lr = scalar("opt.base_lr");
  s.momentum = scalar("opt.momentum");
  s.weight_decay = scalar("opt.weight_decay");
  const std::string prefix = "opt.velocity.";
  for (const auto& t : *data.optimizer) {
    if (t.name.rfind(prefix, 0) == 0) s.velocity.emplace(t.name.substr(prefix.size()), t.value);
  }
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const SegModel& model, const OptimizerState* optimizer) {
  write_file(path, encode_checkpoint(snapshot(model, optimizer)));
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const BadMagicError& e) {
    throw BadMagicError(path.string() + ": " + e.what());
  } catch (const BadVersionError& e) {
    throw BadVersionError(path.string() + ": " + e.what());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

LoadedModel load_model(const std::filesystem::path& path) {
  const CheckpointData data = read_checkpoint(path);
  LoadedModel out;
  out.model = std::make_unique<SegModel>(config_from_checkpoint(data));
  restore_parameters(*out.model, data);
  if (data.optimizer) out.optimizer = restore_optimizer(data);
  return out;
}

}  // namespace hdca
