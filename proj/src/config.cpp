#include "hdca/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace hdca {

using nlohmann::json;

void RunConfig::validate() const {
  model.validate();
  train.validate();
}

namespace {

struct Field {
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
};

template <typename T, typename Access>
Field field(Access access) {
  return {[access](RunConfig& c, const json& v) { access(c) = v.get<T>(); },
          [access](const RunConfig& c) { return json(access(const_cast<RunConfig&>(c))); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["model.num_classes"] = field<int>([](RunConfig& c) -> int& { return c.model.num_classes; });
    t["model.ignore_index"] = field<int>([](RunConfig& c) -> int& { return c.model.ignore_index; });
    t["model.init_seed"] =
        field<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.model.init_seed; });
    t["model.dtype"] = {
        [](RunConfig& c, const json& v) {
          const auto s = v.get<std::string>();
          if (s == "float32") c.model.dtype = DType::Float32;
          else if (s == "float64") c.model.dtype = DType::Float64;
          else throw ConfigError("model.dtype must be \"float32\" or \"float64\", got \"" + s + "\"");
        },
        [](const RunConfig& c) { return json(to_string(c.model.dtype)); }};
    t["backbone.stem_channels"] = field<int>([](RunConfig& c) -> int& { return c.model.backbone.stem_channels; });
    t["backbone.stage_channels"] =
        field<std::vector<int>>([](RunConfig& c) -> std::vector<int>& { return c.model.backbone.stage_channels; });
    t["backbone.stage_dilations"] =
        field<std::vector<int>>([](RunConfig& c) -> std::vector<int>& { return c.model.backbone.stage_dilations; });
    t["backbone.out_channels"] = field<int>([](RunConfig& c) -> int& { return c.model.backbone.out_channels; });
    t["backbone.reduced_channels"] =
        field<int>([](RunConfig& c) -> int& { return c.model.backbone.reduced_channels; });
    t["hdca.levels"] =
        field<std::vector<int>>([](RunConfig& c) -> std::vector<int>& { return c.model.hdca.region_schedule; });
    t["hdca.context_channels"] = field<int>([](RunConfig& c) -> int& { return c.model.hdca.context_channels; });
    t["hdca.hidden_channels"] = field<int>([](RunConfig& c) -> int& { return c.model.hdca.hidden_channels; });
    t["hdca.region_epsilon"] = field<double>([](RunConfig& c) -> double& { return c.model.hdca.region_epsilon; });
    t["hdca.include_reduced_features"] =
        field<bool>([](RunConfig& c) -> bool& { return c.model.hdca.include_reduced_features; });
    t["train.batch_size"] = field<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    t["train.iterations"] = field<std::int64_t>([](RunConfig& c) -> std::int64_t& { return c.train.iterations; });
    t["train.base_lr"] = field<double>([](RunConfig& c) -> double& { return c.train.base_lr; });
    t["train.momentum"] = field<double>([](RunConfig& c) -> double& { return c.train.momentum; });
    t["train.weight_decay"] = field<double>([](RunConfig& c) -> double& { return c.train.weight_decay; });
    t["train.seed"] = field<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
    t["train.augment"] = field<bool>([](RunConfig& c) -> bool& { return c.train.augment; });
    t["train.crop"] = field<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.augmentation.crop; });
    t["train.min_scale"] = field<double>([](RunConfig& c) -> double& { return c.train.augmentation.min_scale; });
    t["train.max_scale"] = field<double>([](RunConfig& c) -> double& { return c.train.augmentation.max_scale; });
    t["train.flip_probability"] =
        field<double>([](RunConfig& c) -> double& { return c.train.augmentation.flip_probability; });
    t["train.checkpoint_every"] =
        field<std::int64_t>([](RunConfig& c) -> std::int64_t& { return c.train.checkpoint_every; });
    t["train.check_invariants"] = field<bool>([](RunConfig& c) -> bool& { return c.train.check_invariants; });
    return t;
  }();
  return table;
}

void flatten(const json& node, const std::string& prefix, std::map<std::string, json>& out) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten(*it, key, out);
    } else if (!out.emplace(key, *it).second) {
      throw ConfigError("config key \"" + key + "\" is given more than once");
    }
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, RunConfig base) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  std::map<std::string, json> flat;
  flatten(root, "", flat);
  const auto& table = fields();
  for (const auto& [key, value] : flat) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key \"" + key + "\"");
    try {
      it->second.set(base, value);
    } catch (const json::exception& e) {
      throw ConfigError("config key \"" + key + "\" has the wrong type: " + e.what());
    }
  }
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string dump_run_config(const RunConfig& config) {
  json out = json::object();
  for (const auto& [key, f] : fields()) out[key] = f.get(config);
  return out.dump(2);
}

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  std::vector<int> out;
  if (text.empty() || text == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) {
      throw ConfigError(flag + ": \"" + item + "\" in \"" + text + "\" is not an integer");
    }
    out.push_back(v);
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) {
      throw ConfigError(flag + ": \"" + item + "\" in \"" + text + "\" is not a number");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(flag + ": expected a comma-separated list of numbers");
  return out;
}

}  // namespace hdca
