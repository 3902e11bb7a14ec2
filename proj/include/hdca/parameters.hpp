#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "hdca/tensor.hpp"

namespace hdca {

/// Named tensor owned by a model. Non-trainable entries hold buffers such as
/// batch-norm running statistics.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

/// Insertion-ordered registry. Entries have stable addresses.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> trainable();

  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> entries_;
};

}  // namespace hdca
