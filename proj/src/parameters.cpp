#include "hdca/parameters.hpp"

#include <stdexcept>

namespace hdca {

Parameter& ParameterSet::add(std::string name, Tensor value, bool trainable) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->grad = Tensor::zeros(value.shape(), value.dtype());
  p->value = std::move(value);
  p->name = std::move(name);
  p->trainable = trainable;
  entries_.push_back(std::move(p));
  return *entries_.back();
}

Parameter* ParameterSet::find(std::string_view name) {
  for (auto& p : entries_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParameterSet::find(std::string_view name) const {
  for (const auto& p : entries_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Parameter& ParameterSet::get(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw std::out_of_range("no parameter named " + std::string(name));
}

const Parameter& ParameterSet::get(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw std::out_of_range("no parameter named " + std::string(name));
}

std::vector<Parameter*> ParameterSet::all() {
  std::vector<Parameter*> out;
  out.reserve(entries_.size());
  for (auto& p : entries_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterSet::all() const {
  std::vector<const Parameter*> out;
  out.reserve(entries_.size());
  for (const auto& p : entries_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterSet::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : entries_) {
    if (p->trainable) out.push_back(p.get());
  }
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& p : entries_) p->grad.fill(0.0);
}

}  // namespace hdca
