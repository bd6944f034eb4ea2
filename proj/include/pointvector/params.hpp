#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "pointvector/tensor.hpp"

namespace pointvector {

using ParamId = std::size_t;

/// Named tensors owned by a model. Trainable entries receive gradients and
/// count toward param_count; buffers (running statistics) are only saved.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };

  ParamId add(std::string name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    value.requires_grad = trainable;
    entries_.push_back(Entry{std::move(name), std::move(value), trainable});
    return entries_.size() - 1;
  }

  std::size_t size() const { return entries_.size(); }
  Entry& entry(ParamId id) { return entries_.at(id); }
  const Entry& entry(ParamId id) const { return entries_.at(id); }
  Tensor<T>& value(ParamId id) { return entries_.at(id).value; }
  const Tensor<T>& value(ParamId id) const { return entries_.at(id).value; }
  const std::string& name(ParamId id) const { return entries_.at(id).name; }

  std::optional<ParamId> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  ParamId id(const std::string& name) const {
    auto found = find(name);
    if (!found) throw ConfigError("no parameter named " + name);
    return *found;
  }

  /// Number of learnable scalars.
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.value.numel();
    return n;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, ParamId> index_;
};

/// Uniform in ±sqrt(1/fan_in).
template <class T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace pointvector
