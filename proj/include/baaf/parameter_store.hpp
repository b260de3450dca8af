#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "baaf/tensor.hpp"

namespace baaf {

template <typename T>
struct Parameter {
  Tensor<T> value;
  bool trainable = true;
};

/// Named parameters keyed by dot-separated path. Iteration is lexicographic by path.
template <typename T>
class ParameterStore {
 public:
  using Map = std::map<std::string, Parameter<T>>;

  void add(const std::string& path, Tensor<T> value, bool trainable = true) {
    auto [it, inserted] = entries_.emplace(path, Parameter<T>{std::move(value), trainable});
    if (!inserted) throw std::invalid_argument("duplicate parameter path '" + path + "'");
  }

  bool contains(const std::string& path) const { return entries_.count(path) != 0; }

  Parameter<T>& at(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + path + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + path + "'");
    return it->second;
  }

  Tensor<T>& value(const std::string& path) { return at(path).value; }
  const Tensor<T>& value(const std::string& path) const { return at(path).value; }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> paths() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [k, p] : entries_)
      if (p.trainable) n += p.value.size();
    return n;
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [k, p] : entries_) out.add(k, p.value.template cast<U>(), p.trainable);
    return out;
  }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    auto ia = a.entries_.begin();
    for (auto ib = b.entries_.begin(); ib != b.entries_.end(); ++ia, ++ib)
      if (ia->first != ib->first || ia->second.trainable != ib->second.trainable ||
          !(ia->second.value == ib->second.value))
        return false;
    return true;
  }

 private:
  Map entries_;
};

}  // namespace baaf
