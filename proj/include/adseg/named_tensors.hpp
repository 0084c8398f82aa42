#pragma once

#include <string>
#include <utility>
#include <vector>

#include "adseg/tensor.hpp"

namespace adseg {

/// Insertion-ordered name -> tensor mapping. Parameters, gradients,
/// importances and optimizer moments all share this container so that
/// iteration order (and therefore summation order) is fixed.
class NamedTensors {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor t) {
    if (contains(name)) throw ConfigError("duplicate tensor name '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(t));
  }

  bool contains(const std::string& name) const { return index_of(name) != npos; }

  const Tensor& at(const std::string& name) const { return entries_[checked_index(name)].second; }
  Tensor& at(const std::string& name) { return entries_[checked_index(name)].second; }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  Entry& entry(std::size_t i) { return entries_.at(i); }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Same names in the same order with the same shapes.
  bool same_layout(const NamedTensors& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (entries_[i].first != other.entries_[i].first ||
          entries_[i].second.shape() != other.entries_[i].second.shape())
        return false;
    }
    return true;
  }

  NamedTensors zeros_like() const {
    NamedTensors out;
    for (const auto& [name, t] : entries_) out.add(name, Tensor(t.shape()));
    return out;
  }

  friend bool operator==(const NamedTensors& a, const NamedTensors& b) {
    return a.entries_ == b.entries_;
  }

 private:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].first == name) return i;
    return npos;
  }

  std::size_t checked_index(const std::string& name) const {
    const std::size_t i = index_of(name);
    if (i == npos) throw ConfigError("unknown tensor name '" + name + "'");
    return i;
  }

  std::vector<Entry> entries_;
};

inline void require_same_layout(const NamedTensors& a, const NamedTensors& b, const char* what) {
  if (!a.same_layout(b)) throw ShapeError(std::string(what) + ": parameter names/shapes do not match");
}

using Gradients = NamedTensors;

}  // namespace adseg
