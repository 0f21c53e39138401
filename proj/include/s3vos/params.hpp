#pragma once

#include <string>
#include <vector>

#include "s3vos/autograd.hpp"

namespace s3vos {

struct NamedParam {
  std::string name;
  Var var;
  bool trainable = true;
};

/// Flat, ordered list of every parameter of a model. Order is the order of
/// registration and is what the checkpoint manifest records.
class ParamList {
 public:
  void add(std::string name, const Var& v, bool trainable = true) {
    items_.push_back({std::move(name), v, trainable});
  }
  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<NamedParam>& items() { return items_; }
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : items_)
      if (p.trainable) n += p.var.value().size();
    return n;
  }
  void zero_grad() {
    for (auto& p : items_) p.var.zero_grad();
  }

 private:
  std::vector<NamedParam> items_;
};

}  // namespace s3vos
