#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "nre/tensor.hpp"

namespace nre::detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

std::uint64_t next_node_id();

}  // namespace nre::detail
