#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "sbsg/tensor.hpp"

namespace sbsg::detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into parents' gradients.
  std::function<void(Node& self)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

// Builds an op result. The node only records parents and the backward
// closure when gradients are enabled and some parent requires them.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward);

}  // namespace sbsg::detail
