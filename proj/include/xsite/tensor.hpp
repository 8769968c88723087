#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace xsite {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

// One recorded value in the computation graph. Leaves have no parents and no
// backward rule; op results keep their parents alive until the graph is dropped.
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  // Returns the grad buffer, allocating zeros on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major double tensor with optional reverse-mode history.
///
/// Copies share the underlying node, so a copied parameter handle sees the
/// same values and gradients. Use `clone()` for an independent deep copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  // Builds an op result. `backward` reads self.grad and accumulates into the
  // parents' grad buffers. If no input requires grad, history is not recorded.
  static Tensor from_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                        detail::BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates zeros if absent
  void zero_grad();

  /// Backpropagates from a scalar; gradients add into existing leaf grads.
  void backward() const;

  Tensor clone() const;
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Recorded primitive applications reachable from an output, in topological
/// order (inputs before the nodes that consume them).
class Tape {
 public:
  static Tape record(const Tensor& output);

  std::size_t size() const { return order_.size(); }
  std::span<detail::Node* const> nodes() const { return order_; }

  // Clears intermediate grads, seeds d(output)/d(output) = 1 and replays
  // backward rules in reverse order. Leaf grads accumulate across calls.
  void backward() const;

 private:
  Tensor output_;
  std::vector<detail::Node*> order_;
};

}  // namespace xsite
