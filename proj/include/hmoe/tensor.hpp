#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hmoe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

namespace detail {

struct Node
{
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until something accumulates into it
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads self.grad and accumulates into parents' grads.
    std::function<void(Node& self)> backward_fn;

    bool is_leaf() const noexcept { return parents.empty(); }
    std::vector<double>& ensure_grad();
};

} // namespace detail

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage. Operations in
/// ops.hpp record a define-by-run graph whenever any input requires a
/// gradient; calling backward() on a scalar result walks that graph once in
/// reverse topological order.
class Tensor
{
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Writing through this span bypasses the graph; use only on leaves.
    std::span<double> mutable_data();
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    std::uint64_t id() const;

    // Same values, no history.
    Tensor detach() const;
    Tensor clone() const;

    void backward() const;

    // Internal: used by op implementations.
    static Tensor from_node(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;
};

/// Executed-operation record reachable from a root, in topological order
/// (parents before children).
class Graph
{
public:
    explicit Graph(const Tensor& root);

    std::size_t size() const noexcept { return order_.size(); }
    const std::vector<detail::Node*>& order() const noexcept { return order_; }

private:
    std::vector<detail::Node*> order_;
};

// Populates gradients of every grad-requiring tensor reachable from `loss`.
// Leaf gradients accumulate across calls; interior gradients are reset.
void backward(const Tensor& loss);

namespace detail {

// Creates a result node; records parents only when one of them needs a grad.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward_fn);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn);

} // namespace detail

} // namespace hmoe
