#include "hmoe/tensor.hpp"

#include "hmoe/error.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>

namespace hmoe {

namespace {

std::atomic<std::uint64_t> next_node_id{1};

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> data, bool requires_grad)
{
    if (shape_numel(shape) != data.size())
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
    return node;
}

} // namespace

std::size_t shape_numel(const Shape& shape) noexcept
{
    std::size_t n = 1;
    for (auto d : shape)
        n *= d;
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<double>& detail::Node::ensure_grad()
{
    if (grad.empty())
        grad.assign(data.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad)
{
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad)
{
    const auto n = shape_numel(shape);
    return Tensor(new_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad)
{
    return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad)
{
    return Tensor(new_node({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const
{
    if (!node_)
        throw ContractError("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const
{
    const auto& s = shape();
    if (axis >= s.size())
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const
{
    shape();
    return node_->data;
}

std::span<double> Tensor::mutable_data()
{
    shape();
    return node_->data;
}

double Tensor::item() const
{
    if (numel() != 1)
        throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const
{
    const auto& s = shape();
    if (index.size() != s.size())
        throw DimensionError("index rank does not match shape " + shape_str(s));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= s[axis])
            throw IndexError("index " + std::to_string(i) + " out of range on axis " + std::to_string(axis));
        flat = flat * s[axis] + i;
        ++axis;
    }
    return node_->data[flat];
}

bool Tensor::requires_grad() const
{
    shape();
    return node_->requires_grad;
}

void Tensor::set_requires_grad(bool on)
{
    shape();
    node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const
{
    shape();
    return node_->grad;
}

std::span<double> Tensor::mutable_grad()
{
    shape();
    return node_->ensure_grad();
}

void Tensor::zero_grad()
{
    if (node_)
        node_->grad.clear();
}

std::uint64_t Tensor::id() const
{
    shape();
    return node_->id;
}

Tensor Tensor::detach() const { return Tensor(new_node(shape(), node_->data, false)); }

Tensor Tensor::clone() const { return Tensor(new_node(shape(), node_->data, node_->requires_grad)); }

void Tensor::backward() const { hmoe::backward(*this); }

Graph::Graph(const Tensor& root)
{
    // Iterative post-order DFS over grad-requiring nodes.
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    detail::Node* r = root.node().get();
    if (!r || !r->requires_grad)
        return;
    stack.emplace_back(r, 0);
    visited.insert(r);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second)
                stack.emplace_back(p, 0);
        } else {
            order_.push_back(node);
            stack.pop_back();
        }
    }
}

void backward(const Tensor& loss)
{
    if (!loss.defined())
        throw ContractError("backward on undefined tensor");
    if (loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    Graph graph(loss);
    if (graph.size() == 0)
        return;
    for (auto* node : graph.order())
        if (!node->is_leaf())
            node->grad.assign(node->data.size(), 0.0);
    graph.order().back()->ensure_grad()[0] += 1.0;
    const auto& order = graph.order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward_fn)
            node->backward_fn(*node);
    }
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn)
{
    bool needs_grad = false;
    for (const auto& t : inputs)
        needs_grad = needs_grad || t.requires_grad();
    auto node = new_node(std::move(shape), std::move(data), needs_grad);
    if (needs_grad) {
        node->parents.reserve(inputs.size());
        for (const auto& t : inputs)
            node->parents.push_back(t.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor::from_node(std::move(node));
}

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward_fn)
{
    return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(backward_fn));
}

} // namespace detail

} // namespace hmoe
