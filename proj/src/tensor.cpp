#include "emi/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace emi {

namespace {

std::uint64_t next_id()
{
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

thread_local GradTape* active_tape = nullptr;

} // namespace

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>())
{
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
    impl_->id = next_id();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value)
{
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::eye(std::size_t n)
{
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        d[i * n + i] = 1.0;
    }
    return Tensor({n, n}, std::move(d));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows)
{
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw DimensionError("ragged matrix literal");
        }
        d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(d));
}

Tensor Tensor::row(std::vector<double> values)
{
    auto n = values.size();
    return Tensor({1, n}, std::move(values));
}

const Shape& Tensor::shape() const
{
    static const Shape empty{0};
    return impl_ ? impl_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const
{
    if (axis >= rank()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    }
    return shape()[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::rows() const
{
    if (rank() != 2) {
        throw DimensionError("expected a matrix, got " + shape_str(shape()));
    }
    return shape()[0];
}

std::size_t Tensor::cols() const
{
    if (rank() != 2) {
        throw DimensionError("expected a matrix, got " + shape_str(shape()));
    }
    return shape()[1];
}

std::span<const double> Tensor::data() const&
{
    if (!impl_) {
        return {};
    }
    return impl_->data;
}

std::span<double> Tensor::mutable_data()
{
    if (!impl_) {
        return {};
    }
    return impl_->data;
}

const std::vector<double>& Tensor::values() const&
{
    static const std::vector<double> empty;
    return impl_ ? impl_->data : empty;
}

std::vector<double> Tensor::values() const&&
{
    return impl_ ? impl_->data : std::vector<double>{};
}

double Tensor::item() const
{
    if (numel() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const
{
    if (r >= rows() || c >= cols()) {
        throw DimensionError("index out of range");
    }
    return impl_->data[r * cols() + c];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag)
{
    if (impl_) {
        impl_->requires_grad = flag;
    }
    return *this;
}

std::uint64_t Tensor::id() const { return impl_ ? impl_->id : 0; }

Tensor Tensor::detach() const
{
    if (!impl_) {
        return {};
    }
    return Tensor(impl_->shape, impl_->data, false);
}

Tensor Tensor::clone() const
{
    if (!impl_) {
        return {};
    }
    return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

bool bit_equal(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape() || a.numel() != b.numel()) {
        return false;
    }
    return a.numel() == 0 ||
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

// GradTape ---------------------------------------------------------------

GradTape::Recording::Recording(GradTape& tape) : previous_(active_tape) { active_tape = &tape; }

GradTape::Recording::~Recording() { active_tape = previous_; }

GradTape* GradTape::active() { return active_tape; }

void GradTape::record(const Tensor& output, std::vector<Tensor> inputs, BackwardFn backward)
{
    if (consumed_) {
        throw Error("recording onto a consumed tape; call reset() first");
    }
    nodes_.push_back(Node{output, std::move(inputs), std::move(backward)});
}

void GradTape::backward(const Tensor& loss)
{
    if (consumed_) {
        throw Error("backward() already ran on this tape; call reset() before reuse");
    }
    if (loss.numel() != 1) {
        throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                           [&](const Node& n) { return n.output.id() == loss.id(); });
    if (it == nodes_.rend()) {
        throw Error("backward() on a loss that was not recorded on this tape (detached loss)");
    }
    consumed_ = true;
    grads_.clear();
    grads_[loss.id()] = {1.0};

    std::size_t start = static_cast<std::size_t>(std::distance(it, nodes_.rend())) - 1;
    for (std::size_t i = start + 1; i-- > 0;) {
        Node& node = nodes_[i];
        auto g = grads_.find(node.output.id());
        if (g == grads_.end()) {
            continue;
        }
        std::vector<double> grad_out = std::move(g->second);
        grads_.erase(g);
        node.backward(grad_out, *this);
    }
    // Intermediate closures hold references to activations; drop them now.
    nodes_.clear();
}

bool GradTape::has_grad(const Tensor& t) const { return grads_.count(t.id()) != 0; }

Tensor GradTape::grad(const Tensor& t) const
{
    auto it = grads_.find(t.id());
    if (it == grads_.end()) {
        throw Error("no gradient recorded for tensor " + std::to_string(t.id()));
    }
    return Tensor(t.shape(), it->second);
}

void GradTape::accumulate(const Tensor& t, std::vector<double> g)
{
    if (!t.requires_grad()) {
        return;
    }
    auto [it, inserted] = grads_.try_emplace(t.id());
    if (inserted) {
        it->second = std::move(g);
        return;
    }
    auto& acc = it->second;
    for (std::size_t i = 0; i < acc.size(); ++i) {
        acc[i] += g[i];
    }
}

bool GradTape::topologically_ordered() const
{
    std::unordered_set<std::uint64_t> produced;
    std::unordered_set<std::uint64_t> outputs;
    for (const auto& n : nodes_) {
        outputs.insert(n.output.id());
    }
    for (const auto& n : nodes_) {
        for (const auto& in : n.inputs) {
            if (outputs.count(in.id()) && !produced.count(in.id())) {
                return false;
            }
        }
        produced.insert(n.output.id());
    }
    return true;
}

void GradTape::reset()
{
    nodes_.clear();
    grads_.clear();
    consumed_ = false;
}

} // namespace emi
