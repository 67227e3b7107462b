#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace emi {

using Shape = std::vector<std::size_t>;

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A scalar or structural argument is outside its valid range.
class ParameterError : public Error {
public:
    using Error::Error;
};

/// A computation produced a non-finite value.
class NumericError : public Error {
public:
    using Error::Error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::uint64_t id = 0;
};
} // namespace detail

/// Dense row-major tensor of doubles.
///
/// A Tensor is a shared handle: copies alias the same storage. Parameters are
/// updated in place through mutable_data(); everything else treats values as
/// immutable once created.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor eye(std::size_t n);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor row(std::vector<double> values);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    /// Rows and columns of a rank-2 tensor.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const&;
    std::span<const double> data() const&& = delete;
    std::span<double> mutable_data();
    const std::vector<double>& values() const&;
    /// Temporaries hand out a copy so range-for over a fresh result is safe.
    std::vector<double> values() const&&;

    double item() const;
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    std::uint64_t id() const;

    /// Deep copy with requires_grad cleared.
    Tensor detach() const;
    /// Deep copy preserving requires_grad (fresh id).
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Bitwise equality of shape and values.
bool bit_equal(const Tensor& a, const Tensor& b);

/// Records differentiable operations and runs reverse-mode accumulation.
///
/// Operations record onto the tape that is active on the calling thread (see
/// Recording). Only operations with at least one requires_grad input are
/// recorded, so tensors that never require gradients get no gradient buffer.
class GradTape {
public:
    using BackwardFn = std::function<void(std::span<const double> grad_out, GradTape& tape)>;

    /// Makes a tape the active recording target for the current thread until destroyed.
    class Recording {
    public:
        explicit Recording(GradTape& tape);
        ~Recording();
        Recording(const Recording&) = delete;
        Recording& operator=(const Recording&) = delete;

    private:
        GradTape* previous_;
    };

    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    static GradTape* active();

    void record(const Tensor& output, std::vector<Tensor> inputs, BackwardFn backward);

    /// Propagates d(loss)/d(x) to every requires_grad tensor reachable from loss.
    /// The loss must be a single-element tensor produced on this tape. A tape can
    /// be consumed once; call reset() before reusing it.
    void backward(const Tensor& loss);

    bool has_grad(const Tensor& t) const;
    Tensor grad(const Tensor& t) const;

    /// Adds g into the gradient of t. No-op when t does not require grad.
    void accumulate(const Tensor& t, std::vector<double> g);

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }
    /// Every recorded input is either a leaf or an output of an earlier node.
    bool topologically_ordered() const;

    void reset();

private:
    struct Node {
        Tensor output;
        std::vector<Tensor> inputs;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::unordered_map<std::uint64_t, std::vector<double>> grads_;
    bool consumed_ = false;
};

} // namespace emi
