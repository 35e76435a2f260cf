#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dex/errors.hpp"
#include "dex/rng.hpp"

namespace dex {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape &s);
std::string shape_str(const Shape &s);

template <typename T>
class Tape;

namespace detail {
template <typename T>
struct TensorStorage {
    std::vector<T> values;
    std::vector<T> grad;         // empty until first touched in a backward pass
    bool requires_grad = false;  // participates in gradient computation
};
}  // namespace detail

// Dense row-major array with value semantics on the handle and shared
// storage underneath. reshape() aliases the storage; detach() shares values
// but cuts the gradient path. Gradients live next to the values and are
// filled in by Tape::backward.
template <typename T>
class Tensor {
public:
    using Storage = detail::TensorStorage<T>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);
    // Gaussian init, values drawn row-major in index order.
    static Tensor randn(Shape shape, Rng &rng, T stddev, bool requires_grad = false);

    bool defined() const { return st_ != nullptr; }
    const Shape &shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return shape_numel(shape_); }

    T *data() { return st_->values.data(); }
    const T *data() const { return st_->values.data(); }
    std::vector<T> &values() { return st_->values; }
    const std::vector<T> &values() const { return st_->values; }

    bool requires_grad() const { return grad_enabled_ && st_ && st_->requires_grad; }
    void set_requires_grad(bool rg) {
        st_->requires_grad = rg;
        grad_enabled_ = rg;
    }

    // Lazily allocates a zero-filled gradient buffer.
    T *grad_data();
    const std::vector<T> &grad() const;
    bool has_grad() const { return st_ && !st_->grad.empty(); }
    void zero_grad();

    Tensor detach() const;
    Tensor reshape(Shape new_shape) const;
    Tensor clone(bool requires_grad = false) const;

    T item() const;

    bool all_finite() const;
    bool same_storage(const Tensor &other) const { return st_ == other.st_; }
    Storage *storage() const { return st_.get(); }

private:
    std::shared_ptr<Storage> st_;
    Shape shape_;
    bool grad_enabled_ = false;

    static Tensor make(Shape shape, std::vector<T> values, bool requires_grad);
    friend class Tape<T>;
};

// Gradient tape. Constructing one makes it the active recording context for
// the current thread (nesting saves/restores the previous one); ops record a
// node per call while a tape is active and any input requires gradients.
// backward() zeroes the gradients of every tensor the tape touched, seeds the
// scalar loss with 1 and replays the nodes in reverse; each node runs exactly
// once. Single writer: one tape, one thread, one model replica.
template <typename T>
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    static Tape *active();

    void record(std::vector<Tensor<T>> inputs, Tensor<T> output, std::function<void()> backward);
    void backward(const Tensor<T> &loss);
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::function<void()> backward;
        std::vector<std::shared_ptr<detail::TensorStorage<T>>> touched;
    };
    std::vector<Node> nodes_;
    Tape *prev_ = nullptr;
};

// True when a tape is active and any input requires grad; the op then must
// record a node and mark its output.
template <typename T>
bool recording(std::initializer_list<const Tensor<T> *> inputs);

}  // namespace dex
