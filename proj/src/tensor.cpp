#include "dex/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace dex {

int64_t shape_numel(const Shape &s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape &s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::make(Shape shape, std::vector<T> values, bool requires_grad) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    Tensor t;
    t.st_ = std::make_shared<Storage>();
    t.st_->values = std::move(values);
    t.st_->requires_grad = requires_grad;
    t.shape_ = std::move(shape);
    t.grad_enabled_ = requires_grad;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)), T(0));
    return make(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)), value);
    return make(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    return make(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return make({1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng &rng, T stddev, bool requires_grad) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto &x : v) x = static_cast<T>(rng.normal()) * stddev;
    return make(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
T *Tensor<T>::grad_data() {
    if (st_->grad.empty()) st_->grad.assign(st_->values.size(), T(0));
    return st_->grad.data();
}

template <typename T>
const std::vector<T> &Tensor<T>::grad() const {
    if (!st_ || st_->grad.empty()) throw ContractError("gradient not populated");
    return st_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (st_ && !st_->grad.empty()) st_->grad.assign(st_->values.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    Tensor t = *this;
    t.grad_enabled_ = false;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                         " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
    return make(shape_, st_->values, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() on tensor with " + std::to_string(numel()) + " elements");
    return st_->values[0];
}

template <typename T>
bool Tensor<T>::all_finite() const {
    for (const T &v : st_->values)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// ------------------------------------------------------------------ Tape ---

namespace {
template <typename T>
Tape<T> *&active_tape_slot() {
    thread_local Tape<T> *slot = nullptr;
    return slot;
}
}  // namespace

template <typename T>
Tape<T>::Tape() {
    prev_ = active_tape_slot<T>();
    active_tape_slot<T>() = this;
}

template <typename T>
Tape<T>::~Tape() {
    active_tape_slot<T>() = prev_;
}

template <typename T>
Tape<T> *Tape<T>::active() {
    return active_tape_slot<T>();
}

template <typename T>
void Tape<T>::record(std::vector<Tensor<T>> inputs, Tensor<T> output, std::function<void()> backward) {
    Node node;
    node.backward = std::move(backward);
    for (const auto &in : inputs)
        if (in.requires_grad()) node.touched.push_back(std::shared_ptr<detail::TensorStorage<T>>(
            in.st_));
    node.touched.push_back(output.st_);
    nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T> &loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward requires a scalar loss");

    std::unordered_set<detail::TensorStorage<T> *> seen;
    for (auto &node : nodes_)
        for (auto &st : node.touched)
            if (seen.insert(st.get()).second) st->grad.assign(st->values.size(), T(0));

    if (!loss.requires_grad()) {
        // Nothing on the tape feeds this loss; all grads stay zero.
        return;
    }
    Tensor<T> l = loss;
    l.grad_data()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

template <typename T>
bool recording(std::initializer_list<const Tensor<T> *> inputs) {
    if (Tape<T>::active() == nullptr) return false;
    for (const Tensor<T> *t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template bool recording<float>(std::initializer_list<const Tensor<float> *>);
template bool recording<double>(std::initializer_list<const Tensor<double> *>);

}  // namespace dex
