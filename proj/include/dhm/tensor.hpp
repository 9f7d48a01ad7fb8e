#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dhm/errors.hpp"

namespace dhm {

inline std::int64_t numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor. Copies are shallow: handles share the underlying
// storage (data, grad, requires_grad flag), which is what lets reshape views
// and tape closures alias the same buffers.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, T fill = T(0))
        : shape_(std::move(shape)), st_(std::make_shared<Storage>()) {
        st_->data.assign(static_cast<std::size_t>(numel(shape_)), fill);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor from(std::vector<int> shape, std::vector<T> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        if (static_cast<std::int64_t>(values.size()) != numel(t.shape_))
            throw ShapeError("value count does not match shape " + shape_str(t.shape_));
        t.st_ = std::make_shared<Storage>();
        t.st_->data = std::move(values);
        return t;
    }

    bool defined() const { return static_cast<bool>(st_); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return st_ ? st_->data.size() : 0; }

    T* data() { return st_->data.data(); }
    const T* data() const { return st_->data.data(); }
    std::vector<T>& values() { return st_->data; }
    const std::vector<T>& values() const { return st_->data; }

    bool requires_grad() const { return st_ && st_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        st_->requires_grad = rg;
        if (rg)
            ensure_grad();
        else
            st_->grad.clear();
        return *this;
    }

    bool has_grad() const { return st_ && !st_->grad.empty(); }
    T* grad() {
        ensure_grad();
        return st_->grad.data();
    }
    const std::vector<T>& grad_values() const { return st_->grad; }
    void ensure_grad() {
        if (st_->grad.size() != st_->data.size()) st_->grad.assign(st_->data.size(), T(0));
    }
    void zero_grad() {
        if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
    }

    // View with a new shape over the same storage (same element count).
    Tensor reshaped(std::vector<int> shape) const {
        if (numel(shape) != static_cast<std::int64_t>(size()))
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.st_ = std::make_shared<Storage>(*st_);
        return t;
    }

    T item() const {
        if (size() != 1) throw ShapeError("item() on tensor of size " + std::to_string(size()));
        return st_->data[0];
    }

    T& at(std::initializer_list<int> idx) { return st_->data[offset(idx)]; }
    T at(std::initializer_list<int> idx) const { return st_->data[offset(idx)]; }

    bool all_finite() const {
        for (T v : st_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_storage(const Tensor& other) const { return st_ == other.st_; }

private:
    struct Storage {
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
    };

    std::size_t offset(std::initializer_list<int> idx) const {
        if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
        std::size_t off = 0;
        auto it = idx.begin();
        for (std::size_t i = 0; i < shape_.size(); ++i, ++it) off = off * shape_[i] + *it;
        return off;
    }

    std::vector<int> shape_;
    std::shared_ptr<Storage> st_;
};

// A learnable (or frozen) tensor. The optimizer must never touch a parameter
// with trainable == false; LBC fixed kernels rely on this.
template <class T>
struct Parameter {
    Tensor<T> value;
    bool trainable = true;
    std::string name;

    Parameter() = default;
    Parameter(Tensor<T> v, bool train, std::string n = {})
        : value(std::move(v)), trainable(train), name(std::move(n)) {
        value.set_requires_grad(true);
    }
};

// Reverse-mode tape: an ordered list of backward closures. Ops append while a
// tape is active; backward() replays them in reverse. One tape per logical
// training task.
template <class T>
class Tape {
public:
    static Tape*& current() {
        static thread_local Tape* cur = nullptr;
        return cur;
    }

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(current()) { current() = &t; }
        ~Scope() { current() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return ops_.size(); }

    // Seed d(loss)/d(loss) = 1 and propagate.
    void backward(Tensor<T>& loss) {
        if (loss.size() != 1) throw ShapeError("backward() expects a scalar loss");
        loss.grad()[0] = T(1);
        replay();
    }

    // Propagate from grads the caller has already seeded (closed-form dL/ds).
    void replay() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void clear() { ops_.clear(); }

private:
    std::vector<std::function<void()>> ops_;
};

}  // namespace dhm
