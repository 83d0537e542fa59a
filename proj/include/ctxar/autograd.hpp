#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ctxar/tensor.hpp"

namespace ctxar {

// A named trainable tensor with its gradient accumulator.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool decay = false;  // receives decoupled weight decay
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool wd = false)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(wd) {}

    void zero_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        grad.fill(T{0});
    }
};

template <typename T>
class Graph;

// Handle to a node of a Graph.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph<T>& graph() const { return *graph_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    bool valid() const noexcept { return graph_ != nullptr; }

private:
    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

// Tape of operations in creation order. Creation order is a topological order,
// so backward is a single reverse sweep.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    explicit Graph(bool record_grad = true) : record_(record_grad) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<T> constant(Tensor<T> value);
    Var<T> param(Parameter<T>& p);

    // Appends an op result. `fn` runs during backward with this node's id and
    // must add its contribution into the inputs' gradients.
    Var<T> emit(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn);
    Var<T> emit(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
        return emit(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                    std::move(fn));
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    Tensor<T>& grad(std::size_t id);
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Seeds d(root)/d(root) = 1 and propagates to every parameter leaf.
    // Parameter gradients are accumulated (not overwritten).
    void backward(Var<T> root);

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
        bool needs_grad = false;
    };

    std::deque<Node> nodes_;
    bool record_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return graph_->value(id_);
}

// ---- differentiable ops -----------------------------------------------------

// [M,K]x[K,N], [B,M,K]x[K,N], [M,K]x[B,K,N] or [B,M,K]x[B,K,N].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> a, T s);

template <typename T>
Var<T> sum(Var<T> a);

template <typename T>
Var<T> mean(Var<T> a);

template <typename T>
Var<T> silu(Var<T> a);

// y = x / sqrt(mean(x^2) + eps) * weight, per row.
template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> weight, T eps);

// Rows `ids` of a [V,d] table.
template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::uint32_t> ids);

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts);

// Row softmax over `scores` [R,C] restricted to visible cells (row-major R*C
// flags). Invisible cells come out exactly zero.
template <typename T>
Var<T> masked_softmax(Var<T> scores, std::span<const std::uint8_t> visible);

// Mean negative log-likelihood over rows where position_mask is set.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint32_t> targets,
                     std::span<const std::uint8_t> position_mask);

#define CTXAR_AUTOGRAD_EXTERN(T)                                                                  \
    extern template class Graph<T>;                                                               \
    extern template Var<T> matmul<T>(Var<T>, Var<T>);                                             \
    extern template Var<T> add<T>(Var<T>, Var<T>);                                                \
    extern template Var<T> mul<T>(Var<T>, Var<T>);                                                \
    extern template Var<T> scale<T>(Var<T>, T);                                                   \
    extern template Var<T> sum<T>(Var<T>);                                                        \
    extern template Var<T> mean<T>(Var<T>);                                                       \
    extern template Var<T> silu<T>(Var<T>);                                                       \
    extern template Var<T> rmsnorm<T>(Var<T>, Var<T>, T);                                         \
    extern template Var<T> gather_rows<T>(Var<T>, std::span<const std::uint32_t>);               \
    extern template Var<T> concat_rows<T>(std::span<const Var<T>>);                               \
    extern template Var<T> masked_softmax<T>(Var<T>, std::span<const std::uint8_t>);              \
    extern template Var<T> cross_entropy<T>(Var<T>, std::span<const std::uint32_t>,               \
                                            std::span<const std::uint8_t>);

CTXAR_AUTOGRAD_EXTERN(float)
CTXAR_AUTOGRAD_EXTERN(double)

#undef CTXAR_AUTOGRAD_EXTERN

}  // namespace ctxar
