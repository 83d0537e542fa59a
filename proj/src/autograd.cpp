#include "ctxar/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctxar/kernels.hpp"

namespace ctxar {

// ---- Graph ------------------------------------------------------------------

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::param(Parameter<T>& p) {
    const bool needs = record_ && p.trainable;
    nodes_.push_back(Node{p.value, {}, {}, needs ? &p : nullptr, needs});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::emit(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    if (record_) {
        for (const auto& in : inputs) needs = needs || nodes_[in.id()].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Graph<T>::grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
        n.grad = Tensor<T>(n.value.shape());
    }
    return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> root) {
    if (root.value().size() != 1) {
        throw Error(ErrorCode::shape,
                    "backward requires a scalar root, got shape " + shape_str(root.value().shape()));
    }
    if (!nodes_[root.id()].needs_grad) return;
    grad(root.id())[0] = T{1};
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this, i);
        if (n.param != nullptr) {
            Tensor<T>& g = n.param->grad;
            if (g.shape() != n.value.shape()) g = Tensor<T>(n.value.shape());
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
        }
        // Intermediate gradients are no longer needed once propagated.
        if (n.param == nullptr) n.grad = Tensor<T>();
    }
}

// ---- helpers ----------------------------------------------------------------

namespace {

template <typename T>
void accumulate(Graph<T>& g, const Var<T>& v, const Tensor<T>& delta) {
    if (!g.needs_grad(v.id())) return;
    Tensor<T>& dst = g.grad(v.id());
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += delta[i];
}

void require_same_graph(const void* a, const void* b) {
    if (a != b) throw Error(ErrorCode::contract, "operands belong to different graphs");
}

}  // namespace

// ---- matmul -----------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    require_same_graph(&a.graph(), &b.graph());
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    auto fail = [&]() {
        throw Error(ErrorCode::shape, "matmul dimension mismatch: " + shape_str(sa) + " x " + shape_str(sb));
    };
    if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3) fail();
    const std::size_t M = sa[sa.size() - 2];
    const std::size_t K = sa.back();
    const std::size_t N = sb.back();
    if (sb[sb.size() - 2] != K) fail();
    const std::size_t batch_a = sa.size() == 3 ? sa[0] : 1;
    const std::size_t batch_b = sb.size() == 3 ? sb[0] : 1;
    if (sa.size() == 3 && sb.size() == 3 && batch_a != batch_b) fail();
    const std::size_t batch = std::max(batch_a, batch_b);

    Shape out_shape = (sa.size() == 3 || sb.size() == 3) ? Shape{batch, M, N} : Shape{M, N};
    Tensor<T> out(out_shape);
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    const bool fold = sb.size() == 2;  // b shared: fold batch of a into rows
    if (fold) {
        kernels::gemm(av.data(), bv.data(), out.data(), batch_a * M, K, N, false, false, false);
    } else {
        for (std::size_t i = 0; i < batch; ++i) {
            const T* ap = av.data() + (batch_a == 1 ? 0 : i * M * K);
            kernels::gemm(ap, bv.data() + i * K * N, out.data() + i * M * N, M, K, N, false, false, false);
        }
    }

    return a.graph().emit(std::move(out), {a, b}, [a, b, M, K, N, batch_a, batch, fold](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dc = g.grad(self);
        const Tensor<T>& av = g.value(a.id());
        const Tensor<T>& bv = g.value(b.id());
        if (g.needs_grad(a.id())) {
            Tensor<T>& da = g.grad(a.id());
            if (fold) {
                kernels::gemm(dc.data(), bv.data(), da.data(), batch_a * M, N, K, false, true, true);
            } else {
                for (std::size_t i = 0; i < batch; ++i) {
                    T* dap = da.data() + (batch_a == 1 ? 0 : i * M * K);
                    kernels::gemm(dc.data() + i * M * N, bv.data() + i * K * N, dap, M, N, K, false, true, true);
                }
            }
        }
        if (g.needs_grad(b.id())) {
            Tensor<T>& db = g.grad(b.id());
            if (fold) {
                kernels::gemm(av.data(), dc.data(), db.data(), K, batch_a * M, N, true, false, true);
            } else {
                for (std::size_t i = 0; i < batch; ++i) {
                    const T* ap = av.data() + (batch_a == 1 ? 0 : i * M * K);
                    kernels::gemm(ap, dc.data() + i * M * N, db.data() + i * K * N, K, M, N, true, false, true);
                }
            }
        }
    });
}

// ---- elementwise ------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_graph(&a.graph(), &b.graph());
    if (a.shape() != b.shape()) {
        throw Error(ErrorCode::shape, "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.graph().emit(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
        const Tensor<T> dy = g.grad(self);
        accumulate(g, a, dy);
        accumulate(g, b, dy);
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_graph(&a.graph(), &b.graph());
    if (a.shape() != b.shape()) {
        throw Error(ErrorCode::shape, "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.graph().emit(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        const Tensor<T>& av = g.value(a.id());
        const Tensor<T>& bv = g.value(b.id());
        if (g.needs_grad(a.id())) {
            Tensor<T>& da = g.grad(a.id());
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
        }
        if (g.needs_grad(b.id())) {
            Tensor<T>& db = g.grad(b.id());
            for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> out = a.value();
    for (auto& x : out.storage()) x *= s;
    return a.graph().emit(std::move(out), {a}, [a, s](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        Tensor<T>& da = g.grad(a.id());
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * s;
    });
}

template <typename T>
Var<T> sum(Var<T> a) {
    T acc{0};
    for (T x : a.value().values()) acc += x;
    return a.graph().emit(Tensor<T>::scalar(acc), {a}, [a](Graph<T>& g, std::size_t self) {
        const T dy = g.grad(self)[0];
        Tensor<T>& da = g.grad(a.id());
        for (auto& x : da.storage()) x += dy;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    const std::size_t n = a.value().size();
    if (n == 0) throw Error(ErrorCode::shape, "mean of empty tensor");
    return scale(sum(a), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> silu(Var<T> a) {
    const Tensor<T>& av = a.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const T x = av[i];
        out[i] = x / (T{1} + std::exp(-x));
    }
    return a.graph().emit(std::move(out), {a}, [a](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        const Tensor<T>& av = g.value(a.id());
        Tensor<T>& da = g.grad(a.id());
        for (std::size_t i = 0; i < dy.size(); ++i) {
            const T x = av[i];
            const T s = T{1} / (T{1} + std::exp(-x));
            da[i] += dy[i] * s * (T{1} + x * (T{1} - s));
        }
    });
}

// ---- normalization ----------------------------------------------------------

template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> weight, T eps) {
    require_same_graph(&x.graph(), &weight.graph());
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = weight.value();
    const std::size_t d = xv.cols();
    if (wv.size() != d) {
        throw Error(ErrorCode::shape, "rmsnorm weight " + shape_str(wv.shape()) + " vs input " + shape_str(xv.shape()));
    }
    const std::size_t rows = xv.rows();
    Tensor<T> out(xv.shape());
    std::vector<T> inv_rms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * d;
        T ms{0};
        for (std::size_t c = 0; c < d; ++c) ms += xr[c] * xr[c];
        ms /= static_cast<T>(d);
        const T inv = T{1} / std::sqrt(ms + eps);
        inv_rms[r] = inv;
        T* yr = out.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) yr[c] = xr[c] * inv * wv[c];
    }
    return x.graph().emit(std::move(out), {x, weight},
                          [x, weight, d, rows, inv_rms = std::move(inv_rms)](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        const Tensor<T>& xv = g.value(x.id());
        const Tensor<T>& wv = g.value(weight.id());
        const bool need_x = g.needs_grad(x.id());
        const bool need_w = g.needs_grad(weight.id());
        Tensor<T>* dx = need_x ? &g.grad(x.id()) : nullptr;
        Tensor<T>* dw = need_w ? &g.grad(weight.id()) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv.data() + r * d;
            const T* dyr = dy.data() + r * d;
            const T inv = inv_rms[r];
            if (dw) {
                for (std::size_t c = 0; c < d; ++c) (*dw)[c] += dyr[c] * xr[c] * inv;
            }
            if (dx) {
                // dxhat = dy * w; dx = inv * (dxhat - xhat * mean(dxhat * xhat))
                T proj{0};
                for (std::size_t c = 0; c < d; ++c) proj += dyr[c] * wv[c] * xr[c] * inv;
                proj /= static_cast<T>(d);
                T* dxr = dx->data() + r * d;
                for (std::size_t c = 0; c < d; ++c) {
                    dxr[c] += inv * (dyr[c] * wv[c] - xr[c] * inv * proj);
                }
            }
        }
    });
}

// ---- row gather / concat ----------------------------------------------------

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::uint32_t> ids) {
    const Tensor<T>& tv = table.value();
    if (tv.rank() != 2) throw Error(ErrorCode::shape, "gather_rows expects a 2-D table, got " + shape_str(tv.shape()));
    const std::size_t V = tv.dim(0);
    const std::size_t d = tv.dim(1);
    Tensor<T> out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= V) {
            throw Error(ErrorCode::range, "row id " + std::to_string(ids[i]) + " outside table of " + std::to_string(V) + " rows");
        }
        std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
    }
    std::vector<std::uint32_t> idv(ids.begin(), ids.end());
    return table.graph().emit(std::move(out), {table}, [table, d, idv = std::move(idv)](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        Tensor<T>& dt = g.grad(table.id());
        for (std::size_t i = 0; i < idv.size(); ++i) {
            kernels::axpy(T{1}, dy.data() + i * d, dt.data() + idv[i] * d, d);
        }
    });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
    if (parts.empty()) throw Error(ErrorCode::shape, "concat_rows of nothing");
    const std::size_t d = parts[0].value().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.value().rank() != 2 || p.value().cols() != d) {
            throw Error(ErrorCode::shape, "concat_rows width mismatch: " + shape_str(p.shape()));
        }
        require_same_graph(&p.graph(), &parts[0].graph());
        rows += p.value().rows();
    }
    Tensor<T> out(Shape{rows, d});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.value().values().begin(), p.value().values().end(), out.data() + offset * d);
        offset += p.value().rows();
    }
    std::vector<Var<T>> inputs(parts.begin(), parts.end());
    Graph<T>& graph = parts[0].graph();
    return graph.emit(std::move(out), std::span<const Var<T>>(inputs), [inputs, d](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        std::size_t offset = 0;
        for (const auto& p : inputs) {
            const std::size_t r = g.value(p.id()).rows();
            if (g.needs_grad(p.id())) {
                Tensor<T>& dp = g.grad(p.id());
                for (std::size_t i = 0; i < r * d; ++i) dp[i] += dy[offset * d + i];
            }
            offset += r;
        }
    });
}

// ---- softmax / loss ---------------------------------------------------------

template <typename T>
Var<T> masked_softmax(Var<T> scores, std::span<const std::uint8_t> visible) {
    const Tensor<T>& sv = scores.value();
    if (sv.rank() != 2 || visible.size() != sv.size()) {
        throw Error(ErrorCode::shape, "masked_softmax mask size " + std::to_string(visible.size()) +
                                          " vs scores " + shape_str(sv.shape()));
    }
    Tensor<T> out = sv;
    const std::size_t cols = sv.cols();
    for (std::size_t r = 0; r < sv.rows(); ++r) {
        kernels::masked_softmax_row(out.row(r), visible.subspan(r * cols, cols));
    }
    return scores.graph().emit(std::move(out), {scores}, [scores, cols](Graph<T>& g, std::size_t self) {
        const Tensor<T>& dy = g.grad(self);
        const Tensor<T>& p = g.value(self);
        Tensor<T>& ds = g.grad(scores.id());
        for (std::size_t r = 0; r < p.rows(); ++r) {
            T inner{0};
            for (std::size_t c = 0; c < cols; ++c) inner += p.at(r, c) * dy.at(r, c);
            for (std::size_t c = 0; c < cols; ++c) ds.at(r, c) += p.at(r, c) * (dy.at(r, c) - inner);
        }
    });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint32_t> targets, std::span<const std::uint8_t> position_mask) {
    const Tensor<T>& lv = logits.value();
    if (lv.rank() != 2 || targets.size() != lv.rows() || position_mask.size() != lv.rows()) {
        throw Error(ErrorCode::shape, "cross_entropy: logits " + shape_str(lv.shape()) + ", " +
                                          std::to_string(targets.size()) + " targets, " +
                                          std::to_string(position_mask.size()) + " mask entries");
    }
    const std::size_t V = lv.cols();
    std::size_t count = 0;
    for (std::size_t r = 0; r < lv.rows(); ++r) {
        if (!position_mask[r]) continue;
        if (targets[r] >= V) {
            throw Error(ErrorCode::range, "target " + std::to_string(targets[r]) + " outside vocabulary of " + std::to_string(V));
        }
        ++count;
    }
    if (count == 0) throw Error(ErrorCode::contract, "cross_entropy: every position is masked out (empty loss)");

    // Softmax probabilities of selected rows are kept for backward.
    std::vector<T> probs(count * V);
    T total{0};
    std::size_t k = 0;
    for (std::size_t r = 0; r < lv.rows(); ++r) {
        if (!position_mask[r]) continue;
        const T* row = lv.data() + r * V;
        const T mx = *std::max_element(row, row + V);
        T z{0};
        for (std::size_t c = 0; c < V; ++c) z += std::exp(row[c] - mx);
        const T lse = mx + std::log(z);
        total += lse - row[targets[r]];
        for (std::size_t c = 0; c < V; ++c) probs[k * V + c] = std::exp(row[c] - lse);
        ++k;
    }
    const T inv_count = T{1} / static_cast<T>(count);
    std::vector<std::uint32_t> tv(targets.begin(), targets.end());
    std::vector<std::uint8_t> mv(position_mask.begin(), position_mask.end());
    return logits.graph().emit(Tensor<T>::scalar(total * inv_count), {logits},
                               [logits, V, inv_count, probs = std::move(probs), tv = std::move(tv), mv = std::move(mv)](Graph<T>& g, std::size_t self) {
        const T dy = g.grad(self)[0] * inv_count;
        Tensor<T>& dl = g.grad(logits.id());
        std::size_t k = 0;
        for (std::size_t r = 0; r < mv.size(); ++r) {
            if (!mv[r]) continue;
            T* drow = dl.data() + r * V;
            for (std::size_t c = 0; c < V; ++c) drow[c] += dy * probs[k * V + c];
            drow[tv[r]] -= dy;
            ++k;
        }
    });
}

#define CTXAR_AUTOGRAD_INSTANTIATE(T)                                                              \
    template class Graph<T>;                                                                       \
    template Var<T> matmul<T>(Var<T>, Var<T>);                                                     \
    template Var<T> add<T>(Var<T>, Var<T>);                                                        \
    template Var<T> mul<T>(Var<T>, Var<T>);                                                        \
    template Var<T> scale<T>(Var<T>, T);                                                           \
    template Var<T> sum<T>(Var<T>);                                                                \
    template Var<T> mean<T>(Var<T>);                                                               \
    template Var<T> silu<T>(Var<T>);                                                               \
    template Var<T> rmsnorm<T>(Var<T>, Var<T>, T);                                                 \
    template Var<T> gather_rows<T>(Var<T>, std::span<const std::uint32_t>);                       \
    template Var<T> concat_rows<T>(std::span<const Var<T>>);                                       \
    template Var<T> masked_softmax<T>(Var<T>, std::span<const std::uint8_t>);                      \
    template Var<T> cross_entropy<T>(Var<T>, std::span<const std::uint32_t>, std::span<const std::uint8_t>);

CTXAR_AUTOGRAD_INSTANTIATE(float)
CTXAR_AUTOGRAD_INSTANTIATE(double)

}  // namespace ctxar
