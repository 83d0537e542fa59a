#include "ctxar/optim.hpp"

#include <cmath>

namespace ctxar {

template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, OptimizerState<T>& state, const AdamWConfig& config) {
    if (state.first_moment.empty()) {
        for (const Parameter<T>* p : params) {
            state.first_moment.emplace_back(p->value.shape());
            state.second_moment.emplace_back(p->value.shape());
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw Error(ErrorCode::shape, "optimizer holds " + std::to_string(state.first_moment.size()) +
                                          " moment buffers for " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter<T>& p = *params[i];
        if (state.first_moment[i].shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
            throw Error(ErrorCode::shape, "optimizer buffer shape mismatch for parameter " + p.name);
        }
        if (!p.trainable) continue;
        for (T g : p.grad.values()) {
            if (!std::isfinite(g)) throw Error(ErrorCode::numeric, "non-finite gradient in parameter " + p.name);
        }
    }

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const T b1 = static_cast<T>(config.beta1);
    const T b2 = static_cast<T>(config.beta2);
    const T bias1 = static_cast<T>(1.0 - std::pow(config.beta1, t));
    const T bias2 = static_cast<T>(1.0 - std::pow(config.beta2, t));
    const T lr = static_cast<T>(config.lr);
    const T eps = static_cast<T>(config.eps);
    const T decay_factor = static_cast<T>(1.0 - config.lr * config.weight_decay);

    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter<T>& p = *params[i];
        if (!p.trainable) continue;
        T* w = p.value.data();
        const T* g = p.grad.data();
        T* m = state.first_moment[i].data();
        T* v = state.second_moment[i].data();
        const bool decay = p.decay && config.weight_decay != 0.0;
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            m[j] = b1 * m[j] + (T{1} - b1) * g[j];
            v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
            const T m_hat = m[j] / bias1;
            const T v_hat = v[j] / bias2;
            if (decay) w[j] *= decay_factor;
            w[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

template void adamw_step<float>(std::span<Parameter<float>* const>, OptimizerState<float>&, const AdamWConfig&);
template void adamw_step<double>(std::span<Parameter<double>* const>, OptimizerState<double>&, const AdamWConfig&);

}  // namespace ctxar
