#pragma once

#include <string>
#include <vector>

#include "smoe/tensor.hpp"

namespace smoe {

// A named trainable tensor with its gradient accumulator. Models register
// their params in a fixed manifest order; names are unique per model.
template <typename S>
struct Param {
    std::string name;
    Tensor<S> value;
    Tensor<S> grad;

    Param() = default;
    Param(std::string n, std::vector<Index> shape)
        : name(std::move(n)), value(shape), grad(std::move(shape)) {}

    Index size() const { return value.size(); }
};

template <typename S>
using ParamRefs = std::vector<Param<S>*>;

template <typename S>
inline void zero_grads(const ParamRefs<S>& params) {
    for (auto* p : params) p->grad.set_zero();
}

template <typename S>
inline Index total_size(const ParamRefs<S>& params) {
    Index n = 0;
    for (auto* p : params) n += p->size();
    return n;
}

} // namespace smoe
