#pragma once

#include <unordered_set>
#include <vector>

#include "badres/errors.hpp"
#include "badres/tensor.hpp"

namespace badres {

// Post-order over the op DAG reachable from root: every tensor appears once,
// after all of its inputs. Iterative so graph depth cannot overflow the stack.
inline std::vector<Tensor> topo_order(const Tensor& root) {
    std::vector<Tensor> order;
    if (!root.valid()) return order;
    std::unordered_set<const void*> visited;
    struct Frame {
        Tensor t;
        std::size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    visited.insert(root.id());
    while (!stack.empty()) {
        Frame& f = stack.back();
        const auto& node = f.t.node();
        const std::size_t n_inputs = node ? node->inputs.size() : 0;
        if (f.next_input < n_inputs) {
            Tensor in = node->inputs[f.next_input++];
            if (visited.insert(in.id()).second) stack.push_back({in, 0});
        } else {
            order.push_back(f.t);
            stack.pop_back();
        }
    }
    return order;
}

// Reverse-mode sweep from a scalar loss. Fills grad on every tensor that
// requires grad and is reachable from the loss; fan-out accumulates
// additively because each backprop call adds into the input grads.
inline void backward(const Tensor& loss) {
    if (!loss.valid()) throw usage_error("backward on empty tensor");
    if (loss.numel() != 1)
        throw usage_error("backward requires a scalar loss, got " +
                          shape_str(loss.shape()));
    if (!loss.node() && !loss.requires_grad())
        throw usage_error("backward on a constant: nothing to differentiate");

    std::vector<Tensor> order = topo_order(loss);
    loss.seed_grad_ones();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const auto& node = it->node();
        if (!node) continue;
        if (!it->has_grad()) continue;  // branch not contributing to the loss
        node->backprop(*it);
    }
}

}  // namespace badres
