#ifndef HSRDIFF_TEST_SUPPORT_HPP
#define HSRDIFF_TEST_SUPPORT_HPP

#include <cmath>
#include <functional>
#include <vector>

#include "hsrdiff/rng.hpp"
#include "hsrdiff/tensor.hpp"

namespace hsrtest {

using hsrdiff::tensor;

inline std::vector<double> random_values(std::size_t n, hsrdiff::rng& gen, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * gen.normal();
    return v;
}

struct fd_report {
    double max_rel = 0.0;
    std::size_t checked = 0;
};

// Central-difference gradient check. `make_loss` must rebuild the graph from
// the leaves' current values. Entries where both the analytic and numeric
// gradients are below the absolute floor are counted but cannot fail.
inline fd_report finite_difference_check(const std::function<tensor<double>()>& make_loss,
                                         std::vector<tensor<double>> leaves,
                                         double h = 1e-5,
                                         std::size_t max_per_leaf = SIZE_MAX,
                                         hsrdiff::rng* pick = nullptr) {
    for (auto& l : leaves) l.clear_grad();
    tensor<double> loss = make_loss();
    loss.backward();
    std::vector<std::vector<double>> grads;
    grads.reserve(leaves.size());
    for (auto& l : leaves) {
        grads.push_back(l.grad().empty()
                            ? std::vector<double>(static_cast<std::size_t>(l.numel()), 0.0)
                            : l.grad());
    }

    fd_report rep;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        const std::size_t n = leaf.value().size();
        std::vector<std::size_t> idxs;
        if (n <= max_per_leaf || pick == nullptr) {
            idxs.resize(n);
            for (std::size_t i = 0; i < n; ++i) idxs[i] = i;
            if (idxs.size() > max_per_leaf) idxs.resize(max_per_leaf);
        } else {
            for (std::size_t k = 0; k < max_per_leaf; ++k)
                idxs.push_back(static_cast<std::size_t>(pick->uniform_int(0, static_cast<int>(n - 1))));
        }
        for (std::size_t i : idxs) {
            const double saved = leaf.value()[i];
            leaf.mutable_value()[i] = saved + h;
            const double lp = make_loss().item();
            leaf.mutable_value()[i] = saved - h;
            const double lm = make_loss().item();
            leaf.mutable_value()[i] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            const double g = grads[li][i];
            const double denom = std::max({std::abs(g), std::abs(fd), 1e-5});
            rep.max_rel = std::max(rep.max_rel, std::abs(g - fd) / denom);
            ++rep.checked;
        }
    }
    return rep;
}

}  // namespace hsrtest

#endif  // HSRDIFF_TEST_SUPPORT_HPP
