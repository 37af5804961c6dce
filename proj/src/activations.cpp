#include "dsmoe/activations.hpp"

#include <algorithm>

#include "dsmoe/error.hpp"

namespace dsmoe {

void softmax_row_inplace(std::span<double> v) {
    if (v.empty()) {
        throw ShapeError("softmax_row: empty input");
    }
    const double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

std::vector<double> softmax_row(std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    softmax_row_inplace(out);
    return out;
}

}  // namespace dsmoe
