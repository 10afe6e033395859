#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gct/rng.hpp"
#include "gct/tensor.hpp"

namespace gct::net {

using ParamList = std::vector<std::pair<std::string, ad::Tensor>>;

/// Dense affine map. Weight is (in x out); bias is (out) and broadcasts over
/// rows.
struct Linear {
    ad::Tensor weight;
    ad::Tensor bias;

    ad::Tensor operator()(const ad::Tensor& x) const {
        return ad::add(ad::matmul(x, weight), bias);
    }
    int in_features() const { return weight.dim(0); }
    int out_features() const { return weight.dim(1); }
};

inline Linear make_linear(int in, int out, Rng& rng) {
    double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
    Linear l;
    l.weight = ad::Tensor::randn({in, out}, rng, stddev, true);
    l.bias = ad::Tensor::zeros({out}, true);
    return l;
}

inline void collect(ParamList& out, const std::string& prefix, const Linear& l) {
    out.emplace_back(prefix + ".weight", l.weight);
    out.emplace_back(prefix + ".bias", l.bias);
}

inline void collect(ParamList& out, const std::string& prefix, const ad::Tensor& t) {
    out.emplace_back(prefix, t);
}

}  // namespace gct::net
