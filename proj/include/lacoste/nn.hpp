#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lacoste/autodiff.hpp"

namespace lacoste::nn {

using ad::Var;

// Named parameter registry. Values are shared leaves (safe for concurrent
// reads); registration order is kept so init and serialization are
// deterministic.
class ParamStore {
  public:
    Var create(const std::string& name, Tensor init) {
        if (by_name_.count(name)) throw argument_error("ParamStore: duplicate param " + name);
        Var v = ad::leaf(std::move(init), true);
        by_name_[name] = v;
        order_.push_back(name);
        return v;
    }
    const Var& get(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw argument_error("ParamStore: unknown param " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return by_name_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }
    int64_t total_values() const {
        int64_t n = 0;
        for (const auto& name : order_) n += by_name_.at(name)->val.numel();
        return n;
    }

  private:
    std::map<std::string, Var> by_name_;
    std::vector<std::string> order_;
};

inline Tensor xavier_uniform(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out,
                             Rng& rng) {
    const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return random_uniform(std::move(shape), -s, s, rng);
}

struct Linear {
    Var w, b;
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, bool bias,
           Rng& rng) {
        w = ps.create(name + ".w", xavier_uniform({out, in}, in, out, rng));
        if (bias) b = ps.create(name + ".b", Tensor({out}));
    }
    Var operator()(const Var& x) const { return ad::linear(x, w, b); }
};

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 0;
    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int64_t ci, int64_t co, int k, int stride_,
           int pad_, Rng& rng, bool bias = true)
        : stride(stride_), pad(pad_) {
        w = ps.create(name + ".w", xavier_uniform({co, ci, k, k}, ci * k * k, co * k * k, rng));
        if (bias) b = ps.create(name + ".b", Tensor({co}));
    }
    Var operator()(const Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

struct LayerNorm {
    Var gamma, beta;
    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, int64_t dim) {
        gamma = ps.create(name + ".gamma", Tensor::full({dim}, 1.0));
        beta = ps.create(name + ".beta", Tensor({dim}));
    }
    Var operator()(const Var& x) const { return ad::layer_norm_rows(x, gamma, beta); }
};

// Multi-head attention. Query/key/value projections are bias-free; only the
// output projection carries a bias, so a fully key-masked attention reduces to
// that bias exactly.
struct MultiheadAttention {
    int heads = 1;
    Linear q, k, v, o;
    MultiheadAttention() = default;
    MultiheadAttention(ParamStore& ps, const std::string& name, int64_t dim, int heads_,
                       Rng& rng)
        : heads(heads_),
          q(ps, name + ".q", dim, dim, false, rng),
          k(ps, name + ".k", dim, dim, false, rng),
          v(ps, name + ".v", dim, dim, false, rng),
          o(ps, name + ".o", dim, dim, true, rng) {
        if (dim % heads_ != 0) throw argument_error("MultiheadAttention: dim % heads != 0");
    }
    // queries:[n,D], keys/values:[m,D]; key_keep optionally drops keys.
    Var operator()(const Var& queries, const Var& keys, const Var& values,
                   const std::vector<uint8_t>* key_keep = nullptr) const {
        const int64_t dim = q.w->val.dim(0);
        const int64_t dh = dim / heads;
        Var Q = q(queries), K = k(keys), V = v(values);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Var> ctx;
        ctx.reserve(heads);
        for (int h = 0; h < heads; ++h) {
            Var qh = ad::col_slice(Q, h * dh, dh);
            Var kh = ad::col_slice(K, h * dh, dh);
            Var vh = ad::col_slice(V, h * dh, dh);
            Var scores = ad::affine(ad::matmul(qh, ad::transpose(kh)), scale, 0.0);
            Var attn = key_keep ? ad::masked_softmax_rows(scores, *key_keep)
                                : ad::softmax_rows(scores);
            ctx.push_back(ad::matmul(attn, vh));
        }
        return o(ad::concat_cols(ctx));
    }
};

struct FeedForward {
    Linear fc1, fc2;
    FeedForward() = default;
    FeedForward(ParamStore& ps, const std::string& name, int64_t dim, int64_t hidden, Rng& rng)
        : fc1(ps, name + ".fc1", dim, hidden, true, rng),
          fc2(ps, name + ".fc2", hidden, dim, true, rng) {}
    Var operator()(const Var& x) const { return fc2(ad::gelu(fc1(x))); }
};

// Fixed 2-D sine/cosine positional encoding, flattened row-major to [H*W, D].
Tensor positional_encoding_2d(int64_t h, int64_t w, int64_t dim);

}  // namespace lacoste::nn
