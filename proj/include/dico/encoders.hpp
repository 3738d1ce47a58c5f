#pragma once

// Toy encoders: a linear map with layer norm per token, optional learned
// positional embeddings (text path only), mean pooling into a global vector.
// Embedding heads project global / slot / block representations into the
// shared alignment space and L2-normalize them.

#include <string>
#include <vector>

#include "dico/error.hpp"
#include "dico/random.hpp"
#include "dico/slot_attention.hpp"
#include "dico/synthdata.hpp"
#include "dico/tensor.hpp"

namespace dico {

template <typename T>
struct TokenEncoder {
    Parameter<T> W, b;             // d_raw -> d
    Parameter<T> pos;              // [max_len x d], only when use_positional
    Parameter<T> tok_gamma, tok_beta;
    Parameter<T> glob_gamma, glob_beta;
    bool use_positional = false;

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&W);
        out.push_back(&b);
        if (use_positional) out.push_back(&pos);
        out.push_back(&tok_gamma);
        out.push_back(&tok_beta);
        out.push_back(&glob_gamma);
        out.push_back(&glob_beta);
    }
};

template <typename T>
TokenEncoder<T> make_encoder(const std::string& prefix, int d_raw, int d, int max_len,
                             bool use_positional, Rng& rng) {
    TokenEncoder<T> e;
    e.use_positional = use_positional;
    e.W = Parameter<T>(prefix + ".w", {d_raw, d});
    fill_normal(e.W, rng, 1.0 / std::sqrt(static_cast<double>(d_raw)));
    e.b = Parameter<T>(prefix + ".b", {d});
    if (use_positional) {
        e.pos = Parameter<T>(prefix + ".pos", {max_len, d});
        fill_normal(e.pos, rng, 0.02);
    }
    e.tok_gamma = Parameter<T>(prefix + ".tok_gamma", {d});
    std::fill(e.tok_gamma.value.begin(), e.tok_gamma.value.end(), T(1));
    e.tok_beta = Parameter<T>(prefix + ".tok_beta", {d});
    e.glob_gamma = Parameter<T>(prefix + ".glob_gamma", {d});
    std::fill(e.glob_gamma.value.begin(), e.glob_gamma.value.end(), T(1));
    e.glob_beta = Parameter<T>(prefix + ".glob_beta", {d});
    return e;
}

/// Encoded token sequence plus its pooled global representation.
template <typename T>
struct TokenSequence {
    Tensor<T> tokens; // [n x d]
    Tensor<T> global; // [1 x d]
};

/// tokens = LN(raw W + b [+ pos]); global = LN(mean(tokens)).
/// The image path adds no positional channel, so it commutes with token
/// permutation.
template <typename T>
TokenSequence<T> encode(Graph<T>& g, const Tensor<T>& raw, TokenEncoder<T>& enc) {
    if (raw.shape().size() != 2 || raw.shape()[0] < 1)
        throw ShapeError(cat("encode: expected a nonempty [n x d_raw] input, got ",
                             shape_str(raw.shape())));
    const int n = raw.shape()[0];
    auto x = add_rowvec(matmul(raw, g.leaf(enc.W)), g.leaf(enc.b));
    if (enc.use_positional) {
        if (n > enc.pos.shape[0])
            throw ShapeError(cat("encode: sequence length ", n,
                                 " exceeds positional table ", shape_str(enc.pos.shape)));
        x = add(x, slice_rows(g.leaf(enc.pos), 0, n));
    }
    TokenSequence<T> seq;
    seq.tokens = layer_norm(x, g.leaf(enc.tok_gamma), g.leaf(enc.tok_beta),
                            static_cast<T>(kLayerNormEps));
    seq.global = layer_norm(mean_rows(seq.tokens), g.leaf(enc.glob_gamma),
                            g.leaf(enc.glob_beta), static_cast<T>(kLayerNormEps));
    return seq;
}

/// Linear heads into the alignment space; all outputs unit-norm.
template <typename T>
struct EmbeddingHeads {
    Parameter<T> global_head; // [d x d_e]
    Parameter<T> slot_head;   // [M*d_c x d_e]
    Parameter<T> block_head;  // [d_c x d_e]

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&global_head);
        out.push_back(&slot_head);
        out.push_back(&block_head);
    }
};

template <typename T>
EmbeddingHeads<T> make_heads(const std::string& prefix, int d, int slot_dim, int d_c, int d_e,
                             Rng& rng) {
    EmbeddingHeads<T> h;
    h.global_head = Parameter<T>(prefix + ".global", {d, d_e});
    h.slot_head = Parameter<T>(prefix + ".slot", {slot_dim, d_e});
    h.block_head = Parameter<T>(prefix + ".block", {d_c, d_e});
    fill_normal(h.global_head, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    fill_normal(h.slot_head, rng, 1.0 / std::sqrt(static_cast<double>(slot_dim)));
    fill_normal(h.block_head, rng, 1.0 / std::sqrt(static_cast<double>(d_c)));
    return h;
}

template <typename T>
struct LevelEmbeddings {
    Tensor<T> z_global; // [1 x d_e]
    Tensor<T> z_slots;  // [K x d_e]
    Tensor<T> z_blocks; // [K*M x d_e]
};

template <typename T>
LevelEmbeddings<T> embed_levels(Graph<T>& g, const Tensor<T>& global,
                                const SlotState<T>& state, EmbeddingHeads<T>& heads) {
    const int K = state.K(), M = state.M(), d_c = state.d_c();
    LevelEmbeddings<T> z;
    z.z_global = l2_normalize_rows(matmul(global, g.leaf(heads.global_head)));
    auto flat = reshape(state.slots, {K, M * d_c});
    z.z_slots = l2_normalize_rows(matmul(flat, g.leaf(heads.slot_head)));
    auto blocks = reshape(state.slots, {K * M, d_c});
    z.z_blocks = l2_normalize_rows(matmul(blocks, g.leaf(heads.block_head)));
    return z;
}

/// Casts a raw data matrix into a graph constant.
template <typename T>
Tensor<T> raw_to_tensor(Graph<T>& g, const RawMat& m) {
    std::vector<T> v(m.v.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(m.v[i]);
    return g.constant({m.rows, m.cols}, std::move(v));
}

} // namespace dico
