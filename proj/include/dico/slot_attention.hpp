#pragma once

// Slot-concept attention: iterative refinement of shared slots against a
// token sequence. Each iteration assigns tokens to slots by softmax
// competition over the slot axis, aggregates per-slot summaries under
// weighted-mean column normalization, updates each concept block with its own
// GRU + MLP, re-expresses blocks as convex combinations of a shared prototype
// memory, reassembles and applies residual self-attention among slots.

#include <cmath>
#include <string>
#include <vector>

#include "dico/error.hpp"
#include "dico/random.hpp"
#include "dico/tensor.hpp"

namespace dico {

constexpr double kLayerNormEps = 1e-5;
constexpr double kAttnColumnEps = 1e-8; // weighted-mean normalization epsilon

// ---------------------------------------------------------------------------
// Parameter groups.

/// Modality-specific linear maps into the shared slot dimension d_h.
/// q acts on slots (M*d_c -> d_h); k and v act on tokens (d -> d_h).
template <typename T>
struct ModalityProjections {
    Parameter<T> q, k, v;
    int d_h = 0;

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&q);
        out.push_back(&k);
        out.push_back(&v);
    }
};

template <typename T>
void fill_normal(Parameter<T>& p, Rng& rng, double stddev) {
    for (auto& v : p.value) v = static_cast<T>(rng.normal(0.0, stddev));
}

template <typename T>
ModalityProjections<T> make_projections(const std::string& prefix, int slot_dim, int token_dim,
                                        int d_h, Rng& rng) {
    ModalityProjections<T> p;
    p.d_h = d_h;
    p.q = Parameter<T>(prefix + ".q", {slot_dim, d_h});
    p.k = Parameter<T>(prefix + ".k", {token_dim, d_h});
    p.v = Parameter<T>(prefix + ".v", {token_dim, d_h});
    fill_normal(p.q, rng, 1.0 / std::sqrt(static_cast<double>(slot_dim)));
    fill_normal(p.k, rng, 1.0 / std::sqrt(static_cast<double>(token_dim)));
    fill_normal(p.v, rng, 1.0 / std::sqrt(static_cast<double>(token_dim)));
    return p;
}

/// Per-block updater: GRU gates plus a residual MLP on the layer-normed
/// candidate. Shared over slots k, distinct per block index m.
template <typename T>
struct BlockUpdater {
    Parameter<T> Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh;
    Parameter<T> ln_gamma, ln_beta;
    Parameter<T> W1, b1, W2, b2;

    void collect(std::vector<Parameter<T>*>& out) {
        for (Parameter<T>* p : {&Wz, &Uz, &bz, &Wr, &Ur, &br, &Wh, &Uh, &bh,
                                &ln_gamma, &ln_beta, &W1, &b1, &W2, &b2})
            out.push_back(p);
    }

    GruGates<T> gates(Graph<T>& g) {
        return {g.leaf(Wz), g.leaf(Uz), g.leaf(bz), g.leaf(Wr), g.leaf(Ur),
                g.leaf(br), g.leaf(Wh), g.leaf(Uh), g.leaf(bh)};
    }
};

template <typename T>
std::vector<BlockUpdater<T>> make_block_updaters(const std::string& prefix, int M, int d_c,
                                                 Rng& rng) {
    std::vector<BlockUpdater<T>> out(static_cast<size_t>(M));
    const double w = 1.0 / std::sqrt(static_cast<double>(d_c));
    for (int m = 0; m < M; ++m) {
        auto& u = out[static_cast<size_t>(m)];
        const std::string base = cat(prefix, ".", m);
        for (auto [name, pp] : std::initializer_list<std::pair<const char*, Parameter<T>*>>{
                 {"Wz", &u.Wz}, {"Uz", &u.Uz}, {"Wr", &u.Wr}, {"Ur", &u.Ur},
                 {"Wh", &u.Wh}, {"Uh", &u.Uh}, {"W1", &u.W1}, {"W2", &u.W2}}) {
            *pp = Parameter<T>(cat(base, ".", name), {d_c, d_c});
            fill_normal(*pp, rng, w);
        }
        u.bz = Parameter<T>(base + ".bz", {d_c});
        u.br = Parameter<T>(base + ".br", {d_c});
        u.bh = Parameter<T>(base + ".bh", {d_c});
        u.b1 = Parameter<T>(base + ".b1", {d_c});
        u.b2 = Parameter<T>(base + ".b2", {d_c});
        u.ln_gamma = Parameter<T>(base + ".ln_gamma", {d_c});
        std::fill(u.ln_gamma.value.begin(), u.ln_gamma.value.end(), T(1));
        u.ln_beta = Parameter<T>(base + ".ln_beta", {d_c});
    }
    return out;
}

/// M learnable prototype dictionaries, shared across modalities.
template <typename T>
struct PrototypeMemory {
    std::vector<Parameter<T>> memories; // M of [K_m x d_c]
    double tau_p = 1.0;

    int blocks() const { return static_cast<int>(memories.size()); }
    void collect(std::vector<Parameter<T>*>& out) {
        for (auto& m : memories) out.push_back(&m);
    }
};

template <typename T>
PrototypeMemory<T> make_prototype_memory(const std::string& prefix, int M, int K_m, int d_c,
                                         double tau_p, Rng& rng) {
    if (K_m < 1) throw ConfigError("prototype memory needs K_m >= 1");
    PrototypeMemory<T> mem;
    mem.tau_p = tau_p;
    mem.memories.reserve(static_cast<size_t>(M));
    for (int m = 0; m < M; ++m) {
        mem.memories.emplace_back(cat(prefix, ".", m), Shape{K_m, d_c});
        fill_normal(mem.memories.back(), rng, 0.02);
    }
    return mem;
}

/// Single-head residual self-attention over the K reassembled slots.
template <typename T>
struct SlotSelfAttention {
    Parameter<T> Wq, Wk, Wv;

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&Wq);
        out.push_back(&Wk);
        out.push_back(&Wv);
    }
};

template <typename T>
SlotSelfAttention<T> make_self_attention(const std::string& prefix, int dim, Rng& rng) {
    SlotSelfAttention<T> sa;
    sa.Wq = Parameter<T>(prefix + ".wq", {dim, dim});
    sa.Wk = Parameter<T>(prefix + ".wk", {dim, dim});
    sa.Wv = Parameter<T>(prefix + ".wv", {dim, dim});
    const double w = 1.0 / std::sqrt(static_cast<double>(dim));
    fill_normal(sa.Wq, rng, w);
    fill_normal(sa.Wk, rng, w);
    fill_normal(sa.Wv, rng, w);
    return sa;
}

// ---------------------------------------------------------------------------
// State and per-iteration records.

/// The K x M x d_c slot tensor at some refinement iteration.
template <typename T>
struct SlotState {
    Tensor<T> slots; // shape {K, M, d_c}
    int iteration = 0;

    int K() const { return slots.shape()[0]; }
    int M() const { return slots.shape()[1]; }
    int d_c() const { return slots.shape()[2]; }
};

/// Shared learnable S^(0): one parameter feeds both modality paths.
template <typename T>
Parameter<T> init_slots(int K, int M, int d_c, uint64_t seed) {
    if (K < 1 || M < 1 || d_c < 1)
        throw ConfigError(cat("init_slots: dimensions must be positive, got K=", K, " M=", M,
                              " d_c=", d_c));
    Parameter<T> p("slots0", {K, M, d_c});
    Rng rng(seed);
    fill_normal(p, rng, 0.02);
    return p;
}

template <typename T>
SlotState<T> slot_state(Graph<T>& g, Parameter<T>& slots0) {
    return SlotState<T>{g.leaf(slots0), 0};
}

/// Token-to-slot assignment matrices for one iteration: raw scores, the
/// softmax over slots, and the per-slot column normalization.
template <typename T>
struct AttentionRecord {
    Tensor<T> raw;        // [n x K]
    Tensor<T> assign;     // [n x K], rows sum to 1
    Tensor<T> normalized; // [n x K], nonzero columns sum to ~1
};

// ---------------------------------------------------------------------------
// The five sub-operations of one refinement iteration.

/// Eq.-style scores: raw = k(X) q(S)^T / sqrt(d_h); assignment = softmax over
/// the slot axis, so each token distributes its mass across slots.
template <typename T>
AttentionRecord<T> compute_assignment(const Tensor<T>& slots_flat, const Tensor<T>& tokens,
                                      ModalityProjections<T>& proj) {
    if (tokens.shape().size() != 2 || tokens.shape()[0] < 1)
        throw ShapeError(cat("compute_assignment: token sequence must be nonempty, got ",
                             shape_str(tokens.shape())));
    Graph<T>& g = *slots_flat.graph();
    auto q_s = matmul(slots_flat, g.leaf(proj.q)); // [K x d_h]
    auto k_x = matmul(tokens, g.leaf(proj.k));     // [n x d_h]
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(proj.d_h)));
    AttentionRecord<T> rec;
    rec.raw = scale(matmul(k_x, transpose(q_s)), inv_sqrt); // [n x K]
    rec.assign = softmax_axis(rec.raw, 1);
    return rec;
}

/// Weighted-mean normalization per slot column, then U = A~^T v(X).
/// Fills rec.normalized. Each slot summary is a convex combination of the
/// projected token values.
template <typename T>
Tensor<T> normalize_and_aggregate(AttentionRecord<T>& rec, const Tensor<T>& tokens,
                                  ModalityProjections<T>& proj) {
    if (rec.assign.shape()[0] != tokens.shape()[0])
        throw ShapeError(cat("normalize_and_aggregate: record rows ",
                             shape_str(rec.assign.shape()), " do not match tokens ",
                             shape_str(tokens.shape())));
    Graph<T>& g = *tokens.graph();
    rec.normalized = normalize_columns(rec.assign, static_cast<T>(kAttnColumnEps));
    auto v_x = matmul(tokens, g.leaf(proj.v)); // [n x d_h]
    return matmul(transpose(rec.normalized), v_x); // [K x d_h]
}

/// Splits slot summaries into M contiguous blocks and applies the per-block
/// GRU and residual MLP. Updater parameters are shared over slots k.
template <typename T>
Tensor<T> update_blocks(const Tensor<T>& slots_flat, const Tensor<T>& summaries,
                        std::vector<BlockUpdater<T>>& updaters) {
    const int M = static_cast<int>(updaters.size());
    const int d_h = summaries.shape()[1];
    if (d_h % M != 0)
        throw ConfigError(cat("update_blocks: d_h = ", d_h, " is not divisible by M = ", M));
    const int d_c = d_h / M;
    if (slots_flat.shape()[1] != d_h)
        throw ShapeError(cat("update_blocks: slots ", shape_str(slots_flat.shape()),
                             " do not match summaries ", shape_str(summaries.shape())));
    Graph<T>& g = *slots_flat.graph();
    std::vector<Tensor<T>> parts;
    parts.reserve(static_cast<size_t>(M));
    for (int m = 0; m < M; ++m) {
        auto& u = updaters[static_cast<size_t>(m)];
        auto h_prev = slice_cols(slots_flat, m * d_c, (m + 1) * d_c);
        auto u_m = slice_cols(summaries, m * d_c, (m + 1) * d_c);
        auto s_hat = gru_cell(h_prev, u_m, u.gates(g));
        auto normed = layer_norm(s_hat, g.leaf(u.ln_gamma), g.leaf(u.ln_beta),
                                 static_cast<T>(kLayerNormEps));
        auto hidden = gelu(add_rowvec(matmul(normed, g.leaf(u.W1)), g.leaf(u.b1)));
        auto mlp = add_rowvec(matmul(hidden, g.leaf(u.W2)), g.leaf(u.b2));
        parts.push_back(add(s_hat, mlp));
    }
    return concat_cols(parts);
}

template <typename T>
struct PrototypeProjection {
    Tensor<T> projected;            // [K x M*d_c], blocks reassembled
    std::vector<Tensor<T>> weights; // per block: [K x K_m], rows sum to 1
};

/// Re-expresses each block as a softmax-weighted convex combination of its
/// prototype dictionary: w = softmax(s C_m^T / (sqrt(d_c) tau_p)), out = w C_m.
template <typename T>
PrototypeProjection<T> project_prototypes(const Tensor<T>& blocks_flat, PrototypeMemory<T>& mem) {
    const int M = mem.blocks();
    const int d_h = blocks_flat.shape()[1];
    if (d_h % M != 0)
        throw ConfigError(cat("project_prototypes: width ", d_h, " not divisible by M = ", M));
    const int d_c = d_h / M;
    Graph<T>& g = *blocks_flat.graph();
    PrototypeProjection<T> out;
    out.weights.reserve(static_cast<size_t>(M));
    std::vector<Tensor<T>> parts;
    parts.reserve(static_cast<size_t>(M));
    for (int m = 0; m < M; ++m) {
        auto& mp = mem.memories[static_cast<size_t>(m)];
        if (mp.shape[1] != d_c)
            throw ShapeError(cat("project_prototypes: memory ", shape_str(mp.shape),
                                 " does not match block width ", d_c));
        auto C = g.leaf(mp);
        auto block = slice_cols(blocks_flat, m * d_c, (m + 1) * d_c);
        const T inv = static_cast<T>(1.0 / (std::sqrt(static_cast<double>(d_c)) * mem.tau_p));
        auto w = softmax_axis(scale(matmul(block, transpose(C)), inv), 1);
        out.weights.push_back(w);
        parts.push_back(matmul(w, C));
    }
    out.projected = concat_cols(parts);
    return out;
}

/// Residual single-head scaled dot-product attention among slots.
template <typename T>
Tensor<T> slot_self_attention(const Tensor<T>& slots_flat, SlotSelfAttention<T>& sa) {
    Graph<T>& g = *slots_flat.graph();
    const int dim = slots_flat.shape()[1];
    auto Q = matmul(slots_flat, g.leaf(sa.Wq));
    auto Kp = matmul(slots_flat, g.leaf(sa.Wk));
    auto V = matmul(slots_flat, g.leaf(sa.Wv));
    const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim)));
    auto attn = softmax_axis(scale(matmul(Q, transpose(Kp)), inv), 1);
    return add(slots_flat, matmul(attn, V));
}

// ---------------------------------------------------------------------------
// Full refinement.

/// One modality's view of the refinement parameters. The prototype memory and
/// the initial slots are shared across modalities; everything else is
/// per-modality.
template <typename T>
struct SlotRefiner {
    ModalityProjections<T>* proj = nullptr;
    std::vector<BlockUpdater<T>>* updaters = nullptr;
    SlotSelfAttention<T>* self_attn = nullptr;
    PrototypeMemory<T>* prototypes = nullptr;
};

template <typename T>
struct RefineTrace {
    std::vector<AttentionRecord<T>> records;           // one per iteration
    std::vector<std::vector<Tensor<T>>> proto_weights; // per iteration, per block
    std::vector<Tensor<T>> pre_projection;             // block values fed to the memory
};

/// Runs T iterations of assignment -> aggregation -> block update ->
/// prototype projection -> reassembly -> slot self-attention.
template <typename T>
SlotState<T> refine(const SlotState<T>& s0, const Tensor<T>& tokens, SlotRefiner<T>& rf,
                    int iterations, RefineTrace<T>* trace = nullptr) {
    if (iterations < 1)
        throw ConfigError(cat("refine: iteration count must be >= 1, got ", iterations));
    const int K = s0.K(), M = s0.M(), d_c = s0.d_c();
    auto slots_flat = reshape(s0.slots, {K, M * d_c});
    for (int t = 0; t < iterations; ++t) {
        auto rec = compute_assignment(slots_flat, tokens, *rf.proj);
        auto summaries = normalize_and_aggregate(rec, tokens, *rf.proj);
        auto blocks = update_blocks(slots_flat, summaries, *rf.updaters);
        auto pp = project_prototypes(blocks, *rf.prototypes);
        slots_flat = slot_self_attention(pp.projected, *rf.self_attn);
        if (trace) {
            trace->records.push_back(std::move(rec));
            trace->proto_weights.push_back(std::move(pp.weights));
            trace->pre_projection.push_back(blocks);
        }
    }
    return SlotState<T>{reshape(slots_flat, {K, M, d_c}), s0.iteration + iterations};
}

} // namespace dico
