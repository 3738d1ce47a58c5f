#pragma once

// Training objectives: bidirectional global InfoNCE, image-anchored slot- and
// block-level InfoNCE, identity cross-entropy at global and slot level, and
// attention-weighted reconstruction. Temperatures enter as learnable
// log-parameters, so they stay positive by construction.

#include <vector>

#include "dico/config.hpp"
#include "dico/error.hpp"
#include "dico/model.hpp"
#include "dico/tensor.hpp"

namespace dico {

namespace detail {

template <typename T>
std::vector<size_t> diagonal_indices(int B) {
    std::vector<size_t> idx(static_cast<size_t>(B));
    for (int i = 0; i < B; ++i) idx[static_cast<size_t>(i)] = static_cast<size_t>(i) * B + i;
    return idx;
}

} // namespace detail

/// -(1/B) sum_i [log softmax_row(S/tau)_ii + log softmax_row(S^T/tau)_ii].
template <typename T>
Tensor<T> bidirectional_infonce(const Tensor<T>& sim, const Tensor<T>& log_tau) {
    const int B = sim.shape()[0];
    if (B < 1) throw ShapeError("bidirectional_infonce: empty batch");
    if (sim.shape()[0] != sim.shape()[1])
        throw ShapeError(cat("bidirectional_infonce: similarity must be square, got ",
                             shape_str(sim.shape())));
    Graph<T>& g = *sim.graph();
    auto inv_tau = exp(neg(log_tau));
    auto diag = detail::diagonal_indices<T>(B);
    auto fwd = gather(log_softmax_axis(mul_scalar(sim, inv_tau), 1), diag);
    auto bwd = gather(log_softmax_axis(mul_scalar(transpose(sim), inv_tau), 1), diag);
    (void)g;
    return scale(sum(add(fwd, bwd)), static_cast<T>(-1.0 / B));
}

/// Matched-pair contrastive loss between the two global embeddings,
/// both retrieval directions included.
template <typename T>
Tensor<T> loss_global(const Tensor<T>& zg_v, const Tensor<T>& zg_t, const Tensor<T>& log_tau) {
    if (zg_v.shape() != zg_t.shape())
        throw ShapeError(cat("loss_global: embedding shapes differ ", shape_str(zg_v.shape()),
                             " vs ", shape_str(zg_t.shape())));
    return bidirectional_infonce(matmul(zg_v, transpose(zg_t)), log_tau);
}

namespace detail {

// Image-anchored InfoNCE summed over G aligned groups (slots, or slot-blocks).
// z_* are {B, G, d_e}-shaped stacks flattened row-major.
template <typename T>
Tensor<T> grouped_infonce(const Tensor<T>& z_v, const Tensor<T>& z_t,
                          const Tensor<T>& log_tau, int B, int G, int d_e,
                          bool bidirectional) {
    if (B < 1) throw ShapeError("grouped_infonce: empty batch");
    Graph<T>& g = *z_v.graph();
    (void)g;
    auto flat_v = reshape(z_v, {B * G, d_e});
    auto flat_t = reshape(z_t, {B * G, d_e});
    auto inv_tau = exp(neg(log_tau));
    auto diag = diagonal_indices<T>(B);

    Tensor<T> acc;
    for (int k = 0; k < G; ++k) {
        std::vector<int> rows(static_cast<size_t>(B));
        for (int i = 0; i < B; ++i) rows[static_cast<size_t>(i)] = i * G + k;
        auto v_k = take_rows(flat_v, rows);
        auto t_k = take_rows(flat_t, rows);
        auto sim = mul_scalar(matmul(v_k, transpose(t_k)), inv_tau);
        auto part = gather(log_softmax_axis(sim, 1), diag);
        if (bidirectional)
            part = add(part, gather(log_softmax_axis(transpose(sim), 1), diag));
        acc = acc.valid() ? add(acc, sum(part)) : sum(part);
    }
    return scale(acc, static_cast<T>(-1.0 / B));
}

} // namespace detail

/// Slot-level alignment, image-anchored (one direction), summed over slots.
template <typename T>
Tensor<T> loss_slot(const Tensor<T>& zs_v, const Tensor<T>& zs_t, const Tensor<T>& log_tau,
                    bool bidirectional = false) {
    const auto& s = zs_v.shape();
    if (s.size() != 3 || zs_t.shape() != s)
        throw ShapeError(cat("loss_slot: expected matching {B,K,d_e} stacks, got ",
                             shape_str(zs_v.shape()), " vs ", shape_str(zs_t.shape())));
    return detail::grouped_infonce(zs_v, zs_t, log_tau, s[0], s[1], s[2], bidirectional);
}

/// Block-level alignment: as loss_slot with groups (k, m).
template <typename T>
Tensor<T> loss_block(const Tensor<T>& zb_v, const Tensor<T>& zb_t, const Tensor<T>& log_tau,
                     bool bidirectional = false) {
    const auto& s = zb_v.shape();
    if (s.size() != 4 || zb_t.shape() != s)
        throw ShapeError(cat("loss_block: expected matching {B,K,M,d_e} stacks, got ",
                             shape_str(zb_v.shape()), " vs ", shape_str(zb_t.shape())));
    return detail::grouped_infonce(zb_v, zb_t, log_tau, s[0], s[1] * s[2], s[3], bidirectional);
}

/// Sum over rows of -log P(label | row) under a linear classifier.
template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& z, const std::vector<int>& labels,
                            const Tensor<T>& W, const Tensor<T>& b) {
    const int rows = z.shape()[0];
    const int classes = W.shape()[1];
    if (static_cast<int>(labels.size()) != rows)
        throw ShapeError(cat("cross_entropy_sum: ", labels.size(), " labels for ", rows, " rows"));
    std::vector<size_t> idx(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) {
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= classes)
            throw DataError(cat("cross_entropy_sum: label ", labels[static_cast<size_t>(i)],
                                " outside [0,", classes, ")"));
        idx[static_cast<size_t>(i)] = static_cast<size_t>(i) * classes + labels[static_cast<size_t>(i)];
    }
    auto logits = add_rowvec(matmul(z, W), b);
    return neg(sum(gather(log_softmax_axis(logits, 1), idx)));
}

/// Global identity supervision: both modalities classified with the shared
/// head, normalized by batch size.
template <typename T>
Tensor<T> loss_id_global(const Tensor<T>& zg_v, const Tensor<T>& zg_t,
                         const std::vector<int>& labels, const Tensor<T>& W, const Tensor<T>& b) {
    const int B = zg_v.shape()[0];
    auto total = add(cross_entropy_sum(zg_v, labels, W, b),
                     cross_entropy_sum(zg_t, labels, W, b));
    return scale(total, static_cast<T>(1.0 / B));
}

/// Slot identity supervision: every slot embedding of both modalities carries
/// the sample label; summed over slots, normalized by batch size only.
template <typename T>
Tensor<T> loss_id_slot(const Tensor<T>& zs_v, const Tensor<T>& zs_t,
                       const std::vector<int>& labels, const Tensor<T>& W, const Tensor<T>& b) {
    const auto& s = zs_v.shape();
    const int B = s[0], K = s[1], d_e = s[2];
    std::vector<int> slot_labels(static_cast<size_t>(B) * K);
    for (int i = 0; i < B; ++i)
        for (int k = 0; k < K; ++k)
            slot_labels[static_cast<size_t>(i) * K + k] = labels[static_cast<size_t>(i)];
    auto v = reshape(zs_v, {B * K, d_e});
    auto t = reshape(zs_t, {B * K, d_e});
    auto total = add(cross_entropy_sum(v, slot_labels, W, b),
                     cross_entropy_sum(t, slot_labels, W, b));
    return scale(total, static_cast<T>(1.0 / B));
}

/// Squared reconstruction error of one modality for one sample:
/// X_hat = A^(T) Dec(S^(T)), error summed over tokens and feature dims.
template <typename T>
Tensor<T> reconstruction_sq_error(const Tensor<T>& encoded_tokens, const Tensor<T>& final_assign,
                                  const Tensor<T>& slots_flat, const Tensor<T>& decoder) {
    auto decoded = matmul(slots_flat, decoder);       // [K x d]
    auto xhat = matmul(final_assign, decoded);        // [n x d]
    auto diff = sub(xhat, encoded_tokens);
    return sum(mul(diff, diff));
}

/// Batch reconstruction loss: (1/B) sum_i (|X_hat_v - X_v|^2 + |X_hat_t - X_t|^2).
template <typename T>
Tensor<T> loss_rec(Graph<T>& g, DiCoModel<T>& model, const std::vector<SampleForward<T>>& samples) {
    const int B = static_cast<int>(samples.size());
    if (B < 1) throw ShapeError("loss_rec: empty batch");
    Tensor<T> acc;
    auto dec_v = g.leaf(model.image.decoder);
    auto dec_t = g.leaf(model.text.decoder);
    const int K = model.cfg.K, width = model.cfg.M * model.cfg.d_c;
    for (const auto& s : samples) {
        if (s.img.trace.records.empty() || s.txt.trace.records.empty())
            throw GraphError("loss_rec: refine trace with attention records required");
        auto img_term = reconstruction_sq_error(s.img.seq.tokens,
                                                s.img.trace.records.back().assign,
                                                reshape(s.img.slots.slots, {K, width}), dec_v);
        auto txt_term = reconstruction_sq_error(s.txt.seq.tokens,
                                                s.txt.trace.records.back().assign,
                                                reshape(s.txt.slots.slots, {K, width}), dec_t);
        auto both = add(img_term, txt_term);
        acc = acc.valid() ? add(acc, both) : both;
    }
    return scale(acc, static_cast<T>(1.0 / B));
}

/// The six loss components of one training step.
template <typename T>
struct LossParts {
    Tensor<T> global, slot, block, id_global, id_slot, rec;
};

/// L = (L_global + lambda_s L_slot + lambda_b L_block)
///   + (L_ID_global + L_ID_slot) + lambda_r L_rec,
/// with the identity terms gated by their config switches.
template <typename T>
Tensor<T> total_loss(const LossParts<T>& parts, const LossConfig& cfg) {
    if (cfg.lambda_s < 0 || cfg.lambda_b < 0 || cfg.lambda_r < 0)
        throw ConfigError("total_loss: loss weights must be nonnegative");
    auto L = parts.global;
    L = add(L, scale(parts.slot, static_cast<T>(cfg.lambda_s)));
    L = add(L, scale(parts.block, static_cast<T>(cfg.lambda_b)));
    L = add(L, scale(parts.id_global, static_cast<T>(cfg.id_global ? 1.0 : 0.0)));
    L = add(L, scale(parts.id_slot, static_cast<T>(cfg.id_slot ? 1.0 : 0.0)));
    L = add(L, scale(parts.rec, static_cast<T>(cfg.lambda_r)));
    return L;
}

} // namespace dico
