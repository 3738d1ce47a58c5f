#pragma once

// Assembles the full model: shared slot init and prototype memories, one
// encoder/projection/updater/self-attention/decoder stack per modality,
// embedding heads, identity classifiers and learnable log-temperatures.

#include <string>
#include <vector>

#include "dico/config.hpp"
#include "dico/encoders.hpp"
#include "dico/slot_attention.hpp"
#include "dico/synthdata.hpp"

namespace dico {

template <typename T>
struct ModalityParams {
    TokenEncoder<T> encoder;
    ModalityProjections<T> proj;
    std::vector<BlockUpdater<T>> updaters;
    SlotSelfAttention<T> self_attn;
    Parameter<T> decoder; // [M*d_c x d], attention-weighted slot broadcast

    void collect(std::vector<Parameter<T>*>& out) {
        encoder.collect(out);
        proj.collect(out);
        for (auto& u : updaters) u.collect(out);
        self_attn.collect(out);
        out.push_back(&decoder);
    }
};

template <typename T>
struct DiCoModel {
    ModelConfig cfg;
    int id_classes = 0;
    int max_text_len = 0;

    Parameter<T> slots0;          // shared S^(0)
    ModalityParams<T> image, text;
    PrototypeMemory<T> prototypes; // shared across modalities
    EmbeddingHeads<T> heads;       // shared across modalities
    Parameter<T> id_global_w, id_global_b;
    Parameter<T> id_slot_w, id_slot_b;
    Parameter<T> log_tau, log_tau_s, log_tau_b;

    /// Deterministic registration order; also the checkpoint record order.
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        out.push_back(&slots0);
        image.collect(out);
        text.collect(out);
        prototypes.collect(out);
        heads.collect(out);
        out.push_back(&id_global_w);
        out.push_back(&id_global_b);
        out.push_back(&id_slot_w);
        out.push_back(&id_slot_b);
        out.push_back(&log_tau);
        out.push_back(&log_tau_s);
        out.push_back(&log_tau_b);
        return out;
    }

    void zero_grads() {
        for (auto* p : parameters()) p->zero_grad();
    }

    SlotRefiner<T> refiner(ModalityParams<T>& m) {
        return {&m.proj, &m.updaters, &m.self_attn, &prototypes};
    }
};

template <typename T>
ModalityParams<T> make_modality(const std::string& prefix, const ModelConfig& mc, int max_len,
                                bool positional, Rng& rng) {
    ModalityParams<T> m;
    m.encoder = make_encoder<T>(prefix + ".enc", mc.d_raw, mc.d, max_len, positional, rng);
    m.proj = make_projections<T>(prefix + ".proj", mc.M * mc.d_c, mc.d, mc.d_h, rng);
    m.updaters = make_block_updaters<T>(prefix + ".upd", mc.M, mc.d_c, rng);
    m.self_attn = make_self_attention<T>(prefix + ".sa", mc.M * mc.d_c, rng);
    m.decoder = Parameter<T>(prefix + ".dec", {mc.M * mc.d_c, mc.d});
    fill_normal(m.decoder, rng, 1.0 / std::sqrt(static_cast<double>(mc.M * mc.d_c)));
    return m;
}

template <typename T>
DiCoModel<T> make_model(const ModelConfig& mc, const LossConfig& lc, int id_classes,
                        int max_text_len, uint64_t seed) {
    if (mc.d_h != mc.M * mc.d_c)
        throw ConfigError(cat("make_model: d_h = ", mc.d_h, " must equal M*d_c = ",
                              mc.M * mc.d_c));
    DiCoModel<T> model;
    model.cfg = mc;
    model.id_classes = id_classes;
    model.max_text_len = max_text_len;

    model.slots0 = init_slots<T>(mc.K, mc.M, mc.d_c, derive_seed(seed, 1));

    Rng rng(derive_seed(seed, 2));
    model.image = make_modality<T>("img", mc, 0, /*positional=*/false, rng);
    model.text = make_modality<T>("txt", mc, max_text_len, /*positional=*/true, rng);
    model.prototypes = make_prototype_memory<T>("proto", mc.M, mc.K_m, mc.d_c, mc.tau_p, rng);
    model.heads = make_heads<T>("head", mc.d, mc.M * mc.d_c, mc.d_c, mc.d_e, rng);

    model.id_global_w = Parameter<T>("id_global.w", {mc.d_e, id_classes});
    fill_normal(model.id_global_w, rng, 1.0 / std::sqrt(static_cast<double>(mc.d_e)));
    model.id_global_b = Parameter<T>("id_global.b", {id_classes});
    model.id_slot_w = Parameter<T>("id_slot.w", {mc.d_e, id_classes});
    fill_normal(model.id_slot_w, rng, 1.0 / std::sqrt(static_cast<double>(mc.d_e)));
    model.id_slot_b = Parameter<T>("id_slot.b", {id_classes});

    auto log_init = [](const char* name, double tau) {
        Parameter<T> p(name, {1});
        p.value[0] = static_cast<T>(std::log(tau));
        return p;
    };
    model.log_tau = log_init("log_tau", lc.tau_init);
    model.log_tau_s = log_init("log_tau_s", lc.tau_s_init);
    model.log_tau_b = log_init("log_tau_b", lc.tau_b_init);
    return model;
}

/// One modality's forward products for a single sample.
template <typename T>
struct ModalityForward {
    TokenSequence<T> seq;
    SlotState<T> slots;
    RefineTrace<T> trace;
    LevelEmbeddings<T> z;
};

template <typename T>
struct SampleForward {
    ModalityForward<T> img, txt;
};

template <typename T>
ModalityForward<T> forward_modality(Graph<T>& g, DiCoModel<T>& model, ModalityParams<T>& params,
                                    const RawMat& raw_tokens) {
    ModalityForward<T> out;
    out.seq = encode(g, raw_to_tensor(g, raw_tokens), params.encoder);
    auto rf = model.refiner(params);
    out.slots = refine(slot_state(g, model.slots0), out.seq.tokens, rf, model.cfg.T, &out.trace);
    out.z = embed_levels(g, out.seq.global, out.slots, model.heads);
    return out;
}

template <typename T>
SampleForward<T> forward_sample(Graph<T>& g, DiCoModel<T>& model, const SyntheticPair& pair) {
    SampleForward<T> s;
    s.img = forward_modality(g, model, model.image, pair.image_tokens);
    s.txt = forward_modality(g, model, model.text, pair.text_tokens);
    return s;
}

/// Embeddings stacked over a batch, shaped the way the losses expect.
template <typename T>
struct BatchEmbeddings {
    Tensor<T> zg_v, zg_t; // {B, d_e}
    Tensor<T> zs_v, zs_t; // {B, K, d_e}
    Tensor<T> zb_v, zb_t; // {B, K, M, d_e}
};

template <typename T>
BatchEmbeddings<T> stack_batch(Graph<T>& /*g*/, const std::vector<SampleForward<T>>& samples,
                               int K, int M, int d_e) {
    const int B = static_cast<int>(samples.size());
    std::vector<Tensor<T>> g_v, g_t, s_v, s_t, b_v, b_t;
    for (const auto& s : samples) {
        g_v.push_back(s.img.z.z_global);
        g_t.push_back(s.txt.z.z_global);
        s_v.push_back(s.img.z.z_slots);
        s_t.push_back(s.txt.z.z_slots);
        b_v.push_back(s.img.z.z_blocks);
        b_t.push_back(s.txt.z.z_blocks);
    }
    BatchEmbeddings<T> out;
    out.zg_v = reshape(concat_rows(g_v), {B, d_e});
    out.zg_t = reshape(concat_rows(g_t), {B, d_e});
    out.zs_v = reshape(concat_rows(s_v), {B, K, d_e});
    out.zs_t = reshape(concat_rows(s_t), {B, K, d_e});
    out.zb_v = reshape(concat_rows(b_v), {B, K, M, d_e});
    out.zb_t = reshape(concat_rows(b_t), {B, K, M, d_e});
    return out;
}

} // namespace dico
