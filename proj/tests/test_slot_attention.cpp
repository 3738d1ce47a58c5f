#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dico/gradcheck.hpp"
#include "dico/random.hpp"
#include "dico/slot_attention.hpp"

using dico::AttentionRecord;
using dico::Graph;
using dico::Parameter;
using dico::Tensor;

namespace {

struct TinyModality {
    int K, M, d_c, d_h, d, K_m;
    Parameter<double> slots0;
    dico::ModalityProjections<double> proj;
    std::vector<dico::BlockUpdater<double>> updaters;
    dico::SlotSelfAttention<double> sa;
    dico::PrototypeMemory<double> mem;

    dico::SlotRefiner<double> refiner() { return {&proj, &updaters, &sa, &mem}; }
    void all_params(std::vector<Parameter<double>*>& out) {
        out.push_back(&slots0);
        proj.collect(out);
        for (auto& u : updaters) u.collect(out);
        sa.collect(out);
        mem.collect(out);
    }
};

TinyModality make_tiny(int K, int M, int d_c, int d, int K_m, double tau_p, uint64_t seed) {
    dico::Rng rng(seed);
    TinyModality t{K, M, d_c, M * d_c, d, K_m,
                   dico::init_slots<double>(K, M, d_c, seed * 31 + 1),
                   dico::make_projections<double>("proj", M * d_c, d, M * d_c, rng),
                   dico::make_block_updaters<double>("upd", M, d_c, rng),
                   dico::make_self_attention<double>("sa", M * d_c, rng),
                   dico::make_prototype_memory<double>("proto", M, K_m, d_c, tau_p, rng)};
    return t;
}

Tensor<double> random_tokens(Graph<double>& g, int n, int d, uint64_t seed) {
    dico::Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(n) * d);
    for (auto& x : v) x = rng.normal();
    return g.constant({n, d}, v);
}

double gelu_oracle(double x) {
    const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1 + std::tanh(u));
}

// independent dense helpers for the loop oracles
std::vector<double> matvecT(const std::vector<double>& W, const std::vector<double>& x, int rows,
                            int cols) {
    // y = x * W for row-vector x (len rows), W [rows x cols]
    std::vector<double> y(static_cast<size_t>(cols), 0.0);
    for (int j = 0; j < cols; ++j) {
        double acc = 0;
        for (int i = 0; i < rows; ++i) acc += x[static_cast<size_t>(i)] * W[static_cast<size_t>(i) * cols + j];
        y[static_cast<size_t>(j)] = acc;
    }
    return y;
}

} // namespace

TEST_CASE("init_slots shapes and determinism", "[slots]") {
    auto p = dico::init_slots<double>(8, 8, 256, 0);
    REQUIRE(p.shape == dico::Shape{8, 8, 256});
    REQUIRE(p.numel() == 8u * 8u * 256u);

    auto tiny = dico::init_slots<double>(1, 1, 1, 42);
    REQUIRE(tiny.numel() == 1u);

    auto a = dico::init_slots<double>(3, 2, 5, 7);
    auto b = dico::init_slots<double>(3, 2, 5, 7);
    REQUIRE(a.value == b.value); // bit identical

    REQUIRE_THROWS_AS(dico::init_slots<double>(0, 1, 1, 0), dico::ConfigError);
}

TEST_CASE("compute_assignment contract", "[slots]") {
    SECTION("single token, single slot is certainty") {
        auto t = make_tiny(1, 1, 3, 4, 2, 1.0, 9);
        Graph<double> g;
        auto slots = dico::reshape(g.leaf(t.slots0), {1, 3});
        auto rec = dico::compute_assignment(slots, random_tokens(g, 1, 4, 10), t.proj);
        REQUIRE(rec.assign.value().size() == 1);
        REQUIRE(rec.assign.value()[0] == 1.0);
    }
    SECTION("hand case: unit projections give raw score 1/sqrt(2)") {
        dico::ModalityProjections<double> proj;
        proj.d_h = 2;
        proj.q = Parameter<double>("q", {1, 2});
        proj.q.value = {1, 0};
        proj.k = Parameter<double>("k", {1, 2});
        proj.k.value = {1, 0};
        proj.v = Parameter<double>("v", {1, 2});
        Graph<double> g;
        auto slots = g.constant({1, 1}, {1.0});
        auto tokens = g.constant({1, 1}, {1.0});
        auto rec = dico::compute_assignment(slots, tokens, proj);
        REQUIRE(std::abs(rec.raw.value()[0] - 1.0 / std::sqrt(2.0)) < 1e-12);
    }
    SECTION("equal projected queries split every row evenly") {
        auto t = make_tiny(2, 1, 3, 4, 2, 1.0, 11);
        Graph<double> g;
        // two identical slots -> identical queries
        std::vector<double> s(6);
        for (int j = 0; j < 3; ++j) s[static_cast<size_t>(j)] = s[static_cast<size_t>(3 + j)] = 0.1 * (j + 1);
        auto slots = g.constant({2, 3}, s);
        auto rec = dico::compute_assignment(slots, random_tokens(g, 5, 4, 12), t.proj);
        for (size_t i = 0; i < 5; ++i) {
            REQUIRE(std::abs(rec.assign.value()[i * 2] - 0.5) < 1e-12);
            REQUIRE(std::abs(rec.assign.value()[i * 2 + 1] - 0.5) < 1e-12);
        }
    }
    SECTION("empty token sequence is an input error") {
        auto t = make_tiny(2, 1, 3, 4, 2, 1.0, 13);
        Graph<double> g;
        auto slots = dico::reshape(g.leaf(t.slots0), {2, 3});
        auto empty = g.constant({0, 4}, {});
        REQUIRE_THROWS_AS(dico::compute_assignment(slots, empty, t.proj), dico::ShapeError);
    }
}

TEST_CASE("normalize_and_aggregate matches hand arithmetic and the loop oracle", "[slots]") {
    SECTION("hand case: column [0.2, 0.6] over identity values") {
        dico::ModalityProjections<double> proj;
        proj.d_h = 2;
        proj.q = Parameter<double>("q", {1, 2});
        proj.k = Parameter<double>("k", {2, 2});
        proj.v = Parameter<double>("v", {2, 2});
        proj.v.value = {1, 0, 0, 1};
        Graph<double> g;
        AttentionRecord<double> rec;
        rec.raw = g.constant({2, 1}, {0.0, 0.0});
        rec.assign = g.constant({2, 1}, {0.2, 0.6});
        auto tokens = g.constant({2, 2}, {1, 0, 0, 1});
        auto u = dico::normalize_and_aggregate(rec, tokens, proj);
        REQUIRE(std::abs(rec.normalized.value()[0] - 0.25) < 1e-7);
        REQUIRE(std::abs(rec.normalized.value()[1] - 0.75) < 1e-7);
        REQUIRE(std::abs(u.value()[0] - 0.25) < 1e-7);
        REQUIRE(std::abs(u.value()[1] - 0.75) < 1e-7);
    }
    SECTION("uniform attention gives the mean of projected tokens") {
        auto t = make_tiny(2, 1, 3, 4, 2, 1.0, 14);
        Graph<double> g;
        const int n = 4;
        auto tokens = random_tokens(g, n, 4, 15);
        AttentionRecord<double> rec;
        rec.raw = g.zeros({n, 2});
        rec.assign = g.constant({n, 2}, std::vector<double>(n * 2, 0.5));
        auto u = dico::normalize_and_aggregate(rec, tokens, t.proj);
        auto v_x = dico::matmul(tokens, g.leaf(t.proj.v));
        for (int k = 0; k < 2; ++k)
            for (int j = 0; j < t.d_h; ++j) {
                double mean = 0;
                for (int i = 0; i < n; ++i) mean += v_x.value()[static_cast<size_t>(i) * t.d_h + j];
                mean /= n;
                REQUIRE(std::abs(u.value()[static_cast<size_t>(k) * t.d_h + j] - mean) < 1e-7);
            }
    }
    SECTION("random case vs explicit double loop") {
        auto t = make_tiny(3, 2, 2, 6, 2, 1.0, 16);
        Graph<double> g;
        auto tokens = random_tokens(g, 5, 6, 17);
        auto slots = dico::reshape(g.leaf(t.slots0), {3, 4});
        auto rec = dico::compute_assignment(slots, tokens, t.proj);
        auto u = dico::normalize_and_aggregate(rec, tokens, t.proj);

        const auto& A = rec.assign.value();
        auto v_x = dico::matmul(tokens, g.leaf(t.proj.v));
        const auto& V = v_x.value();
        for (int k = 0; k < 3; ++k) {
            double mass = 1e-8;
            for (int i = 0; i < 5; ++i) mass += A[static_cast<size_t>(i) * 3 + k];
            for (int j = 0; j < t.d_h; ++j) {
                double acc = 0;
                for (int i = 0; i < 5; ++i)
                    acc += A[static_cast<size_t>(i) * 3 + k] / mass * V[static_cast<size_t>(i) * t.d_h + j];
                REQUIRE(std::abs(u.value()[static_cast<size_t>(k) * t.d_h + j] - acc) <= 1e-10);
            }
        }
    }
}

TEST_CASE("update_blocks", "[slots]") {
    SECTION("all-zero updaters halve the previous slots") {
        auto t = make_tiny(2, 2, 3, 4, 2, 1.0, 18);
        for (auto& u : t.updaters) {
            std::vector<Parameter<double>*> ps;
            u.collect(ps);
            for (auto* p : ps) std::fill(p->value.begin(), p->value.end(), 0.0);
        }
        Graph<double> g;
        auto slots = dico::reshape(g.leaf(t.slots0), {2, 6});
        auto summaries = random_tokens(g, 2, 6, 19);
        auto out = dico::update_blocks(slots, summaries, t.updaters);
        for (size_t i = 0; i < out.numel(); ++i)
            REQUIRE(std::abs(out.value()[i] - 0.5 * slots.value()[i]) < 1e-12);
    }
    SECTION("M = 1 reduces to one shared GRU+MLP over whole slots") {
        auto t = make_tiny(2, 1, 6, 4, 2, 1.0, 20);
        Graph<double> g;
        auto slots = dico::reshape(g.leaf(t.slots0), {2, 6});
        auto summaries = random_tokens(g, 2, 6, 21);
        auto out = dico::update_blocks(slots, summaries, t.updaters);

        auto& u = t.updaters[0];
        auto s_hat = dico::gru_cell(slots, summaries, u.gates(g));
        auto normed = dico::layer_norm(s_hat, g.leaf(u.ln_gamma), g.leaf(u.ln_beta),
                                       dico::kLayerNormEps);
        auto mlp = dico::add_rowvec(
            dico::matmul(dico::gelu(dico::add_rowvec(dico::matmul(normed, g.leaf(u.W1)), g.leaf(u.b1))),
                         g.leaf(u.W2)),
            g.leaf(u.b2));
        auto expect = dico::add(s_hat, mlp);
        REQUIRE(out.value() == expect.value());
    }
    SECTION("random instance vs per-block formula oracle") {
        auto t = make_tiny(3, 2, 4, 5, 2, 1.0, 22);
        Graph<double> g;
        auto slots = dico::reshape(g.leaf(t.slots0), {3, 8});
        auto summaries = random_tokens(g, 3, 8, 23);
        auto out = dico::update_blocks(slots, summaries, t.updaters);

        const int d_c = 4;
        for (int k = 0; k < 3; ++k)
            for (int m = 0; m < 2; ++m) {
                auto& u = t.updaters[static_cast<size_t>(m)];
                std::vector<double> h(static_cast<size_t>(d_c)), x(static_cast<size_t>(d_c));
                for (int j = 0; j < d_c; ++j) {
                    h[static_cast<size_t>(j)] = slots.value()[static_cast<size_t>(k) * 8 + m * d_c + j];
                    x[static_cast<size_t>(j)] = summaries.value()[static_cast<size_t>(k) * 8 + m * d_c + j];
                }
                auto gate = [&](const Parameter<double>& W, const Parameter<double>& U,
                                const Parameter<double>& b, const std::vector<double>& hh) {
                    auto gz = matvecT(W.value, x, d_c, d_c);
                    auto gh = matvecT(U.value, hh, d_c, d_c);
                    for (int j = 0; j < d_c; ++j) gz[static_cast<size_t>(j)] += gh[static_cast<size_t>(j)] + b.value[static_cast<size_t>(j)];
                    return gz;
                };
                auto z = gate(u.Wz, u.Uz, u.bz, h);
                auto r = gate(u.Wr, u.Ur, u.br, h);
                for (auto& v : z) v = 1.0 / (1.0 + std::exp(-v));
                for (auto& v : r) v = 1.0 / (1.0 + std::exp(-v));
                std::vector<double> rh(static_cast<size_t>(d_c));
                for (int j = 0; j < d_c; ++j) rh[static_cast<size_t>(j)] = r[static_cast<size_t>(j)] * h[static_cast<size_t>(j)];
                auto cand = gate(u.Wh, u.Uh, u.bh, rh);
                for (auto& v : cand) v = std::tanh(v);
                std::vector<double> s_hat(static_cast<size_t>(d_c));
                for (int j = 0; j < d_c; ++j)
                    s_hat[static_cast<size_t>(j)] = (1 - z[static_cast<size_t>(j)]) * h[static_cast<size_t>(j)] +
                                                    z[static_cast<size_t>(j)] * cand[static_cast<size_t>(j)];
                // layer norm (biased) + affine
                double mean = 0;
                for (double v : s_hat) mean += v;
                mean /= d_c;
                double var = 0;
                for (double v : s_hat) var += (v - mean) * (v - mean);
                var /= d_c;
                std::vector<double> normed(static_cast<size_t>(d_c));
                for (int j = 0; j < d_c; ++j)
                    normed[static_cast<size_t>(j)] = u.ln_gamma.value[static_cast<size_t>(j)] *
                                                         (s_hat[static_cast<size_t>(j)] - mean) /
                                                         std::sqrt(var + dico::kLayerNormEps) +
                                                     u.ln_beta.value[static_cast<size_t>(j)];
                auto hidden = matvecT(u.W1.value, normed, d_c, d_c);
                for (int j = 0; j < d_c; ++j) hidden[static_cast<size_t>(j)] = gelu_oracle(hidden[static_cast<size_t>(j)] + u.b1.value[static_cast<size_t>(j)]);
                auto mlp = matvecT(u.W2.value, hidden, d_c, d_c);
                for (int j = 0; j < d_c; ++j) {
                    const double expect = s_hat[static_cast<size_t>(j)] + mlp[static_cast<size_t>(j)] + u.b2.value[static_cast<size_t>(j)];
                    REQUIRE(std::abs(out.value()[static_cast<size_t>(k) * 8 + m * d_c + j] - expect) <= 1e-10);
                }
            }
    }
    SECTION("width not divisible by M is a configuration error") {
        auto t = make_tiny(2, 2, 3, 4, 2, 1.0, 24);
        Graph<double> g;
        auto slots = g.zeros({2, 6});
        auto summaries = g.zeros({2, 7});
        REQUIRE_THROWS_AS(dico::update_blocks(slots, summaries, t.updaters), dico::Error);
    }
}

TEST_CASE("project_prototypes", "[slots]") {
    SECTION("a single prototype is always returned verbatim") {
        auto t = make_tiny(2, 1, 3, 4, 1, 1.0, 25);
        Graph<double> g;
        auto blocks = random_tokens(g, 2, 3, 26);
        auto pp = dico::project_prototypes(blocks, t.mem);
        for (int k = 0; k < 2; ++k)
            for (int j = 0; j < 3; ++j)
                REQUIRE(std::abs(pp.projected.value()[static_cast<size_t>(k) * 3 + j] -
                                 t.mem.memories[0].value[static_cast<size_t>(j)]) < 1e-12);
    }
    SECTION("hand case with identity memory") {
        dico::PrototypeMemory<double> mem;
        mem.tau_p = 1.0;
        mem.memories.emplace_back("c", dico::Shape{2, 2});
        mem.memories[0].value = {1, 0, 0, 1};
        Graph<double> g;
        auto blocks = g.constant({1, 2}, {1.0, 0.0});
        auto pp = dico::project_prototypes(blocks, mem);
        // scores [1/sqrt(2), 0]; the oracle is a direct softmax evaluation
        const double s = 1.0 / std::sqrt(2.0);
        const double w1 = std::exp(s) / (std::exp(s) + 1.0);
        REQUIRE(std::abs(w1 - 0.6697615493266569) < 1e-12);
        REQUIRE(std::abs(pp.weights[0].value()[0] - w1) < 1e-12);
        REQUIRE(std::abs(pp.weights[0].value()[1] - (1 - w1)) < 1e-12);
        REQUIRE(std::abs(pp.projected.value()[0] - w1) < 1e-12);
        REQUIRE(std::abs(pp.projected.value()[1] - (1 - w1)) < 1e-12);
    }
    SECTION("equidistant input lands on the prototype midpoint") {
        dico::PrototypeMemory<double> mem;
        mem.tau_p = 1.0;
        mem.memories.emplace_back("c", dico::Shape{2, 2});
        mem.memories[0].value = {1, 0, 0, 1};
        Graph<double> g;
        auto blocks = g.constant({1, 2}, {0.37, 0.37});
        auto pp = dico::project_prototypes(blocks, mem);
        REQUIRE(std::abs(pp.weights[0].value()[0] - 0.5) < 1e-12);
        REQUIRE(std::abs(pp.projected.value()[0] - 0.5) < 1e-12);
        REQUIRE(std::abs(pp.projected.value()[1] - 0.5) < 1e-12);
    }
    SECTION("outputs stay inside the convex hull of the memory") {
        auto t = make_tiny(3, 2, 4, 5, 5, 1.0, 27);
        Graph<double> g;
        auto blocks = random_tokens(g, 3, 8, 28);
        auto pp = dico::project_prototypes(blocks, t.mem);
        for (int m = 0; m < 2; ++m) {
            const auto& C = t.mem.memories[static_cast<size_t>(m)].value;
            for (int j = 0; j < 4; ++j) {
                double lo = C[static_cast<size_t>(j)], hi = lo;
                for (int r = 1; r < 5; ++r) {
                    lo = std::min(lo, C[static_cast<size_t>(r) * 4 + j]);
                    hi = std::max(hi, C[static_cast<size_t>(r) * 4 + j]);
                }
                for (int k = 0; k < 3; ++k) {
                    const double v = pp.projected.value()[static_cast<size_t>(k) * 8 + m * 4 + j];
                    REQUIRE(v >= lo - 1e-12);
                    REQUIRE(v <= hi + 1e-12);
                }
            }
        }
    }
    SECTION("doubling the assignment temperature flattens the weights") {
        auto t1 = make_tiny(2, 2, 4, 5, 6, 1.0, 29);
        auto t2 = make_tiny(2, 2, 4, 5, 6, 1.0, 29); // same parameters
        t2.mem.tau_p = 2.0;
        Graph<double> g;
        auto blocks = random_tokens(g, 2, 8, 30);
        auto p1 = dico::project_prototypes(blocks, t1.mem);
        auto p2 = dico::project_prototypes(blocks, t2.mem);
        for (int m = 0; m < 2; ++m)
            for (int k = 0; k < 2; ++k) {
                double mx1 = 0, mx2 = 0;
                for (int r = 0; r < 6; ++r) {
                    mx1 = std::max(mx1, p1.weights[static_cast<size_t>(m)].value()[static_cast<size_t>(k) * 6 + r]);
                    mx2 = std::max(mx2, p2.weights[static_cast<size_t>(m)].value()[static_cast<size_t>(k) * 6 + r]);
                }
                REQUIRE(mx2 <= mx1 + 1e-12);
            }
    }
}

TEST_CASE("slot_self_attention", "[slots]") {
    SECTION("zero projections act as the identity") {
        auto t = make_tiny(3, 2, 2, 4, 2, 1.0, 31);
        for (auto* p : {&t.sa.Wq, &t.sa.Wk, &t.sa.Wv})
            std::fill(p->value.begin(), p->value.end(), 0.0);
        Graph<double> g;
        auto slots = random_tokens(g, 3, 4, 32);
        auto out = dico::slot_self_attention(slots, t.sa);
        REQUIRE(out.value() == slots.value());
    }
    SECTION("K = 1 with zero value projection returns the input") {
        auto t = make_tiny(1, 1, 4, 4, 2, 1.0, 33);
        std::fill(t.sa.Wv.value.begin(), t.sa.Wv.value.end(), 0.0);
        Graph<double> g;
        auto slots = random_tokens(g, 1, 4, 34);
        auto out = dico::slot_self_attention(slots, t.sa);
        REQUIRE(out.value() == slots.value());
    }
    SECTION("K = 2 random case matches the formula oracle") {
        auto t = make_tiny(2, 1, 3, 4, 2, 1.0, 35);
        Graph<double> g;
        auto slots = random_tokens(g, 2, 3, 36);
        auto out = dico::slot_self_attention(slots, t.sa);

        const int D = 3;
        const auto& S = slots.value();
        auto row = [&](int i) {
            return std::vector<double>(S.begin() + i * D, S.begin() + (i + 1) * D);
        };
        std::vector<std::vector<double>> Q, Kv, V;
        for (int i = 0; i < 2; ++i) {
            Q.push_back(matvecT(t.sa.Wq.value, row(i), D, D));
            Kv.push_back(matvecT(t.sa.Wk.value, row(i), D, D));
            V.push_back(matvecT(t.sa.Wv.value, row(i), D, D));
        }
        for (int i = 0; i < 2; ++i) {
            double s0 = 0, s1 = 0;
            for (int j = 0; j < D; ++j) {
                s0 += Q[static_cast<size_t>(i)][static_cast<size_t>(j)] * Kv[0][static_cast<size_t>(j)];
                s1 += Q[static_cast<size_t>(i)][static_cast<size_t>(j)] * Kv[1][static_cast<size_t>(j)];
            }
            s0 /= std::sqrt(3.0);
            s1 /= std::sqrt(3.0);
            const double mx = std::max(s0, s1);
            const double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
            const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
            for (int j = 0; j < D; ++j) {
                const double expect = S[static_cast<size_t>(i) * D + j] +
                                      a0 * V[0][static_cast<size_t>(j)] + a1 * V[1][static_cast<size_t>(j)];
                REQUIRE(std::abs(out.value()[static_cast<size_t>(i) * D + j] - expect) <= 1e-10);
            }
        }
    }
}

TEST_CASE("refine", "[slots]") {
    SECTION("T = 3 with the published slot shapes produces 3 records") {
        auto t = make_tiny(8, 8, 256, 16, 16, 1.0, 37);
        Graph<double> g;
        auto s0 = dico::slot_state(g, t.slots0);
        auto tokens = random_tokens(g, 2, 16, 38);
        dico::RefineTrace<double> trace;
        auto rf = t.refiner();
        auto sT = dico::refine(s0, tokens, rf, 3, &trace);
        REQUIRE(trace.records.size() == 3);
        REQUIRE(sT.iteration == 3);
        REQUIRE(sT.slots.shape() == dico::Shape{8, 8, 256});
        for (const auto& rec : trace.records)
            REQUIRE(rec.assign.shape() == dico::Shape{2, 8});
    }
    SECTION("permuting tokens leaves the final slots unchanged") {
        auto t = make_tiny(3, 2, 4, 5, 4, 1.0, 39);
        dico::Rng rng(40);
        const int n = 6, d = 5;
        std::vector<double> tok(static_cast<size_t>(n) * d);
        for (auto& v : tok) v = rng.normal();
        std::vector<int> perm{3, 0, 5, 1, 4, 2};
        std::vector<double> tok_p(tok.size());
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                tok_p[static_cast<size_t>(i) * d + j] = tok[static_cast<size_t>(perm[static_cast<size_t>(i)]) * d + j];

        auto rf = t.refiner();
        Graph<double> g1, g2;
        auto out1 = dico::refine(dico::slot_state(g1, t.slots0), g1.constant({n, d}, tok), rf, 3);
        auto out2 = dico::refine(dico::slot_state(g2, t.slots0), g2.constant({n, d}, tok_p), rf, 3);
        for (size_t i = 0; i < out1.slots.numel(); ++i)
            REQUIRE(std::abs(out1.slots.value()[i] - out2.slots.value()[i]) <= 1e-5);
    }
    SECTION("T = 1 equals the manual composition of the five sub-ops") {
        auto t = make_tiny(2, 2, 3, 4, 3, 1.0, 41);
        auto rf = t.refiner();
        Graph<double> g1;
        auto tokens1 = random_tokens(g1, 4, 4, 42);
        auto out = dico::refine(dico::slot_state(g1, t.slots0), tokens1, rf, 1);

        Graph<double> g2;
        auto tokens2 = random_tokens(g2, 4, 4, 42);
        auto slots = dico::reshape(g2.leaf(t.slots0), {2, 6});
        auto rec = dico::compute_assignment(slots, tokens2, t.proj);
        auto summaries = dico::normalize_and_aggregate(rec, tokens2, t.proj);
        auto blocks = dico::update_blocks(slots, summaries, t.updaters);
        auto pp = dico::project_prototypes(blocks, t.mem);
        auto manual = dico::slot_self_attention(pp.projected, t.sa);
        REQUIRE(out.slots.value() == manual.value());
    }
    SECTION("iteration count must be positive") {
        auto t = make_tiny(2, 2, 3, 4, 3, 1.0, 43);
        auto rf = t.refiner();
        Graph<double> g;
        auto tokens = random_tokens(g, 4, 4, 44);
        REQUIRE_THROWS_AS(dico::refine(dico::slot_state(g, t.slots0), tokens, rf, 0),
                          dico::ConfigError);
    }
}

TEST_CASE("attention invariants over random forwards", "[slots]") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        auto t = make_tiny(3, 2, 4, 6, 5, 1.0, 100 + seed);
        auto rf = t.refiner();
        Graph<double> g;
        auto tokens = random_tokens(g, 7, 6, 200 + seed);
        dico::RefineTrace<double> trace;
        dico::refine(dico::slot_state(g, t.slots0), tokens, rf, 2, &trace);
        for (const auto& rec : trace.records) {
            const auto& A = rec.assign.value();
            for (int i = 0; i < 7; ++i) {
                double row = 0;
                for (int k = 0; k < 3; ++k) row += A[static_cast<size_t>(i) * 3 + k];
                REQUIRE(std::abs(row - 1.0) <= 1e-5);
            }
            const auto& An = rec.normalized.value();
            for (int k = 0; k < 3; ++k) {
                double col = 0, mass = 0;
                for (int i = 0; i < 7; ++i) {
                    col += An[static_cast<size_t>(i) * 3 + k];
                    mass += A[static_cast<size_t>(i) * 3 + k];
                }
                if (mass > 0) REQUIRE(std::abs(col - 1.0) <= 1e-5);
            }
        }
    }
}

TEST_CASE("gradients flow through refine", "[slots][grad]") {
    auto t = make_tiny(2, 2, 3, 4, 3, 1.0, 55);
    dico::Rng rng(56);
    const int n = 3;
    std::vector<double> tok(static_cast<size_t>(n) * t.d);
    for (auto& v : tok) v = rng.normal();
    std::vector<double> w(static_cast<size_t>(t.K) * t.M * t.d_c);
    for (auto& v : w) v = rng.normal();

    auto rf = t.refiner();
    dico::LossBuilder<double> f = [&](Graph<double>& g) {
        auto tokens = g.constant({n, t.d}, tok);
        auto out = dico::refine(dico::slot_state(g, t.slots0), tokens, rf, 2);
        auto weights = g.constant(out.slots.shape(), w);
        return dico::sum(dico::mul(out.slots, weights));
    };

    std::vector<Parameter<double>*> checked{&t.slots0,           &t.proj.q,
                                            &t.proj.k,           &t.proj.v,
                                            &t.updaters[0].Wz,   &t.updaters[0].bh,
                                            &t.updaters[1].W1,   &t.updaters[0].ln_gamma,
                                            &t.sa.Wq,            &t.sa.Wv,
                                            &t.mem.memories[0],  &t.mem.memories[1]};
    for (auto* p : checked) {
        const double err = dico::finite_difference_check<double>(f, *p, 1e-5);
        INFO("refine grad vs FD for " << p->name << ": " << err);
        REQUIRE(err <= 1e-6);
    }
}
