#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dico/encoders.hpp"
#include "dico/model.hpp"

using dico::Graph;
using dico::Parameter;

namespace {

dico::RawMat random_raw(int n, int d, uint64_t seed) {
    dico::RawMat m(n, d);
    dico::Rng rng(seed);
    for (auto& v : m.v) v = rng.normal();
    return m;
}

} // namespace

TEST_CASE("encode basics", "[encoders]") {
    dico::Rng rng(1);
    auto enc = dico::make_encoder<double>("enc", 5, 4, 0, false, rng);

    SECTION("a single token is its own global summary") {
        Graph<double> g;
        auto seq = dico::encode(g, dico::raw_to_tensor(g, random_raw(1, 5, 2)), enc);
        REQUIRE(seq.global.shape() == dico::Shape{1, 4});
        for (int j = 0; j < 4; ++j)
            REQUIRE(std::abs(seq.global.value()[static_cast<size_t>(j)] -
                             seq.tokens.value()[static_cast<size_t>(j)]) < 1e-4);
    }
    SECTION("zero weights and zero input give zero tokens") {
        auto zero_enc = dico::make_encoder<double>("z", 5, 4, 0, false, rng);
        std::fill(zero_enc.W.value.begin(), zero_enc.W.value.end(), 0.0);
        Graph<double> g;
        dico::RawMat zeros(3, 5);
        auto seq = dico::encode(g, dico::raw_to_tensor(g, zeros), zero_enc);
        for (double v : seq.tokens.value()) REQUIRE(v == 0.0);
    }
    SECTION("deterministic under fixed parameters") {
        auto raw = random_raw(4, 5, 3);
        Graph<double> g1, g2;
        auto a = dico::encode(g1, dico::raw_to_tensor(g1, raw), enc);
        auto b = dico::encode(g2, dico::raw_to_tensor(g2, raw), enc);
        REQUIRE(a.tokens.value() == b.tokens.value());
        REQUIRE(a.global.value() == b.global.value());
    }
    SECTION("empty input is rejected") {
        Graph<double> g;
        auto empty = g.constant({0, 5}, {});
        REQUIRE_THROWS_AS(dico::encode(g, empty, enc), dico::ShapeError);
    }
    SECTION("image path commutes with token permutation") {
        auto raw = random_raw(4, 5, 6);
        dico::RawMat permuted(4, 5);
        const int perm[4] = {2, 0, 3, 1};
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 5; ++j) permuted.row(i)[j] = raw.row(perm[i])[j];
        Graph<double> g1, g2;
        auto a = dico::encode(g1, dico::raw_to_tensor(g1, raw), enc);
        auto b = dico::encode(g2, dico::raw_to_tensor(g2, permuted), enc);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                REQUIRE(a.tokens.value()[static_cast<size_t>(perm[i]) * 4 + j] ==
                        b.tokens.value()[static_cast<size_t>(i) * 4 + j]);
        // pooling order changes, so the global matches to rounding only
        for (int j = 0; j < 4; ++j)
            REQUIRE(std::abs(a.global.value()[static_cast<size_t>(j)] -
                             b.global.value()[static_cast<size_t>(j)]) <= 1e-12);
    }
}

TEST_CASE("text positional table bounds the sequence length", "[encoders]") {
    dico::Rng rng(4);
    auto enc = dico::make_encoder<double>("txt", 5, 4, 3, true, rng);
    Graph<double> g;
    REQUIRE_NOTHROW(dico::encode(g, dico::raw_to_tensor(g, random_raw(3, 5, 5)), enc));
    REQUIRE_THROWS_AS(dico::encode(g, dico::raw_to_tensor(g, random_raw(4, 5, 5)), enc),
                      dico::ShapeError);
}

TEST_CASE("embed_levels produces unit-norm embeddings", "[encoders]") {
    dico::Rng rng(7);
    const int K = 3, M = 2, d_c = 4, d = 5, d_e = 6;
    auto heads = dico::make_heads<double>("head", d, M * d_c, d_c, d_e, rng);
    auto slots0 = dico::init_slots<double>(K, M, d_c, 8);

    Graph<double> g;
    auto global = g.constant({1, d}, {0.3, -0.2, 1.0, 0.4, -0.9});
    auto state = dico::slot_state(g, slots0);
    auto z = dico::embed_levels(g, global, state, heads);

    auto check_unit_rows = [](const dico::Tensor<double>& t) {
        const int rows = t.shape()[0], cols = t.shape()[1];
        for (int i = 0; i < rows; ++i) {
            double sq = 0;
            for (int j = 0; j < cols; ++j) {
                const double v = t.value()[static_cast<size_t>(i) * cols + j];
                sq += v * v;
            }
            REQUIRE(std::abs(std::sqrt(sq) - 1.0) <= 1e-5);
        }
    };
    check_unit_rows(z.z_global);
    check_unit_rows(z.z_slots);
    check_unit_rows(z.z_blocks);
    REQUIRE(z.z_slots.shape() == dico::Shape{K, d_e});
    REQUIRE(z.z_blocks.shape() == dico::Shape{K * M, d_e});

    // cosine of an embedding with itself is exactly 1 after normalization
    double self_cos = 0;
    for (int j = 0; j < d_e; ++j)
        self_cos += z.z_global.value()[static_cast<size_t>(j)] * z.z_global.value()[static_cast<size_t>(j)];
    REQUIRE(std::abs(self_cos - 1.0) <= 1e-6); // epsilon-guarded norm divisor
}

TEST_CASE("identity head keeps unit vectors fixed", "[encoders]") {
    dico::EmbeddingHeads<double> heads;
    heads.global_head = Parameter<double>("g", {3, 3});
    heads.global_head.value = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    heads.slot_head = Parameter<double>("s", {2, 3});
    heads.block_head = Parameter<double>("b", {1, 3});

    Graph<double> g;
    auto e1 = g.constant({1, 3}, {1, 0, 0});
    auto out = dico::l2_normalize_rows(dico::matmul(e1, g.leaf(heads.global_head)));
    REQUIRE(std::abs(out.value()[0] - 1.0) < 1e-7);
    REQUIRE(std::abs(out.value()[1]) < 1e-12);

    // zero vectors pass through the epsilon-guarded normalization
    auto zero = g.constant({1, 3}, {0, 0, 0});
    auto z = dico::l2_normalize_rows(dico::matmul(zero, g.leaf(heads.global_head)));
    for (double v : z.value()) REQUIRE(v == 0.0);
}
