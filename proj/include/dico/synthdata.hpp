#pragma once

// Synthetic attribute-grounded paired data. Each identity is a unique P x F
// table of categorical attribute values. Images render every (part, factor)
// cell into part-localized tokens with additive noise; captions mention a
// random subset of cells as clean basis tokens plus filler words. Ground
// truth (identity, per-token part, mentioned cells) is kept for evaluation.

#include <algorithm>
#include <cstdint>
#include <set>
#include <vector>

#include "dico/config.hpp"
#include "dico/error.hpp"
#include "dico/random.hpp"

namespace dico {

struct IdentitySpec {
    int id = 0;                  // index within the generated universe
    std::vector<int> attributes; // P*F entries, each in [0, V)
};

struct RawMat {
    int rows = 0, cols = 0;
    std::vector<double> v;

    RawMat() = default;
    RawMat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}
    double* row(int i) { return v.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return v.data() + static_cast<size_t>(i) * cols; }
};

struct SyntheticPair {
    RawMat image_tokens;              // N x d_raw
    std::vector<int> part_labels;     // N, ground-truth part per image token
    RawMat text_tokens;               // L x d_raw
    int id = 0;                       // universe identity index
    std::vector<uint8_t> caption_mask; // P*F cells, 1 = mentioned
};

/// Shared feature directions. When the family fits inside d_raw it is made
/// exactly orthonormal, so identities with disjoint attribute cells are
/// linearly separable by construction.
struct BasisSet {
    int P = 0, F = 0, V = 0, d_raw = 0;
    std::vector<std::vector<double>> part;   // P
    std::vector<std::vector<double>> value;  // F*V, indexed f*V + v
    std::vector<std::vector<double>> filler; // small "stop word" vocabulary

    const std::vector<double>& value_vec(int f, int v) const {
        return value[static_cast<size_t>(f) * V + v];
    }
};

namespace synth {

constexpr int kFillerVocab = 4;
constexpr int kFillerCount = 2;
constexpr double kFillerScale = 0.25;

inline BasisSet make_bases(int P, int F, int V, int d_raw, uint64_t seed) {
    const int count = P + F * V + kFillerVocab;
    Rng rng(seed);
    std::vector<std::vector<double>> vecs(static_cast<size_t>(count));
    for (auto& v : vecs) {
        v.resize(static_cast<size_t>(d_raw));
        for (auto& x : v) x = rng.normal();
    }
    if (count <= d_raw) {
        // modified Gram-Schmidt
        for (size_t i = 0; i < vecs.size(); ++i) {
            for (size_t j = 0; j < i; ++j) {
                double dot = 0;
                for (int k = 0; k < d_raw; ++k) dot += vecs[i][static_cast<size_t>(k)] * vecs[j][static_cast<size_t>(k)];
                for (int k = 0; k < d_raw; ++k) vecs[i][static_cast<size_t>(k)] -= dot * vecs[j][static_cast<size_t>(k)];
            }
            double nrm = 0;
            for (double x : vecs[i]) nrm += x * x;
            nrm = std::sqrt(nrm);
            if (nrm < 1e-8) throw DataError("make_bases: degenerate basis draw");
            for (auto& x : vecs[i]) x /= nrm;
        }
    } else {
        for (auto& v : vecs) {
            double nrm = 0;
            for (double x : v) nrm += x * x;
            nrm = std::sqrt(nrm);
            for (auto& x : v) x /= nrm;
        }
    }
    BasisSet b;
    b.P = P;
    b.F = F;
    b.V = V;
    b.d_raw = d_raw;
    auto it = vecs.begin();
    b.part.assign(it, it + P);
    it += P;
    b.value.assign(it, it + static_cast<size_t>(F) * V);
    it += static_cast<size_t>(F) * V;
    b.filler.assign(it, it + kFillerVocab);
    for (auto& fv : b.filler)
        for (auto& x : fv) x *= kFillerScale;
    return b;
}

} // namespace synth

/// Samples n_ids unique attribute tables, deterministically per seed.
inline std::vector<IdentitySpec> generate_universe(int P, int F, int V, int n_ids, uint64_t seed) {
    if (P < 1 || F < 1 || V < 1 || n_ids < 1)
        throw DataError("generate_universe: dimensions must be positive");
    const int cells = P * F;
    double capacity = 1.0;
    bool enough = false;
    for (int i = 0; i < cells && !enough; ++i) {
        capacity *= V;
        if (capacity >= static_cast<double>(n_ids)) enough = true;
    }
    if (!enough)
        throw DataError(cat("generate_universe: capacity V^(P*F) = ", capacity,
                            " cannot host ", n_ids, " unique identities"));

    Rng rng(seed);
    std::vector<IdentitySpec> universe;
    universe.reserve(static_cast<size_t>(n_ids));

    if (capacity <= 1e6 && capacity <= 4.0 * n_ids) {
        // small universes: enumerate, shuffle, take a prefix
        std::vector<std::vector<int>> all;
        std::vector<int> tuple(static_cast<size_t>(cells), 0);
        while (true) {
            all.push_back(tuple);
            int i = cells - 1;
            while (i >= 0 && ++tuple[static_cast<size_t>(i)] == V) tuple[static_cast<size_t>(i--)] = 0;
            if (i < 0) break;
        }
        for (size_t i = all.size(); i > 1; --i)
            std::swap(all[i - 1], all[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
        for (int i = 0; i < n_ids; ++i)
            universe.push_back({i, all[static_cast<size_t>(i)]});
        return universe;
    }

    std::set<std::vector<int>> seen;
    long attempts = 0;
    const long max_attempts = 1000L * n_ids + 1000;
    while (static_cast<int>(universe.size()) < n_ids) {
        if (++attempts > max_attempts)
            throw DataError("generate_universe: rejection sampling exhausted");
        std::vector<int> tuple(static_cast<size_t>(cells));
        for (auto& t : tuple) t = rng.uniform_int(V);
        if (seen.insert(tuple).second)
            universe.push_back({static_cast<int>(universe.size()), tuple});
    }
    return universe;
}

/// Renders one paired sample. Image tokens are partitioned evenly over parts;
/// each caption cell is mentioned independently with probability 1-p_drop
/// (at least one mention is forced).
inline SyntheticPair render_pair(const IdentitySpec& spec, const BasisSet& bases, int N,
                                 double sigma, double p_drop, uint64_t seed) {
    if (sigma < 0) throw DataError("render_pair: sigma must be >= 0");
    if (!(p_drop >= 0 && p_drop < 1)) throw DataError("render_pair: p_drop must lie in [0,1)");
    const int P = bases.P, F = bases.F;
    if (N % P != 0)
        throw DataError(cat("render_pair: N = ", N, " is not divisible by P = ", P));
    const int d = bases.d_raw;
    const int per_part = N / P;

    Rng rng(seed);
    SyntheticPair out;
    out.id = spec.id;
    out.image_tokens = RawMat(N, d);
    out.part_labels.resize(static_cast<size_t>(N));
    for (int p = 0; p < P; ++p) {
        std::vector<double> base(bases.part[static_cast<size_t>(p)]);
        for (int f = 0; f < F; ++f) {
            const auto& vb = bases.value_vec(f, spec.attributes[static_cast<size_t>(p * F + f)]);
            for (int k = 0; k < d; ++k) base[static_cast<size_t>(k)] += vb[static_cast<size_t>(k)];
        }
        for (int t = 0; t < per_part; ++t) {
            const int row = p * per_part + t;
            out.part_labels[static_cast<size_t>(row)] = p;
            double* dst = out.image_tokens.row(row);
            for (int k = 0; k < d; ++k) dst[k] = base[static_cast<size_t>(k)] + sigma * rng.normal();
        }
    }

    out.caption_mask.assign(static_cast<size_t>(P) * F, 0);
    int mentioned = 0;
    for (int c = 0; c < P * F; ++c)
        if (rng.uniform() >= p_drop) {
            out.caption_mask[static_cast<size_t>(c)] = 1;
            ++mentioned;
        }
    if (mentioned == 0) {
        out.caption_mask[static_cast<size_t>(rng.uniform_int(P * F))] = 1;
        mentioned = 1;
    }

    const int L = mentioned + synth::kFillerCount;
    out.text_tokens = RawMat(L, d);
    int row = 0;
    for (int p = 0; p < P; ++p)
        for (int f = 0; f < F; ++f) {
            if (!out.caption_mask[static_cast<size_t>(p * F + f)]) continue;
            double* dst = out.text_tokens.row(row++);
            const auto& pb = bases.part[static_cast<size_t>(p)];
            const auto& vb = bases.value_vec(f, spec.attributes[static_cast<size_t>(p * F + f)]);
            for (int k = 0; k < d; ++k) dst[k] = pb[static_cast<size_t>(k)] + vb[static_cast<size_t>(k)];
        }
    for (int i = 0; i < synth::kFillerCount; ++i) {
        const auto& fb = bases.filler[static_cast<size_t>(rng.uniform_int(synth::kFillerVocab))];
        double* dst = out.text_tokens.row(row++);
        for (int k = 0; k < d; ++k) dst[k] = fb[static_cast<size_t>(k)];
    }
    // shuffle token order; captions carry no positional structure worth keeping
    for (int i = L; i > 1; --i) {
        const int j = rng.uniform_int(i);
        if (j != i - 1)
            for (int k = 0; k < d; ++k)
                std::swap(out.text_tokens.row(i - 1)[k], out.text_tokens.row(j)[k]);
    }
    return out;
}

/// A fully rendered benchmark: identity-disjoint train/test renders.
/// Test images are the retrieval gallery; test captions are the queries.
struct Dataset {
    BasisSet bases;
    std::vector<IdentitySpec> universe;
    std::vector<int> train_ids, test_ids;   // universe indices
    std::vector<SyntheticPair> train;       // one entry per (train id, render)
    std::vector<int> train_class;           // contiguous label per train sample
    std::vector<SyntheticPair> test;        // one entry per (test id, render)
    int n_train_classes = 0;
};

inline Dataset make_splits(const std::vector<IdentitySpec>& universe, const BasisSet& bases,
                           int N, double sigma, double p_drop, int renders_per_id,
                           double train_frac, uint64_t seed) {
    if (!(train_frac > 0 && train_frac < 1))
        throw DataError("make_splits: train_frac must lie in (0,1)");
    const int n = static_cast<int>(universe.size());
    const int n_train = static_cast<int>(std::llround(train_frac * n));
    if (n_train < 1 || n_train >= n)
        throw DataError(cat("make_splits: ", n, " identities cannot split at train_frac = ",
                            train_frac));

    Rng rng(derive_seed(seed, 99));
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    for (int i = n; i > 1; --i)
        std::swap(order[static_cast<size_t>(i - 1)], order[static_cast<size_t>(rng.uniform_int(i))]);

    Dataset ds;
    ds.bases = bases;
    ds.universe = universe;
    ds.train_ids.assign(order.begin(), order.begin() + n_train);
    ds.test_ids.assign(order.begin() + n_train, order.end());
    ds.n_train_classes = n_train;

    for (int c = 0; c < n_train; ++c) {
        const int uid = ds.train_ids[static_cast<size_t>(c)];
        for (int r = 0; r < renders_per_id; ++r) {
            ds.train.push_back(render_pair(universe[static_cast<size_t>(uid)], bases, N, sigma,
                                           p_drop, derive_seed(seed, static_cast<uint64_t>(uid) + 1,
                                                               static_cast<uint64_t>(r))));
            ds.train_class.push_back(c);
        }
    }
    for (int t = 0; t < n - n_train; ++t) {
        const int uid = ds.test_ids[static_cast<size_t>(t)];
        for (int r = 0; r < renders_per_id; ++r)
            ds.test.push_back(render_pair(universe[static_cast<size_t>(uid)], bases, N, sigma,
                                          p_drop, derive_seed(seed, static_cast<uint64_t>(uid) + 1,
                                                              static_cast<uint64_t>(r))));
    }
    return ds;
}

/// Everything from one DataConfig + seed: bases, universe, rendered splits.
inline Dataset make_dataset(const DataConfig& dc, int d_raw, uint64_t data_seed) {
    BasisSet bases = synth::make_bases(dc.P, dc.F, dc.V, d_raw, derive_seed(data_seed, 1));
    auto universe = generate_universe(dc.P, dc.F, dc.V, dc.n_ids, derive_seed(data_seed, 2));
    return make_splits(universe, bases, dc.N, dc.sigma, dc.p, dc.renders_per_id,
                       dc.train_frac, derive_seed(data_seed, 3));
}

} // namespace dico
