#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "tempofit/numerics.hpp"
#include "tempofit/retrieval.hpp"
#include "tempofit/rng.hpp"

using namespace tempofit;

namespace {

// Brute-force reference for retrieve(): explicit per-head scalar loops with
// its own softmax. Shares no code with the library implementation.
struct NaiveRetrieval {
    Tensor4 weights, k_ctx, v_ctx;
};

NaiveRetrieval naive_retrieve(const Tensor4& addressing, const MemorySnapshot& snap, int64_t t,
                              const FgtbParams& fgtb) {
    const int64_t B = addressing.batch, H = addressing.heads, S = addressing.tokens, d = addressing.dim;
    const int64_t M = snap.k_hist.tokens;
    NaiveRetrieval out;
    out.weights = Tensor4(B, H, S, M);
    out.k_ctx = Tensor4(B, H, S, d);
    out.v_ctx = Tensor4(B, H, S, d);

    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t i = 0; i < S; ++i) {
                std::vector<double> logits(static_cast<size_t>(M));
                for (int64_t j = 0; j < M; ++j) {
                    double dot = 0.0;
                    for (int64_t k = 0; k < d; ++k) dot += addressing.at(b, h, i, k) * snap.k_hist.at(b, h, j, k);
                    const double gap =
                        static_cast<double>(std::llabs(t - snap.token_timesteps[static_cast<size_t>(j)]));
                    logits[static_cast<size_t>(j)] =
                        dot / std::sqrt(static_cast<double>(d)) -
                        fgtb.beta * fgtb.slopes[static_cast<size_t>(h)] * gap * fgtb.alpha_s;
                }
                double mx = logits[0];
                for (double v : logits) mx = std::max(mx, v);
                double sum = 0.0;
                for (int64_t j = 0; j < M; ++j) sum += std::exp(logits[static_cast<size_t>(j)] - mx);
                for (int64_t j = 0; j < M; ++j) {
                    const double w = std::exp(logits[static_cast<size_t>(j)] - mx) / sum;
                    out.weights.at(b, h, i, j) = w;
                    for (int64_t k = 0; k < d; ++k) {
                        out.k_ctx.at(b, h, i, k) += w * snap.k_hist.at(b, h, j, k);
                        out.v_ctx.at(b, h, i, k) += w * snap.v_hist.at(b, h, j, k);
                    }
                }
            }
    return out;
}

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

MemorySnapshot make_snapshot(Rng& rng, int64_t entries, int64_t B, int64_t H, int64_t S, int64_t d,
                             int64_t first_timestep = 0, int64_t stride = 1) {
    LayerMemory mem(0, entries);
    for (int64_t e = 0; e < entries; ++e) {
        PrefixKV kv;
        kv.keys = random_tensor(rng, B, H, S, d);
        kv.values = random_tensor(rng, B, H, S, d);
        kv.timestep = first_timestep + e * stride;
        mem.write(std::move(kv));
    }
    auto snap = mem.snapshot();
    REQUIRE(snap.has_value());
    return *snap;
}

FgtbParams params_for(int64_t H, double beta = 1.0, double alpha_s = 1.0) {
    FgtbParams p;
    p.beta = beta;
    p.alpha_s = alpha_s;
    p.slopes = head_slopes(H);
    return p;
}

// Total weight mass on the most recent timestep's tokens, averaged over
// batch, heads, and query rows.
double mass_on_latest(const RetrievalResult& res, const std::vector<int64_t>& taus) {
    const int64_t latest = *std::max_element(taus.begin(), taus.end());
    double total = 0.0;
    int64_t rows = 0;
    const Tensor4& w = res.weights;
    for (int64_t b = 0; b < w.batch; ++b)
        for (int64_t h = 0; h < w.heads; ++h)
            for (int64_t i = 0; i < w.tokens; ++i) {
                const double* row = w.row(b, h, i);
                double mass = 0.0;
                for (int64_t j = 0; j < w.dim; ++j)
                    if (taus[static_cast<size_t>(j)] == latest) mass += row[j];
                total += mass;
                ++rows;
            }
    return total / static_cast<double>(rows);
}

} // namespace

TEST_SUITE("retrieval") {

TEST_CASE("head slopes follow the geometric schedule") {
    auto s8 = head_slopes(8);
    REQUIRE(s8.size() == 8);
    for (int h = 0; h < 8; ++h) CHECK(s8[static_cast<size_t>(h)] == std::exp2(-(h + 1)));
    CHECK(s8[0] == 0.5);
    CHECK(s8[7] == 0.00390625);

    auto s1 = head_slopes(1);
    REQUIRE(s1.size() == 1);
    CHECK(s1[0] == 0.00390625); // 2^-8

    for (int64_t H : {1, 2, 3, 4, 7, 16}) {
        auto s = head_slopes(H);
        for (size_t h = 0; h < s.size(); ++h) {
            CHECK(s[h] > 0.0);
            CHECK(s[h] < 1.0);
            if (h > 0) CHECK(s[h] < s[h - 1]);
        }
    }
}

TEST_CASE("fgtb_bias closed form") {
    FgtbParams p;
    p.beta = 1.0;
    p.alpha_s = 4.0;
    p.slopes = {0.5};
    // gap 2: -(1 * 0.5 * 2 * 4) = -4
    Tensor4 b = fgtb_bias(10, {8}, p);
    CHECK(b.at(0, 0, 0, 0) == -4.0);

    // gap 0 is exactly zero
    Tensor4 z = fgtb_bias(10, {10, 10}, p);
    CHECK(z.at(0, 0, 0, 0) == 0.0);
    CHECK(z.at(0, 0, 0, 1) == 0.0);

    // beta = 0 kills the bias regardless of gap
    p.beta = 0.0;
    Tensor4 q = fgtb_bias(100, {0, 50, 99}, p);
    for (double v : q.data) CHECK(v == 0.0);
}

TEST_CASE("fgtb_bias random tuples match the closed form exactly") {
    Rng rng(99);
    for (int rep = 0; rep < 200; ++rep) {
        FgtbParams p;
        p.beta = 5.0 * rng.uniform01();
        p.alpha_s = 0.1 + 8.0 * rng.uniform01();
        const double m = 0.001 + rng.uniform01();
        p.slopes = {m};
        const int64_t gap = static_cast<int64_t>(rng.next_u64() % 50);
        const int64_t t = 100;
        Tensor4 b = fgtb_bias(t, {t - gap}, p);
        const double expected = -(p.beta * m * static_cast<double>(gap) * p.alpha_s);
        CHECK(b.at(0, 0, 0, 0) == expected);
        CHECK(b.at(0, 0, 0, 0) <= 0.0);
    }
}

TEST_CASE("fgtb_bias strictly decreasing in gap for positive parameters") {
    FgtbParams p = params_for(4, 2.0, 3.0);
    for (int64_t gap = 0; gap < 20; ++gap) {
        Tensor4 near = fgtb_bias(50, {50 - gap}, p);
        Tensor4 far = fgtb_bias(50, {50 - gap - 1}, p);
        for (int64_t h = 0; h < 4; ++h) CHECK(far.at(0, h, 0, 0) < near.at(0, h, 0, 0));
    }
}

TEST_CASE("kk_logits values") {
    // identical unit token, d=4 -> 1/sqrt(4) = 0.5
    Tensor4 k(1, 1, 1, 4);
    k.at(0, 0, 0, 0) = 1.0;
    Tensor4 l = kk_logits(k, k);
    CHECK(l.at(0, 0, 0, 0) == 0.5);

    // orthogonal pair -> 0
    Tensor4 other(1, 1, 1, 4);
    other.at(0, 0, 0, 1) = 1.0;
    CHECK(kk_logits(k, other).at(0, 0, 0, 0) == 0.0);

    Tensor4 bad(1, 2, 1, 4);
    CHECK_THROWS_AS(kk_logits(k, bad), DimensionError);
}

TEST_CASE("kk_logits additive mask flows through softmax as a hard zero") {
    Rng rng(55);
    Tensor4 k_cur = random_tensor(rng, 1, 1, 1, 4);
    Tensor4 k_hist = random_tensor(rng, 1, 1, 3, 4);
    Tensor4 mask(1, 1, 1, 3);
    mask.at(0, 0, 0, 1) = -std::numeric_limits<double>::infinity();
    Tensor4 w = softmax_rows(kk_logits(k_cur, k_hist, &mask));
    CHECK(w.at(0, 0, 0, 1) == 0.0);
    CHECK(w.at(0, 0, 0, 0) > 0.0);
}

TEST_CASE("retrieve: single history token takes all the weight") {
    Rng rng(60);
    MemorySnapshot snap = make_snapshot(rng, 1, 1, 2, 1, 4, /*first_timestep=*/3);
    Tensor4 k_cur = random_tensor(rng, 1, 2, 1, 4);
    auto res = retrieve(k_cur, nullptr, snap, 5, params_for(2), RetrievalMode::KToK);
    REQUIRE(res.has_value());
    for (int64_t h = 0; h < 2; ++h) {
        CHECK(res->weights.at(0, h, 0, 0) == 1.0);
        for (int64_t k = 0; k < 4; ++k) {
            CHECK(res->k_ctx.at(0, h, 0, k) == snap.k_hist.at(0, h, 0, k));
        }
    }
}

TEST_CASE("retrieve: identical content at gaps 1 and 3 gives softmax([-1,-3]) weights") {
    Rng rng(61);
    // one token per entry, identical key/value content at timesteps 1 and 3
    Tensor4 keys = random_tensor(rng, 1, 1, 1, 4);
    Tensor4 values = random_tensor(rng, 1, 1, 1, 4);
    LayerMemory mem(0, 4);
    mem.write(PrefixKV{keys, values, 1});
    mem.write(PrefixKV{keys, values, 3});
    auto snap = mem.snapshot();
    REQUIRE(snap.has_value());

    FgtbParams p;
    p.beta = 1.0;
    p.alpha_s = 1.0;
    p.slopes = {1.0};
    auto res = retrieve(keys, nullptr, snap, 4, p, RetrievalMode::KToK);
    REQUIRE(res.has_value());
    // oldest-first storage: index 0 has gap 3, index 1 has gap 1
    CHECK(std::fabs(res->weights.at(0, 0, 0, 1) - 0.8808) < 1e-4);
    CHECK(std::fabs(res->weights.at(0, 0, 0, 0) - 0.1192) < 1e-4);
}

TEST_CASE("retrieve matches the brute-force oracle") {
    Rng rng(777);
    for (int seed = 0; seed < 100; ++seed) {
        Rng local(static_cast<uint64_t>(seed) * 7919 + 13);
        const int64_t entries = 1 + static_cast<int64_t>(local.next_u64() % 3); // C' in {1,2,3}
        MemorySnapshot snap = make_snapshot(local, entries, 1, 2, 3, 4);
        Tensor4 k_cur = random_tensor(local, 1, 2, 3, 4);
        FgtbParams p = params_for(2, 2.0 * local.uniform01(), 1.0 + 3.0 * local.uniform01());
        const int64_t t = entries + static_cast<int64_t>(local.next_u64() % 5);

        auto res = retrieve(k_cur, nullptr, snap, t, p, RetrievalMode::KToK);
        REQUIRE(res.has_value());
        NaiveRetrieval ref = naive_retrieve(k_cur, snap, t, p);
        CHECK(max_abs_diff(res->weights, ref.weights) < 1e-9);
        CHECK(max_abs_diff(res->k_ctx, ref.k_ctx) < 1e-9);
        CHECK(max_abs_diff(res->v_ctx, ref.v_ctx) < 1e-9);
    }
    (void)rng;
}

TEST_CASE("retrieve: weight rows sum to one") {
    Rng rng(78);
    MemorySnapshot snap = make_snapshot(rng, 3, 2, 2, 3, 4);
    Tensor4 k_cur = random_tensor(rng, 2, 2, 3, 4);
    auto res = retrieve(k_cur, nullptr, snap, 9, params_for(2), RetrievalMode::KToK);
    REQUIRE(res.has_value());
    const Tensor4& w = res->weights;
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t h = 0; h < 2; ++h)
            for (int64_t i = 0; i < 3; ++i) {
                double sum = 0.0;
                for (int64_t j = 0; j < w.dim; ++j) sum += w.at(b, h, i, j);
                CHECK(std::fabs(sum - 1.0) < 1e-9);
            }
}

TEST_CASE("retrieve: empty snapshot yields no retrieval") {
    Rng rng(79);
    Tensor4 k_cur = random_tensor(rng, 1, 2, 3, 4);
    auto res = retrieve(k_cur, nullptr, std::nullopt, 4, params_for(2), RetrievalMode::KToK);
    CHECK(!res.has_value());
}

TEST_CASE("retrieve: QToK requires queries and differs from KToK") {
    Rng rng(80);
    MemorySnapshot snap = make_snapshot(rng, 2, 1, 2, 3, 4);
    Tensor4 k_cur = random_tensor(rng, 1, 2, 3, 4);
    Tensor4 q_cur = random_tensor(rng, 1, 2, 3, 4);
    FgtbParams p = params_for(2);

    CHECK_THROWS_AS(retrieve(k_cur, nullptr, snap, 5, p, RetrievalMode::QToK), ConfigError);

    auto kk = retrieve(k_cur, nullptr, snap, 5, p, RetrievalMode::KToK);
    auto qk = retrieve(k_cur, &q_cur, snap, 5, p, RetrievalMode::QToK);
    REQUIRE(kk.has_value());
    REQUIRE(qk.has_value());
    CHECK(max_abs_diff(kk->k_ctx, qk->k_ctx) > 1e-9);

    // QToK addressed with the keys themselves collapses back to KToK
    auto qk_same = retrieve(k_cur, &k_cur, snap, 5, p, RetrievalMode::QToK);
    REQUIRE(qk_same.has_value());
    CHECK(kk->weights.bitwise_equal(qk_same->weights));
}

TEST_CASE("retrieve: additive mask hook silences history tokens") {
    Rng rng(85);
    MemorySnapshot snap = make_snapshot(rng, 2, 1, 2, 3, 4);
    Tensor4 k_cur = random_tensor(rng, 1, 2, 3, 4);
    const int64_t M = snap.k_hist.tokens;

    Tensor4 mask(1, 2, 3, M);
    for (int64_t h = 0; h < 2; ++h)
        for (int64_t i = 0; i < 3; ++i)
            mask.at(h == 0 ? 0 : 0, h, i, 2) = -std::numeric_limits<double>::infinity();

    auto res = retrieve(k_cur, nullptr, snap, 5, params_for(2), RetrievalMode::KToK, &mask);
    REQUIRE(res.has_value());
    for (int64_t h = 0; h < 2; ++h)
        for (int64_t i = 0; i < 3; ++i) {
            CHECK(res->weights.at(0, h, i, 2) == 0.0);
            double sum = 0.0;
            for (int64_t j = 0; j < M; ++j) sum += res->weights.at(0, h, i, j);
            CHECK(std::fabs(sum - 1.0) < 1e-9);
        }

    Tensor4 bad_mask(1, 2, 3, M + 1);
    CHECK_THROWS_AS(
        retrieve(k_cur, nullptr, snap, 5, params_for(2), RetrievalMode::KToK, &bad_mask),
        DimensionError);
}

TEST_CASE("retrieve: recency dominance for bitwise-identical keys") {
    Rng rng(81);
    Tensor4 keys = random_tensor(rng, 1, 4, 2, 4);
    Tensor4 values_a = random_tensor(rng, 1, 4, 2, 4);
    Tensor4 values_b = random_tensor(rng, 1, 4, 2, 4);
    LayerMemory mem(0, 4);
    mem.write(PrefixKV{keys, values_a, 2});
    mem.write(PrefixKV{keys, values_b, 6});
    auto snap = mem.snapshot();
    REQUIRE(snap.has_value());

    FgtbParams p = params_for(4, 0.7, 2.0);
    auto res = retrieve(keys, nullptr, snap, 7, p, RetrievalMode::KToK);
    REQUIRE(res.has_value());
    const int64_t S = 2;
    for (int64_t h = 0; h < 4; ++h)
        for (int64_t i = 0; i < S; ++i)
            for (int64_t s = 0; s < S; ++s) {
                const double w_old = res->weights.at(0, h, i, s);
                const double w_new = res->weights.at(0, h, i, S + s);
                CHECK(w_new > w_old);
            }
}

TEST_CASE("retrieve: beta concentration on the standard fixture") {
    // Standard concentration fixture: identical-content entries so only the
    // gap bias separates frames, desk-scale token count so even the
    // flattest ALiBi head (2^-8) concentrates at beta = 100.
    Rng rng(82);
    const int64_t H = 2, S = 16, d = 4;
    Tensor4 keys = random_tensor(rng, 1, H, S, d);
    Tensor4 values = random_tensor(rng, 1, H, S, d);
    LayerMemory mem(0, 3);
    for (int64_t t = 0; t < 3; ++t) mem.write(PrefixKV{keys, values, t});
    auto snap = mem.snapshot();
    REQUIRE(snap.has_value());

    double prev_mass = -1.0;
    for (double beta : {0.0, 1.0, 10.0, 100.0}) {
        FgtbParams p = params_for(H, beta, static_cast<double>(S));
        auto res = retrieve(keys, nullptr, snap, 3, p, RetrievalMode::KToK);
        REQUIRE(res.has_value());
        const double mass = mass_on_latest(*res, snap->token_timesteps);
        CHECK(mass >= prev_mass - 1e-12); // nondecreasing in beta
        prev_mass = mass;
    }
    CHECK(prev_mass >= 0.99);
}

TEST_CASE("retrieve: beta == 0 equals an identically-zero bias, bitwise") {
    Rng rng(83);
    MemorySnapshot snap = make_snapshot(rng, 3, 1, 2, 3, 4);
    Tensor4 k_cur = random_tensor(rng, 1, 2, 3, 4);

    FgtbParams zero_beta = params_for(2, 0.0, 5.0);
    auto a = retrieve(k_cur, nullptr, snap, 10, zero_beta, RetrievalMode::KToK);

    // content matching only: zero additive mask, bias forced to zero via gap 0
    MemorySnapshot flat = snap;
    std::fill(flat.token_timesteps.begin(), flat.token_timesteps.end(), 10);
    FgtbParams any = params_for(2, 3.0, 5.0);
    auto b = retrieve(k_cur, nullptr, flat, 10, any, RetrievalMode::KToK);

    REQUIRE(a.has_value());
    REQUIRE(b.has_value());
    CHECK(a->weights.bitwise_equal(b->weights));
    CHECK(a->k_ctx.bitwise_equal(b->k_ctx));
    CHECK(a->v_ctx.bitwise_equal(b->v_ctx));
}

TEST_CASE("retrieve: parameter validation") {
    Rng rng(84);
    MemorySnapshot snap = make_snapshot(rng, 1, 1, 2, 3, 4);
    Tensor4 k_cur = random_tensor(rng, 1, 2, 3, 4);

    FgtbParams bad_beta = params_for(2);
    bad_beta.beta = -0.5;
    CHECK_THROWS_AS(retrieve(k_cur, nullptr, snap, 5, bad_beta, RetrievalMode::KToK), ConfigError);

    FgtbParams bad_alpha = params_for(2);
    bad_alpha.alpha_s = 0.0;
    CHECK_THROWS_AS(retrieve(k_cur, nullptr, snap, 5, bad_alpha, RetrievalMode::KToK), ConfigError);

    FgtbParams wrong_heads = params_for(3);
    CHECK_THROWS_AS(retrieve(k_cur, nullptr, snap, 5, wrong_heads, RetrievalMode::KToK), ConfigError);
}

} // TEST_SUITE
