#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "dmem/backbone.hpp"
#include "dmem/common.hpp"
#include "oracle_helpers.hpp"

using namespace dmem;

namespace {

// rows [t x in] times W^T for W [out x in], as the backbone applies weights.
oracle::Vec loop_nt(const oracle::Vec& x, const oracle::Vec& w, int t, int in, int out) {
    oracle::Vec y(static_cast<size_t>(t) * out, 0.0);
    for (int i = 0; i < t; ++i)
        for (int o = 0; o < out; ++o)
            for (int j = 0; j < in; ++j)
                y[static_cast<size_t>(i) * out + o] += x[static_cast<size_t>(i) * in + j] * w[static_cast<size_t>(o) * in + j];
    return y;
}

oracle::Vec to_vec(const Tensor<double>& t) {
    return oracle::Vec(t.data->begin(), t.data->end());
}

} // namespace

TEST_CASE("attention: single position ignores the query") {
    SplitMix64 rng(111);
    const int d = 8, heads = 2;
    Tensor<float> q1 = uniform<float>(rng, {1, d}, -1.0, 1.0);
    Tensor<float> q2 = uniform<float>(rng, {1, d}, -1.0, 1.0);
    Tensor<float> k = uniform<float>(rng, {1, d}, -1.0, 1.0);
    Tensor<float> v = uniform<float>(rng, {1, d}, -1.0, 1.0);
    Tensor<float> wo = uniform<float>(rng, {d, d}, -1.0, 1.0);
    Tensor<float> mask = causal_mask<float>(1);

    Tensor<float> a1 = attention<float>(nullptr, q1, k, v, wo, heads, mask);
    Tensor<float> a2 = attention<float>(nullptr, q2, k, v, wo, heads, mask);
    Tensor<float> direct = matmul_nt<float>(nullptr, v, wo);
    for (size_t i = 0; i < a1.numel(); ++i) {
        CHECK((*a1.data)[i] == (*a2.data)[i]);
        CHECK((*a1.data)[i] == (*direct.data)[i]);
    }
}

TEST_CASE("attention: identical keys attend uniformly over the prefix") {
    SplitMix64 rng(112);
    const int t = 5, d = 6, heads = 3;
    Tensor<double> q = uniform<double>(rng, {t, d}, -1.0, 1.0);
    Tensor<double> krow = uniform<double>(rng, {1, d}, -1.0, 1.0);
    Tensor<double> k({t, d});
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j) k.at2(i, j) = krow.at2(0, j);
    Tensor<double> v = uniform<double>(rng, {t, d}, -1.0, 1.0);
    Tensor<double> wo = identity<double>(d);

    Tensor<double> out = attention<double>(nullptr, q, k, v, wo, heads, causal_mask<double>(t));
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j) {
            double mean = 0.0;
            for (int p = 0; p <= i; ++p) mean += v.at2(p, j);
            mean /= static_cast<double>(i + 1);
            CHECK(std::abs(out.at2(i, j) - mean) <= 1e-12);
        }
}

TEST_CASE("attention: random instances match the per-head loop oracle") {
    SplitMix64 rng(113);
    for (int it = 0; it < 10; ++it) {
        const int heads = 1 + static_cast<int>(rng.u32_below(3));
        const int hd = 2 + static_cast<int>(rng.u32_below(3));
        const int d = heads * hd;
        const int t = 1 + static_cast<int>(rng.u32_below(6));
        Tensor<double> q = uniform<double>(rng, {t, d}, -1.0, 1.0);
        Tensor<double> k = uniform<double>(rng, {t, d}, -1.0, 1.0);
        Tensor<double> v = uniform<double>(rng, {t, d}, -1.0, 1.0);
        Tensor<double> wo = uniform<double>(rng, {d, d}, -1.0, 1.0);
        Tensor<double> got = attention<double>(nullptr, q, k, v, wo, heads, causal_mask<double>(t));
        oracle::Vec want = oracle::naive_attention(to_vec(q), to_vec(k), to_vec(v), to_vec(wo), t, d, heads);
        for (size_t i = 0; i < got.numel(); ++i) CHECK(std::abs((*got.data)[i] - want[i]) <= 1e-12);
    }

    CHECK_THROWS(attention<float>(nullptr, zeros<float>({2, 4}), zeros<float>({3, 4}),
                                  zeros<float>({2, 4}), zeros<float>({4, 4}), 2, causal_mask<float>(2)));
}

TEST_CASE("backbone: toy forward matches a reference composed from loop oracles") {
    BackboneConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.head_dim = 4;
    cfg.vocab = 11;
    cfg.max_seq = 16;
    SplitMix64 rng(114);
    Backbone<double> bb = init_backbone<double>(cfg, rng);
    const std::vector<int> ids = {3, 7, 1, 9, 5};
    const int t = 5, d = 8, ff = cfg.d_ff();

    Tensor<double> logits = backbone_forward<double>(nullptr, bb, ids);

    oracle::Vec x(static_cast<size_t>(t) * d);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j)
            x[static_cast<size_t>(i) * d + j] = bb.embed.at2(ids[static_cast<size_t>(i)], j) + bb.pos.at2(i, j);

    const auto& lay = bb.layers[0];
    auto ln_rows = [&](const oracle::Vec& rows, const Tensor<double>& g, const Tensor<double>& b) {
        oracle::Vec out(rows.size());
        for (int i = 0; i < t; ++i) {
            oracle::Vec row(rows.begin() + i * d, rows.begin() + (i + 1) * d);
            oracle::Vec nr = oracle::naive_layer_norm_row(row, to_vec(g), to_vec(b), kLnEps);
            std::copy(nr.begin(), nr.end(), out.begin() + i * d);
        }
        return out;
    };

    oracle::Vec h = ln_rows(x, lay.ln1_g, lay.ln1_b);
    oracle::Vec q0 = loop_nt(h, to_vec(lay.wq), t, d, d);
    oracle::Vec k0 = loop_nt(h, to_vec(lay.wk), t, d, d);
    oracle::Vec v0 = loop_nt(h, to_vec(lay.wv), t, d, d);
    oracle::Vec attn = oracle::naive_attention(q0, k0, v0, to_vec(lay.wo), t, d, cfg.n_heads);
    for (size_t i = 0; i < x.size(); ++i) x[i] += attn[i];

    oracle::Vec h2 = ln_rows(x, lay.ln2_g, lay.ln2_b);
    oracle::Vec u = loop_nt(h2, to_vec(lay.w1), t, d, ff);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < ff; ++j)
            u[static_cast<size_t>(i) * ff + j] = oracle::naive_gelu(u[static_cast<size_t>(i) * ff + j] + lay.b1.at(j));
    oracle::Vec f = loop_nt(u, to_vec(lay.w2), t, ff, d);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j) x[static_cast<size_t>(i) * d + j] += f[static_cast<size_t>(i) * d + j] + lay.b2.at(j);

    oracle::Vec hf = ln_rows(x, bb.lnf_g, bb.lnf_b);
    oracle::Vec want = loop_nt(hf, to_vec(bb.embed), t, d, cfg.vocab);

    REQUIRE(logits.rows() == t);
    REQUIRE(logits.cols() == cfg.vocab);
    for (size_t i = 0; i < logits.numel(); ++i) CHECK(std::abs((*logits.data)[i] - want[i]) <= 1e-10);
}

TEST_CASE("backbone: perturbing a later token leaves earlier logits unchanged") {
    BackboneConfig cfg;
    cfg.vocab = 32;
    cfg.max_seq = 32;
    SplitMix64 rng(115);
    Backbone<float> bb = init_backbone<float>(cfg, rng);
    std::vector<int> ids = {5, 9, 2, 17, 30, 11, 6, 1};
    Tensor<float> base = backbone_forward<float>(nullptr, bb, ids);
    for (int p : {3, 5, 7}) {
        std::vector<int> mod = ids;
        mod[static_cast<size_t>(p)] = (mod[static_cast<size_t>(p)] + 13) % cfg.vocab;
        Tensor<float> pert = backbone_forward<float>(nullptr, bb, mod);
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < cfg.vocab; ++j) CHECK(base.at2(i, j) == pert.at2(i, j));
        bool later_differs = false;
        for (int j = 0; j < cfg.vocab; ++j) later_differs |= base.at2(p, j) != pert.at2(p, j);
        CHECK(later_differs);
    }
}

TEST_CASE("backbone: deterministic forward and input validation") {
    BackboneConfig cfg;
    cfg.vocab = 16;
    cfg.max_seq = 8;
    SplitMix64 rng(116);
    Backbone<float> bb = init_backbone<float>(cfg, rng);
    std::vector<int> ids = {1, 15, 0, 7};
    Tensor<float> a = backbone_forward<float>(nullptr, bb, ids);
    Tensor<float> b = backbone_forward<float>(nullptr, bb, ids);
    for (size_t i = 0; i < a.numel(); ++i) CHECK((*a.data)[i] == (*b.data)[i]);

    std::vector<int> empty;
    CHECK_THROWS_AS(backbone_forward<float>(nullptr, bb, empty), std::invalid_argument);
    std::vector<int> oov = {1, 16};
    CHECK_THROWS_AS(backbone_forward<float>(nullptr, bb, oov), std::invalid_argument);
    std::vector<int> over(9, 1);
    CHECK_THROWS_AS(backbone_forward<float>(nullptr, bb, over), std::invalid_argument);

    BackboneConfig bad;
    bad.head_dim = 10;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("backbone: freezing drops gradients and the checksum pins weights") {
    BackboneConfig cfg;
    SplitMix64 rng(117);
    Backbone<float> bb = init_backbone<float>(cfg, rng);
    CHECK_FALSE(backbone_frozen(bb));
    freeze_backbone(bb);
    CHECK(backbone_frozen(bb));

    const uint64_t h1 = backbone_checksum(bb);
    CHECK(h1 == backbone_checksum(bb));
    const float saved = (*bb.layers[0].wq.data)[0];
    (*bb.layers[0].wq.data)[0] = saved + 1.0f;
    CHECK(h1 != backbone_checksum(bb));
    (*bb.layers[0].wq.data)[0] = saved;
    CHECK(h1 == backbone_checksum(bb));

    auto named = named_backbone_tensors(bb);
    CHECK(named.size() == 2 + 12 * static_cast<size_t>(cfg.n_layers) + 2);
    CHECK(named.front().first == "backbone.embed");
    CHECK(named.back().first == "backbone.lnf_b");
}
