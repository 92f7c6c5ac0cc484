#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "dmem/tape.hpp"

namespace dmem {

// Pre-norm causal decoder with learned absolute positions, GELU
// feed-forward, and a weight-tied output head. Deliberately the simplest
// standard architecture: the memory mechanism only touches q/k/v/o.
struct BackboneConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int head_dim = 16;
    int vocab = 64;
    int max_seq = 512;

    int d_ff() const { return 4 * d_model; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || head_dim < 1 || vocab < 1 || max_seq < 1)
            throw std::invalid_argument("backbone config: extents must be >= 1");
        if (n_heads * head_dim != d_model)
            throw std::invalid_argument("backbone config: n_heads * head_dim != d_model");
    }
};

template <typename T>
struct BackboneLayer {
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;  // [d]
    Tensor<T> wq, wk, wv, wo;              // [d x d], applied as x W^T
    Tensor<T> w1, b1;                      // [4d x d], [4d]
    Tensor<T> w2, b2;                      // [d x 4d], [d]
};

template <typename T>
struct Backbone {
    BackboneConfig cfg;
    Tensor<T> embed;  // [vocab x d], doubles as the output head (tied)
    Tensor<T> pos;    // [max_seq x d]
    std::vector<BackboneLayer<T>> layers;
    Tensor<T> lnf_g, lnf_b;
};

inline constexpr double kLnEps = 1e-5;

template <typename T>
Backbone<T> init_backbone(const BackboneConfig& cfg, SplitMix64& rng) {
    cfg.validate();
    const int d = cfg.d_model, ff = cfg.d_ff();
    Backbone<T> bb;
    bb.cfg = cfg;
    bb.embed = param(normal<T>(rng, {cfg.vocab, d}, 0.0, 0.02));
    bb.pos = param(normal<T>(rng, {cfg.max_seq, d}, 0.0, 0.02));
    for (int l = 0; l < cfg.n_layers; ++l) {
        BackboneLayer<T> lay;
        lay.ln1_g = param(full<T>({d}, T(1)));
        lay.ln1_b = param(zeros<T>({d}));
        lay.ln2_g = param(full<T>({d}, T(1)));
        lay.ln2_b = param(zeros<T>({d}));
        lay.wq = param(normal<T>(rng, {d, d}, 0.0, 0.02));
        lay.wk = param(normal<T>(rng, {d, d}, 0.0, 0.02));
        lay.wv = param(normal<T>(rng, {d, d}, 0.0, 0.02));
        lay.wo = param(normal<T>(rng, {d, d}, 0.0, 0.02));
        lay.w1 = param(normal<T>(rng, {ff, d}, 0.0, 0.02));
        lay.b1 = param(zeros<T>({ff}));
        lay.w2 = param(normal<T>(rng, {d, ff}, 0.0, 0.02));
        lay.b2 = param(zeros<T>({d}));
        bb.layers.push_back(std::move(lay));
    }
    bb.lnf_g = param(full<T>({d}, T(1)));
    bb.lnf_b = param(zeros<T>({d}));
    return bb;
}

// Visits every weight by reference in a fixed order; the order fixes init
// draws, checkpoint layout, and checksums.
template <typename T, typename F>
void for_each_backbone_tensor(Backbone<T>& bb, F&& fn) {
    fn("backbone.embed", bb.embed);
    fn("backbone.pos", bb.pos);
    for (size_t l = 0; l < bb.layers.size(); ++l) {
        auto& lay = bb.layers[l];
        const std::string p = "backbone.layer" + std::to_string(l) + ".";
        fn(p + "ln1_g", lay.ln1_g);
        fn(p + "ln1_b", lay.ln1_b);
        fn(p + "ln2_g", lay.ln2_g);
        fn(p + "ln2_b", lay.ln2_b);
        fn(p + "wq", lay.wq);
        fn(p + "wk", lay.wk);
        fn(p + "wv", lay.wv);
        fn(p + "wo", lay.wo);
        fn(p + "w1", lay.w1);
        fn(p + "b1", lay.b1);
        fn(p + "w2", lay.w2);
        fn(p + "b2", lay.b2);
    }
    fn("backbone.lnf_g", bb.lnf_g);
    fn("backbone.lnf_b", bb.lnf_b);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> named_backbone_tensors(Backbone<T>& bb) {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for_each_backbone_tensor(bb, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
}

// Gradient buffers must be dropped on the owning fields: tensor copies share
// data storage but not the grad attachment itself.
template <typename T>
void freeze_backbone(Backbone<T>& bb) {
    for_each_backbone_tensor(bb, [](const std::string&, Tensor<T>& t) { t.drop_grad(); });
}

template <typename T>
bool backbone_frozen(Backbone<T>& bb) {
    for (auto& [name, t] : named_backbone_tensors(bb))
        if (t.requires_grad()) return false;
    return true;
}

template <typename T>
uint64_t backbone_checksum(Backbone<T>& bb) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (auto& [name, t] : named_backbone_tensors(bb)) h = checksum(t, h);
    return h;
}

// 0 on and below the diagonal, a large negative shift above; added to the
// score matrix before softmax.
template <typename T>
Tensor<T> causal_mask(int n) {
    Tensor<T> m({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m.at2(i, j) = T(-1e9);
    return m;
}

// softmax(q K^T / sqrt(head_dim)) V per head, heads concatenated, then the
// W_O projection. q may carry memory corrections; k/v likewise.
template <typename T>
Tensor<T> attention(Tape<T>* tp, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& wo, int n_heads, const Tensor<T>& mask) {
    detail::check(q.ndim() == 2 && same_shape(q, k) && same_shape(q, v), "attention: q/k/v shape mismatch");
    detail::check(q.cols() % n_heads == 0, "attention: d_model not divisible by heads");
    const int hd = q.cols() / n_heads;
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Tensor<T>> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Tensor<T> qh = slice_cols(tp, q, h * hd, (h + 1) * hd);
        Tensor<T> kh = slice_cols(tp, k, h * hd, (h + 1) * hd);
        Tensor<T> vh = slice_cols(tp, v, h * hd, (h + 1) * hd);
        Tensor<T> scores = add(tp, scale(tp, matmul_nt(tp, qh, kh), inv_sqrt), mask);
        heads.push_back(matmul(tp, softmax_rows(tp, scores), vh));
    }
    Tensor<T> cat = n_heads == 1 ? heads[0] : concat_cols(tp, heads);
    return matmul_nt(tp, cat, wo);
}

template <typename T>
std::tuple<Tensor<T>, Tensor<T>, Tensor<T>> qkv_project(Tape<T>* tp, const BackboneLayer<T>& lay,
                                                        const Tensor<T>& h) {
    return {matmul_nt(tp, h, lay.wq), matmul_nt(tp, h, lay.wk), matmul_nt(tp, h, lay.wv)};
}

template <typename T>
Tensor<T> ffn_block(Tape<T>* tp, const BackboneLayer<T>& lay, const Tensor<T>& h) {
    Tensor<T> u = vgelu(tp, add_rowvec(tp, matmul_nt(tp, h, lay.w1), lay.b1));
    return add_rowvec(tp, matmul_nt(tp, u, lay.w2), lay.b2);
}

template <typename T>
Tensor<T> embed_tokens(Tape<T>* tp, Backbone<T>& bb, std::span<const int> ids) {
    const int n = static_cast<int>(ids.size());
    if (n < 1) throw std::invalid_argument("backbone: empty input");
    if (n > bb.cfg.max_seq) throw std::invalid_argument("backbone: sequence exceeds max_seq_len");
    for (int id : ids)
        if (id < 0 || id >= bb.cfg.vocab) throw std::invalid_argument("backbone: token id out of vocab");
    Tensor<T> e = embedding_lookup(tp, bb.embed, ids);
    return add(tp, e, slice_rows(tp, bb.pos, 0, n));
}

template <typename T>
Tensor<T> logits_from_hidden(Tape<T>* tp, Backbone<T>& bb, const Tensor<T>& x) {
    Tensor<T> h = layer_norm_rows(tp, x, bb.lnf_g, bb.lnf_b, static_cast<T>(kLnEps));
    return matmul_nt(tp, h, bb.embed);
}

// Plain decoder pass with no memory hooks. When `hiddens` is non-null it
// receives each layer's post-norm pre-attention hidden sequence (the x_t
// the memory modules would consume).
template <typename T>
Tensor<T> backbone_forward(Tape<T>* tp, Backbone<T>& bb, std::span<const int> ids,
                           std::vector<Tensor<T>>* hiddens = nullptr) {
    Tensor<T> x = embed_tokens(tp, bb, ids);
    Tensor<T> mask = causal_mask<T>(static_cast<int>(ids.size()));
    for (auto& lay : bb.layers) {
        Tensor<T> h = layer_norm_rows(tp, x, lay.ln1_g, lay.ln1_b, static_cast<T>(kLnEps));
        if (hiddens) hiddens->push_back(h);
        auto [q0, k0, v0] = qkv_project(tp, lay, h);
        x = add(tp, x, attention(tp, q0, k0, v0, lay.wo, bb.cfg.n_heads, mask));
        Tensor<T> h2 = layer_norm_rows(tp, x, lay.ln2_g, lay.ln2_b, static_cast<T>(kLnEps));
        x = add(tp, x, ffn_block(tp, lay, h2));
    }
    return logits_from_hidden(tp, bb, x);
}

} // namespace dmem
