#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dmem/backbone.hpp"
#include "dmem/osam.hpp"
#include "dmem/projections.hpp"
#include "dmem/steering.hpp"

namespace dmem {

// Write granularity. Token updates the state at every position; Segment
// pools hidden states over explicit message boundaries and writes once per
// segment; MultiState runs N token-granular sub-states in parallel.
enum class WriteStrategy { Token, Segment, MultiState };

inline WriteStrategy parse_strategy(const std::string& s) {
    if (s == "tsw") return WriteStrategy::Token;
    if (s == "ssw") return WriteStrategy::Segment;
    if (s == "msw") return WriteStrategy::MultiState;
    throw std::invalid_argument("strategy: expected tsw|ssw|msw, got '" + s + "'");
}

inline std::string strategy_to_string(WriteStrategy s) {
    switch (s) {
        case WriteStrategy::Token: return "tsw";
        case WriteStrategy::Segment: return "ssw";
        case WriteStrategy::MultiState: return "msw";
    }
    return "?";
}

struct ModelConfig {
    BackboneConfig backbone;
    int rank = 8;
    double alpha = 16.0;
    WriteStrategy strategy = WriteStrategy::Token;
    int n_states = 1;              // sub-states per hooked layer (msw only)
    std::string branches = "qo";   // subset of qkvo, or "none"
    std::string layers = "all";    // all | front:K | middle:K | back:K | list
    bool detach_ingest = false;    // stop gradients at the ingestion pass
    int backbone_len = 128;        // attention window while ingesting
    int write_budget = 1024;       // max context tokens written
    bool truncate_overlength = false;  // default: reject overlength context

    void validate() const {
        backbone.validate();
        if (rank < 1) throw std::invalid_argument("model config: rank must be >= 1");
        if (n_states < 1) throw std::invalid_argument("model config: n_states must be >= 1");
        if (strategy != WriteStrategy::MultiState && n_states != 1)
            throw std::invalid_argument("model config: n_states > 1 requires strategy msw");
        if (backbone_len < 1 || backbone_len > backbone.max_seq)
            throw std::invalid_argument("model config: backbone_len out of range");
        if (write_budget < 1) throw std::invalid_argument("model config: write_budget must be >= 1");
        parse_branches(branches);
        parse_layers(layers, backbone.n_layers);
    }
};

// Memory attachment for one hooked layer: N projection sets (one per
// sub-state) plus the shared steering maps reading the concatenated
// readout.
template <typename T>
struct LayerMemory {
    std::vector<MemoryProjections<T>> proj;
    SteeringMaps<T> maps;
};

template <typename T>
struct DeltaMemModel {
    ModelConfig cfg;
    Backbone<T> backbone;
    std::vector<int> hooked;           // sorted layer indices with memory
    std::vector<LayerMemory<T>> mems;  // parallel to hooked
};

// Per-sequence memory state: one OnlineState per hooked layer.
template <typename T>
struct ModelState {
    std::vector<OnlineState<T>> layers;

    static ModelState init(const DeltaMemModel<T>& m) {
        ModelState st;
        st.layers.reserve(m.hooked.size());
        for (size_t i = 0; i < m.hooked.size(); ++i)
            st.layers.push_back(OnlineState<T>::zero(m.cfg.n_states, m.cfg.rank));
        return st;
    }

    ModelState clone() const {
        ModelState st;
        st.layers.reserve(layers.size());
        for (const auto& l : layers) st.layers.push_back(l.clone());
        return st;
    }

    bool all_finite() const {
        for (const auto& l : layers)
            if (!l.all_finite()) return false;
        return true;
    }
};

// Builds memory parameters against an existing (typically pretrained)
// backbone. Draw order: hooked layers in ascending order, sub-states in
// order, wq/wk/wv/wbeta per sub-state; steering maps are zero (no draws).
template <typename T>
DeltaMemModel<T> build_model(const ModelConfig& cfg, Backbone<T> backbone, SplitMix64& rng) {
    cfg.validate();
    if (backbone.cfg.n_layers != cfg.backbone.n_layers || backbone.cfg.d_model != cfg.backbone.d_model)
        throw std::invalid_argument("build_model: backbone does not match config");
    DeltaMemModel<T> m;
    m.cfg = cfg;
    m.backbone = std::move(backbone);
    m.hooked = parse_layers(cfg.layers, cfg.backbone.n_layers);
    const BranchSet bset = parse_branches(cfg.branches);
    const int d = cfg.backbone.d_model;
    for (size_t i = 0; i < m.hooked.size(); ++i) {
        LayerMemory<T> lm;
        for (int s = 0; s < cfg.n_states; ++s) lm.proj.push_back(init_projections<T>(d, cfg.rank, rng));
        lm.maps = init_steering<T>(d, cfg.n_states, cfg.rank, bset, cfg.alpha);
        m.mems.push_back(std::move(lm));
    }
    return m;
}

template <typename T>
DeltaMemModel<T> build_model(const ModelConfig& cfg, SplitMix64& rng) {
    Backbone<T> bb = init_backbone<T>(cfg.backbone, rng);
    return build_model<T>(cfg, std::move(bb), rng);
}

// Checkpoint/optimizer enumeration of the trainable parameter set theta.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> named_memory_tensors(DeltaMemModel<T>& m) {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (size_t i = 0; i < m.hooked.size(); ++i) {
        const std::string lp = "projections.layer" + std::to_string(m.hooked[i]) + ".";
        for (size_t s = 0; s < m.mems[i].proj.size(); ++s) {
            auto& p = m.mems[i].proj[s];
            const std::string sp = lp + "state" + std::to_string(s) + ".";
            out.emplace_back(sp + "wq", p.wq);
            out.emplace_back(sp + "wk", p.wk);
            out.emplace_back(sp + "wv", p.wv);
            out.emplace_back(sp + "wbeta", p.wbeta);
            out.emplace_back(sp + "b", p.b);
        }
        auto& maps = m.mems[i].maps;
        const std::string mp = "steering.layer" + std::to_string(m.hooked[i]) + ".";
        if (maps.wq.defined()) out.emplace_back(mp + "wq", maps.wq);
        if (maps.wk.defined()) out.emplace_back(mp + "wk", maps.wk);
        if (maps.wv.defined()) out.emplace_back(mp + "wv", maps.wv);
        if (maps.wo.defined()) out.emplace_back(mp + "wo", maps.wo);
    }
    return out;
}

// Closed-form trainable-parameter count:
//   |layers| * N * (3 d r + d r + r)  +  |layers| * sum_branch d * (N r).
// Must (and is tested to) equal exhaustive enumeration of gradient-enabled
// values.
inline long count_trainable_params(int n_hooked_layers, int d, int r, int n_states,
                                   BranchSet branches) {
    long per_state = 3L * d * r + 1L * d * r + r;
    long projections = static_cast<long>(n_hooked_layers) * n_states * per_state;
    int n_branches = 0;
    for (BranchBit bit : {kBranchQ, kBranchK, kBranchV, kBranchO})
        if (branches & bit) ++n_branches;
    long steering = static_cast<long>(n_hooked_layers) * n_branches *
                    (static_cast<long>(d) * n_states * r);
    return projections + steering;
}

inline long count_trainable_params(const ModelConfig& cfg) {
    cfg.validate();
    return count_trainable_params(static_cast<int>(parse_layers(cfg.layers, cfg.backbone.n_layers).size()),
                                  cfg.backbone.d_model, cfg.rank, cfg.n_states,
                                  parse_branches(cfg.branches));
}

// ---------------------------------------------------------------------------
// Hooked forward
// ---------------------------------------------------------------------------

// Test instrumentation: copies of per-layer memory intermediates. Rows of
// km/vm/beta are tokens under token granularity and segments under ssw.
template <typename T>
struct LayerTrace {
    Tensor<T> qm, km, vm, beta;      // sub-state 0 projections
    Tensor<T> reads;                 // [T x N*r]
    Tensor<T> dq, dk, dv, dout;      // [T x d], enabled branches only
    std::vector<Tensor<T>> s_after;  // sub-state 0 state after each write
};

template <typename T>
struct MemTrace {
    std::vector<LayerTrace<T>> layers;  // parallel to model.hooked
};

template <typename T>
struct CorrectionRows {
    Tensor<T> dq, dk, dv, dout;  // [T x d] each, defined iff branch enabled
};

namespace detail {

// [start, end) token ranges of equal-id runs; every boundary in `segments`
// (a value change) starts a new segment.
inline std::vector<std::pair<int, int>> segment_runs(std::span<const int> segments) {
    std::vector<std::pair<int, int>> runs;
    int n = static_cast<int>(segments.size());
    int start = 0;
    for (int t = 1; t <= n; ++t) {
        if (t == n || segments[static_cast<size_t>(t)] != segments[static_cast<size_t>(start)]) {
            runs.emplace_back(start, t);
            start = t;
        }
    }
    return runs;
}

template <typename T>
Tensor<T> maybe_stack(Tape<T>* tp, std::vector<Tensor<T>>& rows) {
    return rows.empty() ? Tensor<T>() : stack_rows(tp, rows);
}

} // namespace detail

// The memory pipeline for one hooked layer over the pre-attention hidden
// rows h [T x d]: per position, read the old state, form corrections, then
// write per the active granularity. Returns stacked per-branch correction
// rows; the state advances in place. Writes never depend on attention
// outputs, so running this loop before the (batched) attention is
// value-identical to the per-token read -> steer -> attend -> write order.
template <typename T>
CorrectionRows<T> memory_sublayer(Tape<T>* tp, LayerMemory<T>& mem, OnlineState<T>& st,
                                  const Tensor<T>& h, WriteStrategy strategy,
                                  std::span<const int> segments, LayerTrace<T>* trace) {
    const int tokens = h.rows();
    const int n_states = static_cast<int>(mem.proj.size());
    if (st.n_states() != n_states) throw std::invalid_argument("memory_sublayer: sub-state count mismatch");

    // Batched per-token projections (reads always come from the token's own
    // hidden state; writes may pool below).
    std::vector<Tensor<T>> qm_all(static_cast<size_t>(n_states));
    std::vector<Tensor<T>> km_tok(static_cast<size_t>(n_states)), vm_tok(static_cast<size_t>(n_states)),
        beta_tok(static_cast<size_t>(n_states));
    for (int s = 0; s < n_states; ++s) {
        auto [q, k] = project_qk(tp, mem.proj[static_cast<size_t>(s)], h);
        qm_all[static_cast<size_t>(s)] = q;
        if (strategy != WriteStrategy::Segment) {
            km_tok[static_cast<size_t>(s)] = k;
            vm_tok[static_cast<size_t>(s)] = project_v(tp, mem.proj[static_cast<size_t>(s)], h);
            beta_tok[static_cast<size_t>(s)] = gates(tp, mem.proj[static_cast<size_t>(s)], h).first;
        }
    }

    // Segment pooling: one write per run of equal segment ids, from the
    // arithmetic mean of the member hidden states. Tokens inside segment j
    // read the state as of the end of segment j-1.
    std::vector<std::pair<int, int>> runs;
    Tensor<T> km_seg, vm_seg, beta_seg;
    if (strategy == WriteStrategy::Segment) {
        if (static_cast<int>(segments.size()) != tokens)
            throw std::invalid_argument("memory_sublayer: ssw requires one segment id per token");
        runs = detail::segment_runs(segments);
        std::vector<Tensor<T>> means;
        means.reserve(runs.size());
        for (auto [a, b] : runs) {
            std::vector<int> idx;
            for (int t = a; t < b; ++t) idx.push_back(t);
            means.push_back(mean_rows(tp, h, idx));
        }
        Tensor<T> hbar = stack_rows(tp, means);
        km_seg = project_qk(tp, mem.proj[0], hbar).second;
        vm_seg = project_v(tp, mem.proj[0], hbar);
        beta_seg = gates(tp, mem.proj[0], hbar).first;
    }

    const bool steer = mem.maps.branches != 0;
    std::vector<Tensor<T>> read_rows, dq_rows, dk_rows, dv_rows, do_rows;
    auto write_one = [&](int s, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& beta) {
        st.S[static_cast<size_t>(s)] = delta_write(tp, st.S[static_cast<size_t>(s)], k, v, beta);
        st.step++;
        if (trace && s == 0) trace->s_after.push_back(st.S[0].clone());
    };
    auto read_and_steer = [&](int t) {
        std::vector<Tensor<T>> qs;
        qs.reserve(static_cast<size_t>(n_states));
        for (int s = 0; s < n_states; ++s) qs.push_back(take_row(tp, qm_all[static_cast<size_t>(s)], t));
        Tensor<T> r_read = state_read(tp, st, qs);
        if (trace) read_rows.push_back(r_read);
        if (!steer) return;
        Corrections<T> c = corrections(tp, mem.maps, r_read);
        if (c.dq.defined()) dq_rows.push_back(c.dq);
        if (c.dk.defined()) dk_rows.push_back(c.dk);
        if (c.dv.defined()) dv_rows.push_back(c.dv);
        if (c.dout.defined()) do_rows.push_back(c.dout);
    };

    if (strategy == WriteStrategy::Segment) {
        for (size_t j = 0; j < runs.size(); ++j) {
            for (int t = runs[j].first; t < runs[j].second; ++t) read_and_steer(t);
            write_one(0, take_row(tp, km_seg, static_cast<int>(j)),
                      take_row(tp, vm_seg, static_cast<int>(j)),
                      take_row(tp, beta_seg, static_cast<int>(j)));
        }
    } else {
        for (int t = 0; t < tokens; ++t) {
            read_and_steer(t);
            for (int s = 0; s < n_states; ++s)
                write_one(s, take_row(tp, km_tok[static_cast<size_t>(s)], t),
                          take_row(tp, vm_tok[static_cast<size_t>(s)], t),
                          take_row(tp, beta_tok[static_cast<size_t>(s)], t));
        }
    }

    CorrectionRows<T> out;
    if (!dq_rows.empty()) out.dq = stack_rows(tp, dq_rows);
    if (!dk_rows.empty()) out.dk = stack_rows(tp, dk_rows);
    if (!dv_rows.empty()) out.dv = stack_rows(tp, dv_rows);
    if (!do_rows.empty()) out.dout = stack_rows(tp, do_rows);
    if (trace) {
        trace->qm = qm_all[0].clone();
        trace->km = (strategy == WriteStrategy::Segment ? km_seg : km_tok[0]).clone();
        trace->vm = (strategy == WriteStrategy::Segment ? vm_seg : vm_tok[0]).clone();
        trace->beta = (strategy == WriteStrategy::Segment ? beta_seg : beta_tok[0]).clone();
        trace->reads = detail::maybe_stack(tp, read_rows).clone();
        if (out.dq.defined()) trace->dq = out.dq.clone();
        if (out.dk.defined()) trace->dk = out.dk.clone();
        if (out.dv.defined()) trace->dv = out.dv.clone();
        if (out.dout.defined()) trace->dout = out.dout.clone();
    }
    return out;
}

// One attention block with the memory hook: corrected q/k/v enter the
// frozen attention, the output correction lands after the W_O projection.
template <typename T>
Tensor<T> hooked_attn_block(Tape<T>* tp, BackboneLayer<T>& lay, LayerMemory<T>& mem,
                            OnlineState<T>& st, const Tensor<T>& h, const Tensor<T>& mask,
                            int n_heads, WriteStrategy strategy, std::span<const int> segments,
                            LayerTrace<T>* trace) {
    auto [q0, k0, v0] = qkv_project(tp, lay, h);
    CorrectionRows<T> cr = memory_sublayer(tp, mem, st, h, strategy, segments, trace);
    const T s = mem.maps.scale();
    Tensor<T> q = cr.dq.defined() ? add_scaled(tp, q0, cr.dq, s) : q0;
    Tensor<T> k = cr.dk.defined() ? add_scaled(tp, k0, cr.dk, s) : k0;
    Tensor<T> v = cr.dv.defined() ? add_scaled(tp, v0, cr.dv, s) : v0;
    Tensor<T> attn = attention(tp, q, k, v, lay.wo, n_heads, mask);
    return cr.dout.defined() ? add_scaled(tp, attn, cr.dout, s) : attn;
}

// Full decoder pass with memory active at the hooked layers. `segments`
// may be empty for token-granular strategies; ssw requires it. Set
// `compute_logits` false when only the state evolution matters
// (ingestion), skipping the output head.
template <typename T>
Tensor<T> model_forward(Tape<T>* tp, DeltaMemModel<T>& model, ModelState<T>& st,
                        std::span<const int> ids, std::span<const int> segments = {},
                        MemTrace<T>* trace = nullptr, bool compute_logits = true) {
    if (st.layers.size() != model.hooked.size())
        throw std::invalid_argument("model_forward: state does not match hooked layers");
    Tensor<T> x = embed_tokens(tp, model.backbone, ids);
    Tensor<T> mask = causal_mask<T>(static_cast<int>(ids.size()));
    size_t hook_i = 0;
    for (int l = 0; l < model.backbone.cfg.n_layers; ++l) {
        auto& lay = model.backbone.layers[static_cast<size_t>(l)];
        Tensor<T> h = layer_norm_rows(tp, x, lay.ln1_g, lay.ln1_b, static_cast<T>(kLnEps));
        Tensor<T> attn_out;
        if (hook_i < model.hooked.size() && model.hooked[hook_i] == l) {
            LayerTrace<T>* lt = nullptr;
            if (trace) {
                trace->layers.resize(model.hooked.size());
                lt = &trace->layers[hook_i];
            }
            attn_out = hooked_attn_block(tp, lay, model.mems[hook_i], st.layers[hook_i], h, mask,
                                         model.backbone.cfg.n_heads, model.cfg.strategy, segments, lt);
            ++hook_i;
        } else {
            auto [q0, k0, v0] = qkv_project(tp, lay, h);
            attn_out = attention(tp, q0, k0, v0, lay.wo, model.backbone.cfg.n_heads, mask);
        }
        x = add(tp, x, attn_out);
        Tensor<T> h2 = layer_norm_rows(tp, x, lay.ln2_g, lay.ln2_b, static_cast<T>(kLnEps));
        x = add(tp, x, ffn_block(tp, lay, h2));
    }
    if (!compute_logits) return x;
    return logits_from_hidden(tp, model.backbone, x);
}

// ---------------------------------------------------------------------------
// Context ingestion and the SFT objective
// ---------------------------------------------------------------------------

// Writes the context into the state without ever exposing its tokens to
// the prediction pass. Long contexts are processed in chunks of at most
// backbone_len tokens: attention sees one chunk at a time (positions
// restart per chunk), while the memory state carries across chunks. Chunk
// boundaries never split a segment, so ssw still writes exactly once per
// message.
template <typename T>
void ingest_context(Tape<T>* tp, DeltaMemModel<T>& model, ModelState<T>& st,
                    std::span<const int> ctx, std::span<const int> segments = {}) {
    if (ctx.empty()) return;
    const auto& cfg = model.cfg;
    std::vector<int> ids(ctx.begin(), ctx.end());
    std::vector<int> segs;
    if (cfg.strategy == WriteStrategy::Segment) {
        if (segments.size() != ctx.size())
            throw std::invalid_argument("ingest_context: ssw requires segment ids for the context");
        segs.assign(segments.begin(), segments.end());
    } else {
        segs.resize(ids.size());
        for (size_t i = 0; i < segs.size(); ++i) segs[i] = static_cast<int>(i);
    }
    if (static_cast<int>(ids.size()) > cfg.write_budget) {
        if (!cfg.truncate_overlength) throw std::invalid_argument("ingest_context: context exceeds write budget");
        const size_t drop = ids.size() - static_cast<size_t>(cfg.write_budget);
        ids.erase(ids.begin(), ids.begin() + static_cast<long>(drop));
        segs.erase(segs.begin(), segs.begin() + static_cast<long>(drop));
    }

    Tape<T>* etp = cfg.detach_ingest ? nullptr : tp;
    auto runs = detail::segment_runs(segs);
    size_t run_i = 0;
    int start = 0;
    const int n = static_cast<int>(ids.size());
    while (start < n) {
        // Greedily take whole segments up to the chunk window.
        int end = start;
        while (run_i < runs.size() && runs[run_i].second - start <= cfg.backbone_len) {
            end = runs[run_i].second;
            ++run_i;
        }
        if (end == start)
            throw std::invalid_argument("ingest_context: a single segment exceeds backbone_len");
        model_forward(etp, model, st,
                      std::span<const int>(ids).subspan(static_cast<size_t>(start),
                                                        static_cast<size_t>(end - start)),
                      std::span<const int>(segs).subspan(static_cast<size_t>(start),
                                                         static_cast<size_t>(end - start)),
                      static_cast<MemTrace<T>*>(nullptr), /*compute_logits=*/false);
        start = end;
    }
}

// Autoregressive cross-entropy over the response positions only, with the
// backbone input restricted to [query; response]. The context contributes
// exclusively through the state produced by ingest_context. During this
// pass every token is its own segment (message boundaries do not exist for
// generated text), so ssw degrades to token-granular writes here.
template <typename T>
Tensor<T> sft_loss(Tape<T>* tp, DeltaMemModel<T>& model, ModelState<T>& st,
                   std::span<const int> query, std::span<const int> response) {
    if (response.empty()) throw std::invalid_argument("sft_loss: empty response");
    if (query.empty()) throw std::invalid_argument("sft_loss: empty query");
    std::vector<int> ids(query.begin(), query.end());
    ids.insert(ids.end(), response.begin(), response.end());
    std::vector<int> segs(ids.size());
    for (size_t i = 0; i < segs.size(); ++i) segs[i] = static_cast<int>(i);
    Tensor<T> logits = model_forward(tp, model, st, ids, segs);
    const int n = static_cast<int>(ids.size());
    std::vector<int> targets(static_cast<size_t>(n), 0);
    std::vector<char> mask(static_cast<size_t>(n), 0);
    for (int t = 0; t + 1 < n; ++t) {
        targets[static_cast<size_t>(t)] = ids[static_cast<size_t>(t) + 1];
        mask[static_cast<size_t>(t)] = (t + 1 >= static_cast<int>(query.size())) ? 1 : 0;
    }
    return cross_entropy_sum(tp, logits, targets, mask);
}

} // namespace dmem
