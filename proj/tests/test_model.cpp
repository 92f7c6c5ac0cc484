#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <span>
#include <vector>

#include "doctest.h"
#include "dmem/common.hpp"
#include "dmem/gradcheck.hpp"
#include "dmem/model.hpp"
#include "oracle_helpers.hpp"

using namespace dmem;

namespace {

constexpr double kGradTol = 1e-3;

// Frozen ingest extension of the micro trace (tests/fixtures/
// make_micro_trace.py): tokens {2, 0, 1} through a hand-built embedding
// table, positions, and layer norm, then the same memory weights as the
// steering trace. One layer, so the final state depends on nothing else.
const std::vector<double> kIngestEmbed = {0.5, -0.25, 1.0, 0.0, -1.0, 0.75, 0.25, 0.5, 1.5, 0.5, -0.5, -1.0, 0.1, 0.2, 0.3, 0.4};
const std::vector<double> kIngestPos = {0.25, 0.0, -0.5, 0.75, 0.0, -0.5, 0.25, 0.5, -0.25, 0.5, 0.0, -0.5};
const std::vector<double> kIngestLnG = {1.2, 1.0, 0.8, 1.1};
const std::vector<double> kIngestLnB = {0.1, 0.0, -0.1, 0.05};
const std::vector<double> kIngestQm = {0.9481729017469144, 0.31775070836497166, 0.49662028876903835, -0.8679662515389888, -0.837134791241532, 0.5469946320932844};
const std::vector<double> kIngestS = {0.5860545993647235, -0.013044114253328735, 0.41072382059957185, 0.31674720003948276};

template <typename T>
Tensor<T> rows_of(std::vector<int> shape, const std::vector<double>& vals) {
    Tensor<T> t(std::move(shape));
    REQUIRE(t.numel() == vals.size());
    for (size_t i = 0; i < vals.size(); ++i) (*t.data)[i] = static_cast<T>(vals[i]);
    return t;
}

template <typename T>
void check_close(const Tensor<T>& t, const std::vector<double>& want, double tol) {
    REQUIRE(t.numel() == want.size());
    for (size_t i = 0; i < want.size(); ++i)
        CHECK(std::abs(static_cast<double>((*t.data)[i]) - want[i]) <= tol);
}

template <typename T>
void check_state_bitwise(const ModelState<T>& a, const ModelState<T>& b) {
    REQUIRE(a.layers.size() == b.layers.size());
    for (size_t l = 0; l < a.layers.size(); ++l) {
        CHECK(a.layers[l].step == b.layers[l].step);
        REQUIRE(a.layers[l].S.size() == b.layers[l].S.size());
        for (size_t s = 0; s < a.layers[l].S.size(); ++s)
            for (size_t i = 0; i < a.layers[l].S[s].numel(); ++i)
                CHECK((*a.layers[l].S[s].data)[i] == (*b.layers[l].S[s].data)[i]);
    }
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.backbone.n_layers = 2;
    cfg.backbone.d_model = 8;
    cfg.backbone.n_heads = 2;
    cfg.backbone.head_dim = 4;
    cfg.backbone.vocab = 16;
    cfg.backbone.max_seq = 32;
    cfg.rank = 2;
    cfg.alpha = 4.0;
    cfg.backbone_len = 32;
    cfg.write_budget = 64;
    return cfg;
}

// d=4 micro model used by the gradient checks: one layer, every parameter
// count small enough that central differences over the whole set stay fast.
ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.backbone.n_layers = 1;
    cfg.backbone.d_model = 4;
    cfg.backbone.n_heads = 2;
    cfg.backbone.head_dim = 2;
    cfg.backbone.vocab = 8;
    cfg.backbone.max_seq = 8;
    cfg.rank = 2;
    cfg.alpha = 2.0;
    cfg.backbone_len = 8;
    cfg.write_budget = 8;
    return cfg;
}

template <typename T>
void randomize_steering(DeltaMemModel<T>& model, SplitMix64& rng) {
    for (auto& mem : model.mems)
        for (Tensor<T>* w : {&mem.maps.wq, &mem.maps.wk, &mem.maps.wv, &mem.maps.wo})
            if (w->defined()) {
                Tensor<T> rnd = uniform<T>(rng, {w->rows(), w->cols()}, -0.3, 0.3);
                std::copy(rnd.data->begin(), rnd.data->end(), w->data->begin());
            }
}

} // namespace

TEST_CASE("ingest: empty context is a no-op, repeats are bit-identical") {
    ModelConfig cfg = small_config();
    SplitMix64 rng(301);
    DeltaMemModel<float> model = build_model<float>(cfg, rng);
    randomize_steering(model, rng);

    ModelState<float> st = ModelState<float>::init(model);
    std::vector<int> empty;
    ingest_context<float>(nullptr, model, st, empty);
    check_state_bitwise(st, ModelState<float>::init(model));

    std::vector<int> ctx = {3, 1, 4, 1, 5, 9, 2, 6};
    ModelState<float> a = ModelState<float>::init(model);
    ModelState<float> b = ModelState<float>::init(model);
    ingest_context<float>(nullptr, model, a, ctx);
    ingest_context<float>(nullptr, model, b, ctx);
    CHECK(a.layers[0].step == 8);
    check_state_bitwise(a, b);
}

TEST_CASE("ingest: three tokens reproduce the hand-built embedding trace") {
    const int d = 4, r = 2;
    ModelConfig cfg;
    cfg.backbone.n_layers = 1;
    cfg.backbone.d_model = d;
    cfg.backbone.n_heads = 2;
    cfg.backbone.head_dim = 2;
    cfg.backbone.vocab = 4;
    cfg.backbone.max_seq = 4;
    cfg.rank = r;
    cfg.alpha = 2.0;
    cfg.backbone_len = 4;
    cfg.write_budget = 8;

    SplitMix64 rng(302);
    DeltaMemModel<double> model = build_model<double>(cfg, rng);
    model.backbone.embed = rows_of<double>({4, d}, kIngestEmbed);
    for (int t = 0; t < 3; ++t)
        for (int j = 0; j < d; ++j)
            model.backbone.pos.at2(t, j) = kIngestPos[static_cast<size_t>(t * d + j)];
    model.backbone.layers[0].ln1_g = rows_of<double>({d}, kIngestLnG);
    model.backbone.layers[0].ln1_b = rows_of<double>({d}, kIngestLnB);

    MemoryProjections<double>& p = model.mems[0].proj[0];
    p.wq = rows_of<double>({r, d}, {0.6, 0.0, 0.2, 0.0, 0.0, 0.4, 0.0, -0.3});
    p.wk = rows_of<double>({r, d}, {0.5, -0.2, 0.0, 0.1, 0.1, 0.0, 0.3, 0.0});
    p.wv = rows_of<double>({r, d}, {1.0, 0.0, 0.0, 0.5, 0.0, -1.0, 0.5, 0.0});
    p.wbeta = rows_of<double>({r, d}, {0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.4, 0.0});
    p.b = rows_of<double>({r}, {-1.0, 0.5});
    std::vector<double> wq_d = {0.3, -0.1, 0.2, 0.0, -0.3, 0.4, 0.1, 0.2};
    std::vector<double> wo_d = {0.5, 0.1, -0.2, 0.3, 0.0, -0.4, 0.25, 0.15};
    std::copy(wq_d.begin(), wq_d.end(), model.mems[0].maps.wq.data->begin());
    std::copy(wo_d.begin(), wo_d.end(), model.mems[0].maps.wo.data->begin());

    std::vector<int> ctx = {2, 0, 1};
    ModelState<double> st = ModelState<double>::init(model);
    ingest_context<double>(nullptr, model, st, ctx);
    CHECK(st.layers[0].step == 3);
    check_close(st.layers[0].S[0], kIngestS, 1e-12);

    ModelState<double> st2 = ModelState<double>::init(model);
    MemTrace<double> trace;
    model_forward<double>(nullptr, model, st2, ctx, {}, &trace, false);
    check_close(trace.layers[0].qm, kIngestQm, 1e-12);
    check_close(st2.layers[0].S[0], kIngestS, 1e-12);
}

TEST_CASE("ingest: the write budget rejects or drops the head of the context") {
    ModelConfig cfg = small_config();
    cfg.write_budget = 6;
    cfg.backbone_len = 4;
    SplitMix64 rng(303);
    DeltaMemModel<float> model = build_model<float>(cfg, rng);
    randomize_steering(model, rng);

    std::vector<int> ctx = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    ModelState<float> st = ModelState<float>::init(model);
    CHECK_THROWS_AS(ingest_context<float>(nullptr, model, st, ctx), std::invalid_argument);
    CHECK(st.layers[0].step == 0);

    model.cfg.truncate_overlength = true;
    ModelState<float> truncated = ModelState<float>::init(model);
    ingest_context<float>(nullptr, model, truncated, ctx);
    CHECK(truncated.layers[0].step == 6);

    std::vector<int> tail(ctx.end() - 6, ctx.end());
    ModelState<float> direct = ModelState<float>::init(model);
    ingest_context<float>(nullptr, model, direct, tail);
    check_state_bitwise(truncated, direct);

    ModelConfig bad = small_config();
    bad.backbone_len = bad.backbone.max_seq + 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("ingest: chunks restart positions but carry the state across") {
    ModelConfig cfg = small_config();
    cfg.backbone_len = 4;
    SplitMix64 rng(304);
    DeltaMemModel<float> model = build_model<float>(cfg, rng);
    randomize_steering(model, rng);

    std::vector<int> ctx = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    ModelState<float> chunked = ModelState<float>::init(model);
    ingest_context<float>(nullptr, model, chunked, ctx);
    CHECK(chunked.layers[0].step == 10);

    ModelState<float> manual = ModelState<float>::init(model);
    for (auto [s, e] : std::vector<std::pair<int, int>>{{0, 4}, {4, 8}, {8, 10}})
        model_forward<float>(nullptr, model, manual,
                             std::span<const int>(ctx).subspan(static_cast<size_t>(s), static_cast<size_t>(e - s)),
                             {}, nullptr, false);
    check_state_bitwise(chunked, manual);
}

TEST_CASE("ingest: chunk boundaries never split a segment") {
    ModelConfig cfg = small_config();
    cfg.strategy = WriteStrategy::Segment;
    cfg.backbone_len = 5;
    SplitMix64 rng(305);
    DeltaMemModel<float> model = build_model<float>(cfg, rng);
    randomize_steering(model, rng);

    std::vector<int> ctx = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
    std::vector<int> segs = {0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3};
    ModelState<float> chunked = ModelState<float>::init(model);
    ingest_context<float>(nullptr, model, chunked, ctx, segs);
    CHECK(chunked.layers[0].step == 4);

    // backbone_len 5 fits one 3-token segment per chunk but never two.
    ModelState<float> manual = ModelState<float>::init(model);
    for (int seg = 0; seg < 4; ++seg)
        model_forward<float>(nullptr, model, manual,
                             std::span<const int>(ctx).subspan(static_cast<size_t>(seg) * 3, 3),
                             std::span<const int>(segs).subspan(static_cast<size_t>(seg) * 3, 3),
                             nullptr, false);
    check_state_bitwise(chunked, manual);

    std::vector<int> one_seg(8, 7);
    std::vector<int> seg_ids(8, 0);
    ModelState<float> st = ModelState<float>::init(model);
    CHECK_THROWS_AS(ingest_context<float>(nullptr, model, st, one_seg, seg_ids), std::invalid_argument);
}

TEST_CASE("sft loss: a uniform head scores |Y| ln V no matter the state") {
    ModelConfig cfg = small_config();
    SplitMix64 rng(306);
    DeltaMemModel<double> model = build_model<double>(cfg, rng);
    std::fill(model.backbone.embed.data->begin(), model.backbone.embed.data->end(), 0.0);

    ModelState<double> st = ModelState<double>::init(model);
    std::vector<int> ctx = {1, 2, 3, 4};
    ingest_context<double>(nullptr, model, st, ctx);

    std::vector<int> q = {5, 6};
    std::vector<int> y = {7, 8, 9};
    Tensor<double> loss = sft_loss<double>(nullptr, model, st, q, y);
    CHECK(std::abs(loss.item() - 3.0 * std::log(16.0)) <= 1e-12);

    std::vector<int> empty;
    CHECK_THROWS_AS(sft_loss<double>(nullptr, model, st, empty, y), std::invalid_argument);
    CHECK_THROWS_AS(sft_loss<double>(nullptr, model, st, q, empty), std::invalid_argument);
}

TEST_CASE("sft loss: exactly the response positions enter the sum") {
    ModelConfig cfg = small_config();
    cfg.backbone.vocab = 12;
    SplitMix64 rng(307);
    DeltaMemModel<double> model = build_model<double>(cfg, rng);
    randomize_steering(model, rng);

    std::vector<int> ctx = {1, 2, 3, 4, 5};
    ModelState<double> st = ModelState<double>::init(model);
    ingest_context<double>(nullptr, model, st, ctx);

    std::vector<int> q = {6, 7};
    std::vector<int> y = {8, 9, 10};
    ModelState<double> st_loss = st.clone();
    double loss = sft_loss<double>(nullptr, model, st_loss, q, y).item();

    std::vector<int> ids = q;
    ids.insert(ids.end(), y.begin(), y.end());
    std::vector<int> segs = {0, 1, 2, 3, 4};
    ModelState<double> st_manual = st.clone();
    Tensor<double> logits = model_forward<double>(nullptr, model, st_manual, ids, segs);
    const int n = static_cast<int>(ids.size());
    const int V = cfg.backbone.vocab;
    double want = 0.0;
    for (int t = static_cast<int>(q.size()) - 1; t + 1 < n; ++t) {
        double mx = logits.at2(t, 0);
        for (int j = 1; j < V; ++j) mx = std::max(mx, logits.at2(t, j));
        double se = 0.0;
        for (int j = 0; j < V; ++j) se += std::exp(logits.at2(t, j) - mx);
        want += mx + std::log(se) - logits.at2(t, ids[static_cast<size_t>(t) + 1]);
    }
    CHECK(std::abs(loss - want) <= 1e-12);
}

TEST_CASE("gradients: every parameter class checks through ingestion and the loss") {
    struct Setup {
        const char* name;
        WriteStrategy strategy;
        int n_states;
        const char* branches;
        std::vector<int> segs;
    };
    const std::vector<Setup> setups = {
        {"tsw qkvo", WriteStrategy::Token, 1, "qkvo", {}},
        {"msw qo", WriteStrategy::MultiState, 2, "qo", {}},
        {"ssw qv", WriteStrategy::Segment, 1, "qv", {0, 0, 1, 1}},
    };
    const std::vector<int> ctx = {1, 2, 3, 4};
    const std::vector<int> q = {5, 6};
    const std::vector<int> y = {7, 3};

    for (const auto& s : setups) {
        CAPTURE(s.name);
        ModelConfig cfg = micro_config();
        cfg.strategy = s.strategy;
        cfg.n_states = s.n_states;
        cfg.branches = s.branches;
        SplitMix64 rng(308);
        DeltaMemModel<double> model = build_model<double>(cfg, rng);
        randomize_steering(model, rng);
        freeze_backbone(model.backbone);

        auto loss_fn = [&](Tape<double>* tp) {
            ModelState<double> st = ModelState<double>::init(model);
            ingest_context<double>(tp, model, st, ctx, s.segs);
            return sft_loss<double>(tp, model, st, q, y);
        };

        auto params = named_memory_tensors(model);
        for (auto& [name, p] : params) p.zero_grad();
        Tape<double> tape;
        Tensor<double> loss = loss_fn(&tape);
        tape.backward(loss);
        auto res = finite_diff_check<double>(params, [&] { return loss_fn(nullptr).item(); });
        CHECK_MESSAGE(res.ok(kGradTol), s.name, ": worst entry ", res.worst, " rel err ",
                      res.max_rel_err, " abs err ", res.max_abs_err);
    }
}

TEST_CASE("detach_ingest: ingestion leaves the tape, prediction writes stay") {
    ModelConfig cfg = micro_config();
    cfg.branches = "qkvo";
    SplitMix64 rng(309);
    DeltaMemModel<double> model = build_model<double>(cfg, rng);
    randomize_steering(model, rng);
    freeze_backbone(model.backbone);

    const std::vector<int> ctx = {1, 2, 3, 4};
    const std::vector<int> q = {5, 6};
    const std::vector<int> y = {7, 3};
    auto params = named_memory_tensors(model);

    auto grads_of = [&](const std::function<void(Tape<double>&, ModelState<double>&)>& ingest_fn) {
        for (auto& [name, p] : params) p.zero_grad();
        Tape<double> tape;
        ModelState<double> st = ModelState<double>::init(model);
        ingest_fn(tape, st);
        Tensor<double> loss = sft_loss<double>(&tape, model, st, q, y);
        tape.backward(loss);
        std::vector<std::vector<double>> out;
        for (auto& [name, p] : params) out.push_back(*p.grad);
        return out;
    };

    model.cfg.detach_ingest = true;
    auto detached = grads_of([&](Tape<double>& tape, ModelState<double>& st) {
        ingest_context<double>(&tape, model, st, ctx);
    });
    model.cfg.detach_ingest = false;
    auto manual = grads_of([&](Tape<double>&, ModelState<double>& st) {
        ingest_context<double>(nullptr, model, st, ctx);
    });
    auto full = grads_of([&](Tape<double>& tape, ModelState<double>& st) {
        ingest_context<double>(&tape, model, st, ctx);
    });

    REQUIRE(detached.size() == manual.size());
    double detached_mass = 0.0;
    for (size_t i = 0; i < detached.size(); ++i) {
        REQUIRE(detached[i].size() == manual[i].size());
        for (size_t j = 0; j < detached[i].size(); ++j) {
            CHECK(detached[i][j] == manual[i][j]);
            detached_mass += std::abs(detached[i][j]);
        }
    }
    CHECK(detached_mass > 0.0);

    double max_gap = 0.0;
    for (size_t i = 0; i < full.size(); ++i)
        for (size_t j = 0; j < full[i].size(); ++j)
            max_gap = std::max(max_gap, std::abs(full[i][j] - detached[i][j]));
    CHECK(max_gap > 0.0);
}

TEST_CASE("trainable parameter count matches exhaustive enumeration") {
    ModelConfig cfg;
    cfg.backbone.n_layers = 1;
    cfg.backbone.d_model = 64;
    cfg.backbone.n_heads = 4;
    cfg.backbone.head_dim = 16;
    cfg.backbone.vocab = 64;
    cfg.backbone.max_seq = 16;
    cfg.backbone_len = 16;
    cfg.rank = 8;
    cfg.branches = "qo";
    CHECK(count_trainable_params(cfg) == 3080);

    auto enumerated = [](ModelConfig c) {
        SplitMix64 rng(310);
        DeltaMemModel<float> m = build_model<float>(c, rng);
        long total = 0;
        for (auto& [name, p] : named_memory_tensors(m))
            if (p.grad) total += static_cast<long>(p.numel());
        return total;
    };
    CHECK(enumerated(cfg) == 3080);

    cfg.branches = "none";
    CHECK(count_trainable_params(cfg) == 2056);
    CHECK(enumerated(cfg) == 2056);

    ModelConfig grow = small_config();
    grow.strategy = WriteStrategy::MultiState;
    grow.n_states = 1;
    const long n1 = count_trainable_params(grow);
    grow.n_states = 4;
    CHECK(count_trainable_params(grow) == 4 * n1);
    CHECK(enumerated(grow) == 4 * n1);

    struct Combo { int layers; int d; int r; int n; const char* branches; const char* subset; };
    const std::vector<Combo> combos = {
        {3, 8, 2, 1, "q", "all"},
        {3, 8, 4, 1, "qkvo", "front:2"},
        {4, 16, 8, 1, "kv", "back:1"},
        {4, 16, 2, 3, "qo", "middle:2"},
        {2, 8, 2, 2, "none", "0,1"},
        {5, 8, 3, 1, "qko", "1,3"},
    };
    for (const auto& c : combos) {
        ModelConfig mc;
        mc.backbone.n_layers = c.layers;
        mc.backbone.d_model = c.d;
        mc.backbone.n_heads = 2;
        mc.backbone.head_dim = c.d / 2;
        mc.backbone.vocab = 8;
        mc.backbone.max_seq = 8;
        mc.backbone_len = 8;
        mc.rank = c.r;
        mc.n_states = c.n;
        mc.strategy = c.n > 1 ? WriteStrategy::MultiState : WriteStrategy::Token;
        mc.branches = c.branches;
        mc.layers = c.subset;
        CAPTURE(c.subset);
        CHECK(count_trainable_params(mc) == enumerated(mc));
    }
}
