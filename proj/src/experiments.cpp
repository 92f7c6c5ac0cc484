#include "dmem/experiments.hpp"

#include <filesystem>
#include <fstream>

namespace dmem {

std::vector<LmExample<float>> make_pretrain_stream(uint64_t seed, const RecallSpec& spec, int n,
                                                   double bare_fraction) {
    SplitMix64 rng(seed);
    std::vector<LmExample<float>> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        LmExample<float> lm;
        size_t tail_start = 0;  // first position whose prediction is scored
        const double kind = rng.real();
        if (kind >= bare_fraction + 0.5 && kind < bare_fraction + 0.65) {
            // Alternating stream: two same-class tokens as a b a b. Every
            // next-token target equals the previous token, which neither a
            // class marginal nor a fixed-slot pattern can satisfy, so the
            // gradient pushes first-layer attention toward the strict
            // previous-token head the key-match circuit composes with.
            const bool vals = rng.u32_below(2) == 1;
            const int base = vals ? vocab::kValueBase : vocab::kKeyBase;
            const int alpha = vals ? spec.n_values : spec.n_keys;
            const int a = base + static_cast<int>(rng.u32_below(static_cast<uint64_t>(alpha)));
            int b = a;
            while (b == a) b = base + static_cast<int>(rng.u32_below(static_cast<uint64_t>(alpha)));
            const size_t jitter = rng.u32_below(3);
            for (size_t j = 0; j < jitter; ++j)
                lm.ids.push_back(vocab::kFillerBase +
                                 static_cast<int>(rng.u32_below(vocab::kNumFillers)));
            const int reps = 10 + static_cast<int>(rng.u32_below(6));
            for (int p = 0; p < reps; ++p) {
                lm.ids.push_back(a);
                lm.ids.push_back(b);
            }
            const size_t len = lm.ids.size();
            lm.targets.assign(len, 0);
            lm.mask.assign(len, 0);
            for (size_t t = 0; t + 1 < len; ++t) {
                lm.targets[t] = lm.ids[t + 1];
                lm.mask[t] = (t >= jitter + 1) ? 1 : 0;
            }
            out.push_back(std::move(lm));
            continue;
        }
        if (kind >= bare_fraction && kind < bare_fraction + 0.5) {
            // Repetition stream: a few bindings emitted several times each, in
            // random order. Every value position whose key already appeared is
            // scored, so one sequence carries many key-match targets instead of
            // the single probe the recall format offers. Without this stream the
            // two-layer match circuit stalls at "copy some value from context".
            const int m = 2 + static_cast<int>(rng.u32_below(3));
            std::vector<int> keys, values;
            while (static_cast<int>(keys.size()) < m) {
                const int k = vocab::kKeyBase +
                              static_cast<int>(rng.u32_below(static_cast<uint64_t>(spec.n_keys)));
                if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
            }
            for (int j = 0; j < m; ++j)
                values.push_back(vocab::kValueBase +
                                 static_cast<int>(rng.u32_below(static_cast<uint64_t>(spec.n_values))));
            std::vector<char> seen(static_cast<size_t>(m), 0);
            std::vector<size_t> scored;
            const int emits = spec.pairs + 2;
            for (int p = 0; p < emits; ++p) {
                const int j = static_cast<int>(rng.u32_below(static_cast<uint64_t>(m)));
                lm.ids.push_back(keys[static_cast<size_t>(j)]);
                if (seen[static_cast<size_t>(j)]) scored.push_back(lm.ids.size() - 1);
                lm.ids.push_back(values[static_cast<size_t>(j)]);
                lm.ids.push_back(vocab::kSep);
                seen[static_cast<size_t>(j)] = 1;
            }
            tail_start = lm.ids.size();
            const int pj = static_cast<int>(rng.u32_below(static_cast<uint64_t>(m)));
            lm.ids.insert(lm.ids.end(), {vocab::kQuery, keys[static_cast<size_t>(pj)],
                                         values[static_cast<size_t>(pj)], vocab::kEos});
            const size_t len = lm.ids.size();
            lm.targets.assign(len, 0);
            lm.mask.assign(len, 0);
            for (size_t t = 0; t + 1 < len; ++t) {
                lm.targets[t] = lm.ids[t + 1];
                lm.mask[t] = (t + 1 >= tail_start) ? 1 : 0;
            }
            for (size_t p : scored) lm.mask[p] = 1;
            out.push_back(std::move(lm));
            continue;
        }
        if (kind < bare_fraction) {
            const int k = vocab::kKeyBase +
                          static_cast<int>(rng.u32_below(static_cast<uint64_t>(spec.n_keys)));
            lm.ids = {vocab::kQuery, k};
            lm.ids.push_back(vocab::kValueBase +
                             static_cast<int>(rng.u32_below(static_cast<uint64_t>(spec.n_values))));
            lm.ids.push_back(vocab::kEos);
        } else {
            // Bindings are drawn uniformly, ignoring the train/test split: every
            // key co-occurs with every value, so memorizing pairs cannot reduce
            // the answer loss and copying from context is the only strategy left.
            // Pair counts are mixed from 1 up to the target so the copy gradient
            // is strong early (short contexts) yet covers the full length.
            RecallSpec s = spec;
            s.pairs = 1 + static_cast<int>(rng.u32_below(static_cast<uint64_t>(spec.pairs)));
            std::vector<int> keys;
            while (static_cast<int>(keys.size()) < s.pairs) {
                const int k = vocab::kKeyBase +
                              static_cast<int>(rng.u32_below(static_cast<uint64_t>(s.n_keys)));
                if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
            }
            std::vector<int> values;
            for (int j = 0; j < s.pairs; ++j)
                values.push_back(vocab::kValueBase +
                                 static_cast<int>(rng.u32_below(static_cast<uint64_t>(s.n_values))));
            const int probe = static_cast<int>(rng.u32_below(static_cast<uint64_t>(s.pairs)));
            for (int j = 0; j < s.pairs; ++j) {
                int nf = 0;
                while (nf < 4 && rng.real() < s.distractor_rate) {
                    lm.ids.push_back(vocab::kFillerBase +
                                     static_cast<int>(rng.u32_below(vocab::kNumFillers)));
                    ++nf;
                }
                lm.ids.push_back(keys[static_cast<size_t>(j)]);
                lm.ids.push_back(values[static_cast<size_t>(j)]);
                lm.ids.push_back(vocab::kSep);
            }
            tail_start = lm.ids.size();
            const int pk = keys[static_cast<size_t>(probe)];
            const int pv = values[static_cast<size_t>(probe)];
            lm.ids.insert(lm.ids.end(), {vocab::kQuery, pk, pv, vocab::kEos});
        }
        const size_t len = lm.ids.size();
        lm.targets.assign(len, 0);
        lm.mask.assign(len, 0);
        // Score only the query/answer tail: context tokens are random, and
        // spending most of the gradient on their irreducible entropy keeps
        // the copy circuit from forming at this scale.
        for (size_t t = 0; t + 1 < len; ++t) {
            lm.targets[t] = lm.ids[t + 1];
            lm.mask[t] = (t + 1 >= tail_start) ? 1 : 0;
        }
        out.push_back(std::move(lm));
    }
    return out;
}

Backbone<float> pretrain_backbone_for_recall(const RunConfig& rc, TrainResult* metrics_out) {
    ModelConfig mc = model_config_from(rc);
    const uint64_t seed = static_cast<uint64_t>(rc.get_int("pretrain_seed", 7));
    SplitMix64 rng(seed);
    Backbone<float> bb = init_backbone<float>(mc.backbone, rng);

    RecallSpec spec = recall_spec_from(rc);
    const int n_train = static_cast<int>(rc.get_int("n_train", 4096));
    auto stream = make_pretrain_stream(seed + 1, spec, n_train, 0.1);

    TrainConfig tc;
    tc.steps = rc.get_int("pretrain_steps", 3000);
    tc.batch = static_cast<int>(rc.get_int("pretrain_batch", 16));
    tc.peak_lr = rc.get_double("pretrain_lr", 1e-3);
    tc.seed = seed + 2;
    TrainResult res = train_backbone(bb, stream, tc);
    if (res.diverged) throw std::runtime_error("pretraining diverged: " + res.divergence_dump);
    if (metrics_out) *metrics_out = std::move(res);
    return bb;
}

DeltaMemModel<float> build_memory_model(const RunConfig& rc, Backbone<float> backbone,
                                        uint64_t seed) {
    ModelConfig mc = model_config_from(rc);
    freeze_backbone(backbone);
    SplitMix64 rng(seed);
    DeltaMemModel<float> model = build_model<float>(mc, std::move(backbone), rng);
    // Warm tie: start the read map equal to the write-key map, so state
    // reads favor positions whose hidden state overlaps the query from the
    // first step. Independent draws leave the read an uninformative sketch
    // and SFT stalls on its saddle; training de-ties the maps afterwards.
    for (auto& mem : model.mems)
        for (auto& p : mem.proj) *p.wq.data = *p.wk.data;
    return model;
}

TrainResult train_memory_sft(DeltaMemModel<float>& model, const RunConfig& rc, uint64_t seed) {
    RecallSpec spec = recall_spec_from(rc);
    const int n_train = static_cast<int>(rc.get_int("n_train", 4096));
    // Mixed context sizes: small-K instances give a dense learning signal
    // early on, the full-K ones match the evaluation setting.
    SplitMix64 rng(seed + 17);
    std::vector<TrainingExample> data;
    data.reserve(static_cast<size_t>(n_train));
    for (int i = 0; i < n_train; ++i) {
        RecallSpec s = spec;
        s.pairs = 1 + static_cast<int>(rng.u32_below(static_cast<uint32_t>(spec.pairs)));
        auto one = gen_recall(rng.next_u64(), s, 1, /*train_split=*/true);
        data.push_back(std::move(one.front()));
    }

    TrainConfig tc = train_config_from(rc);
    tc.seed = seed;
    return train_sft(model, data, tc);
}

EvalReport evaluate_recovery(DeltaMemModel<float>& model, const RunConfig& rc,
                             const std::vector<uint64_t>& seeds, int n_eval) {
    RecallSpec spec = recall_spec_from(rc);
    EvalReport pooled;
    pooled.seeds = seeds;
    pooled.config_hash = to_hex(rc.hash());
    for (uint64_t seed : seeds) {
        auto data = gen_recall(seed, spec, n_eval, /*train_split=*/false);
        EvalReport rep = eval_context_recovery(model, data);
        auto add = [](ConditionStats& into, const ConditionStats& from) {
            into.em_hits += from.em_hits;
            into.f1_sum += from.f1_sum;
            into.n += from.n;
        };
        add(pooled.with_context, rep.with_context);
        add(pooled.state_only, rep.state_only);
        add(pooled.floor, rep.floor);
        pooled.n_instances += rep.n_instances;
    }
    return pooled;
}

void write_report_files(const EvalReport& rep, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream os(out_dir + "/report.json");
        if (!os) throw std::runtime_error("report: cannot open " + out_dir + "/report.json");
        os << rep.to_json().dump(1) << "\n";
    }
    std::ofstream cs(out_dir + "/eval_summary.csv");
    if (!cs) throw std::runtime_error("report: cannot open " + out_dir + "/eval_summary.csv");
    cs << "condition,em,f1,em_hits,n\n";
    cs.precision(10);
    auto row = [&](const char* name, const ConditionStats& c) {
        cs << name << "," << c.em() << "," << c.f1() << "," << c.em_hits << "," << c.n << "\n";
    };
    row("with_context", rep.with_context);
    row("state_only", rep.state_only);
    row("floor", rep.floor);
}

} // namespace dmem
