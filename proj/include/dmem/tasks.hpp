#pragma once

#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dmem/model.hpp"
#include "dmem/training.hpp"

namespace dmem {

// Token layout of the 64-id vocabulary used by the synthetic recall task.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kSep = 2;
inline constexpr int kQuery = 3;
inline constexpr int kAnswer = 4;  // reserved; queries end at the probed key
inline constexpr int kEos = 5;
inline constexpr int kFillerBase = 6;
inline constexpr int kNumFillers = 10;
inline constexpr int kKeyBase = kFillerBase + kNumFillers;  // 16
inline constexpr int kNumKeys = 24;
inline constexpr int kValueBase = kKeyBase + kNumKeys;  // 40
inline constexpr int kNumValues = 24;
inline constexpr int kSize = kValueBase + kNumValues;  // 64
} // namespace vocab

// Associative recall: the context lists K (key, value) pairs, one pair per
// message segment with optional filler tokens; the query probes one key
// and the response is its value followed by EOS.
struct RecallSpec {
    int pairs = 8;
    int n_keys = vocab::kNumKeys;
    int n_values = vocab::kNumValues;
    double distractor_rate = 0.1;
};

// Stable hash split of the (key, value) binding space so train and test
// bindings are disjoint: a model can only answer test probes by reading
// the context, never by memorizing pairs.
inline bool binding_is_train(int key_idx, int value_idx) {
    return mix64(static_cast<uint64_t>(key_idx) * 997 + static_cast<uint64_t>(value_idx) * 131 +
                 12345) % 2 == 0;
}

// Draw order is part of the dataset format (mirrored by the reference
// generator that produced the committed fixture): keys by rejection until
// distinct, values by rejection onto the split, probe index, then per pair
// up to 4 fillers each drawn while real() < distractor_rate.
inline TrainingExample gen_recall_instance(SplitMix64& rng, const RecallSpec& spec, bool train_split) {
    if (spec.pairs > spec.n_keys)
        throw std::invalid_argument("recall: key alphabet too small for requested distinct pairs");
    if (spec.pairs < 1) throw std::invalid_argument("recall: need at least one pair");

    std::vector<int> keys;
    while (static_cast<int>(keys.size()) < spec.pairs) {
        const int k = vocab::kKeyBase + static_cast<int>(rng.u32_below(static_cast<uint64_t>(spec.n_keys)));
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    std::vector<int> values;
    for (int j = 0; j < spec.pairs; ++j) {
        for (;;) {
            const int v = vocab::kValueBase + static_cast<int>(rng.u32_below(static_cast<uint64_t>(spec.n_values)));
            if (binding_is_train(keys[static_cast<size_t>(j)] - vocab::kKeyBase,
                                 v - vocab::kValueBase) == train_split) {
                values.push_back(v);
                break;
            }
        }
    }
    const int probe = static_cast<int>(rng.u32_below(static_cast<uint64_t>(spec.pairs)));

    std::vector<int> context, segments;
    for (int j = 0; j < spec.pairs; ++j) {
        int nf = 0;
        while (nf < 4 && rng.real() < spec.distractor_rate) {
            context.push_back(vocab::kFillerBase +
                              static_cast<int>(rng.u32_below(vocab::kNumFillers)));
            segments.push_back(j);
            ++nf;
        }
        context.push_back(keys[static_cast<size_t>(j)]);
        context.push_back(values[static_cast<size_t>(j)]);
        context.push_back(vocab::kSep);
        segments.insert(segments.end(), 3, j);
    }

    std::vector<int> query = {vocab::kQuery, keys[static_cast<size_t>(probe)]};
    std::vector<int> response = {values[static_cast<size_t>(probe)], vocab::kEos};
    return make_training_example(std::move(context), std::move(segments), std::move(query),
                                 std::move(response));
}

inline std::vector<TrainingExample> gen_recall(uint64_t seed, const RecallSpec& spec, int n,
                                               bool train_split) {
    SplitMix64 rng(seed);
    std::vector<TrainingExample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(gen_recall_instance(rng, spec, train_split));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset files: one JSON record per line, token ids inline.
// ---------------------------------------------------------------------------

inline void save_dataset_jsonl(const std::string& path, const std::vector<TrainingExample>& data) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("dataset: cannot open for write: " + path);
    for (const auto& ex : data) {
        nlohmann::ordered_json rec;
        rec["context"] = ex.context;
        rec["segments"] = ex.segments;
        rec["query"] = ex.query;
        std::vector<int> answer(ex.response.begin(), ex.response.end());
        if (!answer.empty() && answer.back() == vocab::kEos) answer.pop_back();
        rec["answer"] = answer;
        os << rec.dump() << "\n";
    }
}

inline std::vector<TrainingExample> load_dataset_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("dataset: cannot open: " + path);
    std::vector<TrainingExample> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto rec = nlohmann::json::parse(line);
        std::vector<int> response = rec.at("answer").get<std::vector<int>>();
        response.push_back(vocab::kEos);
        out.push_back(make_training_example(rec.at("context").get<std::vector<int>>(),
                                            rec.at("segments").get<std::vector<int>>(),
                                            rec.at("query").get<std::vector<int>>(),
                                            std::move(response)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Decoding and metrics
// ---------------------------------------------------------------------------

template <typename T>
int argmax_last_row(const Tensor<T>& logits) {
    const int cols = logits.cols();
    const int row = logits.rows() - 1;
    int best = 0;
    for (int j = 1; j < cols; ++j)
        if (logits.at2(row, j) > logits.at2(row, best)) best = j;
    return best;
}

// Greedy decoding without a KV cache: every step replays [prompt;
// generated] from a clone of the starting state, so the recurrent writes
// for step n never contaminate step n+1's replay.
template <typename T>
std::vector<int> greedy_decode(DeltaMemModel<T>& model, const ModelState<T>& start,
                               std::vector<int> prompt, int max_new) {
    std::vector<int> generated;
    std::vector<int> ids = std::move(prompt);
    for (int i = 0; i < max_new; ++i) {
        ModelState<T> st = start.clone();
        std::vector<int> segs(ids.size());
        for (size_t j = 0; j < segs.size(); ++j) segs[j] = static_cast<int>(j);
        Tensor<T> logits = model_forward<T>(nullptr, model, st, ids, segs);
        const int next = argmax_last_row(logits);
        if (next == vocab::kEos) break;
        generated.push_back(next);
        ids.push_back(next);
    }
    return generated;
}

inline bool exact_match(const std::vector<int>& pred, const std::vector<int>& gold) {
    return pred == gold;
}

// Multiset token overlap F1.
inline double token_f1(std::vector<int> pred, std::vector<int> gold) {
    if (pred.empty() && gold.empty()) return 1.0;
    if (pred.empty() || gold.empty()) return 0.0;
    std::sort(pred.begin(), pred.end());
    std::sort(gold.begin(), gold.end());
    size_t i = 0, j = 0, common = 0;
    while (i < pred.size() && j < gold.size()) {
        if (pred[i] == gold[j]) {
            ++common;
            ++i;
            ++j;
        } else if (pred[i] < gold[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    return 2.0 * static_cast<double>(common) / static_cast<double>(pred.size() + gold.size());
}

// ---------------------------------------------------------------------------
// Context-recovery evaluation
// ---------------------------------------------------------------------------

enum class EvalCondition { WithContext, StateOnly, Floor };

inline EvalCondition parse_condition(const std::string& s) {
    if (s == "with-context") return EvalCondition::WithContext;
    if (s == "state-only") return EvalCondition::StateOnly;
    if (s == "none") return EvalCondition::Floor;
    throw std::invalid_argument("condition: expected with-context|state-only|none, got '" + s + "'");
}

struct ConditionStats {
    long em_hits = 0;
    double f1_sum = 0.0;
    long n = 0;
    double em() const { return n ? static_cast<double>(em_hits) / static_cast<double>(n) : 0.0; }
    double f1() const { return n ? f1_sum / static_cast<double>(n) : 0.0; }
};

struct EvalReport {
    ConditionStats with_context, state_only, floor;
    std::vector<uint64_t> seeds;
    std::string config_hash;
    long n_instances = 0;

    nlohmann::ordered_json to_json() const {
        auto cond = [](const ConditionStats& c) {
            nlohmann::ordered_json j;
            j["em"] = c.em();
            j["f1"] = c.f1();
            j["em_hits"] = c.em_hits;
            j["n"] = c.n;
            return j;
        };
        nlohmann::ordered_json j;
        j["format_version"] = 1;
        j["config_hash"] = config_hash;
        j["seeds"] = seeds;
        j["n_instances"] = n_instances;
        j["with_context"] = cond(with_context);
        j["state_only"] = cond(state_only);
        j["floor"] = cond(floor);
        return j;
    }
};

// Answer tokens per condition: (a) context and query both in the prompt,
// (b) context ingested into the state and only the query in the prompt,
// (c) bare query against a zero state.
template <typename T>
std::vector<int> answer_instance(DeltaMemModel<T>& model, const TrainingExample& ex,
                                 EvalCondition cond) {
    const int budget = static_cast<int>(ex.response.size()) + 1;
    ModelState<T> st = ModelState<T>::init(model);
    std::vector<int> prompt;
    if (cond == EvalCondition::WithContext) {
        prompt = ex.context;
        prompt.insert(prompt.end(), ex.query.begin(), ex.query.end());
    } else {
        if (cond == EvalCondition::StateOnly)
            ingest_context<T>(nullptr, model, st, ex.context, ex.segments);
        prompt = ex.query;
    }
    return greedy_decode(model, st, std::move(prompt), budget);
}

template <typename T>
EvalReport eval_context_recovery(DeltaMemModel<T>& model, const std::vector<TrainingExample>& data) {
    EvalReport rep;
    rep.n_instances = static_cast<long>(data.size());
    for (const auto& ex : data) {
        std::vector<int> gold(ex.response.begin(), ex.response.end());
        if (!gold.empty() && gold.back() == vocab::kEos) gold.pop_back();
        auto score = [&](EvalCondition cond, ConditionStats& st) {
            std::vector<int> pred = answer_instance(model, ex, cond);
            st.em_hits += exact_match(pred, gold) ? 1 : 0;
            st.f1_sum += token_f1(pred, gold);
            st.n += 1;
        };
        score(EvalCondition::WithContext, rep.with_context);
        score(EvalCondition::StateOnly, rep.state_only);
        score(EvalCondition::Floor, rep.floor);
    }
    return rep;
}

} // namespace dmem
