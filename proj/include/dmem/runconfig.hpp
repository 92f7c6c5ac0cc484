#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "dmem/model.hpp"
#include "dmem/tasks.hpp"
#include "dmem/training.hpp"

namespace dmem {

// Flat key = value run configuration. '#' starts a comment; whitespace
// around keys and values is ignored; unknown keys are rejected when a
// typed config is built so typos fail loudly.
class RunConfig {
public:
    static RunConfig from_string(const std::string& text) {
        RunConfig rc;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string val = trim(trimmed.substr(eq + 1));
            if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
            rc.kv_[key] = val;
        }
        return rc;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("config: cannot open: " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        return from_string(ss.str());
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? dflt : it->second;
    }

    long get_int(const std::string& key, long dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        size_t pos = 0;
        const long v = std::stol(it->second, &pos);
        if (pos != it->second.size())
            throw std::invalid_argument("config: key '" + key + "' is not an integer: " + it->second);
        return v;
    }

    double get_double(const std::string& key, double dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size())
            throw std::invalid_argument("config: key '" + key + "' is not a number: " + it->second);
        return v;
    }

    bool get_bool(const std::string& key, bool dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw std::invalid_argument("config: key '" + key + "' is not a boolean: " + it->second);
    }

    // Sorted key = value rendering; the basis of the config hash embedded
    // in eval reports.
    std::string canonical() const {
        std::string out;
        for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
        return out;
    }

    uint64_t hash() const {
        const std::string c = canonical();
        return fnv1a(c.data(), c.size());
    }

    void reject_unknown(const std::vector<std::string>& known) const {
        for (const auto& [k, v] : kv_)
            if (std::find(known.begin(), known.end(), k) == known.end())
                throw std::invalid_argument("config: unknown key '" + k + "'");
    }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> kv_;
};

// Every documented key; reject_unknown uses this list so configs cannot
// silently carry typos.
inline const std::vector<std::string>& known_config_keys() {
    static const std::vector<std::string> keys = {
        // backbone
        "n_layers", "d_model", "n_heads", "head_dim", "vocab", "max_seq",
        // memory
        "rank", "alpha", "strategy", "n_states", "branches", "layers", "detach_ingest",
        "backbone_len", "write_budget", "overlength",
        // sft training
        "steps", "batch", "peak_lr", "warmup_ratio", "weight_decay", "seed", "log_every",
        // backbone pretraining
        "pretrain_steps", "pretrain_batch", "pretrain_lr", "pretrain_seed",
        // task
        "pairs", "distractor_rate", "n_train", "n_eval",
    };
    return keys;
}

inline ModelConfig model_config_from(const RunConfig& rc) {
    ModelConfig cfg;
    cfg.backbone.n_layers = static_cast<int>(rc.get_int("n_layers", cfg.backbone.n_layers));
    cfg.backbone.d_model = static_cast<int>(rc.get_int("d_model", cfg.backbone.d_model));
    cfg.backbone.n_heads = static_cast<int>(rc.get_int("n_heads", cfg.backbone.n_heads));
    cfg.backbone.head_dim = static_cast<int>(rc.get_int("head_dim", cfg.backbone.d_model / cfg.backbone.n_heads));
    cfg.backbone.vocab = static_cast<int>(rc.get_int("vocab", cfg.backbone.vocab));
    cfg.backbone.max_seq = static_cast<int>(rc.get_int("max_seq", cfg.backbone.max_seq));
    cfg.rank = static_cast<int>(rc.get_int("rank", cfg.rank));
    cfg.alpha = rc.get_double("alpha", cfg.alpha);
    cfg.strategy = parse_strategy(rc.get_str("strategy", "tsw"));
    cfg.n_states = static_cast<int>(rc.get_int("n_states", cfg.strategy == WriteStrategy::MultiState ? 4 : 1));
    cfg.branches = rc.get_str("branches", cfg.branches);
    cfg.layers = rc.get_str("layers", cfg.layers);
    cfg.detach_ingest = rc.get_bool("detach_ingest", cfg.detach_ingest);
    cfg.backbone_len = static_cast<int>(rc.get_int("backbone_len", cfg.backbone_len));
    cfg.write_budget = static_cast<int>(rc.get_int("write_budget", cfg.write_budget));
    const std::string over = rc.get_str("overlength", "reject");
    if (over == "reject") {
        cfg.truncate_overlength = false;
    } else if (over == "truncate_head") {
        cfg.truncate_overlength = true;
    } else {
        throw std::invalid_argument("config: overlength must be reject|truncate_head");
    }
    cfg.validate();
    return cfg;
}

inline TrainConfig train_config_from(const RunConfig& rc) {
    TrainConfig tc;
    tc.steps = rc.get_int("steps", tc.steps);
    tc.batch = static_cast<int>(rc.get_int("batch", tc.batch));
    tc.peak_lr = rc.get_double("peak_lr", tc.peak_lr);
    tc.warmup_ratio = rc.get_double("warmup_ratio", tc.warmup_ratio);
    tc.weight_decay = rc.get_double("weight_decay", tc.weight_decay);
    tc.seed = static_cast<uint64_t>(rc.get_int("seed", static_cast<long>(tc.seed)));
    tc.log_every = rc.get_int("log_every", tc.log_every);
    return tc;
}

inline RecallSpec recall_spec_from(const RunConfig& rc) {
    RecallSpec spec;
    spec.pairs = static_cast<int>(rc.get_int("pairs", spec.pairs));
    spec.distractor_rate = rc.get_double("distractor_rate", spec.distractor_rate);
    return spec;
}

} // namespace dmem
