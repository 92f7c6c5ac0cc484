#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmem/model.hpp"

namespace dmem {

// One supervised example: context C (ingested, never replayed), query Q,
// response Y. loss_mask spans the prediction-pass tokens [Q; Y] and is true
// exactly on the Y positions.
struct TrainingExample {
    std::vector<int> context;
    std::vector<int> segments;  // parallel to context (message ids for ssw)
    std::vector<int> query;
    std::vector<int> response;
    std::vector<char> loss_mask;
};

inline TrainingExample make_training_example(std::vector<int> context, std::vector<int> segments,
                                             std::vector<int> query, std::vector<int> response) {
    TrainingExample ex;
    ex.context = std::move(context);
    ex.segments = std::move(segments);
    ex.query = std::move(query);
    ex.response = std::move(response);
    ex.loss_mask.assign(ex.query.size() + ex.response.size(), 0);
    for (size_t i = ex.query.size(); i < ex.loss_mask.size(); ++i) ex.loss_mask[i] = 1;
    return ex;
}

// Ingest + masked prediction loss for one example with a fresh state.
template <typename T>
Tensor<T> example_sft_loss(Tape<T>* tp, DeltaMemModel<T>& model, const TrainingExample& ex) {
    ModelState<T> st = ModelState<T>::init(model);
    ingest_context(tp, model, st, ex.context, ex.segments);
    return sft_loss(tp, model, st, ex.query, ex.response);
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct OptimConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Decay applies to matrices only;
// vectors (biases, gates, norm parameters) are exempt.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor<T>>> params, OptimConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        for (auto& [name, p] : params_) {
            if (!p.requires_grad()) throw std::invalid_argument("optimizer: param without grad: " + name);
            m_.emplace_back(p.data->size(), 0.0);
            v_.emplace_back(p.data->size(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    void scale_grads(double s) {
        for (auto& [name, p] : params_)
            for (auto& g : *p.grad) g = static_cast<T>(static_cast<double>(g) * s);
    }

    double grad_norm() const {
        double sq = 0.0;
        for (const auto& [name, p] : params_)
            for (T g : *p.grad) sq += static_cast<double>(g) * static_cast<double>(g);
        return std::sqrt(sq);
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].second;
            const bool decay = p.ndim() >= 2;
            for (size_t j = 0; j < p.data->size(); ++j) {
                const double g = static_cast<double>((*p.grad)[j]);
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                double upd = lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                if (decay) upd += lr * cfg_.weight_decay * static_cast<double>((*p.data)[j]);
                (*p.data)[j] = static_cast<T>(static_cast<double>((*p.data)[j]) - upd);
            }
        }
    }

    long step_count() const { return t_; }

private:
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    OptimConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

// Linear warmup to the peak, then cosine decay to zero.
inline double cosine_lr(long step, long total_steps, double warmup_ratio, double peak_lr) {
    if (total_steps <= 0) return peak_lr;
    const long warmup = static_cast<long>(warmup_ratio * static_cast<double>(total_steps));
    if (warmup > 0 && step < warmup)
        return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total_steps == warmup) return peak_lr;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return peak_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainConfig {
    long steps = 400;
    int batch = 8;
    double peak_lr = 2e-4;
    double warmup_ratio = 0.1;
    double weight_decay = 0.01;
    uint64_t seed = 42;
    long log_every = 10;
    std::string metrics_path;  // CSV step,loss,lr,grad_norm; empty = no file
};

struct MetricsRow {
    long step;
    double loss, lr, grad_norm;
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    double final_loss = 0.0;
    long steps_run = 0;
    bool diverged = false;
    std::string divergence_dump;
};

namespace detail {

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    if (path.empty()) return;
    std::ofstream os(path);
    os << "step,loss,lr,grad_norm\n";
    os.precision(10);
    for (const auto& r : rows) os << r.step << "," << r.loss << "," << r.lr << "," << r.grad_norm << "\n";
}

} // namespace detail

// SFT on the memory parameters theta; the backbone must already be frozen.
// Each example owns a fresh state and tape; batch gradients accumulate
// into shared buffers and are averaged before the step. A non-finite loss
// aborts with a diagnostic dump instead of stepping on garbage.
template <typename T>
TrainResult train_sft(DeltaMemModel<T>& model, const std::vector<TrainingExample>& data,
                      const TrainConfig& tc) {
    if (data.empty()) throw std::invalid_argument("train_sft: empty dataset");
    if (!backbone_frozen(model.backbone)) throw std::invalid_argument("train_sft: backbone not frozen");
    const uint64_t checksum_before = backbone_checksum(model.backbone);

    OptimConfig oc;
    oc.weight_decay = tc.weight_decay;
    AdamW<T> opt(named_memory_tensors(model), oc);
    SplitMix64 rng(tc.seed);
    TrainResult res;

    for (long step = 0; step < tc.steps; ++step) {
        opt.zero_grad();
        double loss_sum = 0.0;
        for (int b = 0; b < tc.batch; ++b) {
            const auto& ex = data[rng.u32_below(data.size())];
            Tape<T> tape;
            Tensor<T> loss = example_sft_loss(&tape, model, ex);
            loss_sum += static_cast<double>(loss.item());
            tape.backward(loss);
        }
        const double mean_loss = loss_sum / tc.batch;
        if (!std::isfinite(mean_loss)) {
            std::ostringstream dump;
            dump << "divergence at step " << step << ": loss=" << mean_loss
                 << " grad_norm=" << opt.grad_norm();
            for (auto& [name, p] : named_memory_tensors(model))
                dump << "\n  " << name << " checksum=" << to_hex(checksum(p));
            res.diverged = true;
            res.divergence_dump = dump.str();
            break;
        }
        opt.scale_grads(1.0 / tc.batch);
        const double lr = cosine_lr(step, tc.steps, tc.warmup_ratio, tc.peak_lr);
        const double gn = opt.grad_norm();
        opt.step(lr);
        res.metrics.push_back({step, mean_loss, lr, gn});
        res.final_loss = mean_loss;
        res.steps_run = step + 1;
    }

    detail::write_metrics_csv(tc.metrics_path, res.metrics);
    if (backbone_checksum(model.backbone) != checksum_before)
        throw std::logic_error("train_sft: backbone weights changed during training");
    return res;
}

// Plain language-model pretraining of the backbone on [tokens, target,
// mask] sequences (used to give the frozen backbone competent hidden
// states before any memory training).
template <typename T>
struct LmExample {
    std::vector<int> ids;
    std::vector<int> targets;
    std::vector<char> mask;
};

template <typename T>
TrainResult train_backbone(Backbone<T>& bb, const std::vector<LmExample<T>>& data,
                           const TrainConfig& tc) {
    if (data.empty()) throw std::invalid_argument("train_backbone: empty dataset");
    OptimConfig oc;
    oc.weight_decay = tc.weight_decay;
    AdamW<T> opt(named_backbone_tensors(bb), oc);
    SplitMix64 rng(tc.seed);
    TrainResult res;
    for (long step = 0; step < tc.steps; ++step) {
        opt.zero_grad();
        double loss_sum = 0.0;
        for (int b = 0; b < tc.batch; ++b) {
            const auto& ex = data[rng.u32_below(data.size())];
            Tape<T> tape;
            Tensor<T> logits = backbone_forward(&tape, bb, ex.ids);
            Tensor<T> loss = cross_entropy_sum(&tape, logits, ex.targets, ex.mask);
            loss_sum += static_cast<double>(loss.item());
            tape.backward(loss);
        }
        const double mean_loss = loss_sum / tc.batch;
        if (!std::isfinite(mean_loss)) {
            res.diverged = true;
            res.divergence_dump = "divergence at step " + std::to_string(step);
            break;
        }
        opt.scale_grads(1.0 / tc.batch);
        const double lr = cosine_lr(step, tc.steps, tc.warmup_ratio, tc.peak_lr);
        const double gn = opt.grad_norm();
        opt.step(lr);
        res.metrics.push_back({step, mean_loss, lr, gn});
        res.final_loss = mean_loss;
        res.steps_run = step + 1;
    }
    detail::write_metrics_csv(tc.metrics_path, res.metrics);
    return res;
}

} // namespace dmem
