#pragma once

#include <string>
#include <vector>

#include "dmem/runconfig.hpp"
#include "dmem/tasks.hpp"
#include "dmem/training.hpp"

namespace dmem {

// Language-model pretraining stream for the recall task. Most sequences
// are the with-context format [context; query; value; EOS]; a fraction are
// bare [query; value; EOS] with the value drawn uniformly, so the backbone
// learns the no-context prompt shape without any binding being learnable
// from the query alone.
std::vector<LmExample<float>> make_pretrain_stream(uint64_t seed, const RecallSpec& spec, int n,
                                                   double bare_fraction);

// Next-token pretraining of the backbone on the recall format. Uses the
// pretrain_* config keys; the returned backbone is NOT yet frozen.
Backbone<float> pretrain_backbone_for_recall(const RunConfig& rc, TrainResult* metrics_out);

// Builds memory parameters on a frozen copy of the backbone and runs SFT
// (ingested context, loss on the response) on train-split instances.
DeltaMemModel<float> build_memory_model(const RunConfig& rc, Backbone<float> backbone,
                                        uint64_t seed);
TrainResult train_memory_sft(DeltaMemModel<float>& model, const RunConfig& rc, uint64_t seed);

// Pooled three-condition evaluation over one test-split dataset per seed.
EvalReport evaluate_recovery(DeltaMemModel<float>& model, const RunConfig& rc,
                             const std::vector<uint64_t>& seeds, int n_eval);

// Report files: <dir>/report.json (full) and <dir>/eval_summary.csv.
void write_report_files(const EvalReport& rep, const std::string& out_dir);

} // namespace dmem
