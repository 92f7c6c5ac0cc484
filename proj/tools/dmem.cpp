#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dmem/checkpoint.hpp"
#include "dmem/experiments.hpp"

using namespace dmem;

namespace {

std::vector<int> parse_ids(const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) {
        size_t pos = 0;
        while (pos < tok.size()) {
            const size_t comma = tok.find(',', pos);
            const std::string piece = tok.substr(pos, comma == std::string::npos ? comma : comma - pos);
            if (!piece.empty()) out.push_back(std::stoi(piece));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
    }
    return out;
}

std::vector<uint64_t> parse_seeds(const std::string& text) {
    std::vector<uint64_t> out;
    for (int v : parse_ids(text)) out.push_back(static_cast<uint64_t>(v));
    if (out.empty()) throw std::invalid_argument("expected at least one seed");
    return out;
}

RunConfig load_config(const std::string& path) {
    RunConfig rc = path.empty() ? RunConfig::from_string("") : RunConfig::load(path);
    rc.reject_unknown(known_config_keys());
    return rc;
}

Backbone<float> load_backbone(const RunConfig& rc, const std::string& path) {
    ModelConfig mc = model_config_from(rc);
    SplitMix64 rng(1);
    Backbone<float> bb = init_backbone<float>(mc.backbone, rng);
    load_tensors_into<float>(path, named_backbone_tensors(bb));
    return bb;
}

DeltaMemModel<float> load_model(const RunConfig& rc, const std::string& backbone_path,
                                const std::string& memory_path) {
    DeltaMemModel<float> m = build_memory_model(rc, load_backbone(rc, backbone_path), 1);
    if (!memory_path.empty()) load_tensors_into<float>(memory_path, named_memory_tensors(m));
    return m;
}

void print_ids(const std::vector<int>& ids) {
    for (size_t i = 0; i < ids.size(); ++i) std::cout << (i ? " " : "") << ids[i];
    std::cout << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"delta-memory experiments: compact online associative state over a frozen transformer"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", state_path, backbone_path, memory_path;
    std::string tokens_text, segments_text, prompt_text, context_text, condition = "state-only";
    std::string split = "train", seeds_text = "101,102,103";
    uint64_t seed = 42;
    int n = 200, max_new = 8;

    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run config file (key = value lines)");
    };

    CLI::App* params = app.add_subcommand("params", "print the trainable parameter count");
    add_config(params);

    CLI::App* gen = app.add_subcommand("gen-data", "write a recall dataset as JSONL");
    add_config(gen);
    gen->add_option("--seed", seed, "dataset seed");
    gen->add_option("--n", n, "number of instances");
    gen->add_option("--split", split, "train|test binding split")
        ->check(CLI::IsMember({"train", "test"}));
    std::string gen_out = "dataset.jsonl";
    gen->add_option("--out", gen_out, "output JSONL path");

    CLI::App* pre = app.add_subcommand("pretrain-backbone", "next-token pretraining on the recall format");
    add_config(pre);
    pre->add_option("--out", out_dir, "output directory");

    CLI::App* train = app.add_subcommand("train", "SFT of the memory parameters on a frozen backbone");
    add_config(train);
    train->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
    train->add_option("--seed", seed, "training seed");
    train->add_option("--out", out_dir, "output directory");

    CLI::App* ev = app.add_subcommand("eval", "three-condition context-recovery evaluation");
    add_config(ev);
    ev->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
    ev->add_option("--memory", memory_path, "memory checkpoint")->required();
    ev->add_option("--seeds", seeds_text, "comma-separated eval dataset seeds");
    ev->add_option("--n", n, "instances per seed");
    ev->add_option("--out", out_dir, "output directory");

    CLI::App* ing = app.add_subcommand("ingest", "write a context into the state and persist it");
    add_config(ing);
    ing->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
    ing->add_option("--memory", memory_path, "memory checkpoint");
    ing->add_option("--tokens", tokens_text, "context token ids")->required();
    ing->add_option("--segments", segments_text, "segment ids (required for ssw)");
    ing->add_option("--state", state_path, "output state file")->required();

    CLI::App* qr = app.add_subcommand("query", "decode an answer from a prompt");
    add_config(qr);
    qr->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
    qr->add_option("--memory", memory_path, "memory checkpoint");
    qr->add_option("--state", state_path, "state file from ingest");
    qr->add_option("--context", context_text, "context tokens handled per --condition");
    qr->add_option("--segments", segments_text, "segment ids for --context under ssw");
    qr->add_option("--prompt", prompt_text, "prompt token ids")->required();
    qr->add_option("--max-new", max_new, "generation budget");
    qr->add_option("--condition", condition, "context handling: with-context|state-only|none")
        ->check(CLI::IsMember({"with-context", "state-only", "none"}));

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig rc = load_config(config_path);

        if (params->parsed()) {
            std::cout << count_trainable_params(model_config_from(rc)) << "\n";
            return 0;
        }

        if (gen->parsed()) {
            RecallSpec spec = recall_spec_from(rc);
            save_dataset_jsonl(gen_out, gen_recall(seed, spec, n, split == "train"));
            std::cout << "wrote " << n << " instances to " << gen_out << "\n";
            return 0;
        }

        if (pre->parsed()) {
            std::filesystem::create_directories(out_dir);
            TrainResult metrics;
            Backbone<float> bb = pretrain_backbone_for_recall(rc, &metrics);
            detail::write_metrics_csv(out_dir + "/pretrain_metrics.csv", metrics.metrics);
            save_tensors<float>(out_dir + "/backbone.ckpt", named_backbone_tensors(bb));
            std::cout << "final loss " << metrics.final_loss << " after " << metrics.steps_run
                      << " steps; wrote " << out_dir << "/backbone.ckpt\n";
            return 0;
        }

        if (train->parsed()) {
            std::filesystem::create_directories(out_dir);
            DeltaMemModel<float> model = build_memory_model(rc, load_backbone(rc, backbone_path), seed);
            TrainResult res = train_memory_sft(model, rc, seed);
            detail::write_metrics_csv(out_dir + "/train_metrics.csv", res.metrics);
            if (res.diverged) {
                std::cerr << "training diverged:\n" << res.divergence_dump << "\n";
                return 1;
            }
            save_tensors<float>(out_dir + "/memory.ckpt", named_memory_tensors(model));
            std::cout << "final loss " << res.final_loss << " after " << res.steps_run
                      << " steps; wrote " << out_dir << "/memory.ckpt\n";
            return 0;
        }

        if (ev->parsed()) {
            DeltaMemModel<float> model = load_model(rc, backbone_path, memory_path);
            EvalReport rep = evaluate_recovery(model, rc, parse_seeds(seeds_text), n);
            write_report_files(rep, out_dir);
            std::cout << "em with_context " << rep.with_context.em() << " state_only "
                      << rep.state_only.em() << " floor " << rep.floor.em() << "; wrote "
                      << out_dir << "/report.json\n";
            return 0;
        }

        if (ing->parsed()) {
            DeltaMemModel<float> model = load_model(rc, backbone_path, memory_path);
            ModelState<float> st = ModelState<float>::init(model);
            ingest_context<float>(nullptr, model, st, parse_ids(tokens_text),
                                  parse_ids(segments_text));
            save_state<float>(state_path, st, model.hooked);
            std::cout << "wrote " << state_path << "\n";
            return 0;
        }

        if (qr->parsed()) {
            DeltaMemModel<float> model = load_model(rc, backbone_path, memory_path);
            ModelState<float> st = ModelState<float>::init(model);
            if (!state_path.empty()) load_state<float>(state_path, st, model.hooked);
            std::vector<int> prompt = parse_ids(prompt_text);
            if (!context_text.empty()) {
                const std::vector<int> ctx = parse_ids(context_text);
                if (condition == "with-context") {
                    std::vector<int> full = ctx;
                    full.insert(full.end(), prompt.begin(), prompt.end());
                    prompt = std::move(full);
                } else if (condition == "state-only") {
                    ingest_context<float>(nullptr, model, st, ctx, parse_ids(segments_text));
                }
            }
            print_ids(greedy_decode(model, st, std::move(prompt), max_new));
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
