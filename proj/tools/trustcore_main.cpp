// trustcore command line: runs the defense pipeline stage by stage or end
// to end from a JSON config.

#include "trustcore/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct CommonArgs {
    std::string config;
    std::string out = "trustcore_out";
    bool resume = false;
    bool deterministic = false;
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "pipeline config (JSON)")->required();
    cmd->add_option("--out", args.out, "output directory");
    cmd->add_flag("--resume", args.resume, "reuse completed stages with matching config");
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_flag("--deterministic", args.deterministic,
                  "single-stream execution with fixed reduction order");
}

int run(const CommonArgs& args, const std::string& last_stage) {
    trustcore::PipelineConfig cfg = trustcore::PipelineConfig::load(args.config);
    if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
    if (args.deterministic) cfg.deterministic = true;
    const trustcore::EvalReport report =
        trustcore::run_pipeline(cfg, args.out, args.resume, last_stage);
    if (last_stage == "eval") std::cout << report.table();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"trustcore: backdoor-resilient transfer learning from untrusted encoders and data"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* help;
        const char* stage;
    };
    const Sub subs[] = {
        {"ingest", "load or generate the dataset and make the three-way split", "ingest"},
        {"pretrain", "pretrain the encoder on the pretrain split", "pretrain"},
        {"attack", "apply the configured threat to encoder and/or dataset", "attack"},
        {"train-baseline", "train and evaluate the no-defense classifier", "train-baseline"},
        {"sift", "select per-class seed samples", "sift"},
        {"expand", "grow the clean pool from the seeds", "expand"},
        {"filter", "unlearn, recover masks, and partition encoder channels", "filter"},
        {"bootstrap", "bootstrap the final classifier on the clean pool", "bootstrap"},
        {"eval", "evaluate the final model and write reports", "eval"},
        {"run-all", "run every stage in order", "eval"},
    };

    std::vector<std::unique_ptr<CommonArgs>> arg_blocks;
    std::vector<std::pair<CLI::App*, const Sub*>> cmds;
    for (const Sub& sub : subs) {
        CLI::App* cmd = app.add_subcommand(sub.name, sub.help);
        arg_blocks.push_back(std::make_unique<CommonArgs>());
        add_common(cmd, *arg_blocks.back());
        cmds.emplace_back(cmd, &sub);
    }

    CLI11_PARSE(app, argc, argv);

    for (std::size_t i = 0; i < cmds.size(); ++i) {
        if (!cmds[i].first->parsed()) continue;
        try {
            return run(*arg_blocks[i], cmds[i].second->stage);
        } catch (const trustcore::StageError& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 3;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        }
    }
    return 1;
}
