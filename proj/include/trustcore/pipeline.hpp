#pragma once

// End-to-end orchestration: ingest/split -> pretrain -> attacks -> baseline
// -> sift -> expand -> filter -> bootstrap -> eval, with per-stage artifact
// persistence and resume.

#include "trustcore/bootstrap.hpp"
#include "trustcore/encoder_attack.hpp"
#include "trustcore/metrics.hpp"

namespace trustcore {

enum class ThreatMode { none, dataset, encoder, adaptive, dual };
std::string to_string(ThreatMode m);
ThreatMode threat_mode_from_string(const std::string& s);

struct GlyphSpec {
    int num_classes = 10;
    int per_class = 3200;
    int size = 32;
    std::uint64_t seed = 1;
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    bool deterministic = false;
    ThreatMode threat = ThreatMode::dataset;

    // data
    std::string source = "glyphs";  // glyphs | cifar10 | dataset_dir
    GlyphSpec glyphs;
    std::string cifar_dir;
    std::string dataset_dir;
    SplitSpec split{0.5, 0.4, 0.1, 0};

    // models
    EncoderConfig encoder;
    HeadConfig head;
    TrainOpts pretrain;
    TrainOpts head_train;

    // attacks (which ones apply is decided by `threat`)
    bool has_dataset_trigger = false;
    TriggerSpec dataset_trigger;
    bool has_encoder_trigger = false;
    TriggerSpec encoder_trigger;
    EncoderAttackOpts encoder_attack;
    UapOpts uap;

    // defense
    SiftParams sift;
    ExpansionParams expand;
    FilterParams filter;
    BootstrapParams bootstrap;

    bool plot_histogram = true;

    void validate() const;
    nlohmann::json to_json() const;
    static PipelineConfig from_json(const nlohmann::json& j);
    static PipelineConfig load(const std::filesystem::path& path);
    std::uint64_t config_hash() const;
};

extern const std::vector<std::string> kStageNames;  // in execution order

// Runs stages up to and including `last_stage` ("eval" = everything),
// resuming completed stages when `resume` is set and their recorded config
// hash matches. Throws StageError naming the failing stage.
EvalReport run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                        bool resume = false, const std::string& last_stage = "eval");

}  // namespace trustcore
