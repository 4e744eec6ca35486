#pragma once

// Trigger functions and dataset poisoning (patch, blend, sinusoid,
// source-specific with cover classes, learned perturbation).

#include "trustcore/dataset.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace trustcore {

enum class TriggerKind { patch, blend, sinusoid, source_specific_patch, uap };
enum class LabelMode { dirty, clean };

std::string to_string(TriggerKind k);
TriggerKind trigger_kind_from_string(const std::string& s);

struct TriggerSpec {
    TriggerKind kind = TriggerKind::patch;
    int target_class = 0;
    double poison_ratio = 0.2;
    double cover_ratio = 0;
    LabelMode label_mode = LabelMode::dirty;

    // patch / source_specific_patch: square pattern, position -1 = snug
    // against the bottom-right corner. Pattern is per-channel-constant white
    // unless pixels are given (size*size*channels, plane-major).
    int patch_size = 3;
    int patch_x = -1, patch_y = -1;
    std::vector<Real> patch_pixels;

    // blend: fixed pseudo-random full-image pattern derived from the seed.
    Real blend_weight = Real(0.2);
    std::uint64_t blend_pattern_seed = 0x5eedb1ed;

    // sinusoid: out(i,j) = clip(x(i,j) + delta * sin(2*pi*j*freq/width))
    Real sig_delta = Real(20.0 / 255.0);
    Real sig_freq = Real(6);

    // source-specific
    int source_class = -1;
    std::vector<int> cover_classes;

    // uap: plane-major perturbation, same shape as one image
    VecX uap_delta;
    Real uap_budget = Real(0);

    void validate(int num_classes) const;
    nlohmann::json to_json() const;
    static TriggerSpec from_json(const nlohmann::json& j);
};

struct PoisonReport {
    std::vector<int> poisoned_ids;
    std::vector<int> cover_ids;
    std::map<int, int> poisoned_per_source_class;  // original class -> count
    int target_class_size = 0;

    nlohmann::json to_json() const;
};

// Deterministic full-image blend pattern for given dims.
VecX blend_pattern(const TriggerSpec& spec, int channels, int height, int width);

// Apply the trigger to one plane-major image row.
VecX apply_trigger(const VecX& image, int channels, int height, int width,
                   const TriggerSpec& spec);

// Poison a dataset per the spec. Dirty mode draws victims from non-target
// classes (source class only, for source-specific), triggers and relabels
// them, and APPENDS them so poisons are fraction p of the resulting target
// class. Clean mode triggers existing target-class samples in place. Cover
// samples are triggered in place keeping their labels and are not flagged.
std::pair<LabeledDataset, PoisonReport> poison_dataset(const LabeledDataset& dataset,
                                                       const TriggerSpec& spec,
                                                       std::uint64_t rng_seed);

}  // namespace trustcore
