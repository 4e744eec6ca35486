#pragma once

// Model-side attacks: backdoor injection by encoder fine-tuning (embedding
// alignment to a target-class anchor with a utility anchor to the clean
// encoder), and the layerwise universal perturbation that drags tap
// activations toward target-class seed means.

#include "trustcore/train.hpp"
#include "trustcore/trigger.hpp"

namespace trustcore {

struct EncoderAttackOpts {
    int max_epochs = 30;
    int batch_size = 64;
    Real learning_rate = Real(1e-3);
    OptimizerKind optimizer = OptimizerKind::adam;
    Real momentum = Real(0.9);
    Real lambda_align = Real(1);
    Real lambda_utility = Real(1);
    Real min_alignment = Real(0.90);  // mean cos(g(T(x)), anchor) for success
    std::uint64_t rng_seed = 0;
};

struct EncoderAttackResult {
    Encoder encoder;
    Real alignment = 0;  // mean cosine of triggered embeddings to the anchor
    Real utility = 0;    // mean cosine of clean embeddings to the clean encoder's
    bool success = false;
};

// Fine-tunes the encoder so triggered inputs embed near the mean embedding
// of `reference_targets` (computed with the pre-attack encoder) while clean
// inputs stay near their pre-attack embeddings. Zero epochs or zero loss
// weights leave the parameters bit-identical; failure to reach
// min_alignment is reported via the result, not thrown.
EncoderAttackResult inject_encoder_backdoor(const Encoder& encoder,
                                            const LabeledDataset& shadow_data,
                                            const RowMatX& reference_targets,
                                            const TriggerSpec& spec,
                                            const EncoderAttackOpts& opts);

struct UapOpts {
    int iterations = 200;
    Real step = Real(0);  // 0 selects budget / 10
    int batch_size = 128;
    int num_layers = 3;  // objective uses the last L tap layers
    std::uint64_t rng_seed = 0;
};

struct UapResult {
    VecX delta;
    Real objective = 0;
    bool diverged = false;
};

// Signed-gradient projected descent on the mean tap-activation distance to
// per-layer target-seed means; delta is clamped to the L-inf budget after
// every step and perturbed inputs are clipped to [0,1] in the forward pass.
UapResult craft_uap_trigger(const TapModel& model, const LabeledDataset& ds,
                            const std::vector<int>& target_seed_ids, Real budget,
                            const UapOpts& opts);

}  // namespace trustcore
