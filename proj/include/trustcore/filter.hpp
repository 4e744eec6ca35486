#pragma once

// Encoder channel filtering: selective unlearning of normalization affine
// parameters, soft-mask recovery on the clean pool, per-layer thresholding
// into trusted/untrusted channel sets, and partition application.

#include "trustcore/expand.hpp"

#include <functional>

namespace trustcore {

struct FilterParams {
    Real acc_min = Real(0.20);
    int recover_epochs = 120;
    Real recover_lr = Real(0.01);
    double keep_fraction = 0.90;
    Real unlearn_lr = Real(0.01);
    Real unlearn_grad_clip = Real(5);  // per-tensor L2 bound on ascent steps
    int unlearn_batch = 128;
    int unlearn_max_epochs = 50;
    int recover_batch = 64;
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (!(acc_min > 0 && acc_min < 1)) throw ParamError("acc_min outside (0,1)");
        if (!(keep_fraction > 0 && keep_fraction < 1))
            throw ParamError("keep_fraction outside (0,1)");
        if (recover_epochs < 0) throw ParamError("negative recovery epochs");
    }
};

struct ChannelPartition {
    std::vector<std::vector<int>> untrusted;  // psi, per conv layer
    std::vector<std::vector<int>> trusted;    // chi, per conv layer
    std::vector<VecX> mask_values;            // final masks, per layer
    double keep_fraction = 0.90;
    std::vector<std::string> warnings;        // e.g. ties spanning the cut

    int num_layers() const { return static_cast<int>(untrusted.size()); }
    nlohmann::json to_json() const;
    static ChannelPartition from_json(const nlohmann::json& j);
    void validate_against(const Encoder& e) const;
};

enum class PartitionMode { prune, reinit };

// Gradient ascent on the training loss with only normalization affine
// parameters trainable; stops the first epoch whose training accuracy on D
// sits below acc_min (checked before each epoch, so an already-degenerate
// model is a zero-epoch no-op). Conv weights and the head are untouched.
Encoder selective_unlearn(const Encoder& encoder, const Head& head, const LabeledDataset& ds,
                          const FilterParams& params);

// Optimizes per-channel soft masks (initialized to ones) on the clean pool
// with everything else frozen, clipping to [0,1] after every update. The
// observer, when set, runs after each optimizer step.
using MaskObserver = std::function<void(const std::vector<MatX>&)>;
std::vector<VecX> recover_mask(const Encoder& unlearned, const Head& head,
                               const LabeledDataset& ds, const std::vector<int>& pool_ids,
                               const FilterParams& params, const MaskObserver& observer = {});

// Per layer, the K - ceil(keep_fraction*K) lowest-mask channels become
// untrusted; ties spanning the cut resolve by ascending channel index.
ChannelPartition threshold_channels(const std::vector<VecX>& masks, const FilterParams& params);

// prune: zero untrusted conv filters and their normalization affine.
// reinit: redraw untrusted filters from the initializer and reset their
// normalization to identity. Trusted channels are bit-identical to input.
Encoder apply_partition(const Encoder& original, const ChannelPartition& partition,
                        PartitionMode mode, std::uint64_t rng_seed = 0);

}  // namespace trustcore
