#pragma once

// Optimizers with exact parameter-group selection, supervised training
// loops, per-sample losses, encoder pretraining and frozen-encoder head
// training.

#include "trustcore/dataset.hpp"
#include "trustcore/model.hpp"

#include <set>

namespace trustcore {

enum class OptimizerKind { sgd, adam };
enum class Trainable { phi, psi, theta_norm, masks, all_encoder };

struct TrainOpts {
    int epochs = 30;
    int batch_size = 64;
    Real learning_rate = Real(0.01);
    OptimizerKind optimizer = OptimizerKind::sgd;
    Real momentum = Real(0.9);
    std::uint64_t rng_seed = 0;
    bool deterministic = true;
    std::set<Trainable> selector = {Trainable::phi};
    // Batch statistics in normalization layers during training (running-stat
    // updates); evaluation-style frozen stats otherwise.
    bool norm_batch_stats = false;
};

struct TrainStats {
    Real first_epoch_loss = 0;
    Real final_epoch_loss = 0;
    int epochs_run = 0;
};

// One mutable parameter tensor, optionally restricted to a channel subset
// (columns of conv weights, rows of per-channel vectors). Non-subset entries
// are never written, so non-selected parameters stay bit-identical.
struct ParamSlot {
    MatX* value = nullptr;
    const MatX* grad = nullptr;
    enum class Subset { none, cols, rows } subset = Subset::none;
    std::vector<int> index;
};

class Optimizer {
public:
    Optimizer(OptimizerKind kind, Real lr, Real momentum);
    void step(const std::vector<ParamSlot>& slots);

private:
    OptimizerKind kind_;
    Real lr_, momentum_;
    Real beta1_ = Real(0.9), beta2_ = Real(0.999), eps_ = Real(1e-8);
    long t_ = 0;
    std::vector<MatX> m_, v_;  // per-slot state, lazily sized
};

// Per-layer untrusted channel indices (one vector per conv block).
using ChannelSubset = std::vector<std::vector<int>>;

// Assemble optimizer slots for the selected groups. `psi` must be non-null
// iff the selector contains Trainable::psi.
std::vector<ParamSlot> collect_slots(Encoder* encoder, typename Encoder::Grads* egrads,
                                     Head* head, typename Head::Grads* hgrads,
                                     const std::set<Trainable>& selector,
                                     const ChannelSubset* psi);

// Evaluation-mode embeddings for the given ids (dataset order when empty).
MatX embed_dataset(const Encoder& encoder, const LabeledDataset& ds,
                   const std::vector<int>& ids);

// Per-sample cross-entropy, evaluation mode, aligned with `ids`.
VecX per_sample_losses(const Encoder& encoder, const Head& head, const LabeledDataset& ds,
                       const std::vector<int>& ids);
VecX per_sample_losses(const TapModel& model, const LabeledDataset& ds,
                       const std::vector<int>& ids);

// Argmax predictions / top-1 accuracy over ids (whole dataset when empty).
VecXi predict(const Encoder& encoder, const Head& head, const LabeledDataset& ds,
              const std::vector<int>& ids);
Real evaluate_accuracy(const Encoder& encoder, const Head& head, const LabeledDataset& ds,
                       const std::vector<int>& ids = {});

// Supervised training of encoder+head over `ids` with exact group selection.
TrainStats train_joint(Encoder& encoder, Head& head, const LabeledDataset& ds,
                       const std::vector<int>& ids, const TrainOpts& opts,
                       const ChannelSubset* psi = nullptr);

// Head training against fixed embeddings (frozen encoder fast path).
// Rows of emb correspond to labels entries.
TrainStats train_head_on_embeddings(Head& head, const MatX& emb, const VecXi& labels,
                                    const TrainOpts& opts);

// Trains encoder + a throwaway head supervised on the pretrain split and
// returns the encoder (running statistics frozen from the last updates).
Encoder pretrain_encoder(const LabeledDataset& pretrain_split, const EncoderConfig& cfg,
                         const TrainOpts& opts, const HeadConfig& head_cfg = {});

// Frozen-encoder head training; selector must be exactly {phi}.
TrainStats train_head(const Encoder& encoder, Head& head, const LabeledDataset& ds,
                      const TrainOpts& opts, const std::vector<int>& ids = {});

// Fresh head for this encoder/dataset pair.
Head make_head(const Encoder& encoder, int num_classes, const HeadConfig& cfg, Rng& rng);

}  // namespace trustcore
