#pragma once

// Desk-scale encoder (conv -> per-channel norm -> ReLU -> 2x2 pool blocks,
// global average pooling) and the three-layer classification head, with
// activation taps and explicit backward passes.

#include "trustcore/nn.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace trustcore {

struct EncoderConfig {
    std::vector<int> block_channels = {32, 64, 128, 256};
    int kernel = 3;
    int in_channels = 3;

    void validate() const {
        if (block_channels.size() < 2) throw ParamError("encoder needs >= 2 blocks");
        for (int w : block_channels)
            if (w < 8) throw ParamError("encoder block width must be >= 8");
    }
};

struct HeadConfig {
    int hidden1 = 256;
    int hidden2 = 128;
};

template <class S>
struct EncoderT {
    EncoderConfig cfg;
    std::vector<Conv2dT<S>> convs;
    std::vector<BatchNormT<S>> norms;
    // Optional soft channel masks, one scalar per conv output channel,
    // multiplying the post-conv pre-normalization activation. Empty when
    // disengaged (treated as all ones).
    std::vector<MatT<S>> masks;

    EncoderT() = default;
    EncoderT(const EncoderConfig& config, Rng& rng) : cfg(config) {
        cfg.validate();
        int in_c = cfg.in_channels;
        for (int out_c : cfg.block_channels) {
            convs.emplace_back(in_c, out_c, cfg.kernel, rng);
            norms.emplace_back(out_c);
            in_c = out_c;
        }
    }

    int num_blocks() const { return static_cast<int>(convs.size()); }
    int embedding_dim() const { return cfg.block_channels.back(); }
    bool masks_engaged() const { return !masks.empty(); }

    void engage_masks() {
        masks.clear();
        for (int out_c : cfg.block_channels) masks.push_back(MatT<S>::Ones(out_c, 1));
    }
    void release_masks() { masks.clear(); }

    struct Cache {
        std::vector<typename Conv2dT<S>::Cache> conv;
        std::vector<MatT<S>> conv_out;   // pre-mask activations (for dmask)
        std::vector<typename BatchNormT<S>::Cache> norm;
        std::vector<MatT<S>> relu_out;   // post-ReLU (= pool input)
        std::vector<PoolCacheT<S>> pool;
        int last_h = 0, last_w = 0;

        void resize(int nb) {
            conv.resize(nb);
            conv_out.resize(nb);
            norm.resize(nb);
            relu_out.resize(nb);
            pool.resize(nb);
        }
    };

private:
    void apply_mask(int l, FeatureMapT<S>& x, Cache* cache) const {
        if (!masks_engaged()) return;
        if (cache) cache->conv_out[l] = x.act;
        for (int j = 0; j < x.channels(); ++j) x.act.col(j) *= masks[l](j, 0);
    }

public:

    // Encoder forward. train_norm selects batch statistics (and running-stat
    // updates) in the normalization layers; evaluation uses frozen stats.
    MatT<S> forward(const FeatureMapT<S>& input, bool train_norm, Cache* cache) {
        if (!train_norm) return static_cast<const EncoderT*>(this)->forward_eval(input, cache);
        FeatureMapT<S> x = input;
        const int nb = num_blocks();
        if (cache) cache->resize(nb);
        for (int l = 0; l < nb; ++l) {
            x = convs[l].forward(x, cache ? &cache->conv[l] : nullptr);
            apply_mask(l, x, cache);
            norms[l].forward(x.act, true, cache ? &cache->norm[l] : nullptr);
            relu_inplace(x.act);
            if (cache) cache->relu_out[l] = x.act;
            x = maxpool2(x, cache ? &cache->pool[l] : nullptr);
        }
        if (cache) {
            cache->last_h = x.h;
            cache->last_w = x.w;
        }
        return global_avg_pool(x);
    }

    MatT<S> forward_eval(const FeatureMapT<S>& input, Cache* cache) const {
        FeatureMapT<S> x = input;
        const int nb = num_blocks();
        if (cache) cache->resize(nb);
        for (int l = 0; l < nb; ++l) {
            x = convs[l].forward(x, cache ? &cache->conv[l] : nullptr);
            apply_mask(l, x, cache);
            norms[l].forward_eval(x.act, cache ? &cache->norm[l] : nullptr);
            relu_inplace(x.act);
            if (cache) cache->relu_out[l] = x.act;
            x = maxpool2(x, cache ? &cache->pool[l] : nullptr);
        }
        if (cache) {
            cache->last_h = x.h;
            cache->last_w = x.w;
        }
        return global_avg_pool(x);
    }

    struct Grads {
        std::vector<MatT<S>> dweight, dgamma, dbeta, dmask;
        std::optional<FeatureMapT<S>> dinput;

        void init(const EncoderT& e, bool want_input) {
            dweight.clear();
            dgamma.clear();
            dbeta.clear();
            dmask.clear();
            for (int l = 0; l < e.num_blocks(); ++l) {
                dweight.push_back(MatT<S>::Zero(e.convs[l].weight.rows(), e.convs[l].weight.cols()));
                dgamma.push_back(MatT<S>::Zero(e.norms[l].gamma.rows(), 1));
                dbeta.push_back(MatT<S>::Zero(e.norms[l].beta.rows(), 1));
                if (e.masks_engaged()) dmask.push_back(MatT<S>::Zero(e.masks[l].rows(), 1));
            }
            if (want_input)
                dinput = FeatureMapT<S>{};
            else
                dinput.reset();
        }
    };

    void backward(const Cache& cache, const MatT<S>& dembedding, Grads& grads) const {
        const int nb = num_blocks();
        MatT<S> d;  // gradient wrt current feature map activations
        global_avg_pool_backward(dembedding, cache.last_h, cache.last_w, d);
        for (int l = nb - 1; l >= 0; --l) {
            MatT<S> dpool_in;
            maxpool2_backward(cache.pool[l], d, dpool_in);
            relu_backward(cache.relu_out[l], dpool_in);
            MatT<S> dnorm_in(dpool_in.rows(), dpool_in.cols());
            norms[l].backward(cache.norm[l], dpool_in, grads.dgamma[l], grads.dbeta[l], &dnorm_in);
            if (masks_engaged()) {
                for (int j = 0; j < dnorm_in.cols(); ++j) {
                    grads.dmask[l](j, 0) += dnorm_in.col(j).dot(cache.conv_out[l].col(j));
                    dnorm_in.col(j) *= masks[l](j, 0);
                }
            }
            const bool need_din = (l > 0) || grads.dinput.has_value();
            MatT<S> din;
            convs[l].backward(cache.conv[l], dnorm_in, grads.dweight[l], need_din ? &din : nullptr);
            if (l > 0) {
                d = std::move(din);
            } else if (grads.dinput) {
                grads.dinput->act = std::move(din);
                grads.dinput->batch = cache.conv[0].B;
                grads.dinput->h = cache.conv[0].H;
                grads.dinput->w = cache.conv[0].W;
            }
        }
    }
};

template <class S>
struct HeadT {
    HeadConfig cfg;
    LinearT<S> l1, l2, l3;

    HeadT() = default;
    HeadT(int embedding_dim, int num_classes, const HeadConfig& config, Rng& rng)
        : cfg(config),
          l1(embedding_dim, config.hidden1, rng),
          l2(config.hidden1, config.hidden2, rng),
          l3(config.hidden2, num_classes, rng) {}

    struct Cache {
        MatT<S> in, a1, a2;  // input embeddings and the two post-ReLU activations
    };

    MatT<S> forward(const MatT<S>& emb, Cache* cache) const {
        MatT<S> a1 = l1.forward(emb);
        relu_inplace(a1);
        MatT<S> a2 = l2.forward(a1);
        relu_inplace(a2);
        MatT<S> logits = l3.forward(a2);
        if (cache) {
            cache->in = emb;
            cache->a1 = std::move(a1);
            cache->a2 = std::move(a2);
            return logits;
        }
        return logits;
    }

    struct Grads {
        MatT<S> dw1, db1, dw2, db2, dw3, db3;
        void init(const HeadT& h) {
            dw1 = MatT<S>::Zero(h.l1.weight.rows(), h.l1.weight.cols());
            db1 = MatT<S>::Zero(h.l1.bias.rows(), 1);
            dw2 = MatT<S>::Zero(h.l2.weight.rows(), h.l2.weight.cols());
            db2 = MatT<S>::Zero(h.l2.bias.rows(), 1);
            dw3 = MatT<S>::Zero(h.l3.weight.rows(), h.l3.weight.cols());
            db3 = MatT<S>::Zero(h.l3.bias.rows(), 1);
        }
    };

    // dtap1/dtap2 inject gradients at the post-ReLU tap points (used by the
    // perturbation attack); pass nullptr when only dlogits applies.
    void backward(const Cache& cache, const MatT<S>& dlogits, Grads& grads, MatT<S>* demb,
                  const MatT<S>* dtap1 = nullptr, const MatT<S>* dtap2 = nullptr) const {
        MatT<S> da2;
        l3.backward(cache.a2, dlogits, grads.dw3, grads.db3, &da2);
        if (dtap2) da2 += *dtap2;
        relu_backward(cache.a2, da2);
        MatT<S> da1;
        l2.backward(cache.a1, da2, grads.dw2, grads.db2, &da1);
        if (dtap1) da1 += *dtap1;
        relu_backward(cache.a1, da1);
        l1.backward(cache.in, da1, grads.dw1, grads.db1, demb);
    }
};

using Encoder = EncoderT<Real>;
using Head = HeadT<Real>;

// Combined network h = f(phi) . g(theta_pre) with activation taps. Taps, in
// order: encoder output (post-GAP), head layer-1 output, head layer-2 output.
struct TapModel {
    Encoder encoder;
    Head head;
    int num_taps() const { return 3; }
};

struct TapForward {
    MatX logits;
    std::vector<MatX> taps;
};

// Gather a batch of dataset image rows (plane-major C*H*W) into a feature map.
FeatureMap to_feature_map(const RowMatX& images, const std::vector<int>& rows, int c, int h,
                          int w);
FeatureMap to_feature_map(const RowMatX& images, int c, int h, int w);

// Evaluation-mode forward returning logits and tap activations.
TapForward forward_with_taps(const TapModel& model, const FeatureMap& batch);

// ---------------------------------------------------------------------------
// Checkpoints: directory with manifest.json + one raw little-endian float32
// file per tensor. Round-trips bit-exactly.
// ---------------------------------------------------------------------------
void save_checkpoint(const std::filesystem::path& dir, const Encoder& encoder,
                     const Head* head, int num_classes, std::uint64_t seed);
Encoder load_encoder(const std::filesystem::path& dir);
// Requires a head section in the manifest.
Head load_head(const std::filesystem::path& dir);
bool checkpoint_has_head(const std::filesystem::path& dir);

// Parameter-group hashes (change detection in tests and pipeline audits).
std::uint64_t hash_conv_weights(const Encoder& e);
std::uint64_t hash_norm_affine(const Encoder& e);
std::uint64_t hash_norm_stats(const Encoder& e);
std::uint64_t hash_masks(const Encoder& e);
std::uint64_t hash_head(const Head& h);

}  // namespace trustcore
