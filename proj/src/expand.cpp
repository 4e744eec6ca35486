#include "trustcore/expand.hpp"

#include "trustcore/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace trustcore {

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::seed: return "seed";
        case Provenance::loss_expand: return "loss_expand";
        case Provenance::class_loss: return "class_loss";
        case Provenance::global_loss: return "global_loss";
        case Provenance::meta: return "meta";
    }
    throw ParamError("bad provenance");
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "seed") return Provenance::seed;
    if (s == "loss_expand") return Provenance::loss_expand;
    if (s == "class_loss") return Provenance::class_loss;
    if (s == "global_loss") return Provenance::global_loss;
    if (s == "meta") return Provenance::meta;
    throw ParamError("unknown provenance: " + s);
}

void CleanPool::add(int id, Provenance prov, int round) {
    if (!members_.insert(id).second)
        throw ParamError("pool id added twice: " + std::to_string(id));
    entries_.push_back({id, prov, round});
}

std::vector<int> CleanPool::ids() const {
    std::vector<int> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.id);
    return out;
}

std::vector<int> CleanPool::complement_of(const std::vector<int>& universe) const {
    std::vector<int> out;
    for (int id : universe)
        if (!contains(id)) out.push_back(id);
    return out;
}

void CleanPool::save_jsonl(const fs::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path.string());
    for (const auto& e : entries_) {
        nlohmann::json j{{"id", e.id}, {"prov", to_string(e.prov)}, {"round", e.round}};
        f << j.dump() << '\n';
    }
}

CleanPool CleanPool::load_jsonl(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    CleanPool pool;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        pool.add(j.at("id").get<int>(), provenance_from_string(j.at("prov").get<std::string>()),
                 j.at("round").get<int>());
    }
    return pool;
}

// ---------------------------------------------------------------------------
// Confusion training
// ---------------------------------------------------------------------------
namespace {

int auto_steps(const ConfusionOpts& opts, std::size_t base_size) {
    if (opts.steps > 0) return opts.steps;
    const int per_epoch = static_cast<int>(
        (base_size + static_cast<std::size_t>(opts.batch_size) - 1) /
        static_cast<std::size_t>(opts.batch_size));
    return std::max(120, 3 * per_epoch);
}

void gather(const MatX& emb, const VecXi& labels, const std::vector<int>& rows, Rng& rng,
            int batch, MatX& x, VecXi& y) {
    x.resize(batch, emb.cols());
    y.resize(batch);
    for (int i = 0; i < batch; ++i) {
        const int r = rows[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(rows.size())))];
        x.row(i) = emb.row(r);
        y(i) = labels(r);
    }
}

}  // namespace

void confusion_train(Head& head, const MatX& emb, const VecXi& labels,
                     const std::vector<int>& rest_rows, const std::vector<int>& base_rows,
                     Real lambda, const ConfusionOpts& opts, std::uint64_t rng_seed) {
    if (rest_rows.empty()) throw ParamError("confusion_train: empty rest set");
    if (base_rows.empty()) throw ParamError("confusion_train: empty base set");
    if (lambda < 0 || lambda > 1) throw ParamError("confusion_train: lambda outside [0,1]");
    const int num_classes = static_cast<int>(head.l3.weight.cols());
    const int steps = auto_steps(opts, base_rows.size());
    Optimizer opt(opts.optimizer, opts.learning_rate, opts.momentum);
    Rng rng_rest(derive_seed(rng_seed, "ct-rest"));
    Rng rng_base(derive_seed(rng_seed, "ct-base"));

    typename Head::Grads hg;
    for (int step = 0; step < steps; ++step) {
        hg.init(head);
        MatX x;
        VecXi y;
        gather(emb, labels, rest_rows, rng_rest, opts.batch_size, x, y);
        {
            typename Head::Cache hc;
            const MatX logits = head.forward(x, &hc);
            MatX dlogits;
            const Real loss = cross_entropy_backward(logits, y, dlogits, lambda);
            if (!std::isfinite(loss)) throw TrainingDivergedError("confusion training diverged");
            head.backward(hc, dlogits, hg, nullptr);
        }
        if (lambda < Real(1)) {
            MatX xb;
            VecXi yb;
            gather(emb, labels, base_rows, rng_base, opts.batch_size, xb, yb);
            for (Eigen::Index i = 0; i < yb.size(); ++i) {
                // uniform over the other C-1 classes
                const int wrong = rng_base.uniform_int(num_classes - 1);
                yb(i) = (yb(i) + 1 + wrong) % num_classes;
            }
            typename Head::Cache hc;
            const MatX logits = head.forward(xb, &hc);
            MatX dlogits;
            const Real loss = cross_entropy_backward(logits, yb, dlogits, Real(1) - lambda);
            if (!std::isfinite(loss)) throw TrainingDivergedError("confusion training diverged");
            head.backward(hc, dlogits, hg, nullptr);
        }
        const auto slots = collect_slots(nullptr, nullptr, &head, &hg, {Trainable::phi}, nullptr);
        opt.step(slots);
    }
}

void confusion_train(Head& head, const Encoder& encoder, const LabeledDataset& ds,
                     const std::vector<int>& rest_ids, const std::vector<int>& base_ids,
                     Real lambda, const ConfusionOpts& opts, std::uint64_t rng_seed) {
    const MatX emb = embed_dataset(encoder, ds, {});
    VecXi labels = ds.labels;
    std::vector<int> rest_rows(rest_ids.size()), base_rows(base_ids.size());
    for (std::size_t i = 0; i < rest_ids.size(); ++i) rest_rows[i] = ds.row_of(rest_ids[i]);
    for (std::size_t i = 0; i < base_ids.size(); ++i) base_rows[i] = ds.row_of(base_ids[i]);
    confusion_train(head, emb, labels, rest_rows, base_rows, lambda, opts, rng_seed);
}

void train_head_steps(Head& head, const MatX& emb, const VecXi& labels,
                      const std::vector<int>& rest_rows, const ConfusionOpts& opts,
                      std::uint64_t rng_seed) {
    if (rest_rows.empty()) throw ParamError("train_head_steps: empty set");
    const int steps = auto_steps(opts, rest_rows.size());
    Optimizer opt(opts.optimizer, opts.learning_rate, opts.momentum);
    Rng rng_rest(derive_seed(rng_seed, "ct-rest"));
    typename Head::Grads hg;
    for (int step = 0; step < steps; ++step) {
        hg.init(head);
        MatX x;
        VecXi y;
        gather(emb, labels, rest_rows, rng_rest, opts.batch_size, x, y);
        typename Head::Cache hc;
        const MatX logits = head.forward(x, &hc);
        MatX dlogits;
        cross_entropy_backward(logits, y, dlogits, Real(1));
        head.backward(hc, dlogits, hg, nullptr);
        const auto slots = collect_slots(nullptr, nullptr, &head, &hg, {Trainable::phi}, nullptr);
        opt.step(slots);
    }
}

// ---------------------------------------------------------------------------
// Seed expansion
// ---------------------------------------------------------------------------
CleanPool expand_seed(const Encoder& encoder, const LabeledDataset& ds, const SiftResult& seeds,
                      const ExpansionParams& params) {
    params.validate();
    CleanPool pool;
    for (const auto& cs : seeds.per_class) {
        if (cs.seeds.empty()) throw ParamError("expand_seed: class without seeds");
        for (int id : cs.seeds) pool.add(id, Provenance::seed, 0);
    }

    const auto n_total = static_cast<double>(ds.size());
    const MatX emb = embed_dataset(encoder, ds, {});
    const VecXi& labels = ds.labels;
    std::vector<int> all_rows(static_cast<std::size_t>(ds.size()));
    std::iota(all_rows.begin(), all_rows.end(), 0);

    int round = 0;
    while (static_cast<double>(pool.size()) < params.target_ratio * n_total - 1e-7) {
        ++round;
        Rng rng(derive_seed(params.rng_seed, "expand-round", static_cast<std::uint64_t>(round)));
        Head head(encoder.embedding_dim(), ds.num_classes, HeadConfig{}, rng);
        TrainOpts retrain = params.head_retrain;
        retrain.rng_seed = derive_seed(params.rng_seed, "expand-retrain",
                                       static_cast<std::uint64_t>(round));
        train_head_on_embeddings(head, emb, labels, retrain);

        std::vector<int> rest_rows, base_rows;
        for (int i = 0; i < ds.size(); ++i) {
            const int id = ds.ids[static_cast<std::size_t>(i)];
            (pool.contains(id) ? base_rows : rest_rows).push_back(i);
        }
        confusion_train(head, emb, labels, rest_rows, base_rows, params.lambda, params.confusion,
                        derive_seed(params.rng_seed, "expand-ct", static_cast<std::uint64_t>(round)));

        // Per-sample losses over the complement (frozen encoder, so straight
        // from the cached embeddings), then largest-loss selection.
        MatX x(static_cast<Eigen::Index>(rest_rows.size()), emb.cols());
        VecXi y(static_cast<Eigen::Index>(rest_rows.size()));
        for (std::size_t i = 0; i < rest_rows.size(); ++i) {
            x.row(static_cast<Eigen::Index>(i)) = emb.row(rest_rows[i]);
            y(static_cast<Eigen::Index>(i)) = labels(rest_rows[i]);
        }
        const MatX logits = head.forward(x, nullptr);
        const VecX losses = cross_entropy_per_sample(logits, y);

        const std::size_t add_count = ceil_count(params.r_expand, rest_rows.size());
        std::vector<std::size_t> order(rest_rows.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const Real la = losses(static_cast<Eigen::Index>(a));
            const Real lb = losses(static_cast<Eigen::Index>(b));
            if (la != lb) return la > lb;
            return ds.ids[static_cast<std::size_t>(rest_rows[a])] <
                   ds.ids[static_cast<std::size_t>(rest_rows[b])];
        });
        for (std::size_t i = 0; i < add_count && i < order.size(); ++i)
            pool.add(ds.ids[static_cast<std::size_t>(rest_rows[order[i]])],
                     Provenance::loss_expand, round);
    }
    return pool;
}

}  // namespace trustcore
