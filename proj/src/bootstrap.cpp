#include "trustcore/bootstrap.hpp"

#include "trustcore/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

namespace trustcore {

std::string to_string(BootstrapPhase p) {
    switch (p) {
        case BootstrapPhase::class_balanced: return "class_balanced";
        case BootstrapPhase::global: return "global";
        case BootstrapPhase::meta: return "meta";
    }
    throw ParamError("bad bootstrap phase");
}

namespace {

BootstrapPhase phase_from_string(const std::string& s) {
    if (s == "class_balanced") return BootstrapPhase::class_balanced;
    if (s == "global") return BootstrapPhase::global;
    if (s == "meta") return BootstrapPhase::meta;
    throw ParamError("unknown bootstrap phase: " + s);
}

Provenance provenance_of(BootstrapPhase p) {
    switch (p) {
        case BootstrapPhase::class_balanced: return Provenance::class_loss;
        case BootstrapPhase::global: return Provenance::global_loss;
        case BootstrapPhase::meta: return Provenance::meta;
    }
    throw ParamError("bad bootstrap phase");
}

}  // namespace

void BootstrapAudit::save_jsonl(const fs::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path.string());
    for (const auto& r : rounds) {
        nlohmann::json j{{"round", r.round},         {"phase", to_string(r.phase)},
                         {"added", r.added},         {"pool_size", r.pool_size},
                         {"train_loss", r.train_loss}, {"skipped", r.skipped}};
        f << j.dump() << '\n';
    }
}

BootstrapAudit BootstrapAudit::load_jsonl(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    BootstrapAudit a;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        BootstrapRound r;
        r.round = j.at("round").get<int>();
        r.phase = phase_from_string(j.at("phase").get<std::string>());
        r.added = j.at("added").get<std::vector<int>>();
        r.pool_size = j.at("pool_size").get<std::size_t>();
        r.train_loss = j.at("train_loss").get<Real>();
        r.skipped = j.value("skipped", false);
        a.rounds.push_back(std::move(r));
    }
    return a;
}

CleanPool BootstrapAudit::replay(const CleanPool& start) const {
    CleanPool pool;
    for (const auto& e : start.entries()) pool.add(e.id, e.prov, e.round);
    for (const auto& r : rounds)
        for (int id : r.added) pool.add(id, provenance_of(r.phase), r.round);
    return pool;
}

// ---------------------------------------------------------------------------
// Selection primitives. Ties always break toward the smaller id.
// ---------------------------------------------------------------------------
namespace {

std::vector<std::size_t> order_by_loss(const VecX& losses, const std::vector<int>& ids) {
    std::vector<std::size_t> order(ids.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const Real la = losses(static_cast<Eigen::Index>(a));
        const Real lb = losses(static_cast<Eigen::Index>(b));
        if (la != lb) return la < lb;
        return ids[a] < ids[b];
    });
    return order;
}

}  // namespace

std::vector<int> select_lowest_per_class(const VecX& losses, const std::vector<int>& ids,
                                         const VecXi& labels, int num_classes, double gamma) {
    if (losses.size() != static_cast<Eigen::Index>(ids.size()) ||
        labels.size() != static_cast<Eigen::Index>(ids.size()))
        throw ShapeError("selection arrays out of sync");
    const auto order = order_by_loss(losses, ids);
    std::vector<std::size_t> per_class_count(static_cast<std::size_t>(num_classes), 0);
    for (Eigen::Index i = 0; i < labels.size(); ++i)
        ++per_class_count[static_cast<std::size_t>(labels(i))];
    std::vector<std::size_t> want(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c)
        want[static_cast<std::size_t>(c)] =
            floor_count(gamma, per_class_count[static_cast<std::size_t>(c)]);
    std::vector<int> out;
    std::vector<std::size_t> taken(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t oi : order) {
        const auto c = static_cast<std::size_t>(labels(static_cast<Eigen::Index>(oi)));
        if (taken[c] < want[c]) {
            out.push_back(ids[oi]);
            ++taken[c];
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<int> select_lowest_global(const VecX& losses, const std::vector<int>& ids,
                                      double gamma) {
    if (losses.size() != static_cast<Eigen::Index>(ids.size()))
        throw ShapeError("selection arrays out of sync");
    const auto order = order_by_loss(losses, ids);
    const std::size_t want = floor_count(gamma, ids.size());
    std::vector<int> out;
    for (std::size_t i = 0; i < want && i < order.size(); ++i) out.push_back(ids[order[i]]);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<int> select_smallest_reduction(const VecX& loss_before, const VecX& loss_after,
                                           const std::vector<int>& ids, double gamma,
                                           bool at_least_one) {
    if (loss_before.size() != loss_after.size() ||
        loss_before.size() != static_cast<Eigen::Index>(ids.size()))
        throw ShapeError("selection arrays out of sync");
    const VecX reduction = loss_before - loss_after;
    const auto order = order_by_loss(reduction, ids);
    std::size_t want = floor_count(gamma, ids.size());
    if (at_least_one && want == 0 && !ids.empty()) want = 1;
    std::vector<int> out;
    for (std::size_t i = 0; i < want && i < order.size(); ++i) out.push_back(ids[order[i]]);
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Main loop
// ---------------------------------------------------------------------------
BootstrapResult run_bootstrap(const Encoder& encoder, const ChannelPartition& partition,
                              const LabeledDataset& ds, const CleanPool& clean_subset,
                              const BootstrapParams& params) {
    params.validate();
    partition.validate_against(encoder);
    if (clean_subset.size() == 0) throw ParamError("bootstrap needs a nonempty clean subset");

    BootstrapResult result;
    result.encoder = encoder;
    Rng rng(derive_seed(params.rng_seed, "bootstrap-head"));
    result.head = Head(encoder.embedding_dim(), ds.num_classes, HeadConfig{}, rng);
    for (const auto& e : clean_subset.entries()) result.pool.add(e.id, e.prov, e.round);

    const auto n_total = static_cast<double>(ds.size());
    int round = 0;

    auto train_some = [&](Encoder& enc, Head& head, const std::vector<int>& ids, int epochs,
                          const std::string& tag) {
        TrainOpts o = params.train;
        o.epochs = epochs;
        o.selector = {Trainable::phi, Trainable::psi};
        o.norm_batch_stats = false;
        o.rng_seed = derive_seed(params.rng_seed, tag, static_cast<std::uint64_t>(round));
        return train_joint(enc, head, ds, ids, o, &partition.untrusted);
    };

    auto complement_labels = [&](const std::vector<int>& ids) {
        VecXi labels(static_cast<Eigen::Index>(ids.size()));
        for (std::size_t i = 0; i < ids.size(); ++i)
            labels(static_cast<Eigen::Index>(i)) = ds.labels(ds.row_of(ids[i]));
        return labels;
    };

    // Phase 1: class-balanced lowest-loss additions.
    for (int it = 0; it < params.iter1; ++it) {
        ++round;
        const TrainStats st = train_some(result.encoder, result.head, result.pool.ids(),
                                         params.epochs_per_iter, "phase1");
        const std::vector<int> rest = result.pool.complement_of(ds.ids);
        BootstrapRound rec;
        rec.round = round;
        rec.phase = BootstrapPhase::class_balanced;
        rec.train_loss = st.final_epoch_loss;
        if (!rest.empty()) {
            const VecX losses = per_sample_losses(result.encoder, result.head, ds, rest);
            rec.added = select_lowest_per_class(losses, rest, complement_labels(rest),
                                                ds.num_classes, params.gamma1);
            for (int id : rec.added) result.pool.add(id, Provenance::class_loss, round);
        }
        rec.pool_size = result.pool.size();
        result.audit.rounds.push_back(std::move(rec));
    }

    // Phase 2: global lowest-loss additions.
    for (int it = 0; it < params.iter2; ++it) {
        ++round;
        const TrainStats st = train_some(result.encoder, result.head, result.pool.ids(),
                                         params.epochs_per_iter, "phase2");
        const std::vector<int> rest = result.pool.complement_of(ds.ids);
        BootstrapRound rec;
        rec.round = round;
        rec.phase = BootstrapPhase::global;
        rec.train_loss = st.final_epoch_loss;
        if (!rest.empty()) {
            const VecX losses = per_sample_losses(result.encoder, result.head, ds, rest);
            rec.added = select_lowest_global(losses, rest, params.gamma2);
            for (int id : rec.added) result.pool.add(id, Provenance::global_loss, round);
        }
        rec.pool_size = result.pool.size();
        result.audit.rounds.push_back(std::move(rec));
    }

    // Phase 3: meta guidance until the pool reaches rho.
    int consecutive_skips = 0;
    while (static_cast<double>(result.pool.size()) < params.rho * n_total - 1e-7) {
        ++round;
        const TrainStats st = train_some(result.encoder, result.head, result.pool.ids(),
                                         params.epochs_per_iter, "phase3");
        const std::vector<int> rest = result.pool.complement_of(ds.ids);
        if (rest.empty()) break;
        BootstrapRound rec;
        rec.round = round;
        rec.phase = BootstrapPhase::meta;
        rec.train_loss = st.final_epoch_loss;

        const VecX loss_before = per_sample_losses(result.encoder, result.head, ds, rest);
        Encoder clone_enc = result.encoder;
        Head clone_head = result.head;
        bool clone_ok = true;
        try {
            train_some(clone_enc, clone_head, rest, 1, "phase3-clone");
        } catch (const TrainingDivergedError&) {
            clone_ok = false;
        }
        if (clone_ok) {
            const VecX loss_after = per_sample_losses(clone_enc, clone_head, ds, rest);
            rec.added = select_smallest_reduction(loss_before, loss_after, rest, params.gamma3,
                                                  /*at_least_one=*/true);
            for (int id : rec.added) result.pool.add(id, Provenance::meta, round);
            consecutive_skips = 0;
        } else {
            rec.skipped = true;
            std::cerr << "[bootstrap] clone training diverged; skipping round " << round << "\n";
            if (++consecutive_skips >= 3)
                throw TrainingDivergedError("meta clone diverged three rounds in a row");
        }
        rec.pool_size = result.pool.size();
        result.audit.rounds.push_back(std::move(rec));
    }
    return result;
}

}  // namespace trustcore
