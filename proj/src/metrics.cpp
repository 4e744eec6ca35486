#include "trustcore/metrics.hpp"

#include <iomanip>
#include <sstream>

namespace trustcore {

Real accuracy(const Encoder& encoder, const Head& head, const LabeledDataset& test_set) {
    if (test_set.size() == 0) throw ParamError("accuracy over an empty set");
    return evaluate_accuracy(encoder, head, test_set);
}

Real accuracy(const TapModel& model, const LabeledDataset& test_set) {
    return accuracy(model.encoder, model.head, test_set);
}

VecX per_class_accuracy(const Encoder& encoder, const Head& head,
                        const LabeledDataset& test_set) {
    VecX acc = VecX::Zero(test_set.num_classes);
    const VecXi pred = predict(encoder, head, test_set, test_set.ids);
    VecXi total = VecXi::Zero(test_set.num_classes);
    VecXi hit = VecXi::Zero(test_set.num_classes);
    for (std::size_t i = 0; i < test_set.ids.size(); ++i) {
        const int y = test_set.labels(test_set.row_of(test_set.ids[i]));
        ++total(y);
        if (pred(static_cast<Eigen::Index>(i)) == y) ++hit(y);
    }
    for (int c = 0; c < test_set.num_classes; ++c)
        acc(c) = total(c) ? static_cast<Real>(hit(c)) / static_cast<Real>(total(c)) : Real(0);
    return acc;
}

Real attack_success_rate(const Encoder& encoder, const Head& head, const LabeledDataset& test_set,
                         const TriggerSpec& spec) {
    std::vector<int> eligible_rows;
    for (int i = 0; i < test_set.size(); ++i)
        if (test_set.labels(i) != spec.target_class) eligible_rows.push_back(i);
    if (eligible_rows.empty())
        throw UndefinedAsrError("every test sample carries the target label");

    int hits = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t at = 0; at < eligible_rows.size(); at += kChunk) {
        const std::size_t n = std::min(kChunk, eligible_rows.size() - at);
        RowMatX imgs(static_cast<Eigen::Index>(n), test_set.images.cols());
        for (std::size_t i = 0; i < n; ++i) {
            const VecX img = test_set.images.row(eligible_rows[at + i]).transpose();
            imgs.row(static_cast<Eigen::Index>(i)) =
                apply_trigger(img, test_set.channels, test_set.height, test_set.width, spec)
                    .transpose();
        }
        const FeatureMap fm =
            to_feature_map(imgs, test_set.channels, test_set.height, test_set.width);
        const MatX logits = head.forward(encoder.forward_eval(fm, nullptr), nullptr);
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            Eigen::Index arg;
            logits.row(i).maxCoeff(&arg);
            if (static_cast<int>(arg) == spec.target_class) ++hits;
        }
    }
    return static_cast<Real>(hits) / static_cast<Real>(eligible_rows.size());
}

Real attack_success_rate(const TapModel& model, const LabeledDataset& test_set,
                         const TriggerSpec& spec) {
    return attack_success_rate(model.encoder, model.head, test_set, spec);
}

// ---------------------------------------------------------------------------
// Selection purity
// ---------------------------------------------------------------------------
nlohmann::json SiftMetrics::to_json() const {
    nlohmann::json per;
    for (const auto& [cls, n] : poisons_per_class) per[std::to_string(cls)] = n;
    return {{"npd", npd},
            {"nfd", nfd},
            {"poisons_in_selection", poisons_in_selection},
            {"poisons_per_class", per},
            {"precision", precision}};
}

SiftMetrics sift_report(const std::vector<int>& selected_ids, const LabeledDataset& ds,
                        int target_class) {
    SiftMetrics m;
    const auto& flags = ds.evaluation_only_poison_flags();
    for (int id : ds.class_ids(target_class))
        if (flags[static_cast<std::size_t>(ds.row_of(id))]) ++m.npd;
    for (int id : selected_ids) {
        const int row = ds.row_of(id);
        const int cls = ds.labels(row);
        if (cls == target_class) ++m.nfd;
        if (flags[static_cast<std::size_t>(row)]) {
            ++m.poisons_in_selection;
            ++m.poisons_per_class[cls];
        }
    }
    m.precision =
        m.nfd > 0 ? Real(1) - static_cast<Real>(m.poisons_in_selection) / static_cast<Real>(m.nfd)
                  : Real(1);
    return m;
}

nlohmann::json PoolMetrics::to_json() const {
    return {{"size", size},
            {"poison_count", poison_count},
            {"poisons_by_provenance", poisons_by_provenance}};
}

PoolMetrics pool_report(const CleanPool& pool, const LabeledDataset& ds) {
    PoolMetrics m;
    m.size = pool.size();
    const auto& flags = ds.evaluation_only_poison_flags();
    for (const auto& e : pool.entries()) {
        if (flags[static_cast<std::size_t>(ds.row_of(e.id))]) {
            ++m.poison_count;
            ++m.poisons_by_provenance[to_string(e.prov)];
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------
nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["baseline"] = {{"acc", baseline_acc},
                     {"asr", baseline_asr},
                     {"asr_e", baseline_asr_e},
                     {"asr_d", baseline_asr_d}};
    j["defended"] = {{"acc", acc}, {"asr", asr}, {"asr_e", asr_e}, {"asr_d", asr_d}};
    j["per_class_acc"] = std::vector<Real>(per_class_acc.begin(), per_class_acc.end());
    j["seed_metrics"] = seed_metrics.to_json();
    j["expanded_pool"] = expanded_pool.to_json();
    j["final_pool"] = final_pool.to_json();
    j["runtime_seconds"] = runtime_seconds;
    j["seed"] = seed;
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    r.baseline_acc = j.at("baseline").at("acc").get<Real>();
    r.baseline_asr = j.at("baseline").at("asr").get<Real>();
    r.baseline_asr_e = j.at("baseline").at("asr_e").get<Real>();
    r.baseline_asr_d = j.at("baseline").at("asr_d").get<Real>();
    r.acc = j.at("defended").at("acc").get<Real>();
    r.asr = j.at("defended").at("asr").get<Real>();
    r.asr_e = j.at("defended").at("asr_e").get<Real>();
    r.asr_d = j.at("defended").at("asr_d").get<Real>();
    r.per_class_acc = j.at("per_class_acc").get<std::vector<Real>>();
    const auto& sm = j.at("seed_metrics");
    r.seed_metrics.npd = sm.at("npd").get<int>();
    r.seed_metrics.nfd = sm.at("nfd").get<int>();
    r.seed_metrics.poisons_in_selection = sm.at("poisons_in_selection").get<int>();
    r.seed_metrics.precision = sm.at("precision").get<Real>();
    auto read_pool = [](const nlohmann::json& p) {
        PoolMetrics m;
        m.size = p.at("size").get<std::size_t>();
        m.poison_count = p.at("poison_count").get<int>();
        m.poisons_by_provenance =
            p.at("poisons_by_provenance").get<std::map<std::string, int>>();
        return m;
    };
    r.expanded_pool = read_pool(j.at("expanded_pool"));
    r.final_pool = read_pool(j.at("final_pool"));
    r.runtime_seconds = j.at("runtime_seconds").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

namespace {
std::string pct(Real v) {
    if (v < 0) return "   -  ";
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << std::setw(6) << v * 100;
    return os.str();
}
}  // namespace

std::string EvalReport::table() const {
    std::ostringstream os;
    os << "                    ACC     ASR    ASR-E   ASR-D\n";
    os << "  no defense      " << pct(baseline_acc) << "  " << pct(baseline_asr) << "  "
       << pct(baseline_asr_e) << "  " << pct(baseline_asr_d) << "\n";
    os << "  defended        " << pct(acc) << "  " << pct(asr) << "  " << pct(asr_e) << "  "
       << pct(asr_d) << "\n";
    os << "  seeds: " << seed_metrics.nfd << " in target class, " << seed_metrics.poisons_in_selection
       << " poisoned (NPD " << seed_metrics.npd << ")\n";
    os << "  expanded pool: " << expanded_pool.size << " ids, " << expanded_pool.poison_count
       << " poisoned\n";
    os << "  final pool: " << final_pool.size << " ids, " << final_pool.poison_count
       << " poisoned\n";
    os << "  runtime: " << std::fixed << std::setprecision(1) << runtime_seconds << " s, seed "
       << seed << "\n";
    return os.str();
}

}  // namespace trustcore
