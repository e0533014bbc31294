#pragma once

// Post-training analysis over checkpoints: extract per-layer weight deltas
// between a fine-tuned model and its base, factorize them at a sweep of
// ranks, and prune trained adapters whose reconstructed delta is small.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftn/adapters.hpp"
#include "ftn/checkpoint.hpp"
#include "ftn/factorize.hpp"
#include "ftn/model.hpp"
#include "ftn/tensor.hpp"

namespace ftn {

struct DeltaSet {
    // parallel arrays, one entry per conv layer, in checkpoint name order
    std::vector<std::string> names;
    std::vector<Tensor<double>> deltas;  // native [C_out,C_in,k,k]

    std::size_t size() const { return names.size(); }
};

// Elementwise W_finetuned - W_base over every backbone conv weight. Both
// checkpoints must describe the same architecture and carry the same layer
// names; zero deltas are fine (an untouched layer is still a data point).
inline DeltaSet extract_deltas(const Checkpoint& finetuned, const Checkpoint& base) {
    const auto spec_of = [](const Checkpoint& c) -> std::string {
        if (!c.manifest.contains("spec_name")) return "";
        return c.manifest.at("spec_name").get<std::string>();
    };
    if (spec_of(finetuned) != spec_of(base)) {
        throw std::invalid_argument("extract_deltas: checkpoints come from different specs (\"" +
                                    spec_of(finetuned) + "\" vs \"" + spec_of(base) + "\")");
    }
    const std::vector<std::string> names = base.names_with_prefix("backbone/layer/");
    if (names != finetuned.names_with_prefix("backbone/layer/")) {
        throw std::invalid_argument("extract_deltas: checkpoints disagree on layer names");
    }
    if (names.empty()) {
        throw std::invalid_argument("extract_deltas: no backbone layers in the checkpoints");
    }

    DeltaSet out;
    for (const std::string& name : names) {
        const Tensor<double>& after = finetuned.f64(name);
        const Tensor<double>& before = base.f64(name);
        if (!after.same_shape(before)) {
            throw std::invalid_argument("extract_deltas: " + name + " changed shape");
        }
        Tensor<double> d = after;
        d -= before;
        out.names.push_back(name);
        out.deltas.push_back(std::move(d));
    }
    return out;
}

struct FactorizationReport {
    std::vector<FactorizationRow> rows;
    FactorizationAggregate aggregate;
};

// Factorizes every delta with one method at one rank and aggregates the
// relative errors. Conv deltas go through the documented 3-way view.
inline FactorizationReport factorize_deltas(const DeltaSet& ds, const std::string& method,
                                            std::size_t rank, std::uint64_t seed = 0) {
    if (rank == 0) throw std::invalid_argument("factorize_deltas: rank must be >= 1");
    FactorizationReport report;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Tensor<double>& d = ds.deltas[i];
        const Tensor<double> t3 =
            d.rank() == 4 ? conv_weight_to_3way(d) : d;
        report.rows.push_back(
            factorize_tensor(ds.names[i], t3, method, rank, mix64(seed, i)));
    }
    report.aggregate = aggregate_rows(report.rows);
    return report;
}

struct PruneResult {
    TaskAdapterSet<double> task;
    std::vector<std::size_t> removed;     // conv ordinals whose adapter was zeroed
    std::vector<double> layer_norms;      // Frobenius norm per engaged adapter, by ordinal
    std::vector<std::size_t> layer_index; // conv ordinal for each norm entry
};

// Zeroes every adapter whose reconstructed delta has Frobenius norm below the
// threshold. The input is untouched; zeroing an already-zero adapter is a
// no-op, so pruning twice at one threshold changes nothing.
inline PruneResult prune_by_norm(const TaskAdapterSet<double>& task, double threshold) {
    if (threshold < 0.0) throw std::invalid_argument("prune_by_norm: threshold must be >= 0");
    PruneResult out{clone_task_adapter_set(task), {}, {}, {}};
    for (std::size_t l = 0; l < out.task.adapters.size(); ++l) {
        if (!out.task.adapters[l]) continue;
        const double norm = reconstruct(*out.task.adapters[l]).value().frobenius_norm();
        out.layer_norms.push_back(norm);
        out.layer_index.push_back(l);
        if (norm < threshold) {
            zero_factors(*out.task.adapters[l]);
            out.removed.push_back(l);
        }
    }
    return out;
}

}  // namespace ftn
