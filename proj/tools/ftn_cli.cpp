// Command line front end for the adapter library. Every subcommand prints a
// short human-readable block plus "METRIC name=value" lines that scripts can
// grep, and --out writes the artifact (checkpoint or JSON report).
//
// Exit codes: 0 success, 2 validation error (bad flags, bad files, bad
// configs), 3 numerical failure, 4 contract violation.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ftn/budget.hpp"
#include "ftn/deltas.hpp"
#include "ftn/train.hpp"

namespace {

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

std::string fmt_double(double v) {
    std::ostringstream ss;
    ss << std::setprecision(12) << v;
    return ss.str();
}

void metric(const std::string& name, double v) {
    std::cout << "METRIC " << name << "=" << fmt_double(v) << "\n";
}

void metric(const std::string& name, std::size_t v) {
    std::cout << "METRIC " << name << "=" << v << "\n";
}

// one aligned "label  value" row for the human block
void row(const std::string& label, const std::string& value) {
    std::cout << "  " << std::left << std::setw(26) << label << value << "\n";
}

void row(const std::string& label, std::size_t value) { row(label, std::to_string(value)); }

ftn::TrainConfig resolve_train_config(const std::string& config_path,
                                      const std::optional<std::uint64_t>& seed) {
    ftn::TrainConfig cfg;
    if (!config_path.empty()) cfg = ftn::parse_train_config(read_json_file(config_path));
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
}

ftn::SyntheticDomainConfig resolve_domain(const std::string& domain_path) {
    if (domain_path.empty()) return ftn::SyntheticDomainConfig{};
    return ftn::parse_domain_config(read_json_file(domain_path));
}

// --spec on checkpoint-consuming commands cross-checks the artifact against
// the spec file the caller believes it was built from
void check_spec_matches(const ftn::Checkpoint& c, const std::string& spec_path) {
    if (spec_path.empty()) return;
    const ftn::BackboneSpec spec = ftn::load_backbone_spec(spec_path);
    const std::string have = c.manifest.at("spec_name").get<std::string>();
    if (spec.name != have) {
        throw std::invalid_argument("checkpoint was built from spec \"" + have +
                                    "\", not \"" + spec.name + "\"");
    }
}

void print_eval(const std::string& prefix, const ftn::Metrics& m) {
    row("test accuracy", fmt_double(m.accuracy));
    row("test loss", fmt_double(m.loss));
    row("test samples", m.samples);
    metric(prefix + "_accuracy", m.accuracy);
    metric(prefix + "_loss", m.loss);
    metric(prefix + "_samples", m.samples);
}

// pruned artifact path for threshold index i: exact --out for a single
// threshold, stem-i.ext when sweeping several
std::string indexed_path(const std::string& out, std::size_t i, std::size_t count) {
    if (count == 1) return out;
    const std::filesystem::path p(out);
    std::filesystem::path q = p.parent_path();
    q /= p.stem().string() + "-" + std::to_string(i) + p.extension().string();
    return q.string();
}

struct SweepRow {
    std::string label;
    std::vector<double> accuracies;

    double mean() const {
        double s = 0.0;
        for (double a : accuracies) s += a;
        return s / static_cast<double>(accuracies.size());
    }
    double min() const { return *std::min_element(accuracies.begin(), accuracies.end()); }
    double max() const { return *std::max_element(accuracies.begin(), accuracies.end()); }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"factorized tensor adapters: training, budgeting and factorization tools"};
    app.require_subcommand(1);

    // shared option storage; each subcommand binds the subset it uses
    std::string spec_path, config_path, domain_path, out_path, base_path, ckpt_path;
    std::string task_id, mode_name = "ftn", method = "cp", split = "test";
    std::optional<std::uint64_t> seed;
    std::uint64_t init_seed = 1;
    std::size_t rank = 4, tasks = 10, sweep_seeds = 3;
    std::vector<std::size_t> ranks = {1, 2, 4, 8};
    std::vector<double> thresholds;
    bool with_baselines = false;

    auto* train_cmd = app.add_subcommand(
        "train-backbone", "train every weight of a spec'd model on a source domain");
    train_cmd->add_option("--spec", spec_path, "backbone spec JSON")
        ->required()
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--domain", domain_path, "source domain JSON (default: identity)")
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--config", config_path, "train config JSON (see configs/)")
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--seed", seed, "override the config seed");
    train_cmd->add_option("--init-seed", init_seed, "weight initialization seed")
        ->capture_default_str();
    train_cmd->add_option("--out", out_path, "checkpoint to write")->required();
    train_cmd->callback([&] {
        const nlohmann::json spec_doc = read_json_file(spec_path);
        const ftn::SyntheticDomainConfig domain = resolve_domain(domain_path);
        const ftn::TrainConfig cfg = resolve_train_config(config_path, seed);
        const ftn::Checkpoint out =
            ftn::train_backbone(spec_doc, domain, cfg, init_seed);
        out.save(out_path);

        const nlohmann::json entry = ftn::task_entry(out, "source");
        std::cout << "trained " << out.manifest.at("spec_name").get<std::string>()
                  << " on " << ftn::domain_transform_name(domain.transform) << " domain\n";
        row("trainable params", entry.at("trainable_params").get<std::size_t>());
        row("backbone digest", out.backbone_digest().substr(0, 16));
        print_eval("source", ftn::evaluate_stored(out, "source"));
        metric("trainable_params", entry.at("trainable_params").get<std::size_t>());
        row("checkpoint", out_path);
    });

    auto* adapt_cmd = app.add_subcommand(
        "adapt", "attach one task adapter set to a frozen backbone checkpoint");
    adapt_cmd->add_option("base", base_path, "backbone checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    adapt_cmd->add_option("--task", task_id, "task id to register")->required();
    adapt_cmd->add_option("--domain", domain_path, "target domain JSON")
        ->required()
        ->check(CLI::ExistingFile);
    adapt_cmd->add_option("--mode", mode_name, "adapter mode")
        ->check(CLI::IsMember({"ftn", "bn-only", "fe"}))
        ->capture_default_str();
    adapt_cmd->add_option("--rank", rank, "CP rank (ftn mode)")->capture_default_str();
    adapt_cmd->add_option("--config", config_path, "train config JSON (see configs/)")
        ->check(CLI::ExistingFile);
    adapt_cmd->add_option("--seed", seed, "override the config seed");
    adapt_cmd->add_option("--spec", spec_path, "cross-check the checkpoint against this spec")
        ->check(CLI::ExistingFile);
    adapt_cmd->add_option("--out", out_path, "checkpoint to write")->required();
    adapt_cmd->callback([&] {
        const ftn::Checkpoint base = ftn::Checkpoint::load(base_path);
        check_spec_matches(base, spec_path);
        const ftn::SyntheticDomainConfig domain = resolve_domain(domain_path);
        const ftn::TrainConfig cfg = resolve_train_config(config_path, seed);
        const ftn::AdaptMode mode = ftn::parse_adapt_mode(mode_name);
        const ftn::Checkpoint out =
            ftn::adapt_task(base, task_id, domain, mode, rank, cfg);
        out.save(out_path);

        const nlohmann::json entry = ftn::task_entry(out, task_id);
        std::cout << "adapted task \"" << task_id << "\" (" << mode_name << ")\n";
        row("trainable params", entry.at("trainable_params").get<std::size_t>());
        row("backbone digest", out.backbone_digest().substr(0, 16) + " (unchanged)");
        print_eval("task", ftn::evaluate_stored(out, task_id));
        metric("trainable_params", entry.at("trainable_params").get<std::size_t>());
        row("checkpoint", out_path);
    });

    auto* ft_cmd = app.add_subcommand(
        "finetune", "continue training every weight on a new domain (baseline)");
    ft_cmd->add_option("base", base_path, "backbone checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    ft_cmd->add_option("--domain", domain_path, "target domain JSON")
        ->required()
        ->check(CLI::ExistingFile);
    ft_cmd->add_option("--config", config_path, "train config JSON (see configs/)")
        ->check(CLI::ExistingFile);
    ft_cmd->add_option("--seed", seed, "override the config seed");
    ft_cmd->add_option("--spec", spec_path, "cross-check the checkpoint against this spec")
        ->check(CLI::ExistingFile);
    ft_cmd->add_option("--out", out_path, "checkpoint to write")->required();
    ft_cmd->callback([&] {
        const ftn::Checkpoint base = ftn::Checkpoint::load(base_path);
        check_spec_matches(base, spec_path);
        const ftn::SyntheticDomainConfig domain = resolve_domain(domain_path);
        const ftn::TrainConfig cfg = resolve_train_config(config_path, seed);
        const ftn::Checkpoint out = ftn::finetune_backbone(base, domain, cfg);
        out.save(out_path);

        std::cout << "fine-tuned full backbone on "
                  << ftn::domain_transform_name(domain.transform) << " domain\n";
        row("backbone digest", out.backbone_digest().substr(0, 16) + " (moved)");
        print_eval("finetune", ftn::evaluate_stored(out, "source"));
        row("checkpoint", out_path);
    });

    auto* eval_cmd = app.add_subcommand("eval", "evaluate one registered task");
    eval_cmd->add_option("checkpoint", ckpt_path, "checkpoint to read")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--task", task_id, "task id")->required();
    eval_cmd->add_option("--domain", domain_path,
                         "evaluate on this domain instead of the registered one")
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--split", split, "which split of the domain to use")
        ->check(CLI::IsMember({"test", "train"}))
        ->capture_default_str();
    eval_cmd->add_option("--spec", spec_path, "cross-check the checkpoint against this spec")
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--seed", seed, "ignored: evaluation is deterministic");
    eval_cmd->add_option("--config", config_path, "ignored: evaluation takes no config")
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--out", out_path, "write metrics as JSON");
    eval_cmd->callback([&] {
        const ftn::Checkpoint c = ftn::Checkpoint::load(ckpt_path);
        check_spec_matches(c, spec_path);
        ftn::Metrics m;
        nlohmann::json domain_used;
        if (domain_path.empty()) {
            domain_used = ftn::task_entry(c, task_id).at("domain");
            const auto domain = ftn::parse_domain_config(domain_used);
            const auto s = split == "train" ? ftn::Split::kTrain : ftn::Split::kTest;
            m = ftn::evaluate(c, task_id, ftn::make_domain_split(domain, s));
        } else {
            const auto domain = resolve_domain(domain_path);
            domain_used = ftn::domain_config_json(domain);
            const auto s = split == "train" ? ftn::Split::kTrain : ftn::Split::kTest;
            m = ftn::evaluate(c, task_id, ftn::make_domain_split(domain, s));
        }
        std::cout << "task \"" << task_id << "\" on "
                  << domain_used.at("transform").get<std::string>() << " domain, " << split
                  << " split\n";
        print_eval("eval", m);
        if (!out_path.empty()) {
            write_json_file(out_path, {{"task", task_id},
                                       {"split", split},
                                       {"domain", domain_used},
                                       {"accuracy", m.accuracy},
                                       {"loss", m.loss},
                                       {"samples", m.samples}});
        }
    });

    auto* budget_cmd =
        app.add_subcommand("budget", "itemize per-task parameter counts for a spec");
    budget_cmd->add_option("--spec", spec_path, "backbone spec JSON")
        ->required()
        ->check(CLI::ExistingFile);
    budget_cmd->add_option("--rank", rank, "adapter CP rank")->capture_default_str();
    budget_cmd->add_option("--tasks", tasks, "number of tasks to amortize over")
        ->capture_default_str();
    budget_cmd->add_option("--seed", seed, "ignored: counting is deterministic");
    budget_cmd->add_option("--config", config_path,
                           "JSON with optional \"rank\"/\"tasks\" keys (flags win)")
        ->check(CLI::ExistingFile);
    budget_cmd->add_option("--out", out_path, "write the report as JSON");
    budget_cmd->callback([&] {
        if (!config_path.empty()) {
            const nlohmann::json j = read_json_file(config_path);
            if (budget_cmd->count("--rank") == 0) rank = j.value("rank", rank);
            if (budget_cmd->count("--tasks") == 0) tasks = j.value("tasks", tasks);
        }
        const ftn::BackboneSpec spec = ftn::load_backbone_spec(spec_path);
        nlohmann::json report = {{"spec", spec.name}, {"rank", rank}, {"tasks", tasks}};

        if (spec.kind == "conv") {
            const ftn::BudgetReport r = ftn::conv_ftn_count(spec, tasks, rank);
            std::cout << "parameter budget for " << spec.name << " (rank " << rank << ", "
                      << tasks << " tasks)\n";
            row("frozen backbone", r.frozen_backbone);
            row("per-task adapters", r.per_task_adapters);
            row("per-task batchnorm", r.per_task_bn);
            row("per-task head", r.per_task_head);
            row("per-task total", r.per_task_total());
            row("total", r.total());
            row("feature-extractor total", r.feature_extractor_total());
            row("multiplier", fmt_double(r.multiplier()) + "x");
            metric("budget_frozen_backbone", r.frozen_backbone);
            metric("budget_per_task_adapters", r.per_task_adapters);
            metric("budget_per_task_bn", r.per_task_bn);
            metric("budget_per_task_head", r.per_task_head);
            metric("budget_per_task_total", r.per_task_total());
            metric("budget_total", r.total());
            metric("budget_multiplier", r.multiplier());
            report["frozen_backbone"] = r.frozen_backbone;
            report["per_task_adapters"] = r.per_task_adapters;
            report["per_task_bn"] = r.per_task_bn;
            report["per_task_head"] = r.per_task_head;
            report["per_task_total"] = r.per_task_total();
            report["total"] = r.total();
            report["feature_extractor_total"] = r.feature_extractor_total();
            report["multiplier"] = r.multiplier();
        } else {
            const std::size_t layers = spec.attention_count();
            std::size_t d_model = 0, heads = 0;
            for (const auto& l : spec.layers) {
                if (l.kind == ftn::LayerKind::kAttention) {
                    d_model = l.d_model;
                    heads = l.n_heads;
                    break;
                }
            }
            const std::size_t ftn_out =
                ftn::attn_ftn_count(ftn::AttnVariant::kOutput, layers, rank, d_model, heads);
            const std::size_t ftn_qv =
                ftn::attn_ftn_count(ftn::AttnVariant::kQv, layers, rank, d_model, heads);
            const std::size_t lora =
                ftn::baseline_count(ftn::BaselineMethod::kLora, layers, rank, d_model);
            const std::size_t full =
                ftn::baseline_count(ftn::BaselineMethod::kFinetune, layers, rank, d_model);
            const std::size_t head = spec.classes_default * (spec.feature_dim() + 1);
            std::cout << "attention adapter budget for " << spec.name << " (" << layers
                      << " layers, d_model " << d_model << ", " << heads << " heads, rank "
                      << rank << ")\n";
            row("output projection only", ftn_out);
            row("q and v projections", ftn_qv);
            row("lora on q and v", lora);
            row("full fine-tune", full);
            row("per-task head", head);
            metric("budget_attn_output", ftn_out);
            metric("budget_attn_qv", ftn_qv);
            metric("budget_lora_qv", lora);
            metric("budget_finetune", full);
            metric("budget_per_task_head", head);
            report["attn_output"] = ftn_out;
            report["attn_qv"] = ftn_qv;
            report["lora_qv"] = lora;
            report["finetune"] = full;
            report["per_task_head"] = head;
        }
        if (!out_path.empty()) write_json_file(out_path, report);
    });

    auto* fact_cmd = app.add_subcommand(
        "factorize", "factorize the weight deltas between two checkpoints");
    fact_cmd->add_option("finetuned", ckpt_path, "fine-tuned checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    fact_cmd->add_option("base", base_path, "base checkpoint it started from")
        ->required()
        ->check(CLI::ExistingFile);
    fact_cmd->add_option("--method", method, "decomposition")
        ->check(CLI::IsMember({"cp", "tt", "svd"}))
        ->capture_default_str();
    fact_cmd->add_option("--rank", rank, "target rank")->capture_default_str();
    fact_cmd->add_option("--seed", seed, "CP solver restart seed");
    fact_cmd->add_option("--spec", spec_path, "cross-check both checkpoints against this spec")
        ->check(CLI::ExistingFile);
    fact_cmd->add_option("--config", config_path,
                         "JSON with optional \"method\"/\"rank\" keys (flags win)")
        ->check(CLI::ExistingFile);
    fact_cmd->add_option("--out", out_path, "write the report as JSON");
    fact_cmd->callback([&] {
        if (!config_path.empty()) {
            const nlohmann::json j = read_json_file(config_path);
            if (fact_cmd->count("--method") == 0) method = j.value("method", method);
            if (fact_cmd->count("--rank") == 0) rank = j.value("rank", rank);
        }
        const ftn::Checkpoint finetuned = ftn::Checkpoint::load(ckpt_path);
        const ftn::Checkpoint base = ftn::Checkpoint::load(base_path);
        check_spec_matches(finetuned, spec_path);
        check_spec_matches(base, spec_path);
        const ftn::DeltaSet ds = ftn::extract_deltas(finetuned, base);
        const ftn::FactorizationReport report =
            ftn::factorize_deltas(ds, method, rank, seed.value_or(0));

        std::cout << "factorized " << ds.size() << " weight deltas (" << method << ", rank "
                  << rank << ")\n";
        std::cout << "  " << std::left << std::setw(26) << "layer" << std::setw(12)
                  << "abs error" << std::setw(12) << "rel error" << "params\n";
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : report.rows) {
            std::ostringstream abs_s, rel_s;
            abs_s << std::setprecision(4) << r.abs_error;
            rel_s << std::setprecision(4) << r.rel_error;
            std::cout << "  " << std::left << std::setw(26) << r.layer << std::setw(12)
                      << abs_s.str() << std::setw(12) << rel_s.str() << r.param_count << "\n";
            rows.push_back({{"layer", r.layer},
                            {"method", r.method},
                            {"rank", r.rank},
                            {"abs_error", r.abs_error},
                            {"rel_error", r.rel_error},
                            {"param_count", r.param_count}});
        }
        row("mean rel error", fmt_double(report.aggregate.mean_rel_error));
        row("std rel error", fmt_double(report.aggregate.std_rel_error));
        metric("factorize_mean_rel_error", report.aggregate.mean_rel_error);
        metric("factorize_std_rel_error", report.aggregate.std_rel_error);
        if (!out_path.empty()) {
            write_json_file(out_path,
                            {{"method", method},
                             {"rank", rank},
                             {"rows", rows},
                             {"mean_rel_error", report.aggregate.mean_rel_error},
                             {"std_rel_error", report.aggregate.std_rel_error}});
        }
    });

    auto* prune_cmd = app.add_subcommand(
        "prune", "zero adapters below a norm threshold, one artifact per threshold");
    prune_cmd->add_option("checkpoint", ckpt_path, "checkpoint with the task")
        ->required()
        ->check(CLI::ExistingFile);
    prune_cmd->add_option("--task", task_id, "task id to prune")->required();
    prune_cmd->add_option("--thresholds", thresholds, "norm thresholds to sweep")
        ->required()
        ->delimiter(',');
    prune_cmd->add_option("--spec", spec_path, "cross-check the checkpoint against this spec")
        ->check(CLI::ExistingFile);
    prune_cmd->add_option("--seed", seed, "ignored: pruning is deterministic");
    prune_cmd->add_option("--config", config_path,
                          "JSON with an optional \"thresholds\" array (flag wins)")
        ->check(CLI::ExistingFile);
    prune_cmd->add_option("--out", out_path, "checkpoint path (stem-i.ext when sweeping)")
        ->required();
    prune_cmd->callback([&] {
        if (!config_path.empty() && prune_cmd->count("--thresholds") == 0) {
            const nlohmann::json j = read_json_file(config_path);
            thresholds = j.value("thresholds", thresholds);
        }
        const ftn::Checkpoint base = ftn::Checkpoint::load(ckpt_path);
        check_spec_matches(base, spec_path);

        bool norms_printed = false;
        for (std::size_t i = 0; i < thresholds.size(); ++i) {
            const ftn::PrunedCheckpoint pruned =
                ftn::prune_task(base, task_id, thresholds[i]);
            if (!norms_printed) {
                std::cout << "adapter norms for task \"" << task_id << "\"\n";
                for (std::size_t k = 0; k < pruned.layer_norms.size(); ++k) {
                    row("conv " + std::to_string(pruned.layer_index[k]),
                        fmt_double(pruned.layer_norms[k]));
                }
                std::cout << "sweep\n";
                norms_printed = true;
            }
            const std::string path = indexed_path(out_path, i, thresholds.size());
            pruned.ckpt.save(path);
            const ftn::Metrics m = ftn::evaluate_stored(pruned.ckpt, task_id);
            std::ostringstream line;
            line << "removed " << pruned.removed.size() << ", accuracy "
                 << fmt_double(m.accuracy) << ", " << path;
            row("threshold " + fmt_double(thresholds[i]), line.str());
            metric("prune_threshold_" + std::to_string(i), thresholds[i]);
            metric("prune_removed_" + std::to_string(i), pruned.removed.size());
            metric("prune_accuracy_" + std::to_string(i), m.accuracy);
        }
    });

    auto* sweep_cmd = app.add_subcommand(
        "sweep-rank", "adapt one domain at several CP ranks and report the trend");
    sweep_cmd->add_option("base", base_path, "backbone checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    sweep_cmd->add_option("--domain", domain_path, "target domain JSON")
        ->required()
        ->check(CLI::ExistingFile);
    sweep_cmd->add_option("--ranks", ranks, "CP ranks to sweep")
        ->delimiter(',')
        ->capture_default_str();
    sweep_cmd->add_option("--seeds", sweep_seeds, "seeds averaged per configuration")
        ->capture_default_str();
    sweep_cmd->add_option("--config", config_path, "adapter train config JSON (see configs/)")
        ->check(CLI::ExistingFile);
    sweep_cmd->add_option("--seed", seed, "first seed of the batch");
    sweep_cmd->add_flag("--baselines", with_baselines,
                        "also run feature-extractor, bn-only and full fine-tune rows");
    sweep_cmd->add_option("--spec", spec_path, "cross-check the checkpoint against this spec")
        ->check(CLI::ExistingFile);
    sweep_cmd->add_option("--out", out_path, "write the sweep summary as JSON");
    sweep_cmd->callback([&] {
        if (sweep_seeds == 0) throw std::invalid_argument("sweep: need at least one seed");
        if (ranks.empty()) throw std::invalid_argument("sweep: need at least one rank");
        const ftn::Checkpoint base = ftn::Checkpoint::load(base_path);
        check_spec_matches(base, spec_path);
        const ftn::SyntheticDomainConfig domain = resolve_domain(domain_path);
        const ftn::TrainConfig cfg0 = resolve_train_config(config_path, seed);

        const auto run = [&](ftn::AdaptMode mode, std::size_t r) {
            SweepRow out;
            for (std::size_t s = 0; s < sweep_seeds; ++s) {
                ftn::TrainConfig cfg = cfg0;
                cfg.seed = cfg0.seed + s;
                const ftn::Checkpoint c =
                    ftn::adapt_task(base, "target", domain, mode, r, cfg);
                out.accuracies.push_back(ftn::evaluate_stored(c, "target").accuracy);
            }
            return out;
        };

        std::vector<SweepRow> table;
        if (with_baselines) {
            SweepRow fe = run(ftn::AdaptMode::kFeatureExtractor, 0);
            fe.label = "fe";
            table.push_back(fe);
            SweepRow bn = run(ftn::AdaptMode::kBnOnly, 0);
            bn.label = "bn-only";
            table.push_back(bn);
        }
        for (std::size_t r : ranks) {
            SweepRow rr = run(ftn::AdaptMode::kFtn, r);
            rr.label = "ftn r" + std::to_string(r);
            table.push_back(rr);
        }
        if (with_baselines) {
            SweepRow ft;
            ft.label = "finetune";
            for (std::size_t s = 0; s < sweep_seeds; ++s) {
                ftn::TrainConfig cfg = cfg0;
                cfg.seed = cfg0.seed + s;
                const ftn::Checkpoint c = ftn::finetune_backbone(base, domain, cfg);
                ft.accuracies.push_back(ftn::evaluate_stored(c, "source").accuracy);
            }
            table.push_back(ft);
        }

        std::cout << "rank sweep on " << ftn::domain_transform_name(domain.transform)
                  << " domain (" << sweep_seeds << " seeds)\n";
        std::cout << "  " << std::left << std::setw(12) << "mode" << std::setw(10) << "mean"
                  << std::setw(10) << "min" << "max\n";
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : table) {
            std::ostringstream mean_s, min_s, max_s;
            mean_s << std::setprecision(4) << r.mean();
            min_s << std::setprecision(4) << r.min();
            max_s << std::setprecision(4) << r.max();
            std::cout << "  " << std::left << std::setw(12) << r.label << std::setw(10)
                      << mean_s.str() << std::setw(10) << min_s.str() << max_s.str() << "\n";
            std::string key = r.label;
            std::replace(key.begin(), key.end(), ' ', '_');
            std::replace(key.begin(), key.end(), '-', '_');
            metric("sweep_" + key, r.mean());
            rows.push_back({{"mode", r.label},
                            {"accuracies", r.accuracies},
                            {"mean", r.mean()},
                            {"min", r.min()},
                            {"max", r.max()}});
        }
        if (!out_path.empty()) {
            write_json_file(out_path, {{"domain", ftn::domain_config_json(domain)},
                                       {"seeds", sweep_seeds},
                                       {"rows", rows}});
        }
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ftn::ContractViolation& e) {
        std::cerr << "ftn: contract violation: " << e.what() << "\n";
        return 4;
    } catch (const ftn::NumericalError& e) {
        std::cerr << "ftn: numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const ftn::CheckpointReadError& e) {
        std::cerr << "ftn: bad checkpoint (" << ftn::checkpoint_error_name(e.code())
                  << "): " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "ftn: bad manifest: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "ftn: " << e.what() << "\n";
        return 2;
    } catch (const std::out_of_range& e) {
        std::cerr << "ftn: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
