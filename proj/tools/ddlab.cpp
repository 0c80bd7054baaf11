// Command-line front end: dataset generation, training, evaluation and
// divergence analysis, all reproducible from (config, seed).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ddlab/analysis.hpp"
#include "ddlab/config.hpp"
#include "ddlab/data.hpp"
#include "ddlab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTraining = 4;

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir) {
    const ddlab::DatasetSpec spec = ddlab::load_dataset_spec(spec_path);
    const ddlab::DomainDataset ds = ddlab::generate(spec);
    fs::create_directories(out_dir);
    const std::string csv = (fs::path(out_dir) / "dataset.csv").string();
    const std::string bin = (fs::path(out_dir) / "dataset.bin").string();
    ddlab::save_csv(ds, csv);
    ddlab::save_binary(ds, bin);
    json manifest{{"format_version", 1},
                  {"csv", "dataset.csv"},
                  {"binary", "dataset.bin"},
                  {"spec",
                   {{"domains", spec.num_domains},
                    {"classes", spec.num_classes},
                    {"channels", spec.channels},
                    {"height", spec.height},
                    {"width", spec.width},
                    {"samples_per_domain_per_class", spec.samples_per_domain_per_class},
                    {"shift_strength", spec.shift_strength},
                    {"noise", spec.noise},
                    {"seed", spec.seed}}}};
    std::ofstream mf(fs::path(out_dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
    std::cout << "wrote " << csv << ", " << bin << " (" << ds.samples.size() << " samples)\n";
    return 0;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed_override,
              std::optional<std::string> variant_override,
              std::optional<std::string> layer_set_override, const std::string& out_dir) {
    ddlab::TrainConfig cfg = ddlab::load_train_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (variant_override) cfg.variant = ddlab::parse_variant(*variant_override);
    if (layer_set_override)
        cfg.candidate_layers = ddlab::detail::parse_index_list(*layer_set_override, "--layer-set");
    cfg.validate();
    if (cfg.dataset_path.empty()) throw ddlab::ConfigError("config is missing 'dataset'");

    const ddlab::DomainDataset ds = ddlab::load_dataset(cfg.dataset_path);
    fs::create_directories(out_dir);
    std::ofstream metrics(fs::path(out_dir) / "metrics.jsonl");
    if (!metrics) throw ddlab::IoError("cannot write metrics in " + out_dir);

    ddlab::TrainResult result = ddlab::train(cfg, ds, metrics);

    ddlab::Checkpoint ck;
    ck.model = result.best;
    ck.epoch = result.best_epoch;
    ck.total_epochs = cfg.epochs;
    ddlab::save_checkpoint(ck, (fs::path(out_dir) / "best.ckpt").string());
    std::cout << "best_epoch=" << result.best_epoch << " best_val_acc=" << result.best_val_acc
              << " target_acc=" << result.final_target_acc << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dataset_path,
             const std::string& domain) {
    const ddlab::Checkpoint ck = ddlab::load_checkpoint(ckpt_path);
    const ddlab::DomainDataset ds = ddlab::load_dataset(dataset_path);
    std::size_t d = ddlab::resolve_target_domain(ds, domain);
    std::vector<ddlab::DomainSample> subset;
    for (const ddlab::DomainSample& s : ds.samples)
        if (s.domain_label == d) subset.push_back(s);
    if (subset.empty()) throw ddlab::DataError("domain has no samples: " + domain);
    const double acc = ddlab::accuracy(ck.model.backbone, subset);
    std::cout << "accuracy=" << ddlab::format_double(acc) << "\n";
    return 0;
}

int cmd_analyze(const std::string& ckpt_path, const std::string& dataset_path,
                const std::string& target, const std::string& layer_arg,
                const std::string& out_dir) {
    const ddlab::Checkpoint ck = ddlab::load_checkpoint(ckpt_path);
    const ddlab::Backbone& bb = ck.model.backbone;
    const ddlab::DomainDataset ds = ddlab::load_dataset(dataset_path);
    const std::size_t target_d = ddlab::resolve_target_domain(ds, target);

    auto all_groups = ddlab::group_by_domain(ds.samples, ds.spec.num_domains);
    std::vector<ddlab::SampleGroup> sources;
    for (std::size_t d = 0; d < all_groups.size(); ++d)
        if (d != target_d) sources.push_back(all_groups[d]);

    std::vector<std::size_t> layers;
    if (layer_arg == "all") {
        for (std::size_t l = 0; l < bb.config.num_middle_layers(); ++l) layers.push_back(l);
    } else {
        layers.push_back(ddlab::detail::parse_number<std::size_t>(layer_arg, "--layer"));
        if (layers[0] >= bb.config.num_middle_layers())
            throw ddlab::ConfigError("--layer out of range");
    }

    fs::create_directories(out_dir);
    for (std::size_t layer : layers) {
        const ddlab::DivergenceReport rep =
            ddlab::divergence_report(bb, sources, all_groups[target_d], layer);
        const ddlab::ChannelStats stats = ddlab::channel_sensitivity(bb, sources, layer);
        const std::string tag = std::to_string(layer);
        ddlab::write_divergence_csv(rep, (fs::path(out_dir) / ("divergence_" + tag + ".csv")).string());
        ddlab::write_channel_stats_csv(stats,
                                       (fs::path(out_dir) / ("channel_stats_" + tag + ".csv")).string());
        json j{{"layer", layer},
               {"beta_hat", rep.beta_hat},
               {"gamma_hat", rep.gamma_hat},
               {"inter_domain_gap", rep.inter_domain_gap},
               {"mean_channel_stddev", stats.mean_stddev()}};
        std::ofstream jf(fs::path(out_dir) / ("divergence_" + tag + ".json"));
        jf << j.dump(2) << "\n";
        std::cout << "layer " << layer << ": beta_hat=" << rep.beta_hat
                  << " gamma_hat=" << rep.gamma_hat << " gap=" << rep.inter_domain_gap << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale domain-generalization lab"};
    app.require_subcommand(1);

    std::string spec_path, out_dir = "out";
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-domain dataset");
    gen->add_option("--spec", spec_path, "dataset spec file (key=value)")->required();
    gen->add_option("--out", out_dir, "output directory");

    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    std::optional<std::string> variant_override, layer_set_override;
    auto* train = app.add_subcommand("train", "train a model");
    train->add_option("--config", config_path, "train config file (key=value)")->required();
    train->add_option("--seed", seed_override, "override the config seed");
    train->add_option("--variant", variant_override, "baseline|dd|dd+lt|dd+cl|full");
    train->add_option("--layer-set", layer_set_override, "candidate middle layers, e.g. 0,1,2,3");
    train->add_option("--out", out_dir, "output directory");

    std::string ckpt_path, dataset_path, domain;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one domain");
    eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    eval->add_option("--dataset", dataset_path, "dataset file")->required();
    eval->add_option("--domain", domain, "domain name, e.g. d3")->required();

    std::string layer_arg = "all", target_domain;
    auto* analyze = app.add_subcommand("analyze", "divergence and channel-sensitivity reports");
    analyze->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    analyze->add_option("--dataset", dataset_path, "dataset file")->required();
    analyze->add_option("--target", target_domain, "target domain name")->required();
    analyze->add_option("--layer", layer_arg, "middle layer index or 'all'");
    analyze->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(spec_path, out_dir);
        if (train->parsed())
            return cmd_train(config_path, seed_override, variant_override, layer_set_override,
                             out_dir);
        if (eval->parsed()) return cmd_eval(ckpt_path, dataset_path, domain);
        if (analyze->parsed())
            return cmd_analyze(ckpt_path, dataset_path, target_domain, layer_arg, out_dir);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ddlab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ddlab::ParameterError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ddlab::TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kExitTraining;
    } catch (const ddlab::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ddlab::IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
