#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moab/harness.hpp"

namespace {

std::array<long, 3> parse_class_counts(const std::string& text) {
    std::array<long, 3> counts{};
    int filled = 0;
    std::size_t start = 0;
    while (filled < 3) {
        const std::size_t comma = text.find(',', start);
        const std::string field = text.substr(start, comma == std::string::npos ? comma : comma - start);
        try {
            counts[std::size_t(filled)] = std::stol(field);
        } catch (const std::exception&) {
            throw moab::ConfigError("--classes expects three comma-separated counts, got '" + text + "'");
        }
        ++filled;
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (filled != 3) throw moab::ConfigError("--classes expects three counts, got '" + text + "'");
    return counts;
}

int cmd_gen_data(const std::string& classes, const std::string& mode, double noise,
                 std::uint64_t seed, const std::string& out) {
    moab::GeneratorSpec spec;
    spec.class_counts = parse_class_counts(classes);
    spec.mode = moab::parse_interaction_mode(mode);
    spec.noise = noise;
    spec.seed = seed;
    const std::vector<moab::Sample> samples = moab::generate(spec);
    moab::save_dataset(samples, out);
    std::cout << "wrote " << samples.size() << " samples to " << out << " (+ "
              << moab::sidecar_path(out) << ")\n";
    return 0;
}

int cmd_train(moab::RunConfig config) {
    const moab::RunResult result = moab::train_run(config);
    std::cout << "model " << moab::to_string(config.model) << " (" << result.parameter_count
              << " parameters), " << config.folds << " fold(s), "
              << result.wall_seconds << " s\n";
    for (std::size_t f = 0; f < result.folds.size(); ++f) {
        std::cout << "fold " << f << ":\n" << moab::to_table(result.folds[f].metrics);
    }
    if (config.folds > 1) {
        std::printf("mean over folds: micro %.4f +- %.4f, macro %.4f +- %.4f\n",
                    result.micro.mean, result.micro.stddev, result.macro.mean,
                    result.macro.stddev);
    }
    if (!config.out_dir.empty()) std::cout << "artifacts in " << config.out_dir << "\n";
    return 0;
}

int cmd_ablation(const moab::RunConfig& base) {
    const std::vector<moab::AblationRow> rows = moab::run_ablation(base);
    std::cout << moab::ablation_table(rows);
    if (!base.out_dir.empty()) std::cout << "artifacts in " << base.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-modal outer arithmetic fusion: data synthesis, training, ablation"};
    app.require_subcommand(1);

    // gen-data
    std::string gd_classes = "396,408,654";
    std::string gd_mode = "xor";
    double gd_noise = 0.1;
    std::uint64_t gd_seed = 1;
    std::string gd_out;
    CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic paired dataset");
    gen->add_option("--classes", gd_classes, "Per-grade sample counts, e.g. 396,408,654");
    gen->add_option("--mode", gd_mode, "Interaction mode: xor or easy");
    gen->add_option("--noise", gd_noise, "Noise level sigma");
    gen->add_option("--seed", gd_seed, "Generator seed");
    gen->add_option("--out", gd_out, "Output CSV path (images go to a .img sidecar)")->required();

    // train
    moab::RunConfig train_config;
    std::string tr_fusion = "moab";
    double tr_lr = 0.0, tr_wd = -1.0, tr_noise = 0.1;
    std::string tr_classes = "396,408,654";
    std::string tr_mode = "xor";
    CLI::App* train = app.add_subcommand("train", "Train one model and evaluate on the test split");
    train->add_option("--fusion", tr_fusion,
                      "moab, concat, oaf, dbf, std-add, img-only or gene-only");
    train->add_option("--epochs", train_config.epochs, "Training epochs");
    train->add_option("--batch-size", train_config.batch_size, "Batch size");
    train->add_option("--lr", tr_lr, "Learning rate (default 0.005 fusion, 0.001 unimodal)");
    train->add_option("--weight-decay", tr_wd, "Weight decay (default 0.0005 fusion, 0 unimodal)");
    train->add_option("--seed", train_config.seed, "Run seed");
    train->add_option("--folds", train_config.folds, "Monte Carlo re-split count (1..15)");
    train->add_option("--data", train_config.data_path, "Dataset CSV (omit to generate in memory)");
    train->add_option("--out", train_config.out_dir, "Output directory for run artifacts");
    train->add_option("--test-fraction", train_config.test_fraction, "Held-out group fraction");
    train->add_option("--replicas", train_config.replicas, "Test-time copies per held-out sample");
    train->add_option("--classes", tr_classes, "Generator class counts (no --data only)");
    train->add_option("--mode", tr_mode, "Generator mode (no --data only)");
    train->add_option("--noise", tr_noise, "Generator noise (no --data only)");

    // ablation
    moab::RunConfig ab_config;
    double ab_noise = 0.1;
    std::string ab_classes = "396,408,654";
    std::string ab_mode = "xor";
    CLI::App* ablation = app.add_subcommand(
        "ablation", "Train all seven configurations under identical seeds and splits");
    ablation->add_option("--epochs", ab_config.epochs, "Training epochs");
    ablation->add_option("--batch-size", ab_config.batch_size, "Batch size");
    ablation->add_option("--seed", ab_config.seed, "Run seed");
    ablation->add_option("--folds", ab_config.folds, "Monte Carlo re-split count (1..15)");
    ablation->add_option("--data", ab_config.data_path, "Dataset CSV (omit to generate in memory)");
    ablation->add_option("--out", ab_config.out_dir, "Output directory")->required();
    ablation->add_option("--test-fraction", ab_config.test_fraction, "Held-out group fraction");
    ablation->add_option("--replicas", ab_config.replicas, "Test-time copies per held-out sample");
    ablation->add_option("--classes", ab_classes, "Generator class counts (no --data only)");
    ablation->add_option("--mode", ab_mode, "Generator mode (no --data only)");
    ablation->add_option("--noise", ab_noise, "Generator noise (no --data only)");

    // export-embeddings
    std::string ex_model_dir, ex_data, ex_out;
    CLI::App* exp = app.add_subcommand("export-embeddings",
                                       "Write eval-mode embeddings of a dataset to CSV");
    exp->add_option("--model-dir", ex_model_dir, "Run or fold directory holding model.bin")->required();
    exp->add_option("--data", ex_data, "Dataset CSV")->required();
    exp->add_option("--out", ex_out, "Output CSV path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gd_classes, gd_mode, gd_noise, gd_seed, gd_out);
        if (train->parsed()) {
            train_config.model = moab::parse_model_kind(tr_fusion);
            if (train->count("--lr") > 0) train_config.learning_rate = tr_lr;
            if (train->count("--weight-decay") > 0) train_config.weight_decay = tr_wd;
            train_config.generator.class_counts = parse_class_counts(tr_classes);
            train_config.generator.mode = moab::parse_interaction_mode(tr_mode);
            train_config.generator.noise = tr_noise;
            return cmd_train(train_config);
        }
        if (ablation->parsed()) {
            ab_config.generator.class_counts = parse_class_counts(ab_classes);
            ab_config.generator.mode = moab::parse_interaction_mode(ab_mode);
            ab_config.generator.noise = ab_noise;
            return cmd_ablation(ab_config);
        }
        if (exp->parsed()) {
            moab::export_embeddings(ex_model_dir, ex_data, ex_out);
            std::cout << "wrote " << ex_out << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
