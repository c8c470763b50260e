#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "moab/backbones.hpp"
#include "moab/data.hpp"
#include "moab/fusion.hpp"
#include "moab/metrics.hpp"
#include "moab/nn.hpp"

namespace moab {

// The seven trainable configurations: two unimodal baselines plus the five
// fusion variants.
enum class ModelKind { ImgOnly, GeneOnly, Concat, OafOnly, Dbf, StdAdd, Moab };

ModelKind parse_model_kind(const std::string& name);
std::string to_string(ModelKind kind);
bool is_fusion(ModelKind kind);

// Full classifier: modality encoder(s) plus a fusion head or unimodal tail.
class Classifier {
public:
    Classifier(ModelKind kind, const FusionConfig& config, Rng& rng);

    struct Output {
        Tensor logits;     // [batch x 3]
        Tensor embedding;  // penultimate activation
    };

    Output forward(const Tensor& images, const Tensor& genes, bool training, Rng& rng) const;
    std::vector<int> predict(const Batch& batch) const;

    std::vector<Parameter> parameters() const;
    std::size_t parameter_count() const;
    ModelKind kind() const { return kind_; }
    const FusionConfig& fusion_config() const { return config_; }
    const FusionHead* head() const { return head_ ? &*head_ : nullptr; }

    void save(const std::string& path) const;
    static Classifier load(const std::string& path);

private:
    ModelKind kind_;
    FusionConfig config_;
    std::optional<ToyImageEncoder> image_encoder_;
    std::optional<GenomicMLP> gene_encoder_;
    std::optional<FusionHead> head_;
    std::optional<UnimodalTail> tail_;
};

struct RunConfig {
    ModelKind model = ModelKind::Moab;
    int epochs = 10;
    int batch_size = 8;
    // Defaults follow the model family: unimodal 0.001 / no decay, fusion
    // 0.005 / decay 0.0005. Explicit values override.
    std::optional<double> learning_rate;
    std::optional<double> weight_decay;
    std::uint64_t seed = 1;
    int folds = 1;
    double test_fraction = 0.2;
    int replicas = 9;
    std::string data_path;    // empty -> generate from `generator`
    GeneratorSpec generator;
    std::string out_dir;      // empty -> no files written
    FusionConfig fusion;

    double resolved_lr() const;
    double resolved_weight_decay() const;
};

void validate(const RunConfig& config);

struct FoldResult {
    MetricsReport metrics;
    std::vector<double> epoch_loss;  // mean train loss per epoch
};

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0;
};

struct RunResult {
    std::vector<FoldResult> folds;
    Aggregate micro, macro, grade_iv, accuracy;
    std::size_t parameter_count = 0;
    double wall_seconds = 0.0;
};

// Trains `config.folds` Monte Carlo re-splits and evaluates each on its test
// side. With an output directory set, writes per-fold metrics.json, loss.csv,
// embeddings.csv and model.bin plus a top-level config.json and result.json.
RunResult train_run(const RunConfig& config);

struct AblationRow {
    ModelKind model;
    double f1_grade_iv = 0.0;
    double f1_micro = 0.0;
    double f1_macro = 0.0;
};

// Trains all seven configurations under identical seeds and splits.
std::vector<AblationRow> run_ablation(const RunConfig& base);

std::string ablation_table(const std::vector<AblationRow>& rows);

// Loads a trained model (model.bin inside `model_dir` or its fold_0/) and
// writes eval-mode embeddings of every sample in the dataset.
void export_embeddings(const std::string& model_dir, const std::string& data_path,
                       const std::string& out_path);

std::string config_json(const RunConfig& config);

}  // namespace moab
