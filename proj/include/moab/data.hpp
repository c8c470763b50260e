#pragma once

#include <array>
#include <string>
#include <vector>

#include "moab/tensor.hpp"

namespace moab {

inline constexpr std::size_t kGeneCount = 80;      // 79 CNV-like + 1 mutation status
inline constexpr std::size_t kMutationIndex = 79;
inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;

// One paired record: grayscale patch, gene vector, grade label in {0,1,2}
// (II, III, IV) and a group id for leakage-free splitting.
struct Sample {
    std::string sample_id;
    std::string group_id;
    std::vector<double> genes;  // length 80, mutation status at index 79
    std::vector<double> image;  // 32*32 row-major, values in [0, 1]
    int label = 0;
};

enum class InteractionMode {
    // Latent bits u (image pattern) and v (gene shift); label 2 iff u != v,
    // else label v. Separating class 2 requires both modalities.
    XorCrossModal,
    // Label encoded redundantly in each modality; unimodal models suffice.
    UnimodalEasy,
};

InteractionMode parse_interaction_mode(const std::string& name);
std::string to_string(InteractionMode mode);

struct GeneratorSpec {
    std::array<long, 3> class_counts = {396, 408, 654};
    InteractionMode mode = InteractionMode::XorCrossModal;
    double noise = 0.1;
    std::uint64_t seed = 1;
};

std::vector<Sample> generate(const GeneratorSpec& spec);

struct DatasetSplit {
    std::vector<Sample> train;
    std::vector<Sample> test;
    int replicas = 1;
    std::uint64_t seed = 0;
};

// Group-aware split: every sample of a group lands on one side. Each base
// test sample appears `replicas` times; copies beyond the first re-draw
// image noise while genes and label are carried over.
DatasetSplit split(const std::vector<Sample>& samples, double test_fraction, int replicas,
                   std::uint64_t seed, double replica_image_noise = 0.05);

// CSV schema: sample_id,group_id,grade,g0..g79. Images live in a sidecar
// binary next to the CSV: magic "MOAB", u32 count/height/width, then
// row-major little-endian float32 pixels per image.
void save_dataset(const std::vector<Sample>& samples, const std::string& csv_path);
std::vector<Sample> load_dataset(const std::string& csv_path);
std::string sidecar_path(const std::string& csv_path);

struct Batch {
    Tensor images;  // [B x 1 x 32 x 32]
    Tensor genes;   // [B x 80]
    std::vector<int> labels;
    std::vector<std::string> ids;

    std::size_t size() const { return labels.size(); }
};

// Covers every sample exactly once; the final partial batch is kept.
std::vector<Batch> batches(const std::vector<Sample>& samples, std::size_t batch_size,
                           bool shuffle, std::uint64_t seed);

}  // namespace moab
