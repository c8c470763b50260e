#include "moab/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

static_assert(std::endian::native == std::endian::little,
              "sidecar image format is little-endian");

namespace moab {

namespace {

constexpr std::size_t kShiftedCnvCount = 20;
constexpr double kGeneShift = 1.0;
constexpr double kBarLow = 0.05;
constexpr double kBarHigh = 0.9;
constexpr char kImageMagic[4] = {'M', 'O', 'A', 'B'};

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

enum class BarPattern { Horizontal, Vertical, Cross };

// The two orientations also differ in thickness so the pattern bit survives
// global average pooling from the very first training steps.
std::vector<double> bar_image(BarPattern pattern, double noise, Rng& rng) {
    std::vector<double> img(kImagePixels, kBarLow);
    const std::size_t h_lo = kImageSide / 2 - 2, h_hi = kImageSide / 2 + 2;   // 4 rows
    const std::size_t v_lo = kImageSide / 2 - 5, v_hi = kImageSide / 2 + 5;   // 10 columns
    for (std::size_t r = 0; r < kImageSide; ++r)
        for (std::size_t c = 0; c < kImageSide; ++c) {
            const bool in_h = r >= h_lo && r < h_hi;
            const bool in_v = c >= v_lo && c < v_hi;
            const bool lit = (pattern == BarPattern::Horizontal && in_h) ||
                             (pattern == BarPattern::Vertical && in_v) ||
                             (pattern == BarPattern::Cross && (in_h || in_v));
            if (lit) img[r * kImageSide + c] = kBarHigh;
        }
    if (noise > 0.0) {
        std::normal_distribution<double> jitter(0.0, noise);
        for (double& p : img) p = clamp01(p + jitter(rng));
    }
    return img;
}

std::vector<double> gene_vector(const std::vector<std::size_t>& shifted, double direction,
                                double noise, Rng& rng) {
    std::vector<double> genes(kGeneCount, 0.0);
    for (std::size_t idx : shifted) genes[idx] = direction * kGeneShift;
    if (noise > 0.0) {
        std::normal_distribution<double> jitter(0.0, noise);
        for (std::size_t i = 0; i < kMutationIndex; ++i) genes[i] += jitter(rng);
    }
    genes[kMutationIndex] = double(std::uniform_int_distribution<int>(0, 1)(rng));
    return genes;
}

std::vector<std::size_t> pick_shifted_indices(Rng& rng) {
    std::vector<std::size_t> all(kMutationIndex);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(kShiftedCnvCount);
    std::sort(all.begin(), all.end());
    return all;
}

void format_double(std::string& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

}  // namespace

InteractionMode parse_interaction_mode(const std::string& name) {
    if (name == "xor") return InteractionMode::XorCrossModal;
    if (name == "easy") return InteractionMode::UnimodalEasy;
    throw std::invalid_argument("unknown interaction mode '" + name + "' (expected xor or easy)");
}

std::string to_string(InteractionMode mode) {
    return mode == InteractionMode::XorCrossModal ? "xor" : "easy";
}

std::vector<Sample> generate(const GeneratorSpec& spec) {
    for (long c : spec.class_counts)
        if (c <= 0) throw std::invalid_argument("class counts must be positive");
    if (spec.noise < 0.0) throw std::invalid_argument("noise level must be non-negative");

    Rng rng(spec.seed);
    const std::vector<std::size_t> shifted = pick_shifted_indices(rng);

    std::vector<Sample> samples;
    samples.reserve(std::size_t(spec.class_counts[0] + spec.class_counts[1] + spec.class_counts[2]));
    std::uniform_int_distribution<int> coin(0, 1);

    for (int label = 0; label < 3; ++label) {
        for (long k = 0; k < spec.class_counts[std::size_t(label)]; ++k) {
            Sample s;
            s.label = label;
            if (spec.mode == InteractionMode::XorCrossModal) {
                // class 0 <- (u=0, v=0); class 1 <- (1, 1); class 2 <- u != v.
                int u = 0, v = 0;
                if (label == 1) u = v = 1;
                if (label == 2) {
                    u = coin(rng);
                    v = 1 - u;
                }
                s.image = bar_image(u == 0 ? BarPattern::Horizontal : BarPattern::Vertical,
                                    spec.noise, rng);
                s.genes = gene_vector(shifted, v == 0 ? -1.0 : 1.0, spec.noise, rng);
            } else {
                const BarPattern patterns[] = {BarPattern::Horizontal, BarPattern::Vertical,
                                               BarPattern::Cross};
                const double directions[] = {-1.0, 0.0, 1.0};
                s.image = bar_image(patterns[label], spec.noise, rng);
                s.genes = gene_vector(shifted, directions[label], spec.noise, rng);
            }
            samples.push_back(std::move(s));
        }
    }

    std::shuffle(samples.begin(), samples.end(), rng);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char buf[24];
        std::snprintf(buf, sizeof(buf), "%06zu", i);
        samples[i].sample_id = std::string("s") + buf;
        samples[i].group_id = std::string("grp") + buf;
    }
    return samples;
}

DatasetSplit split(const std::vector<Sample>& samples, double test_fraction, int replicas,
                   std::uint64_t seed, double replica_image_noise) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw std::invalid_argument("test_fraction must lie in (0, 1)");
    if (replicas < 1) throw std::invalid_argument("replicas must be >= 1");

    std::vector<std::string> groups;
    std::unordered_set<std::string> seen;
    for (const Sample& s : samples)
        if (seen.insert(s.group_id).second) groups.push_back(s.group_id);
    if (groups.size() < 2)
        throw StateError("split needs at least 2 groups, got " + std::to_string(groups.size()));

    Rng rng(seed);
    std::shuffle(groups.begin(), groups.end(), rng);
    std::size_t test_groups = std::size_t(std::llround(test_fraction * double(groups.size())));
    test_groups = std::max<std::size_t>(1, std::min(test_groups, groups.size() - 1));
    std::unordered_set<std::string> test_set(groups.begin(), groups.begin() + long(test_groups));

    DatasetSplit out;
    out.replicas = replicas;
    out.seed = seed;
    std::normal_distribution<double> jitter(0.0, replica_image_noise);
    for (const Sample& s : samples) {
        if (!test_set.contains(s.group_id)) {
            out.train.push_back(s);
            continue;
        }
        out.test.push_back(s);
        for (int r = 1; r < replicas; ++r) {
            Sample copy = s;  // genes and label carried over
            copy.sample_id += "_p" + std::to_string(r);
            if (replica_image_noise > 0.0)
                for (double& p : copy.image) p = clamp01(p + jitter(rng));
            out.test.push_back(std::move(copy));
        }
    }
    return out;
}

std::string sidecar_path(const std::string& csv_path) {
    if (csv_path.size() >= 4 && csv_path.ends_with(".csv"))
        return csv_path.substr(0, csv_path.size() - 4) + ".img";
    return csv_path + ".img";
}

void save_dataset(const std::vector<Sample>& samples, const std::string& csv_path) {
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw FormatError("cannot open '" + csv_path + "' for writing");
    std::string line = "sample_id,group_id,grade";
    for (std::size_t g = 0; g < kGeneCount; ++g) line += ",g" + std::to_string(g);
    csv << line << "\n";
    for (const Sample& s : samples) {
        if (s.genes.size() != kGeneCount)
            throw FormatError("sample '" + s.sample_id + "' has " + std::to_string(s.genes.size()) +
                              " gene values, expected " + std::to_string(kGeneCount));
        line.clear();
        line += s.sample_id + "," + s.group_id + "," + std::to_string(s.label);
        for (double g : s.genes) {
            line += ',';
            format_double(line, g);
        }
        csv << line << "\n";
    }
    if (!csv.flush()) throw FormatError("write to '" + csv_path + "' failed");

    std::ofstream img(sidecar_path(csv_path), std::ios::binary);
    if (!img) throw FormatError("cannot open '" + sidecar_path(csv_path) + "' for writing");
    img.write(kImageMagic, 4);
    const std::uint32_t header[3] = {std::uint32_t(samples.size()), std::uint32_t(kImageSide),
                                     std::uint32_t(kImageSide)};
    img.write(reinterpret_cast<const char*>(header), sizeof(header));
    std::vector<float> pixels(kImagePixels);
    for (const Sample& s : samples) {
        if (s.image.size() != kImagePixels)
            throw FormatError("sample '" + s.sample_id + "' has a malformed image buffer");
        for (std::size_t i = 0; i < kImagePixels; ++i) pixels[i] = float(s.image[i]);
        img.write(reinterpret_cast<const char*>(pixels.data()),
                  std::streamsize(pixels.size() * sizeof(float)));
    }
    if (!img.flush()) throw FormatError("write to '" + sidecar_path(csv_path) + "' failed");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

double parse_double(const std::string& field, std::size_t line_no) {
    char* end = nullptr;
    const double v = std::strtod(field.c_str(), &end);
    if (end == field.c_str() || *end != '\0')
        throw FormatError("line " + std::to_string(line_no) + ": bad numeric field '" + field + "'");
    return v;
}

}  // namespace

std::vector<Sample> load_dataset(const std::string& csv_path) {
    std::ifstream csv(csv_path, std::ios::binary);
    if (!csv) throw FormatError("cannot open '" + csv_path + "'");

    std::string line;
    if (!std::getline(csv, line)) throw FormatError("line 1: missing CSV header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t columns = split_csv_line(line).size();
    if (columns != 3 + kGeneCount)
        throw FormatError("line 1: header has " + std::to_string(columns - 3) +
                          " gene columns, expected " + std::to_string(kGeneCount));

    std::vector<Sample> samples;
    std::size_t line_no = 1;
    while (std::getline(csv, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != 3 + kGeneCount) {
            const std::size_t gene_cols = fields.size() >= 3 ? fields.size() - 3 : 0;
            throw FormatError("line " + std::to_string(line_no) + ": " + std::to_string(gene_cols) +
                              " gene columns, expected " + std::to_string(kGeneCount));
        }
        Sample s;
        s.sample_id = fields[0];
        s.group_id = fields[1];
        const double grade = parse_double(fields[2], line_no);
        if (grade != 0.0 && grade != 1.0 && grade != 2.0)
            throw FormatError("line " + std::to_string(line_no) + ": grade must be 0, 1 or 2");
        s.label = int(grade);
        s.genes.reserve(kGeneCount);
        for (std::size_t g = 0; g < kGeneCount; ++g) s.genes.push_back(parse_double(fields[3 + g], line_no));
        samples.push_back(std::move(s));
    }

    const std::string img_path = sidecar_path(csv_path);
    std::ifstream img(img_path, std::ios::binary);
    if (!img) throw FormatError("cannot open sidecar '" + img_path + "'");
    char magic[4];
    if (!img.read(magic, 4) || std::memcmp(magic, kImageMagic, 4) != 0)
        throw FormatError("sidecar '" + img_path + "': bad magic at offset 0");
    std::uint32_t header[3];
    if (!img.read(reinterpret_cast<char*>(header), sizeof(header)))
        throw FormatError("sidecar '" + img_path + "': truncated header at offset 4");
    if (header[0] != samples.size())
        throw FormatError("sidecar '" + img_path + "': image count " + std::to_string(header[0]) +
                          " does not match " + std::to_string(samples.size()) + " CSV rows");
    if (header[1] != kImageSide || header[2] != kImageSide)
        throw FormatError("sidecar '" + img_path + "': image extent " + std::to_string(header[1]) +
                          "x" + std::to_string(header[2]) + ", expected 32x32");
    std::vector<float> pixels(kImagePixels);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!img.read(reinterpret_cast<char*>(pixels.data()),
                      std::streamsize(pixels.size() * sizeof(float))))
            throw FormatError("sidecar '" + img_path + "': truncated image " + std::to_string(i) +
                              " at offset " + std::to_string(16 + i * kImagePixels * sizeof(float)));
        samples[i].image.resize(kImagePixels);
        for (std::size_t p = 0; p < kImagePixels; ++p) samples[i].image[p] = double(pixels[p]);
    }
    return samples;
}

std::vector<Batch> batches(const std::vector<Sample>& samples, std::size_t batch_size,
                           bool shuffle, std::uint64_t seed) {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) {
        Rng rng(seed);
        std::shuffle(order.begin(), order.end(), rng);
    }

    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, order.size() - start);
        Batch batch;
        std::vector<double> images;
        std::vector<double> genes;
        images.reserve(count * kImagePixels);
        genes.reserve(count * kGeneCount);
        for (std::size_t k = 0; k < count; ++k) {
            const Sample& s = samples[order[start + k]];
            images.insert(images.end(), s.image.begin(), s.image.end());
            genes.insert(genes.end(), s.genes.begin(), s.genes.end());
            batch.labels.push_back(s.label);
            batch.ids.push_back(s.sample_id);
        }
        batch.images = Tensor({count, 1, kImageSide, kImageSide}, std::move(images));
        batch.genes = Tensor({count, kGeneCount}, std::move(genes));
        out.push_back(std::move(batch));
    }
    return out;
}

}  // namespace moab
