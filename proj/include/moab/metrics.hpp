#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "moab/common.hpp"

namespace moab {

// 3x3 counts, rows = true grade, columns = predicted grade.
struct ConfusionMatrix {
    std::array<std::array<long, 3>, 3> counts{};

    long total() const;
    long true_positives(int k) const { return counts[std::size_t(k)][std::size_t(k)]; }
    long false_positives(int k) const;  // column sum minus TP
    long false_negatives(int k) const;  // row sum minus TP
};

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels);

double accuracy(const ConfusionMatrix& cm);

// Micro-averaged F1: the arithmetic mean of micro precision and micro recall
// computed from pooled counts. Coincides with accuracy for single-label
// multiclass predictions.
double micro_f1(const ConfusionMatrix& cm);

// Per-class F1 with the zero-division convention F1 = 0 when the class is
// never predicted and never present.
double per_class_f1(const ConfusionMatrix& cm, int class_index);

double macro_f1(const ConfusionMatrix& cm);

struct MetricsReport {
    std::array<double, 3> f1_per_class{};
    double f1_grade_iv = 0.0;
    double f1_micro = 0.0;
    double f1_macro = 0.0;
    double accuracy = 0.0;
    long samples = 0;
};

MetricsReport evaluate(std::span<const int> preds, std::span<const int> labels);
MetricsReport report_from(const ConfusionMatrix& cm);

// Flat key/value JSON with a stable key order; identical reports serialize
// to identical bytes.
std::string to_json(const MetricsReport& report);

std::string to_table(const MetricsReport& report);

// Embedding CSV: header sample_id,grade,e0..e{d-1}; doubles printed with
// round-trip precision.
void write_embeddings_csv(const std::string& path, std::span<const std::string> ids,
                          std::span<const int> grades,
                          const std::vector<std::vector<double>>& embeddings);

}  // namespace moab
