#include "moab/metrics.hpp"

#include <cstdio>
#include <fstream>

namespace moab {

long ConfusionMatrix::total() const {
    long n = 0;
    for (const auto& row : counts)
        for (long c : row) n += c;
    return n;
}

long ConfusionMatrix::false_positives(int k) const {
    long n = 0;
    for (std::size_t t = 0; t < 3; ++t)
        if (t != std::size_t(k)) n += counts[t][std::size_t(k)];
    return n;
}

long ConfusionMatrix::false_negatives(int k) const {
    long n = 0;
    for (std::size_t p = 0; p < 3; ++p)
        if (p != std::size_t(k)) n += counts[std::size_t(k)][p];
    return n;
}

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size())
        throw std::invalid_argument("confusion: " + std::to_string(preds.size()) +
                                    " predictions for " + std::to_string(labels.size()) + " labels");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] < 0 || preds[i] > 2 || labels[i] < 0 || labels[i] > 2)
            throw std::out_of_range("confusion: class index outside {0,1,2} at position " +
                                    std::to_string(i));
        ++cm.counts[std::size_t(labels[i])][std::size_t(preds[i])];
    }
    return cm;
}

namespace {

void require_nonempty(const ConfusionMatrix& cm, const char* what) {
    if (cm.total() == 0) throw std::domain_error(std::string(what) + " undefined for an empty confusion matrix");
}

}  // namespace

double accuracy(const ConfusionMatrix& cm) {
    require_nonempty(cm, "accuracy");
    long correct = 0;
    for (int k = 0; k < 3; ++k) correct += cm.true_positives(k);
    return double(correct) / double(cm.total());
}

double micro_f1(const ConfusionMatrix& cm) {
    require_nonempty(cm, "micro F1");
    long tp = 0, tp_fp = 0, tp_fn = 0;
    for (int k = 0; k < 3; ++k) {
        tp += cm.true_positives(k);
        tp_fp += cm.true_positives(k) + cm.false_positives(k);
        tp_fn += cm.true_positives(k) + cm.false_negatives(k);
    }
    const double precision = double(tp) / double(tp_fp);
    const double recall = double(tp) / double(tp_fn);
    return (precision + recall) / 2.0;
}

double per_class_f1(const ConfusionMatrix& cm, int class_index) {
    require_nonempty(cm, "per-class F1");
    if (class_index < 0 || class_index > 2)
        throw std::out_of_range("per_class_f1: class index outside {0,1,2}");
    const long tp = cm.true_positives(class_index);
    const long fp = cm.false_positives(class_index);
    const long fn = cm.false_negatives(class_index);
    // tp == 0 covers the never-predicted / never-present convention too.
    if (tp == 0) return 0.0;
    const double precision = double(tp) / double(tp + fp);
    const double recall = double(tp) / double(tp + fn);
    return 2.0 * precision * recall / (precision + recall);
}

double macro_f1(const ConfusionMatrix& cm) {
    return (per_class_f1(cm, 0) + per_class_f1(cm, 1) + per_class_f1(cm, 2)) / 3.0;
}

MetricsReport report_from(const ConfusionMatrix& cm) {
    MetricsReport r;
    for (int k = 0; k < 3; ++k) r.f1_per_class[std::size_t(k)] = per_class_f1(cm, k);
    r.f1_grade_iv = r.f1_per_class[2];
    r.f1_micro = micro_f1(cm);
    r.f1_macro = macro_f1(cm);
    r.accuracy = accuracy(cm);
    r.samples = cm.total();
    return r;
}

MetricsReport evaluate(std::span<const int> preds, std::span<const int> labels) {
    return report_from(confusion(preds, labels));
}

namespace {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string to_json(const MetricsReport& r) {
    std::string out = "{\n";
    out += "  \"samples\": " + std::to_string(r.samples) + ",\n";
    out += "  \"accuracy\": " + format_double(r.accuracy) + ",\n";
    out += "  \"f1_grade_ii\": " + format_double(r.f1_per_class[0]) + ",\n";
    out += "  \"f1_grade_iii\": " + format_double(r.f1_per_class[1]) + ",\n";
    out += "  \"f1_grade_iv\": " + format_double(r.f1_grade_iv) + ",\n";
    out += "  \"f1_micro\": " + format_double(r.f1_micro) + ",\n";
    out += "  \"f1_macro\": " + format_double(r.f1_macro) + "\n";
    out += "}\n";
    return out;
}

std::string to_table(const MetricsReport& r) {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof(buf), "  %-14s %8.4f\n", "accuracy", r.accuracy);
    out += buf;
    std::snprintf(buf, sizeof(buf), "  %-14s %8.4f\n", "F1 (grade IV)", r.f1_grade_iv);
    out += buf;
    std::snprintf(buf, sizeof(buf), "  %-14s %8.4f\n", "F1 micro", r.f1_micro);
    out += buf;
    std::snprintf(buf, sizeof(buf), "  %-14s %8.4f\n", "F1 macro", r.f1_macro);
    out += buf;
    std::snprintf(buf, sizeof(buf), "  %-14s %8ld\n", "samples", r.samples);
    out += buf;
    return out;
}

void write_embeddings_csv(const std::string& path, std::span<const std::string> ids,
                          std::span<const int> grades,
                          const std::vector<std::vector<double>>& embeddings) {
    if (ids.size() != grades.size() || ids.size() != embeddings.size())
        throw std::invalid_argument("write_embeddings_csv: mismatched row counts");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    const std::size_t width = embeddings.empty() ? 0 : embeddings.front().size();
    std::string line = "sample_id,grade";
    for (std::size_t e = 0; e < width; ++e) line += ",e" + std::to_string(e);
    out << line << "\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (embeddings[i].size() != width)
            throw std::invalid_argument("write_embeddings_csv: ragged embedding rows");
        line = ids[i] + "," + std::to_string(grades[i]);
        for (double v : embeddings[i]) line += "," + format_double(v);
        out << line << "\n";
    }
    if (!out.flush()) throw FormatError("write to '" + path + "' failed");
}

}  // namespace moab
