#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "moab/data.hpp"
#include "moab/fusion.hpp"
#include "moab/harness.hpp"
#include "moab/metrics.hpp"

namespace py = pybind11;

namespace {

moab::Tensor vector_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 1) throw moab::ShapeError("expected a 1-d array");
    std::vector<double> data(a.data(), a.data() + a.size());
    return moab::Tensor({std::size_t(a.size())}, std::move(data));
}

py::array_t<double> to_numpy(const moab::Tensor& t) {
    std::vector<py::ssize_t> shape;
    for (std::size_t d : t.shape()) shape.push_back(py::ssize_t(d));
    py::array_t<double> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

moab::PadKind parse_pad_kind(const std::string& kind) {
    if (kind == "one") return moab::PadKind::One;
    if (kind == "zero") return moab::PadKind::Zero;
    throw std::invalid_argument("pad kind must be 'one' or 'zero', got '" + kind + "'");
}

moab::ConfusionMatrix matrix_from(const py::array_t<long, py::array::c_style | py::array::forcecast>& cm) {
    if (cm.ndim() != 2 || cm.shape(0) != 3 || cm.shape(1) != 3)
        throw moab::ShapeError("confusion matrix must be 3x3");
    moab::ConfusionMatrix out;
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t p = 0; p < 3; ++p) out.counts[t][p] = cm.at(t, p);
    return out;
}

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using LongArray = py::array_t<long, py::array::c_style | py::array::forcecast>;

}  // namespace

PYBIND11_MODULE(_moab, m) {
    m.doc() = "Outer-arithmetic multi-modal fusion core";

    m.def(
        "pad",
        [](const DoubleArray& v, const std::string& kind) {
            return to_numpy(moab::pad(vector_tensor(v), parse_pad_kind(kind)).values);
        },
        py::arg("v"), py::arg("kind"),
        "Prepend the pad constant (1.0 for 'one', 0.0 for 'zero') to a vector");

    m.def(
        "outer_product",
        [](const DoubleArray& a, const DoubleArray& b) {
            return to_numpy(moab::outer_product(moab::pad(vector_tensor(a), moab::PadKind::One),
                                                moab::pad(vector_tensor(b), moab::PadKind::One)));
        },
        py::arg("a"), py::arg("b"),
        "P[i][j] = a1[i] * b1[j] over 1-padded vectors, an (N+1) x (M+1) matrix");

    m.def(
        "outer_division",
        [](const DoubleArray& a, const DoubleArray& b, double epsilon) {
            return to_numpy(moab::outer_division(moab::pad(vector_tensor(a), moab::PadKind::One),
                                                 moab::pad(vector_tensor(b), moab::PadKind::One),
                                                 epsilon));
        },
        py::arg("a"), py::arg("b"), py::arg("epsilon") = moab::kDivisionEpsilon,
        "D[i][j] = a1[i] / (b1[j] + epsilon) over 1-padded vectors");

    m.def(
        "outer_addition",
        [](const DoubleArray& a, const DoubleArray& b) {
            return to_numpy(moab::outer_addition(moab::pad(vector_tensor(a), moab::PadKind::Zero),
                                                 moab::pad(vector_tensor(b), moab::PadKind::Zero)));
        },
        py::arg("a"), py::arg("b"), "A[i][j] = a0[i] + b0[j] over 0-padded vectors");

    m.def(
        "outer_subtraction",
        [](const DoubleArray& a, const DoubleArray& b) {
            return to_numpy(moab::outer_subtraction(moab::pad(vector_tensor(a), moab::PadKind::Zero),
                                                    moab::pad(vector_tensor(b), moab::PadKind::Zero)));
        },
        py::arg("a"), py::arg("b"), "S[i][j] = a0[i] - b0[j] over 0-padded vectors");

    m.def(
        "fused_branch_stack",
        [](const DoubleArray& a, const DoubleArray& b, double epsilon) {
            return to_numpy(moab::fused_branch_stack(vector_tensor(a), vector_tensor(b), epsilon));
        },
        py::arg("a"), py::arg("b"), py::arg("epsilon") = moab::kDivisionEpsilon,
        "Squashed A, S, P, D branches stacked as channels");

    // Metrics
    m.def(
        "confusion",
        [](const std::vector<int>& preds, const std::vector<int>& labels) {
            const moab::ConfusionMatrix cm = moab::confusion(preds, labels);
            py::array_t<long> out({3, 3});
            for (std::size_t t = 0; t < 3; ++t)
                for (std::size_t p = 0; p < 3; ++p) out.mutable_at(t, p) = cm.counts[t][p];
            return out;
        },
        py::arg("preds"), py::arg("labels"), "3x3 counts, rows = true grade, cols = predicted");
    m.def("micro_f1", [](const LongArray& cm) { return moab::micro_f1(matrix_from(cm)); });
    m.def("macro_f1", [](const LongArray& cm) { return moab::macro_f1(matrix_from(cm)); });
    m.def("per_class_f1",
          [](const LongArray& cm, int k) { return moab::per_class_f1(matrix_from(cm), k); });
    m.def("accuracy", [](const LongArray& cm) { return moab::accuracy(matrix_from(cm)); });

    // Synthetic data
    m.def(
        "generate",
        [](std::array<long, 3> classes, const std::string& mode, double noise, std::uint64_t seed) {
            moab::GeneratorSpec spec;
            spec.class_counts = classes;
            spec.mode = moab::parse_interaction_mode(mode);
            spec.noise = noise;
            spec.seed = seed;
            const std::vector<moab::Sample> samples = moab::generate(spec);
            const py::ssize_t n = py::ssize_t(samples.size());
            py::array_t<double> images({n, py::ssize_t(moab::kImageSide), py::ssize_t(moab::kImageSide)});
            py::array_t<double> genes({n, py::ssize_t(moab::kGeneCount)});
            py::array_t<long> labels(n);
            py::list ids, groups;
            for (py::ssize_t i = 0; i < n; ++i) {
                const moab::Sample& s = samples[std::size_t(i)];
                std::copy(s.image.begin(), s.image.end(), images.mutable_data(i, 0, 0));
                std::copy(s.genes.begin(), s.genes.end(), genes.mutable_data(i, 0));
                labels.mutable_at(i) = s.label;
                ids.append(s.sample_id);
                groups.append(s.group_id);
            }
            py::dict out;
            out["images"] = images;
            out["genes"] = genes;
            out["labels"] = labels;
            out["ids"] = ids;
            out["groups"] = groups;
            return out;
        },
        py::arg("classes") = std::array<long, 3>{396, 408, 654}, py::arg("mode") = "xor",
        py::arg("noise") = 0.1, py::arg("seed") = 1,
        "Synthetic paired dataset with the 79-CNV + mutation gene schema");

    // Fusion head over a pair of embeddings
    py::class_<moab::FusionHead>(m, "FusionHead",
                                 "Fusion classifier head over two 32-wide embeddings")
        .def(py::init([](const std::string& variant, std::uint64_t seed) {
                 moab::FusionConfig config;
                 config.variant = moab::fusion_variant_from_string(variant);
                 moab::Rng rng(seed);
                 return moab::FusionHead(config, rng);
             }),
             py::arg("variant") = "moab", py::arg("seed") = 1)
        .def(
            "logits",
            [](const moab::FusionHead& head, const DoubleArray& a, const DoubleArray& b) {
                return to_numpy(head.forward(vector_tensor(a), vector_tensor(b)).logits);
            },
            py::arg("a"), py::arg("b"), "Eval-mode class logits for one embedding pair")
        .def(
            "embedding",
            [](const moab::FusionHead& head, const DoubleArray& a, const DoubleArray& b) {
                return to_numpy(head.forward(vector_tensor(a), vector_tensor(b)).embedding);
            },
            py::arg("a"), py::arg("b"), "Eval-mode penultimate activation")
        .def("parameter_count", &moab::FusionHead::parameter_count);

    m.attr("DIVISION_EPSILON") = moab::kDivisionEpsilon;
    m.attr("__version__") = "1.0.0";
}
