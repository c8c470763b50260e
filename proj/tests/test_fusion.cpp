#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "moab/fusion.hpp"
#include "support/gradcheck.hpp"

using namespace moab;
using moab::testing::max_gradient_error;
using moab::testing::random_signed_away_from_zero;
using moab::testing::random_uniform;

namespace {

// Independent double-loop oracle over plain vectors; pads internally.
enum class OuterOp { Add, Sub, Prod, Div };

std::vector<double> outer_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                 OuterOp op, double epsilon = kDivisionEpsilon) {
    const double pad = (op == OuterOp::Prod || op == OuterOp::Div) ? 1.0 : 0.0;
    std::vector<double> ap{pad}, bp{pad};
    ap.insert(ap.end(), a.begin(), a.end());
    bp.insert(bp.end(), b.begin(), b.end());
    std::vector<double> out(ap.size() * bp.size());
    for (std::size_t i = 0; i < ap.size(); ++i)
        for (std::size_t j = 0; j < bp.size(); ++j) {
            double v = 0.0;
            switch (op) {
                case OuterOp::Add: v = ap[i] + bp[j]; break;
                case OuterOp::Sub: v = ap[i] - bp[j]; break;
                case OuterOp::Prod: v = ap[i] * bp[j]; break;
                case OuterOp::Div: v = ap[i] / (bp[j] + epsilon); break;
            }
            out[i * bp.size() + j] = v;
        }
    return out;
}

std::vector<double> to_vector(const Tensor& t) {
    return {t.data().begin(), t.data().end()};
}

Tensor run_operator(const std::vector<double>& a, const std::vector<double>& b, OuterOp op) {
    Tensor ta({a.size()}, std::vector<double>(a));
    Tensor tb({b.size()}, std::vector<double>(b));
    switch (op) {
        case OuterOp::Add: return outer_addition(pad(ta, PadKind::Zero), pad(tb, PadKind::Zero));
        case OuterOp::Sub: return outer_subtraction(pad(ta, PadKind::Zero), pad(tb, PadKind::Zero));
        case OuterOp::Prod: return outer_product(pad(ta, PadKind::One), pad(tb, PadKind::One));
        case OuterOp::Div: return outer_division(pad(ta, PadKind::One), pad(tb, PadKind::One));
    }
    throw std::logic_error("unreachable");
}

}  // namespace

TEST_CASE("pad prepends the constant and passes gradients through") {
    Tensor v({2}, {5.0, 7.0});
    PaddedVector one = pad(v, PadKind::One);
    CHECK(to_vector(one.values) == std::vector<double>{1.0, 5.0, 7.0});
    PaddedVector zero = pad(v, PadKind::Zero);
    CHECK(to_vector(zero.values) == std::vector<double>{0.0, 5.0, 7.0});

    Tensor leaf({3}, {1.0, 2.0, 3.0}, true);
    sum(pad(leaf, PadKind::One).values).backward();
    for (double g : leaf.grad()) CHECK(g == 1.0);
}

TEST_CASE("outer operator hand examples for a=[2], b=[3]") {
    CHECK(to_vector(run_operator({2}, {3}, OuterOp::Prod)) == std::vector<double>{1, 3, 2, 6});
    CHECK(to_vector(run_operator({2}, {3}, OuterOp::Add)) == std::vector<double>{0, 3, 2, 5});
    CHECK(to_vector(run_operator({2}, {3}, OuterOp::Sub)) == std::vector<double>{0, -3, 2, -1});
    const std::vector<double> d = to_vector(run_operator({2}, {3}, OuterOp::Div));
    CHECK(d[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(d[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(d[2] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(d[3] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("all four operators match the double-loop oracle") {
    Rng rng(61);
    for (std::size_t dim : {3u, 5u, 32u}) {
        for (int rep = 0; rep < 5; ++rep) {
            const std::vector<double> a = to_vector(random_uniform({dim}, -2.0, 2.0, rng));
            const std::vector<double> b = to_vector(random_uniform({dim}, -2.0, 2.0, rng));
            for (OuterOp op : {OuterOp::Add, OuterOp::Sub, OuterOp::Prod, OuterOp::Div}) {
                const std::vector<double> expected = outer_oracle(a, b, op);
                const std::vector<double> got = to_vector(run_operator(a, b, op));
                REQUIRE(got.size() == expected.size());
                for (std::size_t i = 0; i < got.size(); ++i)
                    CHECK(std::abs(got[i] - expected[i]) < 1e-15);
            }
        }
    }
}

TEST_CASE("padded-identity rows and columns recover the originals exactly") {
    Rng rng(67);
    const Tensor a = random_uniform({32}, -3.0, 3.0, rng);
    const Tensor b = random_uniform({32}, -3.0, 3.0, rng);
    const PaddedVector a1 = pad(a, PadKind::One), b1 = pad(b, PadKind::One);
    const PaddedVector a0 = pad(a, PadKind::Zero), b0 = pad(b, PadKind::Zero);

    Tensor p = outer_product(a1, b1);
    Tensor d = outer_division(a1, b1);
    Tensor add_m = outer_addition(a0, b0);
    Tensor sub_m = outer_subtraction(a0, b0);
    for (std::size_t j = 0; j < 33; ++j) {
        CHECK(p.at({0, j}) == b1.values.data()[j]);
        CHECK(add_m.at({0, j}) == b0.values.data()[j]);
        CHECK(sub_m.at({0, j}) == -b0.values.data()[j]);
    }
    for (std::size_t i = 0; i < 33; ++i) {
        CHECK(p.at({i, 0}) == a1.values.data()[i]);
        CHECK(add_m.at({i, 0}) == a0.values.data()[i]);
        CHECK(sub_m.at({i, 0}) == a0.values.data()[i]);
        CHECK(d.at({i, 0}) == a1.values.data()[i] / (1.0 + kDivisionEpsilon));
    }
}

TEST_CASE("outer product of zeros keeps only the padded row and column") {
    Tensor zeros({4}, 0.0);
    Rng rng(71);
    Tensor b = random_uniform({4}, -2.0, 2.0, rng);
    Tensor p = outer_product(pad(zeros, PadKind::One), pad(b, PadKind::One));
    for (std::size_t j = 0; j < 5; ++j) CHECK(p.at({0, j}) == pad(b, PadKind::One).values.data()[j]);
    for (std::size_t i = 1; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) CHECK(p.at({i, j}) == 0.0);
}

TEST_CASE("division by an exact zero stays finite and sigmoid saturates") {
    Tensor a({2}, {2.0, -2.0});
    Tensor b({2}, {0.0, 1.0});
    Tensor d = outer_division(pad(a, PadKind::One), pad(b, PadKind::One));
    for (double v : d.data()) CHECK(std::isfinite(v));
    CHECK(d.at({1, 1}) == doctest::Approx(2.0 / kDivisionEpsilon).epsilon(1e-12));
    Tensor squashed = sigmoid(d);
    for (double v : squashed.data()) {
        CHECK(std::isfinite(v));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("swapping modalities transposes the branch matrices") {
    Rng rng(73);
    const Tensor a = random_uniform({6}, -2.0, 2.0, rng);
    const Tensor b = random_uniform({6}, -2.0, 2.0, rng);
    Tensor p_ab = outer_product(pad(a, PadKind::One), pad(b, PadKind::One));
    Tensor p_ba = outer_product(pad(b, PadKind::One), pad(a, PadKind::One));
    Tensor a_ab = outer_addition(pad(a, PadKind::Zero), pad(b, PadKind::Zero));
    Tensor a_ba = outer_addition(pad(b, PadKind::Zero), pad(a, PadKind::Zero));
    Tensor s_ab = outer_subtraction(pad(a, PadKind::Zero), pad(b, PadKind::Zero));
    Tensor s_ba = outer_subtraction(pad(b, PadKind::Zero), pad(a, PadKind::Zero));
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 7; ++j) {
            CHECK(p_ab.at({i, j}) == p_ba.at({j, i}));
            CHECK(a_ab.at({i, j}) == a_ba.at({j, i}));
            CHECK(s_ab.at({i, j}) == -s_ba.at({j, i}));
        }
}

TEST_CASE("subtraction equals addition of the negated operand; diagonal vanishes for a=b") {
    Rng rng(79);
    const Tensor a = random_uniform({5}, -2.0, 2.0, rng);
    const Tensor b = random_uniform({5}, -2.0, 2.0, rng);
    std::vector<double> neg_b;
    for (double v : b.data()) neg_b.push_back(-v);
    Tensor s = outer_subtraction(pad(a, PadKind::Zero), pad(b, PadKind::Zero));
    Tensor a_neg = outer_addition(pad(a, PadKind::Zero),
                                  pad(Tensor({5}, std::move(neg_b)), PadKind::Zero));
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(s.data()[i] == a_neg.data()[i]);

    Tensor self = outer_subtraction(pad(a, PadKind::Zero), pad(a, PadKind::Zero));
    for (std::size_t i = 0; i < 6; ++i) CHECK(self.at({i, i}) == 0.0);
}

TEST_CASE("pad-kind mismatches are contract errors") {
    Tensor a({2}, {1.0, 2.0});
    Tensor b({2}, {3.0, 4.0});
    CHECK_THROWS_AS(outer_product(pad(a, PadKind::Zero), pad(b, PadKind::One)),
                    std::invalid_argument);
    CHECK_THROWS_AS(outer_addition(pad(a, PadKind::One), pad(b, PadKind::Zero)),
                    std::invalid_argument);
    CHECK_THROWS_AS(outer_subtraction(pad(a, PadKind::Zero), pad(b, PadKind::One)),
                    std::invalid_argument);
    CHECK_THROWS_AS(outer_division(pad(a, PadKind::Zero), pad(b, PadKind::Zero)),
                    std::invalid_argument);
}

TEST_CASE("outer operator gradients match finite differences") {
    Rng rng(83);
    for (int rep = 0; rep < 3; ++rep) {
        Tensor a = random_uniform({4}, -2.0, 2.0, rng, true);
        Tensor b = random_signed_away_from_zero({4}, 0.15, 2.0, rng, true);
        auto check = [&](auto make) { CHECK(max_gradient_error(make, {a, b}, rng) < 1e-4); };
        check([&] { return sum(sigmoid(outer_addition(pad(a, PadKind::Zero), pad(b, PadKind::Zero)))); });
        check([&] { return sum(sigmoid(outer_subtraction(pad(a, PadKind::Zero), pad(b, PadKind::Zero)))); });
        check([&] { return sum(sigmoid(outer_product(pad(a, PadKind::One), pad(b, PadKind::One)))); });
        check([&] { return sum(sigmoid(outer_division(pad(a, PadKind::One), pad(b, PadKind::One), 1e-9))); });
    }
}

TEST_CASE("fused branch stack has channel order A, S, P, D and lies in (0,1)") {
    Rng rng(89);
    const Tensor a = random_uniform({32}, -2.0, 2.0, rng);
    // denominators away from zero keep the division branch off the sigmoid
    // saturation plateau, so strict openness is checkable
    const Tensor b = random_signed_away_from_zero({32}, 0.1, 2.0, rng);
    Tensor stack = fused_branch_stack(a, b);
    REQUIRE(stack.shape() == Tensor::Shape{4, 33, 33});
    for (double v : stack.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }

    const PaddedVector a0 = pad(a, PadKind::Zero), b0 = pad(b, PadKind::Zero);
    const PaddedVector a1 = pad(a, PadKind::One), b1 = pad(b, PadKind::One);
    const Tensor planes[] = {sigmoid(outer_addition(a0, b0)), sigmoid(outer_subtraction(a0, b0)),
                             sigmoid(outer_product(a1, b1)), sigmoid(outer_division(a1, b1))};
    for (std::size_t ch = 0; ch < 4; ++ch)
        for (std::size_t i = 0; i < 33; ++i)
            for (std::size_t j = 0; j < 33; ++j)
                CHECK(stack.at({ch, i, j}) == planes[ch].at({i, j}));
}

// ---------------------------------------------------------------------------
// Fusion heads
// ---------------------------------------------------------------------------

namespace {

FusionHead make_head(FusionVariant variant, std::uint64_t seed = 5) {
    FusionConfig config;
    config.variant = variant;
    Rng rng(seed);
    return FusionHead(config, rng);
}

Parameter find_param(const FusionHead& head, const std::string& name) {
    for (const Parameter& p : head.parameters())
        if (p.name == name) return p;
    throw std::runtime_error("missing parameter " + name);
}

}  // namespace

TEST_CASE("head shapes: logits [3], flatten width 1089, concat ratio 4") {
    Rng rng(97);
    const Tensor a = random_uniform({32}, -1.0, 1.0, rng);
    const Tensor b = random_uniform({32}, -1.0, 1.0, rng);
    for (FusionVariant variant : {FusionVariant::Moab, FusionVariant::Concat, FusionVariant::OafOnly,
                                  FusionVariant::Dbf, FusionVariant::StdAdd}) {
        FusionHead head = make_head(variant);
        FusionOutput out = head.forward(a, b);
        CHECK(out.logits.shape() == Tensor::Shape{3});
        CHECK(out.embedding.shape() == Tensor::Shape{64});
    }

    FusionHead moab = make_head(FusionVariant::Moab);
    CHECK(moab.config().flatten_width() == 1089);
    CHECK(find_param(moab, "head.fc1.weight").value.dim(1) == 1089);
    const std::size_t naive_concat = 4 * moab.config().flatten_width();
    CHECK(naive_concat == 4356);
    CHECK(naive_concat / moab.config().flatten_width() == 4);
}

TEST_CASE("conv selector weights expose single branches") {
    Rng rng(101);
    const Tensor a = random_uniform({32}, -1.0, 1.0, rng);
    const Tensor b = random_uniform({32}, -1.0, 1.0, rng);

    SUBCASE("MOAB: weight [0,0,1,0] reproduces sigmoid(P)") {
        FusionHead head = make_head(FusionVariant::Moab);
        Parameter conv_w = find_param(head, "head.conv.weight");
        Parameter conv_b = find_param(head, "head.conv.bias");
        const double selector[] = {0.0, 0.0, 1.0, 0.0};
        std::copy(selector, selector + 4, conv_w.value.data().begin());
        conv_b.value.data()[0] = 0.0;

        Tensor condensed = head.condensed_map(a, b);
        Tensor expected = sigmoid(outer_product(pad(a, PadKind::One), pad(b, PadKind::One)));
        for (std::size_t i = 0; i < 33; ++i)
            for (std::size_t j = 0; j < 33; ++j)
                CHECK(condensed.at({0, i, j}) == expected.at({i, j}));
    }
    SUBCASE("DBF: weight [1,0] reproduces sigmoid(A)") {
        FusionHead head = make_head(FusionVariant::Dbf);
        Parameter conv_w = find_param(head, "head.conv.weight");
        Parameter conv_b = find_param(head, "head.conv.bias");
        conv_w.value.data()[0] = 1.0;
        conv_w.value.data()[1] = 0.0;
        conv_b.value.data()[0] = 0.0;

        Tensor condensed = head.condensed_map(a, b);
        Tensor expected = sigmoid(outer_addition(pad(a, PadKind::Zero), pad(b, PadKind::Zero)));
        for (std::size_t i = 0; i < 33; ++i)
            for (std::size_t j = 0; j < 33; ++j)
                CHECK(condensed.at({0, i, j}) == expected.at({i, j}));
    }
    SUBCASE("OAF: condensed map is sigmoid(A) with no conv stage") {
        FusionHead head = make_head(FusionVariant::OafOnly);
        Tensor condensed = head.condensed_map(a, b);
        Tensor expected = sigmoid(outer_addition(pad(a, PadKind::Zero), pad(b, PadKind::Zero)));
        for (std::size_t i = 0; i < 33; ++i)
            for (std::size_t j = 0; j < 33; ++j)
                CHECK(condensed.at({0, i, j}) == expected.at({i, j}));
    }
}

TEST_CASE("concat head with zeroed parameters gives zero logits") {
    FusionHead head = make_head(FusionVariant::Concat);
    for (Parameter& p : head.parameters())
        std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
    Rng rng(103);
    FusionOutput out = head.forward(random_uniform({32}, -1.0, 1.0, rng),
                                    random_uniform({32}, -1.0, 1.0, rng));
    for (double v : out.logits.data()) CHECK(v == 0.0);
}

TEST_CASE("standard addition head: a = -b zeroes the expansion input") {
    FusionHead head = make_head(FusionVariant::StdAdd);
    Rng rng(107);
    Tensor a = random_uniform({32}, -1.0, 1.0, rng);
    std::vector<double> neg(a.data().begin(), a.data().end());
    for (double& v : neg) v = -v;
    Tensor b({32}, std::move(neg));

    Tensor summed = add(a, b);
    for (double v : summed.data()) CHECK(v == 0.0);

    // zero expansion input and zero bias squash to exactly 0.5 everywhere
    Tensor features = sigmoid(linear(reshape(summed, {1, 32}),
                                     find_param(head, "head.expand.weight").value,
                                     find_param(head, "head.expand.bias").value));
    for (double v : features.data()) CHECK(v == 0.5);
}

TEST_CASE("standard addition head parameter count matches the OAF head within 5%") {
    const std::size_t oaf = make_head(FusionVariant::OafOnly).parameter_count();
    const std::size_t std_add = make_head(FusionVariant::StdAdd).parameter_count();
    const double ratio = double(std_add) / double(oaf);
    CHECK(ratio > 0.95);
    CHECK(ratio < 1.05);
}

TEST_CASE("fusion forwards are deterministic in eval mode") {
    Rng rng(109);
    const Tensor a = random_uniform({32}, -1.0, 1.0, rng);
    const Tensor b = random_uniform({32}, -1.0, 1.0, rng);
    for (FusionVariant variant : {FusionVariant::Moab, FusionVariant::Concat, FusionVariant::OafOnly,
                                  FusionVariant::Dbf, FusionVariant::StdAdd}) {
        FusionHead head = make_head(variant);
        Tensor first = head.forward(a, b).logits;
        Tensor second = head.forward(a, b).logits;
        for (std::size_t i = 0; i < 3; ++i) CHECK(first.data()[i] == second.data()[i]);
    }
}

TEST_CASE("batched forward equals per-sample forwards") {
    Rng rng(113);
    const Tensor a = random_uniform({3, 32}, -1.0, 1.0, rng);
    const Tensor b = random_uniform({3, 32}, -1.0, 1.0, rng);
    FusionHead head = make_head(FusionVariant::Moab);
    Tensor batched = head.forward(a, b).logits;
    for (std::size_t r = 0; r < 3; ++r) {
        Tensor single = head.forward(row(a, r), row(b, r)).logits;
        for (std::size_t c = 0; c < 3; ++c)
            CHECK(batched.at({r, c}) == doctest::Approx(single.data()[c]).epsilon(1e-14));
    }
}

TEST_CASE("fusion head gradients w.r.t. both embeddings match finite differences") {
    Rng rng(127);
    for (FusionVariant variant : {FusionVariant::Moab, FusionVariant::Concat, FusionVariant::OafOnly,
                                  FusionVariant::Dbf, FusionVariant::StdAdd}) {
        FusionHead head = make_head(variant);
        Tensor a = random_uniform({32}, -1.0, 1.0, rng, true);
        // division-branch denominators stay away from the pole
        Tensor b = random_signed_away_from_zero({32}, 0.15, 1.0, rng, true);
        const double err = max_gradient_error(
            [&] {
                const std::vector<int> label = {1};
                FusionOutput out = head.forward(a, b);
                return cross_entropy(reshape(out.logits, {1, 3}), label);
            },
            {a, b}, rng);
        CHECK_MESSAGE(err < 1e-4, "variant ", to_string(variant));
    }
}

TEST_CASE("wrong embedding width is a dimension error") {
    FusionHead head = make_head(FusionVariant::Moab);
    Tensor short_vec({8}, 1.0);
    Tensor ok({32}, 1.0);
    CHECK_THROWS_AS(head.forward(short_vec, ok), ShapeError);
}
