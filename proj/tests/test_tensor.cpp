#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "moab/nn.hpp"
#include "moab/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace moab;
using moab::testing::max_gradient_error;
using moab::testing::random_uniform;

TEST_CASE("tensor construction enforces shape/data agreement") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>{1.0}), ShapeError);
    CHECK_THROWS_AS(Tensor({0, 3}, 1.0), ShapeError);
    Tensor t({2, 3}, 0.5, true);
    CHECK(t.size() == 6);
    CHECK(t.grad().size() == t.size());
}

TEST_CASE("matmul identity and hand examples") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor v({2, 1}, {3, 4});
    Tensor out = matmul(eye, v);
    CHECK(out.at({0, 0}) == 3.0);
    CHECK(out.at({1, 0}) == 4.0);

    Tensor rowvec({1, 2}, {1, 2});
    CHECK(matmul(rowvec, v).item() == doctest::Approx(11.0).epsilon(1e-15));

    const Tensor bad({3, 2}, 1.0);
    CHECK_THROWS_WITH_AS(matmul(eye, bad), doctest::Contains("[2x2]"), ShapeError);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(7);
    Tensor x = random_uniform({3, 3}, -1.0, 1.0, rng, true);
    Tensor y = random_uniform({3, 3}, -1.0, 1.0, rng, true);
    const double err = max_gradient_error([&] { return sum(matmul(x, y)); }, {x, y}, rng);
    CHECK(err < 1e-6);
}

TEST_CASE("relu, sigmoid and softmax hand values") {
    Tensor x({3}, {-1.0, 0.0, 2.0});
    Tensor r = relu(x);
    CHECK(r.data()[0] == 0.0);
    CHECK(r.data()[1] == 0.0);
    CHECK(r.data()[2] == 2.0);

    CHECK(sigmoid(Tensor({1}, {0.0})).item() == 0.5);

    Tensor big({1, 2}, {1000.0, 1000.0});
    Tensor sm = softmax_rows(big);
    CHECK(sm.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(sm.data()[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one and sigmoid stays inside (0,1)") {
    Rng rng(11);
    Tensor x = random_uniform({8, 5}, -30.0, 30.0, rng);
    Tensor sm = softmax_rows(x);
    for (std::size_t r = 0; r < 8; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < 5; ++c) total += sm.at({r, c});
        CHECK(std::abs(total - 1.0) < 1e-12);
    }
    // strict openness holds while exp(-|x|) stays above double rounding
    Tensor wide = random_uniform({1, 64}, -30.0, 30.0, rng);
    Tensor squashed = sigmoid(wide);
    for (double v : squashed.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    Tensor extreme({2}, {-700.0, 700.0});
    Tensor saturated = sigmoid(extreme);
    CHECK(saturated.data()[0] > 0.0);   // tiny but positive, no underflow to NaN
    CHECK(saturated.data()[0] < 1e-300);
    CHECK(saturated.data()[1] == 1.0);  // clean saturation at the top
}

TEST_CASE("activation gradients match finite differences") {
    Rng rng(13);
    for (int point = 0; point < 5; ++point) {
        Tensor x = random_uniform({2, 4}, -2.0, 2.0, rng, true);
        CHECK(max_gradient_error([&] { return sum(sigmoid(x)); }, {x}, rng) < 1e-4);
        CHECK(max_gradient_error([&] { return sum(softmax_rows(x)); }, {x}, rng) < 1e-4);
        CHECK(max_gradient_error([&] { return sum(mul(relu(x), x)); }, {x}, rng) < 1e-4);
    }
}

TEST_CASE("layer_norm collapses constant rows to beta") {
    Tensor x({1, 3}, {5.0, 5.0, 5.0});
    Tensor gamma({3}, 1.0);
    Tensor beta({3}, 0.0);
    Tensor out = layer_norm(x, gamma, beta);
    for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("layer_norm hand value for [1, 3]") {
    Tensor x({1, 2}, {1.0, 3.0});
    Tensor gamma({2}, 1.0);
    Tensor beta({2}, 0.0);
    Tensor out = layer_norm(x, gamma, beta);
    // mean 2, variance 1, rstd = 1/sqrt(1 + 1e-5)
    CHECK(out.data()[0] == doctest::Approx(-0.99999500003749969).epsilon(1e-12));
    CHECK(out.data()[1] == doctest::Approx(0.99999500003749969).epsilon(1e-12));
}

TEST_CASE("layer_norm gradient matches finite differences") {
    Rng rng(17);
    Tensor x = random_uniform({3, 6}, -2.0, 2.0, rng, true);
    Tensor gamma = random_uniform({6}, 0.5, 1.5, rng, true);
    Tensor beta = random_uniform({6}, -0.5, 0.5, rng, true);
    const double err =
        max_gradient_error([&] { return sum(mul(layer_norm(x, gamma, beta),
                                                layer_norm(x, gamma, beta))); },
                           {x, gamma, beta}, rng);
    CHECK(err < 1e-4);
}

TEST_CASE("dropout contracts") {
    Rng rng(19);
    Tensor x = random_uniform({4, 4}, -1.0, 1.0, rng);

    Tensor same_rate0 = dropout(x, 0.0, true, rng);
    CHECK(same_rate0.same_node(x));

    Tensor same_eval = dropout(x, 0.5, false, rng);
    CHECK(same_eval.same_node(x));

    CHECK_THROWS_AS(dropout(x, 1.0, true, rng), std::invalid_argument);
    CHECK_THROWS_AS(dropout(x, -0.1, true, rng), std::invalid_argument);
}

TEST_CASE("inverted dropout keeps the mean (law of large numbers)") {
    Rng rng(23);
    Tensor ones({100000}, 1.0);
    Tensor dropped = dropout(ones, 0.2, true, rng);
    double mean = 0.0;
    for (double v : dropped.data()) mean += v;
    mean /= double(dropped.size());
    CHECK(std::abs(mean - 1.0) < 0.01);
}

TEST_CASE("dropout gradient equals the frozen mask") {
    Rng rng(29);
    Tensor x = random_uniform({3, 5}, -1.0, 1.0, rng, true);
    const double err = max_gradient_error(
        [&] {
            Rng frozen(99);  // identical mask on every evaluation
            return sum(dropout(x, 0.3, true, frozen));
        },
        {x}, rng);
    CHECK(err < 1e-4);
}

TEST_CASE("conv2d_1x1 hand examples") {
    // two channels holding single pixels 2 and 3
    Tensor x({1, 2, 1, 1}, {2.0, 3.0});
    Tensor w_sum({1, 2}, {1.0, 1.0});
    Tensor bias({1}, 0.0);
    CHECK(conv2d_1x1(x, w_sum, bias).item() == 5.0);

    Tensor w_first({1, 2}, {1.0, 0.0});
    CHECK(conv2d_1x1(x, w_first, bias).item() == 2.0);
}

TEST_CASE("conv2d_1x1 equals reshape + matmul") {
    Rng rng(31);
    Tensor x = random_uniform({2, 4, 3, 5}, -1.0, 1.0, rng);
    Tensor w = random_uniform({3, 4}, -1.0, 1.0, rng);
    Tensor bias = random_uniform({3}, -0.5, 0.5, rng);
    Tensor conv = conv2d_1x1(x, w, bias);

    // independent route: (B*H*W) x C times w transposed, plus bias
    const std::size_t batch = 2, cin = 4, cout = 3, h = 3, wid = 5;
    auto xv = x.data();
    auto wv = w.data();
    auto bv = bias.data();
    double max_diff = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t p = 0; p < h * wid; ++p) {
                double acc = bv[o];
                for (std::size_t c = 0; c < cin; ++c) acc += wv[o * cin + c] * xv[(b * cin + c) * h * wid + p];
                max_diff = std::max(max_diff, std::abs(acc - conv.at({b, o, p / wid, p % wid})));
            }
    CHECK(max_diff < 1e-12);
}

TEST_CASE("conv gradients match finite differences") {
    Rng rng(37);
    Tensor x = random_uniform({2, 3, 4, 4}, -1.0, 1.0, rng, true);
    Tensor w1 = random_uniform({2, 3}, -1.0, 1.0, rng, true);
    Tensor b1 = random_uniform({2}, -0.5, 0.5, rng, true);
    CHECK(max_gradient_error([&] { return sum(conv2d_1x1(x, w1, b1)); }, {x, w1, b1}, rng) < 1e-4);

    Tensor img = random_uniform({1, 1, 7, 7}, -1.0, 1.0, rng, true);
    Tensor kernel = random_uniform({2, 1, 3, 3}, -1.0, 1.0, rng, true);
    Tensor kb = random_uniform({2}, -0.5, 0.5, rng, true);
    CHECK(max_gradient_error([&] { return sum(mul(conv2d(img, kernel, kb, 2),
                                                  conv2d(img, kernel, kb, 2))); },
                             {img, kernel, kb}, rng) < 1e-4);
}

TEST_CASE("conv2d output extents for strided valid convolution") {
    Tensor img({1, 1, 32, 32}, 0.0);
    Tensor kernel({8, 1, 3, 3}, 0.1);
    Tensor bias({8}, 0.0);
    Tensor out = conv2d(img, kernel, bias, 2);
    CHECK(out.dim(2) == 15);
    CHECK(out.dim(3) == 15);
}

TEST_CASE("cross_entropy hand values") {
    Tensor uniform({1, 3}, {0.0, 0.0, 0.0});
    const int label0[] = {0};
    CHECK(cross_entropy(uniform, label0).item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    Tensor confident({1, 3}, {100.0, 0.0, 0.0});
    CHECK(cross_entropy(confident, label0).item() < 1e-10);

    const int bad_label[] = {3};
    CHECK_THROWS_AS(cross_entropy(uniform, bad_label), std::out_of_range);
}

TEST_CASE("cross_entropy gradient is softmax minus one-hot over batch") {
    Rng rng(41);
    Tensor logits = random_uniform({4, 3}, -2.0, 2.0, rng, true);
    const std::vector<int> labels = {0, 2, 1, 2};

    CHECK(max_gradient_error([&] { return cross_entropy(logits, labels); }, {logits}, rng) < 1e-5);

    logits.zero_grad();
    Tensor loss = cross_entropy(logits, labels);
    loss.backward();
    Tensor probs = softmax_rows(logits);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) {
            const double expected =
                (probs.at({r, c}) - (c == std::size_t(labels[r]) ? 1.0 : 0.0)) / 4.0;
            CHECK(logits.grad()[r * 3 + c] == doctest::Approx(expected).epsilon(1e-12));
        }
}

TEST_CASE("backward through a composed graph matches finite differences") {
    Rng rng(43);
    for (int point = 0; point < 3; ++point) {
        Tensor x = random_uniform({3, 3}, -1.5, 1.5, rng, true);
        Tensor y = random_uniform({3, 3}, -1.5, 1.5, rng, true);
        Tensor bias = random_uniform({3}, -1.0, 1.0, rng, true);
        auto forward = [&] {
            Tensor h = add_bias(matmul(relu(x), sigmoid(y)), bias);
            Tensor folded = concat_cols(h, softmax_rows(h));
            Tensor r0 = row(folded, 0);
            const Tensor parts[] = {r0, r0};
            return add(mean(stack_rows(parts)), sum(reshape(mul(h, h), {9, 1})));
        };
        CHECK(max_gradient_error(forward, {x, y, bias}, rng) < 1e-4);
    }
}

TEST_CASE("forward ops are deterministic across repeated evaluation") {
    Rng rng(47);
    Tensor x = random_uniform({4, 4}, -1.0, 1.0, rng);
    Tensor y = random_uniform({4, 4}, -1.0, 1.0, rng);
    Tensor first = matmul(sigmoid(x), relu(y));
    Tensor second = matmul(sigmoid(x), relu(y));
    for (std::size_t i = 0; i < first.size(); ++i) CHECK(first.data()[i] == second.data()[i]);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST_CASE("adam leaves parameters alone under zero gradients") {
    Parameter p("w", Tensor({3}, {1.0, -2.0, 0.5}));
    Adam opt({p}, {0.1, 0.0});
    opt.step();
    CHECK(p.value.data()[0] == 1.0);
    CHECK(p.value.data()[1] == -2.0);
    CHECK(p.value.data()[2] == 0.5);
}

TEST_CASE("adam first bias-corrected step moves by ~lr") {
    Parameter p("w", Tensor({1}, {1.0}));
    p.value.grad()[0] = 1.0;
    Adam opt({p}, {0.1, 0.0});
    opt.step();
    CHECK(p.value.data()[0] == doctest::Approx(0.9).epsilon(1e-7));
    CHECK(p.value.grad()[0] == 0.0);  // zeroed after the update
}

TEST_CASE("adam converges on a scalar quadratic and matches a recurrence oracle") {
    // independent oracle: the Adam recurrences evaluated directly
    double w_ref = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 100; ++t) {
        const double g = 2.0 * w_ref;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double m_hat = m / (1.0 - std::pow(0.9, t));
        const double v_hat = v / (1.0 - std::pow(0.999, t));
        w_ref -= 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
    }
    CHECK(std::abs(w_ref) < 0.1);

    Parameter p("w", Tensor({1}, {1.0}));
    Adam opt({p}, {0.1, 0.0});
    for (int t = 0; t < 100; ++t) {
        Tensor loss = mul(p.value, p.value);
        loss.backward();
        opt.step();
    }
    CHECK(p.value.data()[0] == doctest::Approx(w_ref).epsilon(1e-12));
    CHECK(std::abs(p.value.data()[0]) < 0.1);
}

TEST_CASE("adam applies weight decay through the gradient") {
    Parameter p("w", Tensor({1}, {2.0}));
    p.value.grad()[0] = 0.0;
    Adam opt({p}, {0.1, 0.5});
    opt.step();
    // effective gradient 0.5*2 = 1 -> bias-corrected step of ~lr
    CHECK(p.value.data()[0] == doctest::Approx(1.9).epsilon(1e-7));
}

TEST_CASE("adam rejects parameters without gradient buffers and duplicate names") {
    Tensor plain({2}, 1.0);  // no requires_grad
    Parameter broken;
    broken.name = "w";
    broken.value = plain;
    CHECK_THROWS_AS(Adam({broken}, {0.1, 0.0}), StateError);

    Parameter a("w", Tensor({1}, {1.0}));
    Parameter b("w", Tensor({1}, {1.0}));
    CHECK_THROWS_AS(Adam({a, b}, {0.1, 0.0}), StateError);
}

// ---------------------------------------------------------------------------
// Orthogonal init
// ---------------------------------------------------------------------------

TEST_CASE("orthogonal_init produces orthonormal frames") {
    Rng rng(53);
    SUBCASE("square") {
        Tensor w = orthogonal_init(8, 8, 1.0, rng);
        double worst = 0.0;
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 8; ++j) {
                double dot = 0.0;
                for (std::size_t k = 0; k < 8; ++k) dot += w.at({k, i}) * w.at({k, j});
                worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
            }
        CHECK(worst < 1e-8);
    }
    SUBCASE("tall: orthonormal columns") {
        Tensor w = orthogonal_init(12, 4, 2.0, rng);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                double dot = 0.0;
                for (std::size_t k = 0; k < 12; ++k) dot += w.at({k, i}) * w.at({k, j});
                CHECK(std::abs(dot - (i == j ? 4.0 : 0.0)) < 1e-8);  // gain^2 on the diagonal
            }
    }
    SUBCASE("wide: orthonormal rows") {
        Tensor w = orthogonal_init(3, 9, 1.0, rng);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                double dot = 0.0;
                for (std::size_t k = 0; k < 9; ++k) dot += w.at({i, k}) * w.at({j, k});
                CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-8);
            }
    }
    SUBCASE("gain zero yields the zero matrix") {
        Tensor zero = orthogonal_init(4, 4, 0.0, rng);
        for (double v : zero.data()) CHECK(v == 0.0);
    }
    SUBCASE("degenerate 1x1 has magnitude gain") {
        CHECK(std::abs(orthogonal_init(1, 1, 0.7, rng).item()) == doctest::Approx(0.7).epsilon(1e-12));
    }
}

TEST_CASE("count_params sums parameter elements") {
    Rng rng(59);
    Linear fc(2, 3, "fc", rng);
    std::vector<Parameter> params;
    fc.collect(params);
    CHECK(count_params(params) == 9);
}
