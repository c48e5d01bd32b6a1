#include <doctest.h>

#include <cmath>

#include "e2e_check.hpp"
#include "slicenav/attention.hpp"

using namespace slicenav;

namespace {

TransformerLayerParams<double> make_layer(std::size_t d, Rng& rng) {
    return TransformerLayerParams<double>(d, 2, rng);
}

Tensor<double> random_matrix(std::size_t m, std::size_t n, Rng& rng, bool rq = false) {
    auto t = Tensor<double>::zeros({m, n}, rq);
    for (auto& v : t.value()) v = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("self_encode preserves shape and ignores padded content") {
    Rng rng(41);
    const std::size_t d = 8, n = 6;
    std::vector<TransformerLayerParams<double>> layers{make_layer(d, rng), make_layer(d, rng)};

    auto x = random_matrix(n, d, rng);
    std::vector<std::uint8_t> mask{1, 1, 1, 1, 0, 0};

    auto y = self_encode(x, layers, 2, mask);
    CHECK(y.shape() == Shape{n, d});

    // different garbage in the padded tail must not move valid outputs
    auto x2_copy = Tensor<double>::zeros({n, d});
    for (std::size_t i = 0; i < x.numel(); ++i) x2_copy.at(i) = x.at(i);
    for (std::size_t i = 4; i < 6; ++i)
        for (std::size_t j = 0; j < d; ++j) x2_copy.at(i, j) = rng.uniform(-9.0, 9.0);
    auto y2 = self_encode(x2_copy, layers, 2, mask);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < d; ++j)
            CHECK(std::fabs(y.at(i, j) - y2.at(i, j)) < 1e-5);
}

TEST_CASE("single valid position: attention returns its own value pathway") {
    Rng rng(42);
    const std::size_t d = 6;
    auto p = make_layer(d, rng);
    auto x = random_matrix(3, d, rng);
    std::vector<std::uint8_t> mask{0, 1, 0};

    const auto out = multi_head_attention(x, x, p, 2, mask);
    // expected: row 1's value projection pushed through the output projection
    const auto v = linear(x, p.wv, p.bv);
    auto vrow = Tensor<double>::zeros({1, d});
    for (std::size_t j = 0; j < d; ++j) vrow.at(j) = v.at(1, j);
    const auto expect = linear(vrow, p.wo, p.bo);
    for (std::size_t j = 0; j < d; ++j)
        CHECK(out.at(1, j) == doctest::Approx(expect.at(j)).epsilon(1e-10));
    // every query row attends to the single unmasked position
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < d; ++j)
            CHECK(out.at(i, j) == doctest::Approx(expect.at(j)).epsilon(1e-10));
}

TEST_CASE("cross_attend shape and gradient flow to both streams") {
    Rng rng(43);
    const std::size_t d = 8, m = 3, n = 5;
    std::vector<TransformerLayerParams<double>> layers{make_layer(d, rng)};

    auto q = random_matrix(m, d, rng, true);
    auto t = random_matrix(n, d, rng, true);

    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        auto y = cross_attend(q, t, layers, 2);
        CHECK(y.shape() == Shape{m, d});
        auto loss = mean(mul(y, y));
        backward(loss);
    }
    double qg = 0, tg = 0;
    for (const double g : q.grad()) qg += std::fabs(g);
    for (const double g : t.grad()) tg += std::fabs(g);
    CHECK(qg > 0.0);
    CHECK(tg > 0.0);
}

TEST_CASE("insertion_distribution: uniform rows for identical keys, row sums, masks") {
    Rng rng(44);
    const std::size_t m = 4, n = 6, d = 8;
    auto q = random_matrix(m, d, rng);
    auto k = Tensor<double>::zeros({n, d});
    for (std::size_t j = 0; j < d; ++j) {
        const double v = rng.uniform(-1, 1);
        for (std::size_t i = 0; i < n; ++i) k.at(i, j) = v;  // identical rows
    }
    const auto map = insertion_distribution(q, k);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            CHECK(map.at(i, j) == doctest::Approx(1.0 / n).epsilon(1e-9));

    // random keys: rows sum to 1, masked columns exactly zero
    auto k2 = random_matrix(n, d, rng);
    std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 1};
    const auto map2 = insertion_distribution(q, k2, mask);
    for (std::size_t i = 0; i < m; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < n; ++j) sum += map2.at(i, j);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(map2.at(i, 2) == 0.0);
        CHECK(map2.at(i, 4) == 0.0);
    }

    CHECK_THROWS_AS(insertion_distribution(q, k2, std::vector<std::uint8_t>(n, 0)),
                    ValidationError);
}

TEST_CASE("argmax is invariant under positive scaling of the logit inputs") {
    Rng rng(45);
    for (int t = 0; t < 50; ++t) {
        const std::size_t m = 2 + rng.randint(4ul), n = 3 + rng.randint(5ul), d = 8;
        auto q = random_matrix(m, d, rng);
        auto k = random_matrix(n, d, rng);
        const auto base = insertion_distribution(q, k);
        const double c = rng.uniform(0.1, 5.0);
        auto qc = Tensor<double>::zeros({m, d});
        for (std::size_t i = 0; i < q.numel(); ++i) qc.at(i) = c * q.at(i);
        const auto scaled = insertion_distribution(qc, k);
        for (std::size_t i = 0; i < m; ++i) {
            std::size_t a1 = 0, a2 = 0;
            for (std::size_t j = 1; j < n; ++j) {
                if (base.at(i, j) > base.at(i, a1)) a1 = j;
                if (scaled.at(i, j) > scaled.at(i, a2)) a2 = j;
            }
            CHECK(a1 == a2);
        }
    }
}

TEST_CASE("full model: N+2 positions, row-stochastic, deterministic") {
    Rng rng(46);
    InsertionModelConfig mcfg;
    mcfg.d = 8;
    mcfg.self_layers = 1;
    mcfg.cross_layers = 1;
    mcfg.heads = 2;
    mcfg.ffn_multiplier = 2;
    EmbedderConfig ecfg;
    ecfg.input_h = 8;
    ecfg.input_w = 8;
    ecfg.embedding_dim = 8;
    ecfg.conv_channels = {2, 3};
    InsertionModel<double> model(mcfg, ecfg, PEMode::absolute, 99);

    const auto query = fdtest::make_random_sampled(5, 8, 8, 8, rng);
    const auto map = model.predict(query, query);  // target == query
    CHECK(map.n_query == 5);
    CHECK(map.n_positions == 5 + 2);
    for (std::size_t i = 0; i < map.n_query; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < map.n_positions; ++j) {
            CHECK(map.at(i, j) >= 0.0);
            sum += map.at(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }

    const auto map2 = model.predict(query, query);
    CHECK(map.probs == map2.probs);

    CHECK_THROWS_AS((InsertionModel<double>(InsertionModelConfig{.d = 9, .heads = 2}, ecfg,
                                            PEMode::absolute, 1)),
                    ConfigError);
}

TEST_CASE("argmax positions map to sentinels and target indices") {
    AttentionMap map;
    map.n_query = 3;
    map.n_positions = 5;  // N=3 plus boundaries
    map.probs = {
        0.9, 0.02, 0.02, 0.03, 0.03,  // before start
        0.1, 0.1,  0.5,  0.2,  0.1,   // inside, grid 2 -> target slot 1
        0.0, 0.1,  0.2,  0.2,  0.5,   // after end
    };
    map.query_index_map = {0, 1, 2};
    map.target_index_map = {10, 20, 30};
    const auto pos = argmax_positions(map);
    CHECK(pos[0].kind == PositionKind::before_start);
    CHECK(pos[1].kind == PositionKind::inside);
    CHECK(pos[1].target_slice_index == 20);
    CHECK(pos[2].kind == PositionKind::after_end);
}

TEST_CASE("end-to-end gradients match finite differences") {
    CHECK(fdtest::e2e_grad_check(LossKind::kl, 2024, 10) < 1e-3);
    CHECK(fdtest::e2e_grad_check(LossKind::emd, 2025, 10) < 1e-3);
}
