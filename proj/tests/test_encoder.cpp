#include <doctest.h>

#include <cmath>

#include "slicenav/encoder.hpp"

using namespace slicenav;

TEST_CASE("positional_encoding scalar values") {
    const auto pe0 = positional_encoding(0.0, 8);
    for (std::size_t k = 0; k < 8; k += 2) {
        CHECK(pe0[k] == doctest::Approx(0.0));      // sin 0
        CHECK(pe0[k + 1] == doctest::Approx(1.0));  // cos 0
    }
    const auto pe1 = positional_encoding(1.0, 16);
    CHECK(pe1[0] == doctest::Approx(std::sin(1.0)).epsilon(1e-6));  // 0.841471
    CHECK(pe1[1] == doctest::Approx(std::cos(1.0)).epsilon(1e-6));  // 0.540302
    // k=2 uses 10000^(2/16)
    CHECK(pe1[2] == doctest::Approx(std::sin(1.0 / std::pow(10000.0, 2.0 / 16.0))));
    CHECK(pe1[3] == doctest::Approx(std::cos(1.0 / std::pow(10000.0, 2.0 / 16.0))));

    CHECK_THROWS_AS(positional_encoding(1.0, 7), ConfigError);
}

TEST_CASE("positional encoding norm bound and relative/absolute equivalences") {
    for (const double pos : {0.0, 1.0, 17.5, -3.0, 444.0}) {
        const auto pe = positional_encoding(pos, 32);
        double norm2 = 0;
        for (const double v : pe) norm2 += v * v;
        CHECK(std::sqrt(norm2) <= std::sqrt(32.0) + 1e-12);
    }

    // relative mode with spacing 1.0 equals absolute mode
    CHECK(pe_positions(5, PEMode::relative, 1.0) == pe_positions(5, PEMode::absolute, 2.0));

    // relative with doubled spacing equals absolute at doubled index positions
    const auto rel = pe_positions(6, PEMode::relative, 2.0);
    for (std::size_t i = 0; i < 6; ++i) CHECK(rel[i] == doctest::Approx(2.0 * i));

    // boundary positions sit one step outside the valid range on each side
    const auto tb = pe_positions_with_boundaries(4, PEMode::absolute, 1.0);
    CHECK(tb.front() == doctest::Approx(-1.0));
    CHECK(tb[1] == doctest::Approx(0.0));
    CHECK(tb[4] == doctest::Approx(3.0));
    CHECK(tb.back() == doctest::Approx(4.0));
    const auto tbr = pe_positions_with_boundaries(4, PEMode::relative, 2.5);
    CHECK(tbr.front() == doctest::Approx(-2.5));
    CHECK(tbr.back() == doctest::Approx(10.0));
}

TEST_CASE("boundary slices are constant +1 / -1") {
    const auto [start, end] = make_boundary_slices(4, 5);
    CHECK(start.size() == 20);
    CHECK(end.size() == 20);
    for (const float v : start) CHECK(v == 1.0f);
    for (const float v : end) CHECK(v == -1.0f);
}

TEST_CASE("embedder determinism and output shape") {
    EmbedderConfig cfg;
    cfg.kind = EmbedderKind::conv2d_stack;
    cfg.input_h = 16;
    cfg.input_w = 16;
    cfg.embedding_dim = 8;
    cfg.conv_channels = {2, 4};
    Rng rng(5);
    Embedder<float> emb(cfg, rng);

    std::vector<float> slice(256);
    Rng srng(6);
    for (auto& v : slice) v = static_cast<float>(srng.uniform(-1, 1));

    const auto a = emb.embed_slice(slice);
    const auto b = emb.embed_slice(slice);
    CHECK(a.shape() == Shape{1, 8});
    for (std::size_t i = 0; i < 8; ++i) CHECK(a.at(i) == b.at(i));

    // identical slices stack to identical rows
    const auto rows = emb.embed_slices({&slice, &slice});
    CHECK(rows.shape() == Shape{2, 8});
    for (std::size_t j = 0; j < 8; ++j) CHECK(rows.at(0, j) == rows.at(1, j));

    // boundary slices pass through like normal slices
    const auto [bs, be] = make_boundary_slices(16, 16);
    const auto eb = emb.embed_slice(bs);
    CHECK(eb.shape() == Shape{1, 8});
    CHECK(eb.all_finite());

    std::vector<float> wrong(100);
    CHECK_THROWS_AS(emb.embed_slice(wrong), ShapeError);
}

TEST_CASE("mlp embedder matches a hand-rolled two-layer affine+relu oracle") {
    EmbedderConfig cfg;
    cfg.kind = EmbedderKind::mlp;
    cfg.input_h = 16;
    cfg.input_w = 16;
    cfg.embedding_dim = 6;
    cfg.mlp_hidden = 10;
    Rng rng(7);
    Embedder<double> emb(cfg, rng);

    // extract the parameters through the named list
    ParamList<double> params;
    emb.collect_params("e", params);
    REQUIRE(params.size() == 4);
    const auto& w1 = params[0].second;  // e.fc1.weight [256,10]
    const auto& b1 = params[1].second;
    const auto& w2 = params[2].second;  // e.fc.weight [10,6]
    const auto& b2 = params[3].second;

    std::vector<float> slice(256);
    Rng srng(8);
    for (auto& v : slice) v = static_cast<float>(srng.uniform(-1, 1));

    // oracle: y = relu(x W1 + b1) W2 + b2
    std::vector<double> hidden(10, 0.0);
    for (std::size_t j = 0; j < 10; ++j) {
        double acc = b1.at(j);
        for (std::size_t i = 0; i < 256; ++i) acc += static_cast<double>(slice[i]) * w1.at(i, j);
        hidden[j] = std::max(acc, 0.0);
    }
    std::vector<double> expect(6, 0.0);
    for (std::size_t j = 0; j < 6; ++j) {
        double acc = b2.at(j);
        for (std::size_t i = 0; i < 10; ++i) acc += hidden[i] * w2.at(i, j);
        expect[j] = acc;
    }

    const auto got = emb.embed_slice(slice);
    for (std::size_t j = 0; j < 6; ++j)
        CHECK(got.at(j) == doctest::Approx(expect[j]).epsilon(1e-10));
}

TEST_CASE("apply_pe adds the encoding rowwise") {
    auto x = Tensor<double>::zeros({3, 8});
    const auto y = apply_pe(x, {0.0, 1.0, 2.0});
    const auto pe1 = positional_encoding(1.0, 8);
    for (std::size_t j = 0; j < 8; ++j) CHECK(y.at(1, j) == doctest::Approx(pe1[j]));
    CHECK_THROWS_AS(apply_pe(x, {0.0, 1.0}), ShapeError);
}
