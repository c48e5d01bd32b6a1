#include <doctest.h>

#include <cmath>

#include "slicenav/synthetic.hpp"

using namespace slicenav;

namespace {

SyntheticConfig small_cfg() {
    SyntheticConfig cfg;
    cfg.n_subjects = 8;
    cfg.height = 16;
    cfg.width = 16;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("generator determinism: fixed seed, identical bytes") {
    const auto cfg = small_cfg();
    const auto a = generate_dataset(cfg);
    const auto b = generate_dataset(cfg);
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].seq.spacing_mm == b.train[i].seq.spacing_mm);
        CHECK(a.train[i].canonical_scores == b.train[i].canonical_scores);
        REQUIRE(a.train[i].seq.n_slices() == b.train[i].seq.n_slices());
        for (std::size_t s = 0; s < a.train[i].seq.n_slices(); ++s)
            CHECK(a.train[i].seq.slices[s] == b.train[i].seq.slices[s]);
    }
}

TEST_CASE("warp is strictly increasing and invertible") {
    Rng rng(3);
    auto cfg = small_cfg();
    for (int t = 0; t < 10; ++t) {
        Rng srng = rng.fork("w" + std::to_string(t));
        const auto vol = generate_subject(cfg, "w", srng);
        for (std::size_t j = 1; j < vol.warp.knots_z.size(); ++j)
            CHECK(vol.warp.knots_z[j] > vol.warp.knots_z[j - 1]);
        for (double c = 0.0; c <= 100.0; c += 7.3) {
            const double z = vol.warp.to_mm(c);
            CHECK(vol.warp.to_canonical(z) == doctest::Approx(c).epsilon(1e-9));
        }
        // per-slice canonical scores strictly increase
        for (std::size_t i = 1; i < vol.canonical_scores.size(); ++i)
            CHECK(vol.canonical_scores[i] > vol.canonical_scores[i - 1]);
    }
}

TEST_CASE("key labels sit at the canonical key scores up to slice quantization") {
    auto cfg = small_cfg();
    cfg.noise = 0.0;
    Rng rng(5);
    const auto key_scores = default_key_scores();
    for (int t = 0; t < 10; ++t) {
        Rng srng = rng.fork("k" + std::to_string(t));
        const auto vol = generate_subject(cfg, "k", srng);
        REQUIRE(vol.labels.size() >= 2);
        // quantization bound: half the canonical extent of one slice step
        for (const auto& label : vol.labels) {
            const double want = key_scores.at(label.key_name);
            const double got = vol.canonical_scores[label.slice_index];
            double max_step = 0.0;
            for (std::size_t i = 1; i < vol.canonical_scores.size(); ++i)
                max_step = std::max(max_step,
                                    vol.canonical_scores[i] - vol.canonical_scores[i - 1]);
            CHECK(std::fabs(got - want) <= 0.5 * max_step + 1e-9);
        }
        // label indices strictly increase with anatomical order
        for (std::size_t i = 1; i < vol.labels.size(); ++i)
            CHECK(vol.labels[i].slice_index > vol.labels[i - 1].slice_index);
    }
}

TEST_CASE("same canonical score renders the same band; texture is additive per subject") {
    SubjectTexture none;
    SubjectTexture tex;
    tex.amp = {0.1};
    tex.freq = {2.0};
    tex.theta = {1.0};
    tex.phase = {0.5};
    const double s = 42.0;
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
            const double v0 = detail::render_pixel(s, 100.0, y, x, 16, 16, none);
            const double v1 = detail::render_pixel(s, 100.0, y, x, 16, 16, tex);
            const double proj = (x * std::cos(1.0) + y * std::sin(1.0)) / 16.0;
            const double expect_tex = 0.1 * std::sin(6.283185307179586 * 2.0 * proj + 0.5);
            CHECK(v1 - v0 == doctest::Approx(expect_tex).epsilon(1e-12));
        }
}

TEST_CASE("slice content is monotone-recoverable from canonical score at noise 0") {
    auto cfg = small_cfg();
    cfg.noise = 0.0;
    Rng r1(7), r2(8);
    const auto a = generate_subject(cfg, "a", r1);
    const auto b = generate_subject(cfg, "b", r2);
    // decoder fitted on nothing but slice mass (band mass grows with score)
    const auto mass = [](const std::vector<float>& img) {
        double m = 0;
        for (const float v : img) m += v + 0.35;
        return m;
    };
    // ranking b's slices by the decoder must match their true order
    std::vector<double> masses;
    for (const auto& s : b.seq.slices) masses.push_back(mass(s));
    for (std::size_t i = 1; i < masses.size(); ++i) CHECK(masses[i] > masses[i - 1]);
    // and a decoder threshold learned on subject a transfers to subject b
    std::vector<double> masses_a;
    for (const auto& s : a.seq.slices) masses_a.push_back(mass(s));
    for (std::size_t i = 1; i < masses_a.size(); ++i) CHECK(masses_a[i] > masses_a[i - 1]);
}

TEST_CASE("dataset splits are disjoint and sized by the default proportions") {
    SyntheticConfig cfg;
    cfg.n_subjects = 106;
    cfg.height = 8;
    cfg.width = 8;
    cfg.seed = 42;
    const auto ds = generate_dataset(cfg);
    CHECK(ds.train.size() == 80);
    CHECK(ds.val.size() == 6);
    CHECK(ds.test.size() == 20);
}

TEST_CASE("oracle correspondence composes warps") {
    auto cfg = small_cfg();
    Rng r1(70), r2(80);
    const auto q = generate_subject(cfg, "q", r1);
    const auto t = generate_subject(cfg, "t", r2);
    for (std::size_t i = 0; i < q.canonical_scores.size(); i += 5) {
        const std::size_t pos = oracle_insertion_position(q, i, t);
        const double qs = q.canonical_scores[i];
        if (pos == 0) {
            CHECK(qs < t.canonical_scores.front());
        } else if (pos == t.canonical_scores.size() + 1) {
            CHECK(qs > t.canonical_scores.back());
        } else {
            // nearest target slice by canonical distance
            const double got = t.canonical_scores[pos - 1];
            for (const double s : t.canonical_scores)
                CHECK(std::fabs(qs - got) <= std::fabs(qs - s) + 1e-12);
        }
    }
}
