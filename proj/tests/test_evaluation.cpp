#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "slicenav/evaluation.hpp"

using namespace slicenav;

namespace {

// Full 2^n sign enumeration oracle for the exact two-sided Wilcoxon p-value.
double wilcoxon_enumeration_oracle(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) diffs.push_back(a[i] - b[i]);
    const std::size_t n = diffs.size();
    if (n == 0) return 1.0;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return std::fabs(diffs[x]) < std::fabs(diffs[y]);
    });
    std::vector<double> ranks(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && std::fabs(diffs[order[j + 1]]) == std::fabs(diffs[order[i]])) ++j;
        const double avg = 0.5 * (i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    double w_plus = 0, total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total += ranks[i];
        if (diffs[i] > 0) w_plus += ranks[i];
    }
    const double w_small = std::min(w_plus, total - w_plus);
    std::size_t count = 0;
    for (std::size_t bits = 0; bits < (1ull << n); ++bits) {
        double w = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (bits & (1ull << i)) w += ranks[i];
        if (w <= w_small + 1e-12) ++count;
    }
    return std::min(1.0, 2.0 * static_cast<double>(count) / std::pow(2.0, n));
}

}  // namespace

TEST_CASE("wilcoxon: documented conventions and the W=0 case") {
    // identical paired samples: all zero differences -> p = 1
    std::vector<double> same{1, 2, 3, 4, 5, 6};
    CHECK(wilcoxon_signed_rank(same, same) == doctest::Approx(1.0));

    // pairs (1,2)..(6,7): W = 0, exact two-sided p = 2/64
    std::vector<double> a{1, 2, 3, 4, 5, 6};
    std::vector<double> b{2, 3, 4, 5, 6, 7};
    CHECK(wilcoxon_signed_rank(a, b) == doctest::Approx(0.03125).epsilon(1e-12));

    // swapping the samples gives the identical p (symmetry)
    CHECK(wilcoxon_signed_rank(b, a) == doctest::Approx(wilcoxon_signed_rank(a, b)));

    CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2}, {1}), ValidationError);
}

TEST_CASE("wilcoxon exact mode matches full sign enumeration for n <= 10") {
    Rng rng(55);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 + rng.randint(9ul);  // up to 10 pairs
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = std::round(rng.uniform(0, 8));  // integers force ties often
            b[i] = std::round(rng.uniform(0, 8));
        }
        const double got = wilcoxon_signed_rank(a, b);
        const double want = wilcoxon_enumeration_oracle(a, b);
        CHECK(got == doctest::Approx(want).epsilon(1e-10));
    }
}

TEST_CASE("wilcoxon normal approximation behaves sanely for large n") {
    Rng rng(56);
    std::vector<double> a(60), b(60);
    for (std::size_t i = 0; i < 60; ++i) {
        a[i] = rng.normal(0.0, 1.0);
        b[i] = a[i] + 1.0 + rng.normal(0.0, 0.2);  // systematic shift
    }
    const double p_shift = wilcoxon_signed_rank(a, b);
    CHECK(p_shift < 1e-6);

    std::vector<double> c(60), d(60);
    for (std::size_t i = 0; i < 60; ++i) {
        c[i] = rng.normal(0.0, 1.0);
        d[i] = c[i] + rng.normal(0.0, 1.0);  // no systematic difference
    }
    const double p_null = wilcoxon_signed_rank(c, d);
    CHECK(p_null > 1e-4);
    CHECK(p_null <= 1.0);
}

TEST_CASE("localization result classification") {
    InsertionPosition inside;
    inside.kind = PositionKind::inside;
    inside.grid_position = 10;
    // pred 10, gt 12, spacing 2mm -> 4mm
    const auto r = detail::classify_result("q", "t", "carina", inside, 12, 20, 2.0);
    CHECK_FALSE(r.gt_is_boundary);
    CHECK(r.error_mm == doctest::Approx(4.0));

    // matching AFTER_END sentinels: boundary-correct, zero error
    InsertionPosition after;
    after.kind = PositionKind::after_end;
    after.grid_position = 19;
    const auto rb = detail::classify_result("q", "t", "carina", after, 19, 20, 2.0);
    CHECK(rb.gt_is_boundary);
    CHECK(rb.boundary_correct);
    CHECK(rb.error_mm == doctest::Approx(0.0));

    // wrong sentinel
    const auto rw = detail::classify_result("q", "t", "carina", inside, 19, 20, 2.0);
    CHECK(rw.gt_is_boundary);
    CHECK_FALSE(rw.boundary_correct);

    // symmetric in pred/gt, zero iff equal
    const auto r1 = detail::classify_result("q", "t", "k", inside, 14, 20, 1.5);
    InsertionPosition at14;
    at14.kind = PositionKind::inside;
    at14.grid_position = 14;
    const auto r2 = detail::classify_result("q", "t", "k", at14, 10, 20, 1.5);
    CHECK(r1.error_mm == doctest::Approx(r2.error_mm));
    const auto r0 = detail::classify_result("q", "t", "k", at14, 14, 20, 1.5);
    CHECK(r0.error_mm == doctest::Approx(0.0));
}

TEST_CASE("an oracle predictor that copies ground truth scores zero everywhere") {
    Rng rng(60);
    std::vector<LocalizationResult> results;
    for (int t = 0; t < 50; ++t) {
        const std::size_t n_pos = 10 + rng.randint(20ul);
        const std::size_t gt = rng.randint(n_pos);
        InsertionPosition pred;
        pred.grid_position = gt;
        pred.kind = gt == 0 ? PositionKind::before_start
                    : gt == n_pos - 1 ? PositionKind::after_end
                                      : PositionKind::inside;
        results.push_back(detail::classify_result("q", "t", "carina", pred, gt, n_pos, 2.0));
    }
    for (const auto& r : results) {
        if (r.gt_is_boundary)
            CHECK(r.boundary_correct);
        else
            CHECK(r.error_mm == doctest::Approx(0.0));
    }
}

TEST_CASE("aggregate pools per-key means weighted by counts and applies exclusion") {
    std::vector<LocalizationResult> results;
    const auto add = [&](const std::string& key, double err) {
        LocalizationResult r;
        r.key_name = key;
        r.error_mm = err;
        r.effective_spacing_mm = 2.0;
        results.push_back(r);
    };
    for (int i = 0; i < 8; ++i) add("carina", 2.0);
    for (int i = 0; i < 6; ++i) add("liver_dome", 4.0);
    for (int i = 0; i < 2; ++i) add("head_end", 100.0);  // sparse: excluded

    const auto agg = aggregate(results, 6);
    CHECK(agg.per_key.at("carina").mean == doctest::Approx(2.0));
    CHECK(agg.per_key.at("liver_dome").mean == doctest::Approx(4.0));
    CHECK(agg.per_key.at("head_end").excluded);
    // pooled mean over the included keys: (8*2 + 6*4) / 14
    CHECK(agg.average == doctest::Approx((8 * 2.0 + 6 * 4.0) / 14.0));
    CHECK(agg.average_n == 14);
}

TEST_CASE("attention export round-trips through CSV and writes a valid PGM") {
    AttentionMap map;
    map.n_query = 3;
    map.n_positions = 5;
    Rng rng(61);
    map.probs.resize(15);
    for (auto& p : map.probs) p = rng.uniform(0, 1);
    map.query_index_map = {0, 1, 2};
    map.target_index_map = {0, 1, 2};

    const std::string base = (std::filesystem::temp_directory_path() / "slicenav_attn").string();
    export_attention(map, base);

    std::ifstream is(base + ".csv");
    REQUIRE(is.good());
    std::string line;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        std::istringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            CHECK(std::fabs(std::stod(cell) - map.at(row, col)) < 1e-6);
            ++col;
        }
        CHECK(col == 5);
        ++row;
    }
    CHECK(row == 3);

    std::ifstream pg(base + ".pgm", std::ios::binary);
    REQUIRE(pg.good());
    std::string magic;
    std::size_t w = 0, h = 0, maxv = 0;
    pg >> magic >> w >> h >> maxv;
    CHECK(magic == "P5");
    CHECK(w == 5);
    CHECK(h == 3);
    CHECK(maxv == 255);
    pg.get();
    std::vector<char> pixels(15);
    pg.read(pixels.data(), 15);
    CHECK(pg.gcount() == 15);

    std::remove((base + ".csv").c_str());
    std::remove((base + ".pgm").c_str());
}

TEST_CASE("eval pairing is deterministic, self-free, and sized by partners") {
    const auto p1 = make_eval_pairs(8, 3, 99);
    const auto p2 = make_eval_pairs(8, 3, 99);
    CHECK(p1 == p2);
    CHECK(p1.size() == 8 * 3);
    for (const auto& [q, t] : p1) CHECK(q != t);
    // partners per query are distinct
    for (std::size_t q = 0; q < 8; ++q) {
        std::set<std::size_t> seen;
        for (const auto& [qi, ti] : p1)
            if (qi == q) CHECK(seen.insert(ti).second);
    }
}

TEST_CASE("results CSV round-trip and wilcoxon comparison plumbing") {
    std::vector<LocalizationResult> ra, rb;
    Rng rng(62);
    for (int i = 0; i < 12; ++i) {
        LocalizationResult r;
        r.query_id = "q" + std::to_string(i);
        r.target_id = "t";
        r.key_name = "carina";
        r.pred.kind = PositionKind::inside;
        r.pred.grid_position = 5;
        r.gt_grid_position = 6;
        r.error_mm = 2.0 + i;
        r.effective_spacing_mm = 2.0;
        ra.push_back(r);
        r.error_mm = 4.0 + i;  // systematically worse
        rb.push_back(r);
    }
    // one boundary row to exercise the empty-error column
    LocalizationResult rbound = ra[0];
    rbound.gt_is_boundary = true;
    rbound.boundary_correct = true;
    rbound.pred.kind = PositionKind::after_end;
    rbound.gt_grid_position = 0;
    ra.push_back(rbound);

    const auto dir = std::filesystem::temp_directory_path();
    const std::string pa = (dir / "slicenav_res_a.csv").string();
    const std::string pb = (dir / "slicenav_res_b.csv").string();
    write_results_csv(ra, pa);
    write_results_csv(rb, pb);

    const auto ea = read_results_errors(pa);
    CHECK(ea.size() == 12);  // boundary row skipped
    CHECK(ea.at({"q3:t", "carina"}) == doctest::Approx(5.0));

    std::size_t n_pairs = 0;
    const double p = compare_results_wilcoxon(pa, pb, &n_pairs);
    CHECK(n_pairs == 12);
    CHECK(p < 0.01);  // consistent 2mm difference across 12 pairs

    std::remove(pa.c_str());
    std::remove(pb.c_str());
}
