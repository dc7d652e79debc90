#include "activeprompt/acquisition.hpp"

#include "test_support.hpp"

#include <doctest.h>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <random>

using namespace activeprompt;

namespace
{

EnsembleMaps from_values(int h, int w, const std::vector<std::vector<double>>& values)
{
    EnsembleMaps e;
    for (const auto& v : values)
    {
        ProbabilityMap m(h, w, v);
        e.maps.push_back(m);
    }
    return e;
}

std::uint32_t be32(const std::uint8_t* p)
{
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

// Minimal decoder for 8-bit grayscale, non-interlaced PNGs, all filter types.
Grid<std::uint8_t> decode_png(const std::vector<std::uint8_t>& png)
{
    const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    REQUIRE(png.size() > 8);
    REQUIRE(std::memcmp(png.data(), sig, 8) == 0);
    std::size_t pos = 8;
    int w = 0, h = 0;
    std::vector<std::uint8_t> idat;
    bool ended = false;
    while (pos + 12 <= png.size() && !ended)
    {
        const std::uint32_t len = be32(&png[pos]);
        const std::string type(reinterpret_cast<const char*>(&png[pos + 4]), 4);
        const std::uint8_t* data = &png[pos + 8];
        const std::uint32_t crc = be32(&png[pos + 8 + len]);
        CHECK(crc == static_cast<std::uint32_t>(crc32(0, &png[pos + 4], len + 4)));
        if (type == "IHDR")
        {
            w = static_cast<int>(be32(data));
            h = static_cast<int>(be32(data + 4));
            CHECK(data[8] == 8);
            CHECK(data[9] == 0);
            CHECK(data[12] == 0);
        }
        else if (type == "IDAT")
            idat.insert(idat.end(), data, data + len);
        else if (type == "IEND")
            ended = true;
        pos += 12 + len;
    }
    CHECK(ended);
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * static_cast<std::size_t>(w + 1));
    uLongf raw_size = raw.size();
    REQUIRE(uncompress(raw.data(), &raw_size, idat.data(), idat.size()) == Z_OK);
    REQUIRE(raw_size == raw.size());

    Grid<std::uint8_t> out(h, w);
    for (int r = 0; r < h; ++r)
    {
        const std::uint8_t filter = raw[static_cast<std::size_t>(r) * (w + 1)];
        for (int c = 0; c < w; ++c)
        {
            const int x = raw[static_cast<std::size_t>(r) * (w + 1) + 1 + c];
            const int a = c > 0 ? out(r, c - 1) : 0;
            const int b = r > 0 ? out(r - 1, c) : 0;
            const int d = r > 0 && c > 0 ? out(r - 1, c - 1) : 0;
            int pred = 0;
            switch (filter)
            {
            case 0: pred = 0; break;
            case 1: pred = a; break;
            case 2: pred = b; break;
            case 3: pred = (a + b) / 2; break;
            case 4:
            {
                const int p = a + b - d;
                const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - d);
                pred = pa <= pb && pa <= pc ? a : (pb <= pc ? b : d);
                break;
            }
            default: FAIL("bad filter");
            }
            out(r, c) = static_cast<std::uint8_t>((x + pred) & 0xff);
        }
    }
    return out;
}

// 4-connected component labels of the set pixels, -1 elsewhere.
Grid<int> label_components(const BinaryMask& m, std::vector<int>& sizes)
{
    Grid<int> label(m.height(), m.width(), -1);
    for (std::size_t s = 0; s < m.size(); ++s)
    {
        if (!m[s] || label[s] >= 0)
            continue;
        const int id = static_cast<int>(sizes.size());
        sizes.push_back(0);
        std::vector<Pixel> stack{m.pixel(s)};
        label[s] = id;
        while (!stack.empty())
        {
            const Pixel p = stack.back();
            stack.pop_back();
            ++sizes[static_cast<std::size_t>(id)];
            for (Pixel n : {Pixel{p.row - 1, p.col}, Pixel{p.row + 1, p.col}, Pixel{p.row, p.col - 1},
                            Pixel{p.row, p.col + 1}})
                if (m.in_bounds(n) && m[n] && label[n] < 0)
                {
                    label[n] = id;
                    stack.push_back(n);
                }
        }
    }
    return label;
}

} // namespace

TEST_CASE("MI and entropy on the two-sample example")
{
    const EnsembleMaps e = from_values(1, 1, {{0.2}, {0.6}});
    const EnsembleScores s = ensemble_scores(e);
    const double mi = s.mutual_information.values[0];
    const double ent = s.predictive_entropy.values[0];
    CHECK(std::abs(mi - 0.08630) < 1e-5);
    CHECK(std::abs(ent - 0.67301) < 1e-5);
    CHECK(std::abs(mi - testing_support::mi_oracle({0.2, 0.6})) < 1e-12);
    CHECK(std::abs(ent - testing_support::h2_oracle(0.4)) < 1e-12);
    CHECK(mutual_information_map(e) == s.mutual_information);
    CHECK(predictive_entropy_map(e) == s.predictive_entropy);
}

TEST_CASE("MI edge cases")
{
    const ScoreMap extreme = mutual_information_map(from_values(1, 1, {{0.0}, {1.0}}));
    CHECK(std::abs(extreme.values[0] - testing_support::mi_oracle({0.0, 1.0})) < 1e-12);
    CHECK(extreme.values[0] == doctest::Approx(0.693145).epsilon(1e-6));

    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(20);
    for (auto& x : v)
        x = u(rng);
    const ScoreMap same = mutual_information_map(from_values(4, 5, {v, v, v}));
    for (double x : same.values.values())
        CHECK(x == 0.0);
    const ScoreMap single = mutual_information_map(from_values(4, 5, {v}));
    for (double x : single.values.values())
        CHECK(x == 0.0);

    const ScoreMap half = predictive_entropy_map(from_values(2, 2, {{0.5, 0.5, 0.5, 0.5}}));
    for (double x : half.values.values())
        CHECK(x == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(predictive_entropy_map(from_values(1, 1, {{0.0}})).values[0] < 2e-6);
}

TEST_CASE("MI matches the 50-digit oracle and respects the bounds")
{
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial)
    {
        const int k = 1 + static_cast<int>(rng() % 10);
        const int h = 1 + static_cast<int>(rng() % 8), w = 1 + static_cast<int>(rng() % 8);
        std::vector<std::vector<double>> values(static_cast<std::size_t>(k),
                                                std::vector<double>(static_cast<std::size_t>(h * w)));
        for (auto& m : values)
            for (auto& x : m)
                x = u(rng);
        const EnsembleScores s = ensemble_scores(from_values(h, w, values));
        for (std::size_t q = 0; q < values[0].size(); ++q)
        {
            std::vector<double> ps;
            for (const auto& m : values)
                ps.push_back(m[q]);
            const double mi = s.mutual_information.values[q];
            CHECK(std::abs(mi - testing_support::mi_oracle(ps)) < 1e-9);
            CHECK(mi >= 0.0);
            CHECK(mi <= s.predictive_entropy.values[q]);
            CHECK(s.predictive_entropy.values[q] <= std::log(2.0));
        }
    }
}

TEST_CASE("select_next examples")
{
    ScoreMap s{Grid<double>(4, 8, 0.0), ScoreKind::mutual_information};
    s.values(2, 2) = 0.9;
    s.values(0, 7) = 0.5;
    CHECK(select_next(s, {}) == Pixel{2, 2});
    const std::vector<Pixel> queried{{2, 2}};
    CHECK(select_next(s, queried) == Pixel{0, 7});

    ScoreMap tie{Grid<double>(4, 8, 0.1), ScoreKind::mutual_information};
    tie.values(1, 3) = 0.7;
    tie.values(2, 0) = 0.7;
    CHECK(select_next(tie, {}) == Pixel{1, 3});

    ScoreMap tiny{Grid<double>(1, 2, 0.0), ScoreKind::random};
    const std::vector<Pixel> all{{0, 0}, {0, 1}};
    CHECK_THROWS_AS(select_next(tiny, all), ExhaustionError);
}

TEST_CASE("strided candidate set")
{
    ScoreMap s{Grid<double>(6, 6, 0.0), ScoreKind::mutual_information};
    s.values(3, 3) = 1.0;
    s.values(2, 4) = 0.5;
    const CandidateSet every_other{2};
    CHECK(select_next(s, {}, every_other) == Pixel{2, 4});
    CHECK(max_over_candidates(s, {}, every_other) == 0.5);
    CHECK(max_over_candidates(s, {}) == 1.0);
    CHECK(sum_over_candidates(s, {}) == 1.5);
    const std::vector<Pixel> queried{{3, 3}};
    CHECK(sum_over_candidates(s, queried) == 0.5);
}

TEST_CASE("select_next is invariant to positive-affine rescaling")
{
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial)
    {
        ScoreMap s{Grid<double>(8, 8), ScoreKind::mutual_information};
        for (auto& v : s.values.values())
            v = u(rng);
        const double a = 0.1 + 10.0 * u(rng), b = 10.0 * u(rng) - 5.0;
        ScoreMap t = s;
        for (auto& v : t.values.values())
            v = a * v + b;
        const std::vector<Pixel> queried{{static_cast<int>(rng() % 8), static_cast<int>(rng() % 8)}};
        CHECK(select_next(s, queried) == select_next(t, queried));
    }
}

TEST_CASE("random score map is seeded and in [0,1)")
{
    const ScoreMap a = random_score_map(5, 7, 11);
    CHECK(a == random_score_map(5, 7, 11));
    CHECK_FALSE(a == random_score_map(5, 7, 12));
    CHECK(a.kind == ScoreKind::random);
    for (double v : a.values.values())
        CHECK((v >= 0.0 && v < 1.0));
}

TEST_CASE("oracle_select examples")
{
    BinaryMask empty(8, 8, 0), gt(8, 8, 0);
    gt(3, 5) = 1;
    CHECK(oracle_select(empty, gt, {}) == Pixel{3, 5});
    CHECK_FALSE(oracle_select(gt, gt, {}).has_value());
    const std::vector<Pixel> queried{{3, 5}};
    CHECK_FALSE(oracle_select(empty, gt, queried).has_value());

    const ScoreMap err = oracle_error_map(empty, gt);
    CHECK(err.kind == ScoreKind::oracle_error);
    CHECK(err.values(3, 5) == 1.0);
    CHECK(err.values(0, 0) == 0.0);
}

TEST_CASE("oracle picks the larger error component")
{
    // 6x6: a plus-shaped 5-pixel miss and a 2-pixel false positive.
    BinaryMask predicted(6, 6, 0), gt(6, 6, 0);
    for (Pixel p : {Pixel{1, 4}, Pixel{2, 3}, Pixel{2, 4}, Pixel{2, 5}, Pixel{3, 4}})
        gt[p] = 1;
    predicted(4, 0) = 1;
    predicted(5, 0) = 1;

    BinaryMask error(6, 6, 0);
    for (std::size_t i = 0; i < error.size(); ++i)
        error[i] = predicted[i] != gt[i];
    std::vector<int> sizes;
    const Grid<int> label = label_components(error, sizes);
    REQUIRE(sizes.size() == 2);
    const int big = sizes[0] > sizes[1] ? 0 : 1;
    CHECK(sizes[static_cast<std::size_t>(big)] == 5);

    const auto pick = oracle_select(predicted, gt, {});
    REQUIRE(pick.has_value());
    CHECK(label[*pick] == big);
    CHECK(*pick == Pixel{2, 4}); // the centre is the only interior pixel

    const std::vector<Pixel> queried{{2, 4}};
    const auto next = oracle_select(predicted, gt, queried);
    REQUIRE(next.has_value());
    CHECK_FALSE(*next == Pixel{2, 4});
}

TEST_CASE("ensemble prediction: zero params, identical samples, reference agreement")
{
    const ToyBackbone bb;
    SceneSpec spec;
    spec.size = 24;
    spec.seed = 4;
    const Scene scene = generate_scene(spec);
    PromptSet prompts;
    prompts.add({{5, 5}, 1});
    prompts.add({{20, 3}, 0});
    const FeatureMap f = bb.compute_features(scene.image, prompts);

    const std::vector<HeadParams> zeros(3, HeadParams(32, {4}));
    for (const auto& m : PosteriorEnsemble(zeros).predict(f).maps)
        for (double v : m.values())
            CHECK(v == 0.5);

    const HeadParams one = init_head(32, {16, 8}, 9);
    const EnsembleMaps same = PosteriorEnsemble(std::vector<HeadParams>(4, one)).predict(f);
    CHECK(same.k() == 4);
    for (const auto& m : same.maps)
        CHECK(m == same.maps[0]);

    const auto post = testing_support::random_posterior({16, 8}, 50.0, 10);
    const auto samples = sample_posterior(post, 7, 3);
    const EnsembleMaps fast = predictive_ensemble(f, samples);
    const EnsembleMaps ref = predictive_ensemble_reference(f, samples);
    REQUIRE(fast.k() == 7);
    double worst = 0.0;
    for (std::size_t k = 0; k < 7; ++k)
        for (std::size_t i = 0; i < fast.maps[k].size(); ++i)
            worst = std::max(worst, std::abs(fast.maps[k][i] - ref.maps[k][i]));
    CHECK(worst < 1e-5);

    CHECK_THROWS_AS(PosteriorEnsemble(std::vector<HeadParams>{}), ContractViolation);
    CHECK_THROWS_AS(PosteriorEnsemble(std::vector<HeadParams>{HeadParams(32, {4}), HeadParams(32, {2})}),
                    ContractViolation);
}

TEST_CASE("fixed-channel cache gives the uncached maps across prompt updates")
{
    const ToyBackbone bb;
    SceneSpec spec;
    spec.size = 20;
    spec.seed = 5;
    const Scene scene = generate_scene(spec);
    const auto samples = sample_posterior(testing_support::random_posterior({16, 8}, 20.0, 11), 5, 4);
    const PosteriorEnsemble ensemble(samples);

    FixedChannelCache cache;
    cache.channels = bb.fixed_channels();
    PromptSet prompts;
    for (Pixel p : {Pixel{2, 2}, Pixel{10, 15}, Pixel{17, 6}})
    {
        prompts.add({p, static_cast<std::uint8_t>(p.row % 2)});
        const FeatureMap f = bb.compute_features(scene.image, prompts);
        const EnsembleMaps cached = ensemble.predict(f, cache);
        const EnsembleMaps plain = ensemble.predict(f);
        for (std::size_t k = 0; k < samples.size(); ++k)
            for (std::size_t i = 0; i < plain.maps[k].size(); ++i)
                CHECK(std::abs(cached.maps[k][i] - plain.maps[k][i]) < 1e-5);
    }

    // A different image invalidates the cached response.
    spec.seed = 6;
    const FeatureMap other = bb.compute_features(generate_scene(spec).image, prompts);
    const EnsembleMaps cached = ensemble.predict(other, cache);
    const EnsembleMaps plain = ensemble.predict(other);
    for (std::size_t i = 0; i < plain.maps[0].size(); ++i)
        CHECK(std::abs(cached.maps[0][i] - plain.maps[0][i]) < 1e-5);
}

TEST_CASE("strategy names round trip")
{
    for (auto k : {StrategyKind::bald, StrategyKind::entropy, StrategyKind::random, StrategyKind::oracle,
                   StrategyKind::human_replay})
        CHECK(parse_strategy(to_string(k)) == k);
    CHECK_THROWS_AS(parse_strategy("greedy"), ContractViolation);
    CHECK(uses_ensemble(StrategyKind::bald));
    CHECK_FALSE(uses_ensemble(StrategyKind::human_replay));
}

TEST_CASE("heatmap rendering and PNG encoding")
{
    ScoreMap s{Grid<double>(3, 4, 0.0), ScoreKind::mutual_information};
    s.values(0, 1) = 0.2;
    s.values(2, 3) = 0.4;
    s.values(1, 0) = 0.1;
    const Grid<std::uint8_t> gray = render_heatmap(s);
    CHECK(gray(2, 3) == 255);
    CHECK(gray(0, 1) == 128); // round(127.5)
    CHECK(gray(1, 0) == 64);  // round(63.75)
    CHECK(gray(0, 0) == 0);
    const Grid<std::uint8_t> blank = render_heatmap(ScoreMap{Grid<double>(2, 2, 0.0), ScoreKind::random});
    for (auto v : blank.values())
        CHECK(v == 0);

    const Grid<std::uint8_t> decoded = decode_png(encode_png(gray));
    CHECK(decoded == gray);

    const auto bytes = score_grid_f32(s);
    REQUIRE(bytes.size() == 12 * 4);
    float f = 0.0f;
    std::memcpy(&f, bytes.data() + 11 * 4, 4);
    CHECK(f == 0.4f);
    const auto header = score_header_json(s);
    CHECK(header.find("\"height\":3") != std::string::npos);
    CHECK(header.find("\"width\":4") != std::string::npos);
}
