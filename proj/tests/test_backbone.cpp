#include "activeprompt/backbone.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace activeprompt;

namespace
{

Image noisy_image(int size, std::uint64_t seed)
{
    SceneSpec spec;
    spec.size = size;
    spec.seed = seed;
    return generate_scene(spec).image;
}

} // namespace

TEST_CASE("features always have 32 channels")
{
    const ToyBackbone bb;
    const Image image = noisy_image(24, 1);
    PromptSet prompts;
    CHECK(bb.compute_features(image, prompts).channels == kFeatureChannels);
    prompts.add({{3, 3}, 1});
    prompts.add({{10, 12}, 0});
    const FeatureMap f = bb.compute_features(image, prompts);
    CHECK(f.channels == 32);
    CHECK(f.height == 24);
    CHECK(f.width == 24);
    for (double v : f.data)
        CHECK(std::isfinite(v));
}

TEST_CASE("empty prompts zero the prompt channels and saturate the distances")
{
    const ToyBackbone bb;
    const FeatureMap f = bb.compute_features(noisy_image(16, 2), PromptSet{});
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c)
        {
            for (int ch = channel::kIncludeSpatial; ch < channel::kRowCoord; ++ch)
                CHECK(f.at(r, c, ch) == 0.0);
            CHECK(f.at(r, c, channel::kIncludeDistance) == 1.0);
            CHECK(f.at(r, c, channel::kExcludeDistance) == 1.0);
            CHECK(f.at(r, c, channel::kBias) == 1.0);
        }
}

TEST_CASE("inclusion prompt peaks at its own location")
{
    const ToyBackbone bb;
    PromptSet prompts;
    prompts.add({{5, 9}, 1});
    const FeatureMap f = bb.compute_features(noisy_image(20, 3), prompts);
    CHECK(f.at(5, 9, channel::kIncludeSpatial) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(f.at(5, 9, channel::kIncludeDistance) == 0.0);

    const FeatureMap g = bb.compute_features(Image(20, 20, 0.4), prompts);
    for (int k = 0; k < 4; ++k)
        CHECK(g.at(5, 9, channel::kIncludeSimilar + k) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("no prompts gives an empty mask")
{
    const ToyBackbone bb;
    const BackboneOutput out = bb.predict_mask(noisy_image(32, 4), PromptSet{});
    CHECK(mask_area(out.mask) == 0);
}

TEST_CASE("uniform image with one inclusion prompt gives the threshold disk")
{
    const ToyBackbone bb;
    const int size = 128;
    const Pixel p{64, 61};
    const double radius = ToyBackbone::kSpatialSigma * std::sqrt(2.0 * std::log(1.0 / ToyBackbone::kScoreThreshold));
    CHECK(radius == doctest::Approx(58.8).epsilon(1e-3));
    PromptSet prompts;
    prompts.add({p, 1});
    const BackboneOutput out = bb.predict_mask(Image(size, size, 0.5), prompts);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
        {
            const double d = std::hypot(r - p.row, c - p.col);
            CHECK(static_cast<bool>(out.mask(r, c)) == (d < radius));
        }
}

TEST_CASE("prompt weight formula")
{
    Image image(8, 8, 0.2);
    image(3, 4) = 0.35;
    const double w = ToyBackbone::prompt_weight(image, {3, 4}, {0, 0});
    const double expect = std::exp(-25.0 / (2.0 * 24.0 * 24.0)) * std::exp(-(0.15 * 0.15) / (2.0 * 0.01));
    CHECK(w == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("coincident inclusion and exclusion prompts cancel")
{
    const Image image = noisy_image(24, 5);
    const std::vector<Prompt> prompts{{{7, 7}, 1}, {{7, 7}, 0}};
    const Grid<double> s = ToyBackbone::score_map(image, prompts);
    for (double v : s.values())
        CHECK(v == 0.0);
}

TEST_CASE("score map matches the reference")
{
    const Image image = noisy_image(40, 6);
    const std::vector<Prompt> prompts{{{3, 3}, 1}, {{20, 30}, 0}, {{39, 0}, 1}, {{11, 25}, 1}};
    const Grid<double> fast = ToyBackbone::score_map(image, prompts);
    const Grid<double> ref = ToyBackbone::score_map_reference(image, prompts);
    for (std::size_t i = 0; i < fast.size(); ++i)
        CHECK(std::abs(fast[i] - ref[i]) < 1e-12);
}

TEST_CASE("adding prompts moves the score monotonically")
{
    const Image image = noisy_image(24, 7);
    std::vector<Prompt> prompts{{{4, 4}, 1}, {{18, 18}, 0}};
    const Grid<double> base = ToyBackbone::score_map(image, prompts);

    auto more = prompts;
    more.push_back({{12, 6}, 1});
    const Grid<double> up = ToyBackbone::score_map(image, more);
    more.back().label = 0;
    const Grid<double> down = ToyBackbone::score_map(image, more);
    for (std::size_t i = 0; i < base.size(); ++i)
    {
        CHECK(up[i] >= base[i]);
        CHECK(down[i] <= base[i]);
    }
}

TEST_CASE("backbone outputs are pure")
{
    const ToyBackbone bb;
    const Image image = noisy_image(24, 8);
    PromptSet prompts;
    prompts.add({{2, 20}, 1});
    prompts.add({{15, 3}, 0});
    const BackboneOutput a = bb.predict_mask(image, prompts);
    const BackboneOutput b = bb.predict_mask(image, prompts);
    CHECK(a.features == b.features);
    CHECK(a.mask == b.mask);
    CHECK(a.score_map == b.score_map);
    CHECK(a.features == bb.compute_features(image, prompts));
}

TEST_CASE("declared fixed channels do not depend on the prompts")
{
    const ToyBackbone bb;
    const Image image = noisy_image(20, 9);
    const FeatureMap none = bb.compute_features(image, PromptSet{});
    PromptSet prompts;
    prompts.add({{1, 1}, 1});
    prompts.add({{10, 15}, 0});
    prompts.add({{17, 4}, 1});
    const FeatureMap some = bb.compute_features(image, prompts);
    const auto fixed = bb.fixed_channels();
    CHECK(fixed.size() == 11);
    for (int ch : fixed)
        for (int r = 0; r < 20; ++r)
            for (int c = 0; c < 20; ++c)
                CHECK(none.at(r, c, ch) == some.at(r, c, ch));
    // A channel outside the list does move.
    CHECK(none.at(1, 1, channel::kIncludeSpatial) != some.at(1, 1, channel::kIncludeSpatial));
}

TEST_CASE("out-of-bounds prompts are rejected")
{
    const ToyBackbone bb;
    PromptSet prompts;
    prompts.add({{30, 1}, 1});
    CHECK_THROWS_AS(bb.predict_mask(Image(16, 16, 0.5), prompts), ContractViolation);
}
