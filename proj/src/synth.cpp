// synth.cpp

#include "activeprompt/synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>

namespace activeprompt
{

namespace
{

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

double uniform(Rng& rng, double lo, double hi)
{
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

BinaryMask draw_blobs(Rng& rng, int size)
{
    BinaryMask mask(size, size, 0);
    const double s = size;
    const int count = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int e = 0; e < count; ++e)
    {
        const double cy = uniform(rng, 0.15 * s, 0.85 * s);
        const double cx = uniform(rng, 0.15 * s, 0.85 * s);
        const double a = uniform(rng, 0.06 * s, 0.25 * s);
        const double b = uniform(rng, 0.06 * s, 0.25 * s);
        const double theta = uniform(rng, 0.0, std::numbers::pi);
        const double ct = std::cos(theta);
        const double st = std::sin(theta);
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c)
            {
                const double dy = r - cy;
                const double dx = c - cx;
                const double u = (dx * ct + dy * st) / a;
                const double v = (-dx * st + dy * ct) / b;
                if (u * u + v * v <= 1.0)
                    mask(r, c) = 1;
            }
    }
    return mask;
}

BinaryMask draw_ring(Rng& rng, int size)
{
    BinaryMask mask(size, size, 0);
    const double s = size;
    const double cy = uniform(rng, 0.3 * s, 0.7 * s);
    const double cx = uniform(rng, 0.3 * s, 0.7 * s);
    const double outer = uniform(rng, 0.15 * s, 0.4 * s);
    const double inner = outer * uniform(rng, 0.4, 0.8);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
        {
            const double d = std::hypot(r - cy, c - cx);
            if (d >= inner && d <= outer)
                mask(r, c) = 1;
        }
    return mask;
}

double segment_distance(double py, double px, double ay, double ax, double by, double bx)
{
    const double vy = by - ay;
    const double vx = bx - ax;
    const double len2 = vy * vy + vx * vx;
    double t = len2 > 0.0 ? ((py - ay) * vy + (px - ax) * vx) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(py - (ay + t * vy), px - (ax + t * vx));
}

BinaryMask draw_thin(Rng& rng, int size)
{
    BinaryMask mask(size, size, 0);
    const double s = size;
    std::array<std::pair<double, double>, 5> vertices{};
    for (auto& v : vertices)
        v = {uniform(rng, 0.1 * s, 0.9 * s), uniform(rng, 0.1 * s, 0.9 * s)};
    // Pixel centres within 1 px of the polyline: a 2 px wide stroke.
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
            for (std::size_t i = 0; i + 1 < vertices.size(); ++i)
                if (segment_distance(r, c, vertices[i].first, vertices[i].second, vertices[i + 1].first,
                                     vertices[i + 1].second) <= 1.0)
                {
                    mask(r, c) = 1;
                    break;
                }
    return mask;
}

// ---------------------------------------------------------------------------
// Prompt sampling
// ---------------------------------------------------------------------------

struct PromptContext
{
    const Image& image;
    const BinaryMask& gt;
    std::vector<Pixel> boundary_band;
    std::vector<Pixel> ambiguous;
    double centroid_row = 0.0;
    double centroid_col = 0.0;
};

PromptContext make_context(const Image& image, const BinaryMask& gt)
{
    PromptContext ctx{image, gt, {}, {}, 0.0, 0.0};
    const auto boundary = boundary_pixels(gt);
    const double band2 = kBoundaryBand * kBoundaryBand;

    double fg_sum = 0.0;
    double bg_sum = 0.0;
    std::size_t fg = 0;
    for (int r = 0; r < gt.height(); ++r)
        for (int c = 0; c < gt.width(); ++c)
        {
            if (gt(r, c) != 0)
            {
                fg_sum += image(r, c);
                ctx.centroid_row += r;
                ctx.centroid_col += c;
                ++fg;
            }
            else
            {
                bg_sum += image(r, c);
            }
            for (const auto& b : boundary)
            {
                const double dr = r - b.row;
                const double dc = c - b.col;
                if (dr * dr + dc * dc <= band2)
                {
                    ctx.boundary_band.push_back({r, c});
                    break;
                }
            }
        }
    const std::size_t bg = gt.size() - fg;
    ctx.centroid_row /= static_cast<double>(fg);
    ctx.centroid_col /= static_cast<double>(fg);
    const double fg_mean = fg_sum / static_cast<double>(fg);
    const double bg_mean = bg > 0 ? bg_sum / static_cast<double>(bg) : fg_mean;
    const double midpoint = 0.5 * (fg_mean + bg_mean);
    for (int r = 0; r < image.height(); ++r)
        for (int c = 0; c < image.width(); ++c)
            if (std::abs(image(r, c) - midpoint) <= 0.1)
                ctx.ambiguous.push_back({r, c});
    return ctx;
}

Pixel random_pixel(const Image& image, Rng& rng)
{
    return {std::uniform_int_distribution<int>(0, image.height() - 1)(rng),
            std::uniform_int_distribution<int>(0, image.width() - 1)(rng)};
}

Pixel pick(const std::vector<Pixel>& pool, Rng& rng)
{
    return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
}

Pixel lattice_point(const Image& image, int per_side, int i, int j)
{
    const int r = static_cast<int>(std::floor((i + 0.5) * image.height() / per_side));
    const int c = static_cast<int>(std::floor((j + 0.5) * image.width() / per_side));
    return {std::clamp(r, 0, image.height() - 1), std::clamp(c, 0, image.width() - 1)};
}

/// One candidate draw for a stochastic strategy; nullopt when the draw is
/// rejected (empty pool or out of bounds).
std::optional<Pixel> draw_candidate(PromptStrategy strategy, const PromptContext& ctx, Rng& rng)
{
    switch (strategy)
    {
    case PromptStrategy::random:
        return random_pixel(ctx.image, rng);
    case PromptStrategy::boundary:
        if (ctx.boundary_band.empty())
            return std::nullopt;
        return pick(ctx.boundary_band, rng);
    case PromptStrategy::center: {
        const double sigma = std::max(ctx.image.height(), ctx.image.width()) / 8.0;
        std::normal_distribution<double> nd(0.0, sigma);
        const Pixel p{static_cast<int>(std::lround(ctx.centroid_row + nd(rng))),
                      static_cast<int>(std::lround(ctx.centroid_col + nd(rng)))};
        if (!ctx.image.in_bounds(p))
            return std::nullopt;
        return p;
    }
    case PromptStrategy::grid: {
        constexpr int kMixedLattice = 4;
        const int i = std::uniform_int_distribution<int>(0, kMixedLattice - 1)(rng);
        const int j = std::uniform_int_distribution<int>(0, kMixedLattice - 1)(rng);
        return lattice_point(ctx.image, kMixedLattice, i, j);
    }
    case PromptStrategy::uncertainty:
        if (ctx.ambiguous.empty())
            return std::nullopt;
        return pick(ctx.ambiguous, rng);
    case PromptStrategy::mixed:
        break;
    }
    return std::nullopt;
}

void add_labelled(PromptSet& set, const BinaryMask& gt, Pixel p)
{
    set.add({p, gt[p] != 0 ? std::uint8_t{1} : std::uint8_t{0}});
}

/// Draws with rejection (duplicates or rejected candidates); after
/// kSceneAttempts failures falls back to a uniform unused pixel.
void draw_into(PromptSet& set, PromptStrategy strategy, const PromptContext& ctx, Rng& rng)
{
    for (int attempt = 0; attempt < kSceneAttempts; ++attempt)
    {
        const auto p = draw_candidate(strategy, ctx, rng);
        if (p && !set.contains(*p))
        {
            add_labelled(set, ctx.gt, *p);
            return;
        }
    }
    for (;;)
    {
        const Pixel p = random_pixel(ctx.image, rng);
        if (!set.contains(p))
        {
            add_labelled(set, ctx.gt, p);
            return;
        }
    }
}

PromptSet sample_prompt_set(PromptStrategy strategy, const PromptContext& ctx, Rng& rng)
{
    const int count = std::uniform_int_distribution<int>(kMinTrainingPrompts, kMaxTrainingPrompts)(rng);
    PromptSet set;
    if (strategy == PromptStrategy::grid)
    {
        const int per_side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
        for (int i = 0; i < per_side && static_cast<int>(set.size()) < count; ++i)
            for (int j = 0; j < per_side && static_cast<int>(set.size()) < count; ++j)
            {
                const Pixel p = lattice_point(ctx.image, per_side, i, j);
                if (!set.contains(p))
                    add_labelled(set, ctx.gt, p);
            }
        while (static_cast<int>(set.size()) < count)
            draw_into(set, PromptStrategy::random, ctx, rng);
        return set;
    }
    if (strategy == PromptStrategy::mixed)
    {
        static constexpr std::array kCycle = {PromptStrategy::random, PromptStrategy::boundary, PromptStrategy::center,
                                              PromptStrategy::grid, PromptStrategy::uncertainty};
        for (int i = 0; i < count; ++i)
            draw_into(set, kCycle[static_cast<std::size_t>(i) % kCycle.size()], ctx, rng);
        return set;
    }
    for (int i = 0; i < count; ++i)
        draw_into(set, strategy, ctx, rng);
    return set;
}

void write_pgm_bytes(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& bytes)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw std::runtime_error("failed writing " + path.string());
}

std::vector<std::uint8_t> read_pgm_bytes(const std::filesystem::path& path, int& height, int& width)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P5")
        throw std::runtime_error(path.string() + ": not a binary PGM (P5)");
    auto next_int = [&]() {
        in >> std::ws;
        while (in.peek() == '#')
        {
            std::string comment;
            std::getline(in, comment);
            in >> std::ws;
        }
        int v = 0;
        in >> v;
        return v;
    };
    width = next_int();
    height = next_int();
    const int maxval = next_int();
    if (!in || width <= 0 || height <= 0 || maxval != 255)
        throw std::runtime_error(path.string() + ": unsupported PGM header");
    in.get(); // single whitespace before raster
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(width) * static_cast<std::size_t>(height));
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw std::runtime_error(path.string() + ": truncated PGM raster");
    return bytes;
}

} // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b)
{
    std::uint64_t x = splitmix64(base);
    x = splitmix64(x ^ (a * 0xD1B54A32D192ED03ULL + 1));
    x = splitmix64(x ^ (b * 0x8CB92BA72F3D8DD7ULL + 2));
    return x;
}

std::string_view to_string(SceneProfile profile)
{
    switch (profile)
    {
    case SceneProfile::blobs:
        return "blobs";
    case SceneProfile::rings:
        return "rings";
    case SceneProfile::thin:
        return "thin";
    }
    return "blobs";
}

SceneProfile parse_profile(std::string_view name)
{
    if (name == "blobs")
        return SceneProfile::blobs;
    if (name == "rings")
        return SceneProfile::rings;
    if (name == "thin")
        return SceneProfile::thin;
    throw ContractViolation("unknown scene profile '" + std::string(name) + "'");
}

std::string_view to_string(PromptStrategy strategy)
{
    switch (strategy)
    {
    case PromptStrategy::random:
        return "random";
    case PromptStrategy::boundary:
        return "boundary";
    case PromptStrategy::center:
        return "center";
    case PromptStrategy::grid:
        return "grid";
    case PromptStrategy::mixed:
        return "mixed";
    case PromptStrategy::uncertainty:
        return "uncertainty";
    }
    return "random";
}

Scene generate_scene(const SceneSpec& spec)
{
    if (spec.size < 8)
        throw ContractViolation("scene size must be at least 8");
    if (spec.foreground_mean == spec.background_mean)
        throw ContractViolation("foreground and background means must differ");
    if (!(spec.noise_sigma >= 0.0))
        throw ContractViolation("noise sigma must be non-negative");

    Rng rng(spec.seed);
    const double pixels = static_cast<double>(spec.size) * spec.size;
    for (int attempt = 0; attempt < kSceneAttempts; ++attempt)
    {
        BinaryMask mask;
        switch (spec.profile)
        {
        case SceneProfile::blobs:
            mask = draw_blobs(rng, spec.size);
            break;
        case SceneProfile::rings:
            mask = draw_ring(rng, spec.size);
            break;
        case SceneProfile::thin:
            mask = draw_thin(rng, spec.size);
            break;
        }
        const double fraction = static_cast<double>(mask_area(mask)) / pixels;
        if (fraction < kMinMaskFraction || fraction > kMaxMaskFraction)
            continue;

        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        std::vector<double> values(mask.size());
        for (std::size_t i = 0; i < values.size(); ++i)
        {
            const double mean = mask[i] != 0 ? spec.foreground_mean : spec.background_mean;
            const double n = spec.noise_sigma > 0.0 ? noise(rng) : 0.0;
            values[i] = std::clamp(mean + n, 0.0, 1.0);
        }
        return {Image(spec.size, spec.size, std::move(values)), std::move(mask)};
    }
    throw GenerationError("could not satisfy the mask-area constraint in " + std::to_string(kSceneAttempts) +
                          " attempts");
}

std::vector<Pixel> boundary_pixels(const BinaryMask& gt)
{
    std::vector<Pixel> out;
    static constexpr std::array<std::pair<int, int>, 4> kNeighbours = {{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
    for (int r = 0; r < gt.height(); ++r)
        for (int c = 0; c < gt.width(); ++c)
        {
            if (gt(r, c) == 0)
                continue;
            for (auto [dr, dc] : kNeighbours)
            {
                const Pixel n{r + dr, c + dc};
                if (gt.in_bounds(n) && gt[n] == 0)
                {
                    out.push_back({r, c});
                    break;
                }
            }
        }
    return out;
}

std::vector<PromptSet> generate_training_prompt_sets(const Image& image, const BinaryMask& gt, std::uint64_t seed)
{
    if (!image.same_shape(gt))
        throw ContractViolation("image and mask shapes differ");
    if (mask_area(gt) == 0)
        throw ContractViolation("training prompt sets need a non-empty ground-truth mask");

    const PromptContext ctx = make_context(image, gt);
    Rng rng(seed);
    std::vector<PromptSet> sets;
    sets.reserve(kPromptStrategies.size());
    for (auto strategy : kPromptStrategies)
        sets.push_back(sample_prompt_set(strategy, ctx, rng));
    return sets;
}

DatasetSplit split_dataset(std::size_t n, std::uint64_t seed)
{
    if (n < 7)
        throw ContractViolation("split_dataset needs at least 7 items");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i)
        order[i] = i;
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t n_train = (n * 7) / 10;
    const std::size_t n_val = (n * 15) / 100;
    DatasetSplit split;
    split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                     order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return split;
}

void write_pgm(const std::filesystem::path& path, const Image& image)
{
    std::vector<std::uint8_t> bytes(image.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<std::uint8_t>(std::lround(255.0 * image[i]));
    write_pgm_bytes(path, image.height(), image.width(), bytes);
}

void write_pgm(const std::filesystem::path& path, const BinaryMask& mask)
{
    std::vector<std::uint8_t> bytes(mask.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = mask[i] != 0 ? 255 : 0;
    write_pgm_bytes(path, mask.height(), mask.width(), bytes);
}

Image read_pgm_image(const std::filesystem::path& path)
{
    int h = 0;
    int w = 0;
    const auto bytes = read_pgm_bytes(path, h, w);
    std::vector<double> values(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        values[i] = bytes[i] / 255.0;
    return Image(h, w, std::move(values));
}

BinaryMask read_pgm_mask(const std::filesystem::path& path)
{
    int h = 0;
    int w = 0;
    const auto bytes = read_pgm_bytes(path, h, w);
    BinaryMask mask(h, w, 0);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        mask[i] = bytes[i] != 0 ? 1 : 0;
    return mask;
}

std::vector<ManifestItem> read_manifest(const std::filesystem::path& data_dir)
{
    const auto path = data_dir / kManifestName;
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open manifest " + path.string());
    const auto doc = nlohmann::json::parse(in);
    if (!doc.is_array())
        throw std::runtime_error(path.string() + ": manifest must be a JSON array");
    std::vector<ManifestItem> items;
    for (const auto& entry : doc)
    {
        ManifestItem item;
        item.id = entry.at("id").get<std::string>();
        item.image_path = entry.at("image_path").get<std::string>();
        item.mask_path = entry.at("mask_path").get<std::string>();
        item.split = entry.at("split").get<std::string>();
        item.dataset = entry.value("dataset", std::string("default"));
        items.push_back(std::move(item));
    }
    return items;
}

void write_manifest(const std::filesystem::path& data_dir, const std::vector<ManifestItem>& items)
{
    nlohmann::ordered_json doc = nlohmann::ordered_json::array();
    for (const auto& item : items)
    {
        nlohmann::ordered_json entry;
        entry["id"] = item.id;
        entry["dataset"] = item.dataset;
        entry["image_path"] = item.image_path;
        entry["mask_path"] = item.mask_path;
        entry["split"] = item.split;
        doc.push_back(std::move(entry));
    }
    std::ofstream out(data_dir / kManifestName);
    out << doc.dump(2) << "\n";
    if (!out)
        throw std::runtime_error("failed writing manifest in " + data_dir.string());
}

std::vector<ManifestItem> generate_dataset(const std::filesystem::path& data_dir,
                                           const std::vector<SceneProfile>& profiles, std::size_t scenes_per_profile,
                                           std::uint64_t seed, int size)
{
    std::filesystem::create_directories(data_dir / "images");
    std::filesystem::create_directories(data_dir / "masks");
    std::vector<ManifestItem> items;
    for (auto profile : profiles)
    {
        const std::string name(to_string(profile));
        const auto split = scenes_per_profile >= 7 ? split_dataset(scenes_per_profile) : DatasetSplit{};
        std::vector<std::string> split_of(scenes_per_profile, "train");
        for (auto i : split.val)
            split_of[i] = "val";
        for (auto i : split.test)
            split_of[i] = "test";

        for (std::size_t i = 0; i < scenes_per_profile; ++i)
        {
            SceneSpec spec;
            spec.profile = profile;
            spec.size = size;
            spec.seed = derive_seed(seed, static_cast<std::uint64_t>(profile), i);
            const Scene scene = generate_scene(spec);

            std::ostringstream id;
            id << name << "_" << std::setw(4) << std::setfill('0') << i;
            ManifestItem item{id.str(), name, "images/" + id.str() + ".pgm", "masks/" + id.str() + ".pgm",
                              split_of[i]};
            write_pgm(data_dir / item.image_path, scene.image);
            write_pgm(data_dir / item.mask_path, scene.mask);
            items.push_back(std::move(item));
        }
    }
    write_manifest(data_dir, items);
    return items;
}

LoadedItem load_item(const std::filesystem::path& data_dir, const ManifestItem& item)
{
    LoadedItem loaded{item, read_pgm_image(data_dir / item.image_path), read_pgm_mask(data_dir / item.mask_path)};
    if (!loaded.image.same_shape(loaded.mask))
        throw std::runtime_error("item " + item.id + ": image and mask shapes differ");
    return loaded;
}

} // namespace activeprompt
