// synth.hpp
//
// Synthetic scene generator, training prompt-set sampler, dataset split and
// on-disk dataset layout (PGM images plus a JSON manifest).

#pragma once

#include "activeprompt/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace activeprompt
{

enum class SceneProfile
{
    blobs,
    rings,
    thin,
};

std::string_view to_string(SceneProfile profile);
/// Throws ContractViolation for an unknown name.
SceneProfile parse_profile(std::string_view name);

struct SceneSpec
{
    SceneProfile profile = SceneProfile::blobs;
    int size = 64;
    double foreground_mean = 0.7;
    double background_mean = 0.3;
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;
};

struct Scene
{
    Image image;
    BinaryMask mask;
};

inline constexpr double kMinMaskFraction = 0.02;
inline constexpr double kMaxMaskFraction = 0.60;
inline constexpr int kSceneAttempts = 100;

/// Deterministic in spec.seed. Throws GenerationError when no attempt meets
/// the mask-area constraint, ContractViolation for an invalid spec.
Scene generate_scene(const SceneSpec& spec);

struct TrainingExample
{
    Image image;
    PromptSet prompts;
    BinaryMask gt_mask;
};

enum class PromptStrategy
{
    random,
    boundary,
    center,
    grid,
    mixed,
    uncertainty,
};

inline constexpr std::array kPromptStrategies = {
    PromptStrategy::random, PromptStrategy::boundary, PromptStrategy::center,
    PromptStrategy::grid,   PromptStrategy::mixed,    PromptStrategy::uncertainty,
};

std::string_view to_string(PromptStrategy strategy);

inline constexpr int kMinTrainingPrompts = 3;
inline constexpr int kMaxTrainingPrompts = 10;
inline constexpr double kBoundaryBand = 5.0;

/// One prompt set per strategy, in kPromptStrategies order. Labels are read
/// from gt. Throws ContractViolation if gt is empty or shapes differ.
std::vector<PromptSet> generate_training_prompt_sets(const Image& image, const BinaryMask& gt, std::uint64_t seed);

/// Pixels of gt that have a 4-neighbour (inside the image) outside the mask.
std::vector<Pixel> boundary_pixels(const BinaryMask& gt);

struct DatasetSplit
{
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

inline constexpr std::uint64_t kDefaultSplitSeed = 42;

/// 70/15/15 seeded partition of [0, n). Throws ContractViolation for n < 7.
DatasetSplit split_dataset(std::size_t n, std::uint64_t seed = kDefaultSplitSeed);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// 8-bit binary PGM; intensities map to round(255 * v).
void write_pgm(const std::filesystem::path& path, const Image& image);
/// Mask pixels are written as 0 or 255.
void write_pgm(const std::filesystem::path& path, const BinaryMask& mask);
Image read_pgm_image(const std::filesystem::path& path);
/// Any non-zero byte reads as foreground.
BinaryMask read_pgm_mask(const std::filesystem::path& path);

struct ManifestItem
{
    std::string id;
    std::string dataset;
    std::string image_path; ///< relative to the dataset directory
    std::string mask_path;
    std::string split; ///< "train", "val" or "test"
};

std::vector<ManifestItem> read_manifest(const std::filesystem::path& data_dir);
void write_manifest(const std::filesystem::path& data_dir, const std::vector<ManifestItem>& items);

inline constexpr std::string_view kManifestName = "manifest.json";

/// Writes `scenes_per_profile` scenes for each profile into data_dir and
/// returns the manifest. Scene seeds derive from `seed`, the profile and the
/// scene index.
std::vector<ManifestItem> generate_dataset(const std::filesystem::path& data_dir,
                                           const std::vector<SceneProfile>& profiles, std::size_t scenes_per_profile,
                                           std::uint64_t seed, int size);

struct LoadedItem
{
    ManifestItem meta;
    Image image;
    BinaryMask mask;
};

LoadedItem load_item(const std::filesystem::path& data_dir, const ManifestItem& item);

/// Mixes a base seed with stream identifiers (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

} // namespace activeprompt
