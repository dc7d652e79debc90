// head.hpp
//
// Lightweight convolutional head h_theta over frozen backbone features:
// forward pass, analytic gradients, and MAP training with Adam plus early
// stopping on validation IoU.

#pragma once

#include "activeprompt/backbone.hpp"
#include "activeprompt/synth.hpp"
#include "activeprompt/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace activeprompt
{

struct HeadConfig
{
    std::vector<int> hidden_channels = {16, 8};
    int kernel_size = 3;
    double dropout_rate = 0.1;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    int batch_size = 8;
    int patience = 15;
    double min_delta = 1e-4;
    int max_epochs = 100;
    std::uint64_t seed = 0;
    /// Loss pixels sampled per example and step (0 = every pixel).
    int pixels_per_example = 256;

    void validate() const;
};

/// Flat parameter vector plus the architecture that gives it meaning.
///
/// Layer l is a 3x3 conv from channels[l] to channels[l+1]; channels starts
/// with the input width and ends with 1. Each layer stores its weights in
/// ConvView order followed by its biases.
struct HeadParams
{
    std::vector<int> channels;
    std::vector<double> values;

    HeadParams() = default;
    /// All-zero parameters for input -> hidden... -> 1.
    HeadParams(int in_channels, const std::vector<int>& hidden);

    std::size_t layer_count() const { return channels.size() - 1; }
    std::size_t weight_offset(std::size_t layer) const;
    std::size_t weight_count(std::size_t layer) const;
    std::size_t bias_offset(std::size_t layer) const { return weight_offset(layer) + weight_count(layer); }
    std::size_t expected_size() const;

    ConvView layer(std::size_t l) const;
    ConvView layer_from(std::size_t l, std::span<const double> flat) const;

    bool same_architecture(const HeadParams& other) const { return channels == other.channels; }
    /// Throws ContractViolation if the value count or any value is invalid.
    void validate() const;

    bool operator==(const HeadParams&) const = default;
};

/// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
HeadParams init_head(int in_channels, const std::vector<int>& hidden, std::uint64_t seed);

/// Logit map of the head. With train_mode set, inverted dropout with the
/// given rate is applied after every hidden ReLU using `seed`.
Grid<double> head_logits(const FeatureMap& features, const HeadParams& params, bool train_mode = false,
                         std::uint64_t seed = 0, double dropout_rate = 0.1);

/// Clamped logistic of head_logits.
ProbabilityMap head_forward(const FeatureMap& features, const HeadParams& params, bool train_mode = false,
                            std::uint64_t seed = 0, double dropout_rate = 0.1);

/// Straight loops over conv3x3_reference; used to pin the fast path.
ProbabilityMap head_forward_reference(const FeatureMap& features, const HeadParams& params);

double logistic(double z);

/// One supervised term of the objective: mean binary cross-entropy over
/// `pixels` of one example.
struct LossTerm
{
    const FeatureMap* features = nullptr;
    const BinaryMask* target = nullptr;
    std::vector<std::size_t> pixels; ///< linear indices; empty = all pixels
    std::uint64_t dropout_seed = 0;
};

struct LossOptions
{
    bool dropout = false;
    double dropout_rate = 0.1;
    double weight_decay = 0.0;
};

/// Objective = mean over terms of each term's mean BCE + (weight_decay / 2) |theta|^2.
/// Returns the objective and writes its gradient (same length as params).
double loss_and_gradient(const HeadParams& params, std::span<const LossTerm> terms, const LossOptions& options,
                         std::span<double> gradient);

/// Gradient of log p(label | pixel) with respect to every parameter, with
/// dropout disabled. Only the receptive field of the pixel is evaluated.
void pixel_log_likelihood_gradient(const FeatureMap& features, const HeadParams& params, Pixel pixel,
                                   std::uint8_t label, std::span<double> gradient);

struct TrainRecord
{
    std::vector<double> train_loss;
    std::vector<double> val_iou;
    int stop_epoch = 0;
    int best_epoch = 0;
    std::string stop_reason; ///< "early-stop" or "max-epochs"
};

struct TrainResult
{
    HeadParams params;
    TrainRecord record;
};

/// Mean IoU of (probability >= 0.5) against the gt mask over the examples.
double validation_iou(const HeadParams& params, std::span<const FeatureMap> features,
                      std::span<const TrainingExample> examples);

/// MAP training. Features are computed once per example through the frozen
/// backbone. Returns the best-validation parameters.
TrainResult train_map(std::span<const TrainingExample> train, std::span<const TrainingExample> val,
                      const Backbone& backbone, const HeadConfig& config);

/// Builds examples (one per training prompt set) for a list of scenes.
std::vector<TrainingExample> make_training_examples(std::span<const LoadedItem> items, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Persistence: little-endian "BHD1" | u32 layer count | u32 out channels per
// layer | u64 parameter count | f32 parameters. Input width is implied (32).
// ---------------------------------------------------------------------------

void write_head(std::ostream& out, const HeadParams& params);
HeadParams read_head(std::istream& in);
void save_head(const std::filesystem::path& path, const HeadParams& params);
HeadParams load_head(const std::filesystem::path& path);

} // namespace activeprompt
