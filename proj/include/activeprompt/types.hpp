// types.hpp
//
// Pixel-grid value types shared by every stage of the active-prompting
// pipeline, plus IoU and binary entropy.

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace activeprompt
{

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// A caller broke a documented precondition (shape mismatch, empty input, ...).
struct ContractViolation : std::invalid_argument
{
    using std::invalid_argument::invalid_argument;
};

/// Scene synthesis could not satisfy its constraints.
struct GenerationError : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

/// MAP training produced a non-finite loss.
struct TrainingDivergence : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

/// Every candidate location has already been queried.
struct ExhaustionError : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

/// A metric needs data the trajectory does not carry (e.g. IoU without gt).
struct NotComputable : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

/// Clamp applied to every probability before a logarithm.
inline constexpr double kProbEpsilon = 1e-7;

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

struct Pixel
{
    int row = 0;
    int col = 0;

    auto operator<=>(const Pixel&) const = default;
};

/// Dense row-major 2-D grid.
template <typename T>
class Grid
{
public:
    Grid() = default;
    Grid(int height, int width, T fill = T{})
        : height_(height), width_(width)
    {
        if (height < 0 || width < 0)
            throw ContractViolation("grid dimensions must be non-negative");
        values_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
    }
    Grid(int height, int width, std::vector<T> values)
        : height_(height), width_(width), values_(std::move(values))
    {
        if (height < 0 || width < 0 ||
            values_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
            throw ContractViolation("grid value count does not match its shape");
    }

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    bool in_bounds(Pixel p) const
    {
        return p.row >= 0 && p.col >= 0 && p.row < height_ && p.col < width_;
    }
    std::size_t index(Pixel p) const
    {
        return static_cast<std::size_t>(p.row) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(p.col);
    }
    Pixel pixel(std::size_t index) const
    {
        return {static_cast<int>(index / static_cast<std::size_t>(width_)),
                static_cast<int>(index % static_cast<std::size_t>(width_))};
    }

    T& operator()(int row, int col) { return values_[index({row, col})]; }
    const T& operator()(int row, int col) const { return values_[index({row, col})]; }
    T& operator[](Pixel p) { return values_[index(p)]; }
    const T& operator[](Pixel p) const { return values_[index(p)]; }
    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }

    std::span<T> values() { return values_; }
    std::span<const T> values() const { return values_; }
    const std::vector<T>& storage() const { return values_; }

    template <typename U>
    bool same_shape(const Grid<U>& other) const
    {
        return height_ == other.height() && width_ == other.width();
    }

    bool operator==(const Grid&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<T> values_;
};

/// Grayscale image, intensities in [0,1], at least 8x8.
class Image : public Grid<double>
{
public:
    Image() = default;
    Image(int height, int width, std::vector<double> values);
    Image(int height, int width, double fill);

    /// Throws ContractViolation when the size or value invariants fail.
    void validate() const;
};

using BinaryMask = Grid<std::uint8_t>;

/// Pixelwise foreground probabilities, clamped to [eps, 1 - eps].
using ProbabilityMap = Grid<double>;

std::size_t mask_area(const BinaryMask& mask);

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

struct Prompt
{
    Pixel location;
    std::uint8_t label = 0; ///< 1 = inclusion, 0 = exclusion

    bool operator==(const Prompt&) const = default;
};

/// Ordered prompt history S_t. Locations are unique.
class PromptSet
{
public:
    PromptSet() = default;

    /// Appends a prompt; throws ContractViolation on a duplicate location or
    /// a label outside {0,1}.
    void add(Prompt prompt);
    bool contains(Pixel location) const;

    std::span<const Prompt> prompts() const { return prompts_; }
    std::size_t size() const { return prompts_.size(); }
    bool empty() const { return prompts_.empty(); }
    /// Number of prompts added so far (t).
    std::size_t iteration() const { return prompts_.size(); }

    std::size_t inclusion_count() const;
    std::size_t exclusion_count() const;

    /// Throws ContractViolation if any prompt lies outside an h x w grid.
    void check_bounds(int height, int width) const;

    bool operator==(const PromptSet&) const = default;

private:
    std::vector<Prompt> prompts_;
};

// ---------------------------------------------------------------------------
// Elementary math
// ---------------------------------------------------------------------------

/// |a & b| / |a | b|; two empty masks score 1.
double iou(const BinaryMask& a, const BinaryMask& b);

/// h2(p) in nats, with p clamped to [kProbEpsilon, 1 - kProbEpsilon].
double binary_entropy(double p);

inline double clamp_probability(double p)
{
    return p < kProbEpsilon ? kProbEpsilon : (p > 1.0 - kProbEpsilon ? 1.0 - kProbEpsilon : p);
}

/// Lower-case hex SHA-256 of the mask's 0/1 bytes in row-major order.
std::string mask_digest(const BinaryMask& mask);

} // namespace activeprompt
