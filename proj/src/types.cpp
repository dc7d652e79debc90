// types.cpp

#include "activeprompt/types.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <openssl/evp.h>

namespace activeprompt
{

Image::Image(int height, int width, std::vector<double> values)
    : Grid<double>(height, width, std::move(values))
{
    validate();
}

Image::Image(int height, int width, double fill)
    : Grid<double>(height, width, fill)
{
    validate();
}

void Image::validate() const
{
    if (height() < 8 || width() < 8)
        throw ContractViolation("image must be at least 8x8");
    for (double v : values())
        if (!std::isfinite(v) || v < 0.0 || v > 1.0)
            throw ContractViolation("image intensities must be finite and within [0,1]");
}

std::size_t mask_area(const BinaryMask& mask)
{
    return static_cast<std::size_t>(
        std::count_if(mask.values().begin(), mask.values().end(), [](std::uint8_t v) { return v != 0; }));
}

void PromptSet::add(Prompt prompt)
{
    if (prompt.label > 1)
        throw ContractViolation("prompt label must be 0 or 1");
    if (contains(prompt.location))
        throw ContractViolation("prompt location already present in the prompt set");
    prompts_.push_back(prompt);
}

bool PromptSet::contains(Pixel location) const
{
    return std::any_of(prompts_.begin(), prompts_.end(),
                       [&](const Prompt& p) { return p.location == location; });
}

std::size_t PromptSet::inclusion_count() const
{
    return static_cast<std::size_t>(
        std::count_if(prompts_.begin(), prompts_.end(), [](const Prompt& p) { return p.label == 1; }));
}

std::size_t PromptSet::exclusion_count() const
{
    return prompts_.size() - inclusion_count();
}

void PromptSet::check_bounds(int height, int width) const
{
    for (const auto& p : prompts_)
        if (p.location.row < 0 || p.location.col < 0 || p.location.row >= height || p.location.col >= width)
            throw ContractViolation("prompt location outside the image");
}

double iou(const BinaryMask& a, const BinaryMask& b)
{
    if (!a.same_shape(b))
        throw ContractViolation("iou: mask shapes differ");
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
    {
        const bool x = a[i] != 0;
        const bool y = b[i] != 0;
        inter += (x && y) ? 1 : 0;
        uni += (x || y) ? 1 : 0;
    }
    if (uni == 0)
        return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double binary_entropy(double p)
{
    const double q = clamp_probability(p);
    return -q * std::log(q) - (1.0 - q) * std::log1p(-q);
}

std::string mask_digest(const BinaryMask& mask)
{
    std::vector<unsigned char> bytes(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i)
        bytes[i] = mask[i] != 0 ? 1 : 0;

    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);

    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i)
    {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0xF]);
    }
    return out;
}

} // namespace activeprompt
