// kernels.hpp
//
// Hot numerical loops. Every kernel comes as a pair: a plain serial
// `*_reference` version that is easy to audit, and an OpenMP/GEMM version
// used by the pipeline. Tests pin the two against each other and the
// benchmark target times them side by side.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace activeprompt
{

/// Dense H x W x C tensor, channel-last (row-major over (row, col, channel)).
struct Tensor3
{
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;

    Tensor3() = default;
    Tensor3(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c), fill)
    {
    }

    std::size_t pixels() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
    double& at(int r, int c, int ch)
    {
        return data[(static_cast<std::size_t>(r) * static_cast<std::size_t>(width) + static_cast<std::size_t>(c)) *
                        static_cast<std::size_t>(channels) +
                    static_cast<std::size_t>(ch)];
    }
    const double& at(int r, int c, int ch) const
    {
        return data[(static_cast<std::size_t>(r) * static_cast<std::size_t>(width) + static_cast<std::size_t>(c)) *
                        static_cast<std::size_t>(channels) +
                    static_cast<std::size_t>(ch)];
    }
    bool operator==(const Tensor3&) const = default;
};

/// A 3x3, stride-1, zero-padded convolution.
///
/// weights is laid out as a (9 * in_channels) x out_channels row-major matrix
/// whose row index is (ky * 3 + kx) * in_channels + c, i.e. the im2col patch
/// order. bias has out_channels entries.
struct ConvView
{
    int in_channels = 0;
    int out_channels = 0;
    std::span<const double> weights;
    std::span<const double> bias;

    std::size_t patch_length() const { return 9 * static_cast<std::size_t>(in_channels); }
};

namespace kernels
{

void conv3x3_reference(const Tensor3& in, const ConvView& layer, Tensor3& out);
void conv3x3(const Tensor3& in, const ConvView& layer, Tensor3& out);
/// conv3x3 over columns already produced by im2col3x3.
void conv3x3_from_cols(std::span<const double> cols, int height, int width, const ConvView& layer, Tensor3& out);

/// Gradients of a conv layer given dL/dout. dweights/dbias are accumulated
/// into (not overwritten); din, when non-null, is overwritten.
void conv3x3_backward_reference(const Tensor3& in, const ConvView& layer, const Tensor3& dout,
                                std::span<double> dweights, std::span<double> dbias, Tensor3* din);
void conv3x3_backward(const Tensor3& in, const ConvView& layer, const Tensor3& dout,
                      std::span<double> dweights, std::span<double> dbias, Tensor3* din);
void conv3x3_backward_from_cols(std::span<const double> cols, const ConvView& layer, const Tensor3& dout,
                                std::span<double> dweights, std::span<double> dbias, Tensor3* din);

/// Rows are pixels, columns follow ConvView's patch order.
void im2col3x3(const Tensor3& in, std::vector<double>& cols);

/// Per-pixel BALD terms over K probability maps of n pixels each:
///   entropy_out[q] = h2(mean_k p_k(q))
///   mi_out[q]      = max(0, h2(mean) - mean_k h2(p_k(q)))
/// Probabilities are clamped before every logarithm.
void ensemble_scores_reference(std::span<const std::span<const double>> maps, std::span<double> mi_out,
                               std::span<double> entropy_out);
void ensemble_scores(std::span<const std::span<const double>> maps, std::span<double> mi_out,
                     std::span<double> entropy_out);

} // namespace kernels
} // namespace activeprompt
