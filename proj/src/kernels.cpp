// kernels.cpp

#include "activeprompt/kernels.hpp"

#include "activeprompt/types.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace activeprompt::kernels
{

namespace
{

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

void check_layer(const Tensor3& in, const ConvView& layer)
{
    if (in.channels != layer.in_channels)
        throw ContractViolation("conv3x3: input channel count does not match the layer");
    if (layer.weights.size() != layer.patch_length() * static_cast<std::size_t>(layer.out_channels) ||
        layer.bias.size() != static_cast<std::size_t>(layer.out_channels))
        throw ContractViolation("conv3x3: weight or bias size does not match the layer");
}

} // namespace

void im2col3x3(const Tensor3& in, std::vector<double>& cols)
{
    const int h = in.height;
    const int w = in.width;
    const int c = in.channels;
    const std::size_t plen = 9 * static_cast<std::size_t>(c);
    cols.assign(in.pixels() * plen, 0.0);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col)
        {
            double* row = &cols[(static_cast<std::size_t>(r) * static_cast<std::size_t>(w) + static_cast<std::size_t>(col)) * plen];
            for (int ky = 0; ky < 3; ++ky)
            {
                const int sr = r + ky - 1;
                if (sr < 0 || sr >= h)
                    continue;
                for (int kx = 0; kx < 3; ++kx)
                {
                    const int sc = col + kx - 1;
                    if (sc < 0 || sc >= w)
                        continue;
                    std::copy_n(&in.at(sr, sc, 0), c, row + static_cast<std::size_t>(ky * 3 + kx) * static_cast<std::size_t>(c));
                }
            }
        }
}

void conv3x3_reference(const Tensor3& in, const ConvView& layer, Tensor3& out)
{
    check_layer(in, layer);
    const int h = in.height;
    const int w = in.width;
    const int cin = layer.in_channels;
    const int cout = layer.out_channels;
    out = Tensor3(h, w, cout);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int oc = 0; oc < cout; ++oc)
            {
                double acc = layer.bias[static_cast<std::size_t>(oc)];
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                    {
                        const int sr = r + ky - 1;
                        const int sc = c + kx - 1;
                        if (sr < 0 || sr >= h || sc < 0 || sc >= w)
                            continue;
                        for (int ic = 0; ic < cin; ++ic)
                            acc += in.at(sr, sc, ic) *
                                   layer.weights[(static_cast<std::size_t>(ky * 3 + kx) * static_cast<std::size_t>(cin) +
                                                  static_cast<std::size_t>(ic)) *
                                                     static_cast<std::size_t>(cout) +
                                                 static_cast<std::size_t>(oc)];
                    }
                out.at(r, c, oc) = acc;
            }
}

void conv3x3(const Tensor3& in, const ConvView& layer, Tensor3& out)
{
    check_layer(in, layer);
    std::vector<double> cols;
    im2col3x3(in, cols);
    conv3x3_from_cols(cols, in.height, in.width, layer, out);
}

void conv3x3_from_cols(std::span<const double> cols, int height, int width, const ConvView& layer, Tensor3& out)
{
    const auto n = static_cast<Eigen::Index>(height) * width;
    const auto plen = static_cast<Eigen::Index>(layer.patch_length());
    const auto cout = static_cast<Eigen::Index>(layer.out_channels);
    if (cols.size() != static_cast<std::size_t>(n * plen))
        throw ContractViolation("conv3x3: column buffer does not match the layer");

    out = Tensor3(height, width, layer.out_channels);
    ConstRowMap a(cols.data(), n, plen);
    ConstRowMap wmat(layer.weights.data(), plen, cout);
    RowMap result(out.data.data(), n, cout);
    Eigen::Map<const Eigen::RowVectorXd> bias(layer.bias.data(), cout);
    result.rowwise() = bias;
    result.noalias() += a * wmat;
}

void conv3x3_backward_reference(const Tensor3& in, const ConvView& layer, const Tensor3& dout,
                                std::span<double> dweights, std::span<double> dbias, Tensor3* din)
{
    check_layer(in, layer);
    const int h = in.height;
    const int w = in.width;
    const int cin = layer.in_channels;
    const int cout = layer.out_channels;
    if (dout.height != h || dout.width != w || dout.channels != cout)
        throw ContractViolation("conv3x3_backward: gradient shape does not match the layer output");
    if (din != nullptr)
        *din = Tensor3(h, w, cin);

    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int oc = 0; oc < cout; ++oc)
            {
                const double g = dout.at(r, c, oc);
                dbias[static_cast<std::size_t>(oc)] += g;
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                    {
                        const int sr = r + ky - 1;
                        const int sc = c + kx - 1;
                        if (sr < 0 || sr >= h || sc < 0 || sc >= w)
                            continue;
                        for (int ic = 0; ic < cin; ++ic)
                        {
                            const std::size_t wi = (static_cast<std::size_t>(ky * 3 + kx) * static_cast<std::size_t>(cin) +
                                                    static_cast<std::size_t>(ic)) *
                                                       static_cast<std::size_t>(cout) +
                                                   static_cast<std::size_t>(oc);
                            dweights[wi] += g * in.at(sr, sc, ic);
                            if (din != nullptr)
                                din->at(sr, sc, ic) += g * layer.weights[wi];
                        }
                    }
            }
}

void conv3x3_backward(const Tensor3& in, const ConvView& layer, const Tensor3& dout,
                      std::span<double> dweights, std::span<double> dbias, Tensor3* din)
{
    check_layer(in, layer);
    std::vector<double> cols;
    im2col3x3(in, cols);
    conv3x3_backward_from_cols(cols, layer, dout, dweights, dbias, din);
}

void conv3x3_backward_from_cols(std::span<const double> cols, const ConvView& layer, const Tensor3& dout,
                                std::span<double> dweights, std::span<double> dbias, Tensor3* din)
{
    if (dout.channels != layer.out_channels || cols.size() != dout.pixels() * layer.patch_length())
        throw ContractViolation("conv3x3_backward: gradient shape does not match the layer output");
    const auto n = static_cast<Eigen::Index>(dout.pixels());
    const auto plen = static_cast<Eigen::Index>(layer.patch_length());
    const auto cout = static_cast<Eigen::Index>(layer.out_channels);

    ConstRowMap a(cols.data(), n, plen);
    ConstRowMap g(dout.data.data(), n, cout);
    RowMap dw(dweights.data(), plen, cout);
    Eigen::Map<Eigen::RowVectorXd> db(dbias.data(), cout);
    dw.noalias() += a.transpose() * g;
    db += g.colwise().sum();

    if (din != nullptr)
    {
        // din is dout convolved with the spatially flipped, transposed kernel.
        const int cin = layer.in_channels;
        const int co = layer.out_channels;
        std::vector<double> flipped(static_cast<std::size_t>(9 * co) * static_cast<std::size_t>(cin));
        const std::vector<double> zero_bias(static_cast<std::size_t>(cin), 0.0);
        for (int tap = 0; tap < 9; ++tap)
            for (int o = 0; o < co; ++o)
                for (int c = 0; c < cin; ++c)
                    flipped[(static_cast<std::size_t>(tap) * static_cast<std::size_t>(co) + static_cast<std::size_t>(o)) *
                                static_cast<std::size_t>(cin) +
                            static_cast<std::size_t>(c)] =
                        layer.weights[(static_cast<std::size_t>(8 - tap) * static_cast<std::size_t>(cin) +
                                       static_cast<std::size_t>(c)) *
                                          static_cast<std::size_t>(co) +
                                      static_cast<std::size_t>(o)];
        conv3x3(dout, ConvView{co, cin, flipped, zero_bias}, *din);
    }
}

void ensemble_scores_reference(std::span<const std::span<const double>> maps, std::span<double> mi_out,
                               std::span<double> entropy_out)
{
    if (maps.empty())
        throw ContractViolation("ensemble_scores: need at least one map");
    const std::size_t n = maps.front().size();
    if (mi_out.size() != n || entropy_out.size() != n)
        throw ContractViolation("ensemble_scores: output size mismatch");
    for (const auto& m : maps)
        if (m.size() != n)
            throw ContractViolation("ensemble_scores: maps differ in size");

    const double k = static_cast<double>(maps.size());
    for (std::size_t q = 0; q < n; ++q)
    {
        // Offsets from the first sample, so identical samples give MI = 0 exactly.
        const double p0 = clamp_probability(maps.front()[q]);
        const double h0 = binary_entropy(p0);
        double spread = 0.0;
        double entropy_spread = 0.0;
        for (const auto& m : maps)
        {
            const double p = clamp_probability(m[q]);
            spread += p - p0;
            entropy_spread += binary_entropy(p) - h0;
        }
        const double mean = p0 + spread / k;
        const double expected = h0 + entropy_spread / k;
        const double total = binary_entropy(mean);
        entropy_out[q] = total;
        mi_out[q] = std::max(0.0, total - expected);
    }
}

void ensemble_scores(std::span<const std::span<const double>> maps, std::span<double> mi_out,
                     std::span<double> entropy_out)
{
    if (maps.empty())
        throw ContractViolation("ensemble_scores: need at least one map");
    const std::size_t n = maps.front().size();
    if (mi_out.size() != n || entropy_out.size() != n)
        throw ContractViolation("ensemble_scores: output size mismatch");
    for (const auto& m : maps)
        if (m.size() != n)
            throw ContractViolation("ensemble_scores: maps differ in size");

    const double k = static_cast<double>(maps.size());
    const auto count = static_cast<std::ptrdiff_t>(n);
    // Same per-pixel summation order as the reference, so results agree bit-for-bit.
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t qi = 0; qi < count; ++qi)
    {
        const auto q = static_cast<std::size_t>(qi);
        // Offsets from the first sample, so identical samples give MI = 0 exactly.
        const double p0 = clamp_probability(maps.front()[q]);
        const double h0 = binary_entropy(p0);
        double spread = 0.0;
        double entropy_spread = 0.0;
        for (const auto& m : maps)
        {
            const double p = clamp_probability(m[q]);
            spread += p - p0;
            entropy_spread += binary_entropy(p) - h0;
        }
        const double mean = p0 + spread / k;
        const double expected = h0 + entropy_spread / k;
        const double total = binary_entropy(mean);
        entropy_out[q] = total;
        mi_out[q] = std::max(0.0, total - expected);
    }
}

} // namespace activeprompt::kernels
