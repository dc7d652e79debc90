// head.cpp

#include "activeprompt/head.hpp"

#include "activeprompt/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace activeprompt
{

namespace
{

using Rng = std::mt19937_64;

double softplus(double z)
{
    return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

/// Inverted-dropout multipliers (0 or 1/(1-rate)) for one activation tensor.
std::vector<double> dropout_mask(std::size_t n, double rate, Rng& rng)
{
    std::vector<double> mask(n, 1.0);
    if (rate <= 0.0)
        return mask;
    std::bernoulli_distribution keep(1.0 - rate);
    const double scale = 1.0 / (1.0 - rate);
    for (auto& m : mask)
        m = keep(rng) ? scale : 0.0;
    return mask;
}

struct ForwardTrace
{
    std::vector<std::vector<double>> cols;        ///< im2col of each layer input
    std::vector<Tensor3> pre_activations;         ///< output of each layer before ReLU
    std::vector<std::vector<double>> drop_masks;  ///< per hidden layer, empty when off
};

void check_features(const FeatureMap& features, const HeadParams& params)
{
    if (params.channels.empty() || features.channels != params.channels.front())
        throw ContractViolation("head: feature channel count does not match the architecture");
    if (params.values.size() != params.expected_size())
        throw ContractViolation("head: parameter vector does not match the architecture");
}

/// Fills `trace`, reusing its buffers from a previous call.
void forward_trace(const FeatureMap& features, const HeadParams& params, bool dropout, double rate,
                   std::uint64_t seed, ForwardTrace& trace)
{
    check_features(features, params);
    Rng rng(seed);
    const std::size_t layers = params.layer_count();
    trace.cols.resize(layers);
    trace.pre_activations.resize(layers);
    trace.drop_masks.resize(layers - 1);
    Tensor3 current;
    for (std::size_t l = 0; l < layers; ++l)
    {
        kernels::im2col3x3(l == 0 ? features : current, trace.cols[l]);
        Tensor3& z = trace.pre_activations[l];
        kernels::conv3x3_from_cols(trace.cols[l], features.height, features.width, params.layer(l), z);
        if (l + 1 == layers)
            break;
        current = z;
        auto& mask = trace.drop_masks[l];
        if (dropout)
            mask = dropout_mask(current.data.size(), rate, rng);
        else
            mask.clear();
        for (std::size_t i = 0; i < current.data.size(); ++i)
        {
            const double relu = current.data[i] > 0.0 ? current.data[i] : 0.0;
            current.data[i] = dropout ? relu * mask[i] : relu;
        }
    }
}

} // namespace

double logistic(double z)
{
    if (z >= 0.0)
        return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// HeadConfig / HeadParams
// ---------------------------------------------------------------------------

void HeadConfig::validate() const
{
    if (kernel_size != 3)
        throw ContractViolation("only 3x3 kernels are supported");
    if (!(learning_rate > 0.0) || !(weight_decay > 0.0))
        throw ContractViolation("learning rate and weight decay must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw ContractViolation("dropout rate must lie in [0, 1)");
    if (batch_size < 1 || patience < 1 || max_epochs < 1 || min_delta < 0.0 || pixels_per_example < 0)
        throw ContractViolation("batch size, patience and max epochs must be positive");
    for (int c : hidden_channels)
        if (c < 1)
            throw ContractViolation("hidden channel counts must be positive");
}

HeadParams::HeadParams(int in_channels, const std::vector<int>& hidden)
{
    channels.push_back(in_channels);
    channels.insert(channels.end(), hidden.begin(), hidden.end());
    channels.push_back(1);
    values.assign(expected_size(), 0.0);
}

std::size_t HeadParams::weight_count(std::size_t l) const
{
    return 9 * static_cast<std::size_t>(channels[l]) * static_cast<std::size_t>(channels[l + 1]);
}

std::size_t HeadParams::weight_offset(std::size_t l) const
{
    std::size_t offset = 0;
    for (std::size_t i = 0; i < l; ++i)
        offset += weight_count(i) + static_cast<std::size_t>(channels[i + 1]);
    return offset;
}

std::size_t HeadParams::expected_size() const
{
    return channels.size() < 2 ? 0 : weight_offset(layer_count());
}

ConvView HeadParams::layer_from(std::size_t l, std::span<const double> flat) const
{
    ConvView view;
    view.in_channels = channels[l];
    view.out_channels = channels[l + 1];
    view.weights = flat.subspan(weight_offset(l), weight_count(l));
    view.bias = flat.subspan(bias_offset(l), static_cast<std::size_t>(channels[l + 1]));
    return view;
}

ConvView HeadParams::layer(std::size_t l) const
{
    return layer_from(l, values);
}

void HeadParams::validate() const
{
    if (channels.size() < 2 || channels.back() != 1)
        throw ContractViolation("head architecture must end in a single output channel");
    for (int c : channels)
        if (c < 1)
            throw ContractViolation("head channel counts must be positive");
    if (values.size() != expected_size())
        throw ContractViolation("head parameter count does not match the architecture");
    for (double v : values)
        if (!std::isfinite(v))
            throw ContractViolation("head parameters must be finite");
}

HeadParams init_head(int in_channels, const std::vector<int>& hidden, std::uint64_t seed)
{
    HeadParams params(in_channels, hidden);
    Rng rng(seed);
    for (std::size_t l = 0; l < params.layer_count(); ++l)
    {
        const double bound = 1.0 / std::sqrt(9.0 * params.channels[l]);
        std::uniform_real_distribution<double> u(-bound, bound);
        const std::size_t begin = params.weight_offset(l);
        const std::size_t end = params.bias_offset(l) + static_cast<std::size_t>(params.channels[l + 1]);
        for (std::size_t i = begin; i < end; ++i)
            params.values[i] = u(rng);
    }
    return params;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

Grid<double> head_logits(const FeatureMap& features, const HeadParams& params, bool train_mode, std::uint64_t seed,
                         double dropout_rate)
{
    ForwardTrace trace;
    forward_trace(features, params, train_mode, dropout_rate, seed, trace);
    return Grid<double>(features.height, features.width, std::move(trace.pre_activations.back().data));
}

ProbabilityMap head_forward(const FeatureMap& features, const HeadParams& params, bool train_mode,
                            std::uint64_t seed, double dropout_rate)
{
    Grid<double> logits = head_logits(features, params, train_mode, seed, dropout_rate);
    for (auto& v : logits.values())
        v = clamp_probability(logistic(v));
    return logits;
}

ProbabilityMap head_forward_reference(const FeatureMap& features, const HeadParams& params)
{
    check_features(features, params);
    Tensor3 current = features;
    for (std::size_t l = 0; l < params.layer_count(); ++l)
    {
        Tensor3 z;
        kernels::conv3x3_reference(current, params.layer(l), z);
        if (l + 1 < params.layer_count())
            for (auto& v : z.data)
                v = v > 0.0 ? v : 0.0;
        current = std::move(z);
    }
    ProbabilityMap out(features.height, features.width, 0.0);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = clamp_probability(logistic(current.data[i]));
    return out;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

double loss_and_gradient(const HeadParams& params, std::span<const LossTerm> terms, const LossOptions& options,
                         std::span<double> gradient)
{
    if (terms.empty())
        throw ContractViolation("loss_and_gradient: no loss terms");
    if (gradient.size() != params.values.size())
        throw ContractViolation("loss_and_gradient: gradient buffer size mismatch");
    std::fill(gradient.begin(), gradient.end(), 0.0);

    const double term_weight = 1.0 / static_cast<double>(terms.size());
    double objective = 0.0;
    const std::size_t layers = params.layer_count();

    for (const auto& term : terms)
    {
        const FeatureMap& features = *term.features;
        const BinaryMask& target = *term.target;
        if (static_cast<int>(target.height()) != features.height || static_cast<int>(target.width()) != features.width)
            throw ContractViolation("loss term: target and feature shapes differ");

        // Buffers persist across calls; the column matrices are large.
        thread_local ForwardTrace trace;
        forward_trace(features, params, options.dropout, options.dropout_rate, term.dropout_seed, trace);
        const Tensor3& logits = trace.pre_activations.back();

        std::vector<std::size_t> all;
        std::span<const std::size_t> pixels = term.pixels;
        if (pixels.empty())
        {
            all.resize(features.pixels());
            std::iota(all.begin(), all.end(), std::size_t{0});
            pixels = all;
        }
        const double pixel_weight = term_weight / static_cast<double>(pixels.size());

        Tensor3 dz(features.height, features.width, 1);
        double term_loss = 0.0;
        for (std::size_t q : pixels)
        {
            const double z = logits.data[q];
            const double y = target[q] != 0 ? 1.0 : 0.0;
            term_loss += softplus(z) - y * z;
            dz.data[q] += (logistic(z) - y) * pixel_weight;
        }
        objective += term_loss * pixel_weight;

        for (std::size_t li = layers; li-- > 0;)
        {
            const ConvView view = params.layer(li);
            std::span<double> dw = gradient.subspan(params.weight_offset(li), params.weight_count(li));
            std::span<double> db =
                gradient.subspan(params.bias_offset(li), static_cast<std::size_t>(params.channels[li + 1]));
            if (li == 0)
            {
                kernels::conv3x3_backward_from_cols(trace.cols[0], view, dz, dw, db, nullptr);
                break;
            }
            Tensor3 da;
            kernels::conv3x3_backward_from_cols(trace.cols[li], view, dz, dw, db, &da);
            const Tensor3& z_prev = trace.pre_activations[li - 1];
            const auto& mask = trace.drop_masks[li - 1];
            for (std::size_t i = 0; i < da.data.size(); ++i)
            {
                const double relu_grad = z_prev.data[i] > 0.0 ? 1.0 : 0.0;
                da.data[i] *= mask.empty() ? relu_grad : relu_grad * mask[i];
            }
            dz = std::move(da);
        }
    }

    if (options.weight_decay > 0.0)
    {
        double norm2 = 0.0;
        for (std::size_t i = 0; i < params.values.size(); ++i)
        {
            norm2 += params.values[i] * params.values[i];
            gradient[i] += options.weight_decay * params.values[i];
        }
        objective += 0.5 * options.weight_decay * norm2;
    }
    return objective;
}

void pixel_log_likelihood_gradient(const FeatureMap& features, const HeadParams& params, Pixel pixel,
                                   std::uint8_t label, std::span<double> gradient)
{
    check_features(features, params);
    if (gradient.size() != params.values.size())
        throw ContractViolation("pixel gradient: buffer size mismatch");
    if (pixel.row < 0 || pixel.col < 0 || pixel.row >= features.height || pixel.col >= features.width)
        throw ContractViolation("pixel gradient: pixel outside the feature map");
    std::fill(gradient.begin(), gradient.end(), 0.0);

    const int layers = static_cast<int>(params.layer_count());

    // Windows centred on the pixel: layer l consumes radius (layers - l) and
    // produces radius (layers - 1 - l). Window positions outside the image
    // hold zero, exactly like the zero padding of the full-image pass.
    auto inside = [&](int radius, int i, int j) {
        const int r = pixel.row + i - radius;
        const int c = pixel.col + j - radius;
        return r >= 0 && c >= 0 && r < features.height && c < features.width;
    };

    std::vector<Tensor3> inputs(static_cast<std::size_t>(layers));
    std::vector<Tensor3> pre(static_cast<std::size_t>(layers));
    {
        const int radius = layers;
        const int size = 2 * radius + 1;
        Tensor3 window(size, size, features.channels);
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j)
                if (inside(radius, i, j))
                    std::copy_n(&features.at(pixel.row + i - radius, pixel.col + j - radius, 0), features.channels,
                                &window.at(i, j, 0));
        inputs[0] = std::move(window);
    }

    for (int l = 0; l < layers; ++l)
    {
        const ConvView view = params.layer(static_cast<std::size_t>(l));
        const int radius = layers - 1 - l;
        const int size = 2 * radius + 1;
        const Tensor3& in = inputs[static_cast<std::size_t>(l)];
        Tensor3 z(size, size, view.out_channels);
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j)
            {
                if (!inside(radius, i, j))
                    continue;
                for (int oc = 0; oc < view.out_channels; ++oc)
                    z.at(i, j, oc) = view.bias[static_cast<std::size_t>(oc)];
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                        for (int ic = 0; ic < view.in_channels; ++ic)
                        {
                            const double a = in.at(i + ky, j + kx, ic);
                            if (a == 0.0)
                                continue;
                            const double* w =
                                &view.weights[(static_cast<std::size_t>(ky * 3 + kx) * static_cast<std::size_t>(view.in_channels) +
                                               static_cast<std::size_t>(ic)) *
                                              static_cast<std::size_t>(view.out_channels)];
                            for (int oc = 0; oc < view.out_channels; ++oc)
                                z.at(i, j, oc) += a * w[oc];
                        }
            }
        if (l + 1 < layers)
        {
            Tensor3 a = z;
            for (auto& v : a.data)
                v = v > 0.0 ? v : 0.0;
            inputs[static_cast<std::size_t>(l + 1)] = std::move(a);
        }
        pre[static_cast<std::size_t>(l)] = std::move(z);
    }

    const double logit = pre.back().data[0];
    const double y = label != 0 ? 1.0 : 0.0;
    Tensor3 delta(1, 1, 1);
    delta.data[0] = y - logistic(logit);

    for (int l = layers - 1; l >= 0; --l)
    {
        const auto lu = static_cast<std::size_t>(l);
        const ConvView view = params.layer(lu);
        const int radius = layers - 1 - l;
        const int size = 2 * radius + 1;
        const Tensor3& in = inputs[lu];
        std::span<double> dw = gradient.subspan(params.weight_offset(lu), params.weight_count(lu));
        std::span<double> db = gradient.subspan(params.bias_offset(lu), static_cast<std::size_t>(view.out_channels));

        Tensor3 din;
        if (l > 0)
            din = Tensor3(size + 2, size + 2, view.in_channels);
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j)
            {
                const double* d = &delta.at(i, j, 0);
                bool any = false;
                for (int oc = 0; oc < view.out_channels; ++oc)
                {
                    db[static_cast<std::size_t>(oc)] += d[oc];
                    any = any || d[oc] != 0.0;
                }
                if (!any)
                    continue;
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                        for (int ic = 0; ic < view.in_channels; ++ic)
                        {
                            const std::size_t row =
                                (static_cast<std::size_t>(ky * 3 + kx) * static_cast<std::size_t>(view.in_channels) +
                                 static_cast<std::size_t>(ic)) *
                                static_cast<std::size_t>(view.out_channels);
                            const double a = in.at(i + ky, j + kx, ic);
                            double back = 0.0;
                            for (int oc = 0; oc < view.out_channels; ++oc)
                            {
                                dw[row + static_cast<std::size_t>(oc)] += d[oc] * a;
                                back += d[oc] * view.weights[row + static_cast<std::size_t>(oc)];
                            }
                            if (l > 0)
                                din.at(i + ky, j + kx, ic) += back;
                        }
            }
        if (l == 0)
            break;
        // Through the ReLU of layer l-1; out-of-image positions carry no signal.
        const Tensor3& z_prev = pre[lu - 1];
        const int prev_radius = radius + 1;
        for (int i = 0; i < size + 2; ++i)
            for (int j = 0; j < size + 2; ++j)
                for (int c = 0; c < view.in_channels; ++c)
                {
                    const bool live = inside(prev_radius, i, j) && z_prev.at(i, j, c) > 0.0;
                    if (!live)
                        din.at(i, j, c) = 0.0;
                }
        delta = std::move(din);
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

double validation_iou(const HeadParams& params, std::span<const FeatureMap> features,
                      std::span<const TrainingExample> examples)
{
    if (features.size() != examples.size() || examples.empty())
        throw ContractViolation("validation_iou: need one feature map per example");
    double total = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i)
    {
        const ProbabilityMap p = head_forward(features[i], params);
        BinaryMask predicted(p.height(), p.width(), 0);
        for (std::size_t q = 0; q < p.size(); ++q)
            predicted[q] = p[q] >= 0.5 ? 1 : 0;
        total += iou(predicted, examples[i].gt_mask);
    }
    return total / static_cast<double>(examples.size());
}

namespace
{

std::vector<std::size_t> sample_pixels(std::size_t n, int count, Rng& rng)
{
    if (count <= 0 || static_cast<std::size_t>(count) >= n)
        return {};
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < static_cast<std::size_t>(count); ++i)
    {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(count));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<FeatureMap> compute_all_features(std::span<const TrainingExample> examples, const Backbone& backbone)
{
    std::vector<FeatureMap> out;
    out.reserve(examples.size());
    for (const auto& ex : examples)
        out.push_back(backbone.compute_features(ex.image, ex.prompts));
    return out;
}

} // namespace

TrainResult train_map(std::span<const TrainingExample> train, std::span<const TrainingExample> val,
                      const Backbone& backbone, const HeadConfig& config)
{
    config.validate();
    if (train.empty() || val.empty())
        throw ContractViolation("train_map needs non-empty train and validation splits");

    const std::vector<FeatureMap> train_features = compute_all_features(train, backbone);
    const std::vector<FeatureMap> val_features = compute_all_features(val, backbone);

    TrainResult result;
    HeadParams params = init_head(kFeatureChannels, config.hidden_channels, config.seed);
    result.params = params;
    const std::size_t p = params.values.size();

    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kAdamEps = 1e-8;
    std::vector<double> m(p, 0.0);
    std::vector<double> v(p, 0.0);
    std::vector<double> grad(p, 0.0);
    std::uint64_t step = 0;

    LossOptions options;
    options.dropout = config.dropout_rate > 0.0;
    options.dropout_rate = config.dropout_rate;
    options.weight_decay = config.weight_decay;

    double best_iou = -1.0;
    int since_best = 0;
    TrainRecord& record = result.record;
    record.stop_reason = "max-epochs";

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch)
    {
        Rng epoch_rng(derive_seed(config.seed, 0x7EA1, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), epoch_rng);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size))
        {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            std::vector<LossTerm> terms;
            for (std::size_t b = start; b < end; ++b)
            {
                const std::size_t ex = order[b];
                LossTerm term;
                term.features = &train_features[ex];
                term.target = &train[ex].gt_mask;
                term.pixels = sample_pixels(train_features[ex].pixels(), config.pixels_per_example, epoch_rng);
                term.dropout_seed = epoch_rng();
                terms.push_back(std::move(term));
            }
            const double loss = loss_and_gradient(params, terms, options, grad);
            if (!std::isfinite(loss))
                throw TrainingDivergence("non-finite training loss at epoch " + std::to_string(epoch));

            ++step;
            const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
            for (std::size_t i = 0; i < p; ++i)
            {
                m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
                v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
                params.values[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
            }
            loss_sum += loss;
            ++batches;
        }

        const double val_iou = validation_iou(params, val_features, val);
        record.train_loss.push_back(loss_sum / static_cast<double>(batches));
        record.val_iou.push_back(val_iou);
        record.stop_epoch = epoch;

        if (val_iou > best_iou + config.min_delta)
        {
            best_iou = val_iou;
            since_best = 0;
            result.params = params;
            record.best_epoch = epoch;
        }
        else if (++since_best >= config.patience)
        {
            record.stop_reason = "early-stop";
            break;
        }
    }
    return result;
}

std::vector<TrainingExample> make_training_examples(std::span<const LoadedItem> items, std::uint64_t seed)
{
    std::vector<TrainingExample> out;
    for (std::size_t i = 0; i < items.size(); ++i)
    {
        const auto& item = items[i];
        const auto sets = generate_training_prompt_sets(item.image, item.mask, derive_seed(seed, 0x5E75, i));
        for (const auto& set : sets)
            out.push_back({item.image, set, item.mask});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void write_head(std::ostream& out, const HeadParams& params)
{
    params.validate();
    if (params.channels.front() != kFeatureChannels)
        throw ContractViolation("head files store heads over 32-channel features only");
    binary_io::write_magic(out, "BHD1");
    binary_io::write_u32(out, static_cast<std::uint32_t>(params.layer_count()));
    for (std::size_t l = 1; l < params.channels.size(); ++l)
        binary_io::write_u32(out, static_cast<std::uint32_t>(params.channels[l]));
    binary_io::write_u64(out, params.values.size());
    for (double v : params.values)
        binary_io::write_f32(out, static_cast<float>(v));
}

HeadParams read_head(std::istream& in)
{
    binary_io::expect_magic(in, "BHD1");
    const std::uint32_t layers = binary_io::read_u32(in);
    if (layers == 0 || layers > 64)
        throw std::runtime_error("head file: implausible layer count");
    HeadParams params;
    params.channels.push_back(kFeatureChannels);
    for (std::uint32_t l = 0; l < layers; ++l)
        params.channels.push_back(static_cast<int>(binary_io::read_u32(in)));
    const std::uint64_t count = binary_io::read_u64(in);
    if (count != params.expected_size())
        throw std::runtime_error("head file: parameter count does not match the architecture");
    params.values.resize(count);
    for (auto& v : params.values)
        v = binary_io::read_f32(in);
    params.validate();
    return params;
}

void save_head(const std::filesystem::path& path, const HeadParams& params)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_head(out, params);
}

HeadParams load_head(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open " + path.string());
    return read_head(in);
}

} // namespace activeprompt
