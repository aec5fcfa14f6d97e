#include "catnet/segnet.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "catnet/errors.hpp"
#include "catnet/init.hpp"

namespace catnet {

void NetworkConfig::validate() const {
    if (scales == 0) throw ConfigError("network needs at least one downsampling scale");
    if (filters.size() != scales + 1) {
        throw ConfigError("filters lists " + std::to_string(filters.size()) + " entries, expected L+1 = " +
                          std::to_string(scales + 1));
    }
    for (auto f : filters) {
        if (f < 2) throw ConfigError("every scale needs at least 2 filters");
    }
    if (slices == 0 || in_channels == 0) throw ConfigError("slices and input channels must be positive");
    if (classes != kNumClasses) throw ConfigError("the network predicts exactly 3 classes");
    if (blocks == 0 || heads == 0 || pool == 0) throw ConfigError("blocks, heads and pool must be positive");
    const std::size_t unit = (std::size_t{1} << scales) * pool;
    if (height % unit != 0 || width % unit != 0) {
        throw ConfigError("input " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by 2^L·k = " + std::to_string(unit));
    }
    std::set<std::size_t> seen;
    for (auto s : cat_layers) {
        if (s > scales) throw ConfigError("CAT layer " + std::to_string(s) + " outside scales 0.." + std::to_string(scales));
        if (!seen.insert(s).second) throw ConfigError("CAT layer " + std::to_string(s) + " listed twice");
    }
}

bool NetworkConfig::cat_enabled(std::size_t scale) const {
    return std::find(cat_layers.begin(), cat_layers.end(), scale) != cat_layers.end();
}

namespace {

template <typename T>
ConvBlockParams<T> make_conv_block(std::size_t cin, std::size_t cout, std::size_t stride, std::mt19937_64& rng) {
    ConvBlockParams<T> b;
    b.kernel = he_uniform<T>({3, 3, cin, cout}, 9 * cin, rng);
    b.gain = Tensor<T>(Shape{cout}, T{1});
    b.bias = Tensor<T>(Shape{cout});
    b.stride = stride;
    return b;
}

template <typename T>
void push_block(std::vector<NamedTensor<T>>& out, ConvBlockParams<T>& b, const std::string& prefix) {
    out.push_back({prefix + ".kernel", &b.kernel});
    out.push_back({prefix + ".norm.gain", &b.gain});
    out.push_back({prefix + ".norm.bias", &b.bias});
}

template <typename T>
Var<T> conv_block(const Var<T>& x, ConvBlockParams<T>& b) {
    Tape<T>& tape = *x.tape();
    const Var<T> y = conv2d(x, tape.parameter(b.kernel), b.stride, 1);
    const Var<T> n = instance_norm2d(y, tape.parameter(b.gain), tape.parameter(b.bias), kNormEps);
    return leaky_relu(n, static_cast<T>(kLeakySlope));
}

} // namespace

template <typename T>
SegNet<T> make_segnet(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    SegNet<T> net;
    net.config = config;
    const auto& f = config.filters;
    const std::size_t L = config.scales;
    for (std::size_t s = 0; s <= L; ++s) {
        const std::size_t cin = s == 0 ? config.in_channels : f[s - 1];
        std::vector<ConvBlockParams<T>> stage;
        stage.push_back(make_conv_block<T>(cin, f[s], s == 0 ? 1 : 2, rng));
        stage.push_back(make_conv_block<T>(f[s], f[s], 1, rng));
        net.encoder.push_back(std::move(stage));
    }
    for (std::size_t s = 0; s < L; ++s) {
        DecoderStageParams<T> d;
        d.up = he_uniform<T>({1, 1, f[s + 1], f[s]}, f[s + 1], rng);
        d.fuse = make_conv_block<T>(2 * f[s], f[s], 1, rng);
        d.refine = make_conv_block<T>(f[s], f[s], 1, rng);
        net.decoder.push_back(std::move(d));
    }
    net.head_kernel = he_uniform<T>({1, 1, f[0], config.classes}, f[0], rng);
    net.head_bias = Tensor<T>(Shape{config.classes});
    // Each CAT module draws from its own stream, so the backbone weights for a
    // seed do not depend on which scales carry a CAT module.
    net.cats.resize(L + 1);
    for (std::size_t s = 0; s <= L; ++s) {
        if (!config.cat_enabled(s)) continue;
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xca7u,
                          static_cast<std::uint32_t>(s)};
        std::mt19937_64 cat_rng(seq);
        auto cat = make_cat_module<T>(config.slices, f[s], config.blocks, config.heads, config.pool, cat_rng);
        cat.pe_enabled = config.pe_enabled;
        cat.transformer_enabled = config.transformer_enabled;
        net.cats[s] = std::move(cat);
    }
    return net;
}

template <typename T>
std::vector<NamedTensor<T>> named_parameters(SegNet<T>& net) {
    std::vector<NamedTensor<T>> out;
    for (std::size_t s = 0; s < net.encoder.size(); ++s) {
        for (std::size_t b = 0; b < net.encoder[s].size(); ++b) {
            push_block(out, net.encoder[s][b], "enc" + std::to_string(s) + ".conv" + std::to_string(b));
        }
    }
    for (std::size_t s = 0; s < net.decoder.size(); ++s) {
        const std::string p = "dec" + std::to_string(s);
        out.push_back({p + ".up.kernel", &net.decoder[s].up});
        push_block(out, net.decoder[s].fuse, p + ".conv0");
        push_block(out, net.decoder[s].refine, p + ".conv1");
    }
    for (std::size_t s = 0; s < net.cats.size(); ++s) {
        if (!net.cats[s]) continue;
        auto cat = named_parameters(*net.cats[s], "cat" + std::to_string(s));
        out.insert(out.end(), cat.begin(), cat.end());
    }
    out.push_back({"head.kernel", &net.head_kernel});
    out.push_back({"head.bias", &net.head_bias});
    return out;
}

std::size_t parameter_count(const NetworkConfig& config) {
    SegNet<float> net = make_segnet<float>(config, 0);
    std::size_t n = 0;
    for (const auto& p : named_parameters(net)) n += p.tensor->size();
    return n;
}

template <typename T>
std::vector<Var<T>> encoder_forward(const Var<T>& x0, SegNet<T>& net) {
    const auto& cfg = net.config;
    const Shape& s = x0.shape();
    if (s.size() != 4 || s[3] != cfg.in_channels) {
        throw DimensionError("network input must be l×h×w×" + std::to_string(cfg.in_channels) + ", got " +
                             shape_str(s));
    }
    const std::size_t unit = (std::size_t{1} << cfg.scales) * cfg.pool;
    if (s[1] % unit != 0 || s[2] % unit != 0) {
        throw ConfigError("input " + shape_str(s) + " spatial size is not divisible by 2^L·k = " +
                          std::to_string(unit));
    }
    std::vector<Var<T>> features;
    Var<T> x = x0;
    for (auto& stage : net.encoder) {
        for (auto& block : stage) x = conv_block(x, block);
        features.push_back(x);
    }
    return features;
}

template <typename T>
CatSkipResult<T> apply_cat_modules(const std::vector<Var<T>>& features, SegNet<T>& net, bool capture) {
    if (features.size() != net.cats.size()) {
        throw ConfigError("expected " + std::to_string(net.cats.size()) + " feature scales, got " +
                          std::to_string(features.size()));
    }
    CatSkipResult<T> out;
    for (std::size_t s = 0; s < features.size(); ++s) {
        if (!net.cats[s]) {
            out.skips.push_back(features[s]);
            continue;
        }
        auto r = cat_module_forward(features[s], *net.cats[s], static_cast<int>(s), capture);
        out.skips.push_back(r.z);
        for (auto& rec : r.records) out.records.push_back(std::move(rec));
    }
    return out;
}

template <typename T>
Var<T> decoder_forward(const std::vector<Var<T>>& skips, SegNet<T>& net) {
    const std::size_t L = net.config.scales;
    if (skips.size() != L + 1) {
        throw ConfigError("decoder expects " + std::to_string(L + 1) + " scales, got " + std::to_string(skips.size()));
    }
    for (std::size_t s = 0; s <= L; ++s) {
        if (skips[s].shape().size() != 4 || skips[s].shape()[3] != net.config.filters[s]) {
            throw ConfigError("skip at scale " + std::to_string(s) + " has shape " + shape_str(skips[s].shape()));
        }
    }
    Tape<T>& tape = *skips.front().tape();
    Var<T> d = skips[L];
    for (std::size_t i = L; i-- > 0;) {
        auto& stage = net.decoder[i];
        const Var<T> up = conv2d(upsample2x(d), tape.parameter(stage.up), 1, 0);
        d = conv_block(concat_channels(std::vector<Var<T>>{skips[i], up}), stage.fuse);
        d = conv_block(d, stage.refine);
    }
    const Var<T> logits = conv2d(d, tape.parameter(net.head_kernel), 1, 0);
    return add_channel_bias(logits, tape.parameter(net.head_bias));
}

template <typename T>
ForwardResult<T> catnet_forward(const Var<T>& x0, SegNet<T>& net, bool capture) {
    auto features = encoder_forward(x0, net);
    auto cat = apply_cat_modules(features, net, capture);
    return {decoder_forward(cat.skips, net), std::move(cat.records)};
}

template <typename T>
Tensor<T> infer_logits(SegNet<T>& net, const Tensor<T>& x0, std::vector<AttentionRecord<T>>* records) {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    auto r = catnet_forward(tape.constant(x0), net, records != nullptr);
    if (records) *records = std::move(r.records);
    return r.logits.value();
}

template <typename T>
LabelVolume predict_mask(const Tensor<T>& logits) {
    if (logits.rank() != 4) throw DimensionError("logits must be l×h×w×classes, got " + shape_str(logits.shape()));
    const std::size_t k = logits.dim(3);
    LabelVolume out(logits.dim(0), logits.dim(1), logits.dim(2));
    const auto data = logits.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
            if (data[i * k + c] > data[i * k + best]) best = c;
        }
        out.labels[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

#define CATNET_INSTANTIATE_SEGNET(T)                                                                     \
    template SegNet<T> make_segnet<T>(const NetworkConfig&, std::uint64_t);                              \
    template std::vector<NamedTensor<T>> named_parameters(SegNet<T>&);                                   \
    template std::vector<Var<T>> encoder_forward(const Var<T>&, SegNet<T>&);                             \
    template CatSkipResult<T> apply_cat_modules(const std::vector<Var<T>>&, SegNet<T>&, bool);           \
    template Var<T> decoder_forward(const std::vector<Var<T>>&, SegNet<T>&);                             \
    template ForwardResult<T> catnet_forward(const Var<T>&, SegNet<T>&, bool);                           \
    template Tensor<T> infer_logits(SegNet<T>&, const Tensor<T>&, std::vector<AttentionRecord<T>>*);     \
    template LabelVolume predict_mask(const Tensor<T>&);

CATNET_INSTANTIATE_SEGNET(float)
CATNET_INSTANTIATE_SEGNET(double)

#undef CATNET_INSTANTIATE_SEGNET

} // namespace catnet
