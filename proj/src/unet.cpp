#include "qsm/unet.hpp"

#include <cmath>
#include <vector>

namespace qsm {

namespace {

std::string conv_name(const std::string &prefix, const std::string &block, std::size_t idx) {
    return prefix + "." + block + ".conv" + std::to_string(idx);
}

void add_conv(ModelParams &params, const std::string &name, std::size_t cin, std::size_t cout, std::size_t k,
              std::mt19937_64 &rng, bool zero) {
    const std::size_t fan_in = cin * k * k * k;
    std::vector<double> w(cout * fan_in, 0.0);
    if (!zero) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto &v : w) v = dist(rng);
    }
    params.add(name + ".w", {cout, cin, k, k, k}, std::move(w));
    params.add(name + ".b", {cout}, std::vector<double>(cout, 0.0));
}

nn::Tensor conv(ParamBinder &bind, const std::string &name, const nn::Tensor &x) {
    return nn::conv3d(x, bind(name + ".w"), bind(name + ".b"));
}

std::size_t level_channels(const UNetConfig &cfg, std::size_t level) { return cfg.base_channels << level; }

void validate(const UNetConfig &cfg) {
    if (cfg.base_channels == 0 || cfg.kernel == 0 || cfg.kernel % 2 == 0 || cfg.convs_per_level == 0)
        fail(ErrorCode::Config, "U-Net needs positive channels, an odd kernel and at least one conv per level");
    if (cfg.depth > 6) fail(ErrorCode::Config, "U-Net depth above 6 is not supported");
}

} // namespace

void init_unet(ModelParams &params, const std::string &prefix, const UNetConfig &cfg, std::mt19937_64 &rng) {
    validate(cfg);
    std::size_t cin = cfg.in_channels;
    for (std::size_t l = 0; l <= cfg.depth; ++l) {
        const std::size_t ch = level_channels(cfg, l);
        for (std::size_t c = 0; c < cfg.convs_per_level; ++c) {
            add_conv(params, conv_name(prefix, "enc" + std::to_string(l), c), cin, ch, cfg.kernel, rng, false);
            cin = ch;
        }
    }
    for (std::size_t l = cfg.depth; l-- > 0;) {
        const std::size_t ch = level_channels(cfg, l);
        cin = level_channels(cfg, l + 1) + ch;
        for (std::size_t c = 0; c < cfg.convs_per_level; ++c) {
            add_conv(params, conv_name(prefix, "dec" + std::to_string(l), c), cin, ch, cfg.kernel, rng, false);
            cin = ch;
        }
    }
    add_conv(params, prefix + ".out", level_channels(cfg, 0), cfg.out_channels, cfg.kernel, rng, true);
}

nn::Tensor unet_forward(ParamBinder &bind, const std::string &prefix, const UNetConfig &cfg, const nn::Tensor &x) {
    validate(cfg);
    std::vector<nn::Tensor> skips;
    nn::Tensor h = x;
    for (std::size_t l = 0; l <= cfg.depth; ++l) {
        for (std::size_t c = 0; c < cfg.convs_per_level; ++c)
            h = nn::leaky_relu(conv(bind, conv_name(prefix, "enc" + std::to_string(l), c), h), cfg.alpha);
        if (l < cfg.depth) {
            skips.push_back(h);
            h = nn::downsample2(h);
        }
    }
    for (std::size_t l = cfg.depth; l-- > 0;) {
        h = nn::concat_channels(nn::upsample2(h), skips[l]);
        for (std::size_t c = 0; c < cfg.convs_per_level; ++c)
            h = nn::leaky_relu(conv(bind, conv_name(prefix, "dec" + std::to_string(l), c), h), cfg.alpha);
    }
    return conv(bind, prefix + ".out", h);
}

nn::Tensor unet_forward_padded(ParamBinder &bind, const std::string &prefix, const UNetConfig &cfg,
                               const nn::Tensor &x) {
    const auto &s = x.shape();
    if (s.size() < 3) fail(ErrorCode::ShapeMismatch, "unet: input must be a volume tensor");
    const std::size_t m = std::size_t{1} << cfg.depth;
    std::array<std::size_t, 3> before{}, after{}, extent{};
    bool need = false;
    for (std::size_t a = 0; a < 3; ++a) {
        const std::size_t n = s[s.size() - 3 + a];
        const std::size_t target = (n + m - 1) / m * m;
        before[a] = (target - n) / 2;
        after[a] = target - n - before[a];
        extent[a] = n;
        need = need || target != n;
    }
    if (!need) return unet_forward(bind, prefix, cfg, x);
    nn::Tensor y = unet_forward(bind, prefix, cfg, nn::pad_spatial(x, before, after));
    return nn::crop_spatial(y, before, extent);
}

} // namespace qsm
