#include "kgrl/policy_nets.hpp"

#include "kgrl/errors.hpp"

namespace kgrl {

ConvEncoderSpec GridPolicySpec::encoder_spec() const {
    ConvEncoderSpec e;
    e.in_channels = kViewChannels;
    e.height = kViewSize;
    e.width = kViewSize;
    for (int i = 0; i < 3; ++i) e.layers[i] = {channels[i], kernel, stride};
    e.head_width = head_width;
    e.extra_inputs = 1;  // carrying flag
    return e;
}

void GridPolicySpec::validate() const {
    encoder_spec().validate();
    if (trunk_width == 0) throw ConfigError("grid policy: trunk_width must be positive");
    if (actions == 0) throw ConfigError("grid policy: actions must be positive");
}

GridPolicy::GridPolicy(std::string prefix, GridPolicySpec spec, ParameterStore& params,
                       CounterRng& rng)
    : prefix_(std::move(prefix)), spec_(spec) {
    spec_.validate();
    enc_ = std::make_unique<ConvEncoder>(prefix_ + ".enc", spec_.encoder_spec(), params, rng);
    trunk_ = std::make_unique<Mlp>(
        prefix_ + ".trunk",
        MLPSpec{spec_.head_width, {}, spec_.trunk_width, Act::tanh}, params, rng);
    pi_ = std::make_unique<Mlp>(
        prefix_ + ".pi", MLPSpec{spec_.trunk_width, {}, spec_.actions, Act::none}, params,
        rng);
}

ad::Value GridPolicy::features(const ad::Value& img, const ad::Value& carry) const {
    return trunk_->forward(enc_->forward(img, carry));
}

ad::Value GridPolicy::logits(const ad::Value& features) const {
    return pi_->forward(features);
}

void PointPolicySpec::validate() const {
    if (obs_dim == 0 || act_dim == 0)
        throw ConfigError("point policy: observation and action dims must be positive");
    if (hidden.empty()) throw ConfigError("point policy: at least one hidden layer");
    for (auto h : hidden)
        if (h == 0) throw ConfigError("point policy: hidden widths must be positive");
}

PointPolicy::PointPolicy(std::string prefix, PointPolicySpec spec, ParameterStore& params,
                         CounterRng& rng)
    : prefix_(std::move(prefix)), spec_(std::move(spec)) {
    spec_.validate();
    MLPSpec trunk;
    trunk.input_dim = spec_.obs_dim;
    for (std::size_t i = 0; i + 1 < spec_.hidden.size(); ++i)
        trunk.hidden.emplace_back(spec_.hidden[i], Act::relu);
    trunk.output_dim = spec_.hidden.back();
    trunk.output_activation = Act::relu;
    trunk_ = std::make_unique<Mlp>(prefix_ + ".trunk", trunk, params, rng);
    mean_ = std::make_unique<Mlp>(
        prefix_ + ".mean", MLPSpec{spec_.hidden.back(), {}, spec_.act_dim, Act::none},
        params, rng);
    log_std_ = std::make_unique<Mlp>(
        prefix_ + ".log_std", MLPSpec{spec_.hidden.back(), {}, spec_.act_dim, Act::none},
        params, rng);
}

ad::Value PointPolicy::features(const ad::Value& obs) const { return trunk_->forward(obs); }

std::pair<ad::Value, ad::Value> PointPolicy::mean_log_std(const ad::Value& features) const {
    auto mean = mean_->forward(features);
    auto log_std = ad::clamp(log_std_->forward(features), kLogStdMin, kLogStdMax);
    return {mean, log_std};
}

ad::Value grid_image_input(const GridObservation& obs) {
    obs.image.validate("grid observation image");
    TensorBuf t{{1, kViewChannels, kViewSize, kViewSize}, obs.image.data};
    return ad::constant(std::move(t));
}

ad::Value grid_carry_input(const GridObservation& obs) {
    return ad::constant(TensorBuf{{1, 1}, {obs.carrying ? 1.0 : 0.0}});
}

ad::Value point_obs_input(const TensorBuf& obs) {
    if (obs.data.size() != kPointObsDim)
        throw ShapeError("point observation must have " + std::to_string(kPointObsDim) +
                         " entries, got " + std::to_string(obs.data.size()));
    return ad::constant(TensorBuf{{1, kPointObsDim}, obs.data});
}

}  // namespace kgrl
