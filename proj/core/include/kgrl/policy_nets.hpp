#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "kgrl/autodiff.hpp"
#include "kgrl/grid_env.hpp"
#include "kgrl/nn.hpp"
#include "kgrl/point_env.hpp"
#include "kgrl/rng.hpp"

namespace kgrl {

// Diagonal-Gaussian log-std bounds shared by the continuous policy heads.
constexpr double kLogStdMin = -20.0;
constexpr double kLogStdMax = 2.0;

// Inner policy for the grid: conv encoder (image + carrying flag) feeding a
// tanh trunk, then a linear head of action logits. The trunk output doubles
// as the feature that key/query heads read, so it is exposed separately.
struct GridPolicySpec {
    std::array<std::size_t, 3> channels{8, 16, 32};
    std::size_t kernel = 2;
    std::size_t stride = 1;
    std::size_t head_width = 64;   // encoder fully-connected output
    std::size_t trunk_width = 64;  // shared tanh feature layer
    std::size_t actions = static_cast<std::size_t>(kGridActionCount);

    ConvEncoderSpec encoder_spec() const;
    void validate() const;  // throws ConfigError
};

class GridPolicy {
public:
    GridPolicy(std::string prefix, GridPolicySpec spec, ParameterStore& params,
               CounterRng& rng);

    // img: [N, kViewChannels, 5, 5]; carry: [N, 1]. Returns [N, trunk_width].
    ad::Value features(const ad::Value& img, const ad::Value& carry) const;
    ad::Value logits(const ad::Value& features) const;  // [N, actions]

    const GridPolicySpec& spec() const { return spec_; }
    const std::string& prefix() const { return prefix_; }

private:
    std::string prefix_;
    GridPolicySpec spec_;
    std::unique_ptr<ConvEncoder> enc_;
    std::unique_ptr<Mlp> trunk_, pi_;
};

// Inner policy for the point robot: relu MLP trunk with linear mean and
// log-std heads (log-std clamped to [kLogStdMin, kLogStdMax]).
struct PointPolicySpec {
    std::vector<std::size_t> hidden{64, 64};
    std::size_t obs_dim = kPointObsDim;
    std::size_t act_dim = 4;

    void validate() const;
};

class PointPolicy {
public:
    PointPolicy(std::string prefix, PointPolicySpec spec, ParameterStore& params,
                CounterRng& rng);

    ad::Value features(const ad::Value& obs) const;  // [N, hidden.back()]
    // Returns (mean, log_std), each [N, act_dim]; log_std already clamped.
    std::pair<ad::Value, ad::Value> mean_log_std(const ad::Value& features) const;

    const PointPolicySpec& spec() const { return spec_; }
    const std::string& prefix() const { return prefix_; }

private:
    std::string prefix_;
    PointPolicySpec spec_;
    std::unique_ptr<Mlp> trunk_, mean_, log_std_;
};

// Batch-of-one constants from a single observation (rollout convenience).
ad::Value grid_image_input(const GridObservation& obs);  // [1, C, 5, 5]
ad::Value grid_carry_input(const GridObservation& obs);  // [1, 1]
ad::Value point_obs_input(const TensorBuf& obs);         // [1, kPointObsDim]

}  // namespace kgrl
