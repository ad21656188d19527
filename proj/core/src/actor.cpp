#include "kgrl/actor.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>

#include "kgrl/errors.hpp"

namespace kgrl {

namespace {

constexpr double kHalfLog2Pi = 0.9189385332046727;
// Squash inversion clamp: keeps atanh finite when a component sampled an
// action at or beyond the [-1, 1] bounds.
constexpr double kAtanhClamp = 1e-9;

std::vector<std::size_t> surviving_knowledge(const AblationMask& mask, std::size_t m) {
    if (!mask.knowledge.empty() && mask.knowledge.size() != m) {
        throw UsageError("ablation mask covers " + std::to_string(mask.knowledge.size()) +
                         " knowledge components, set has " + std::to_string(m));
    }
    std::vector<std::size_t> keep;
    keep.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (mask.knowledge.empty() || mask.knowledge[i]) keep.push_back(i);
    }
    if (!mask.inner && keep.empty()) {
        throw UsageError("ablation drops every mixture component");
    }
    return keep;
}

// Columns of a [N, M] value in the given order (single slice when contiguous).
ad::Value select_cols(const ad::Value& v, const std::vector<std::size_t>& cols) {
    bool contiguous = true;
    for (std::size_t i = 1; i < cols.size(); ++i) {
        if (cols[i] != cols[i - 1] + 1) {
            contiguous = false;
            break;
        }
    }
    if (contiguous) return ad::slice_cols(v, cols.front(), cols.front() + cols.size());
    std::vector<ad::Value> parts;
    parts.reserve(cols.size());
    for (std::size_t c : cols) parts.push_back(ad::slice_cols(v, c, c + 1));
    return ad::concat_cols(parts);
}

ad::Value make_key_table(const std::string& name, const KnowledgeSet& set, std::size_t d_k,
                         ParameterStore& params, CounterRng& rng) {
    if (params.contains(name)) {
        ad::Value existing = params.get(name);
        if (existing->shape != std::vector<std::size_t>{set.size(), d_k}) {
            throw UsageError("existing key table '" + name + "' has shape " +
                             shape_to_string(existing->shape) + ", expected [" +
                             std::to_string(set.size()) + ", " + std::to_string(d_k) + "]");
        }
        return existing;
    }
    TensorBuf init = unit_sphere_rows(set.size(), d_k, rng);
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto& key = set.at(i).key;
        if (!key) continue;
        std::copy(key->data.begin(), key->data.end(), init.data.begin() + i * d_k);
    }
    return params.create(name, std::move(init));
}

// Diagonal-Gaussian log density of x under (mean, log_std), summed over the
// action dimensions: [N, D] -> [N, 1].
ad::Value gaussian_log_density(const ad::Value& x, const ad::Value& mean,
                               const ad::Value& log_std) {
    const double dims = static_cast<double>(x->cols());
    ad::Value z = ad::mul(ad::sub(x, mean), ad::exp_(ad::neg(log_std)));
    ad::Value per_dim = ad::sub(ad::scale(ad::square(z), -0.5), log_std);
    return ad::add_scalar(ad::sum_cols(per_dim), -kHalfLog2Pi * dims);
}

// Log density of a tanh-squashed Gaussian evaluated at action a in (-1, 1)^D:
// the base density at atanh(a) minus the log |d tanh / d pre| volume term.
ad::Value squashed_log_density(const ad::Value& a, const ad::Value& mean,
                               const ad::Value& log_std) {
    ad::Value u = ad::clamp(a, -1.0 + kAtanhClamp, 1.0 - kAtanhClamp);
    ad::Value log1p = ad::log_(ad::add_scalar(u, 1.0));
    ad::Value log1m = ad::log_(ad::add_scalar(ad::neg(u), 1.0));
    ad::Value pre = ad::scale(ad::sub(log1p, log1m), 0.5);  // atanh(u)
    ad::Value base = gaussian_log_density(pre, mean, log_std);
    ad::Value log_jac = ad::sum_cols(ad::add(log1p, log1m));  // sum log(1 - u^2)
    return ad::sub(base, log_jac);
}

TensorBuf log_of(const ad::Value& v) {
    TensorBuf out{v->shape, v->value};
    for (double& x : out.data) x = std::log(x);
    return out;
}

std::vector<double> row_of(const ad::Value& v, std::size_t i) {
    const std::size_t c = v->cols();
    return std::vector<double>(v->value.begin() + i * c, v->value.begin() + (i + 1) * c);
}

}  // namespace

AblationMask full_mask(const KnowledgeSet& set) {
    AblationMask mask;
    mask.knowledge.assign(set.size(), true);
    return mask;
}

AblationMask make_ablation(const KnowledgeSet& set, const std::vector<std::string>& drop) {
    AblationMask mask = full_mask(set);
    const std::vector<std::string> names = set.names();
    for (const std::string& d : drop) {
        if (d == "inner") {
            mask.inner = false;
            continue;
        }
        auto it = std::find(names.begin(), names.end(), d);
        if (it == names.end()) {
            std::string known = "inner";
            for (const std::string& n : names) known += ", " + n;
            throw UsageError("unknown drop target '" + d + "' (known: " + known + ")");
        }
        mask.knowledge[static_cast<std::size_t>(it - names.begin())] = false;
    }
    surviving_knowledge(mask, set.size());  // rejects dropping everything
    return mask;
}

void GridActorConfig::validate() const {
    policy.validate();
    if (policy.actions != static_cast<std::size_t>(kGridActionCount)) {
        throw ConfigError("grid actor requires " + std::to_string(kGridActionCount) +
                          " actions, got " + std::to_string(policy.actions));
    }
    if (d_k == 0) throw ConfigError("d_k must be positive");
}

void PointActorConfig::validate() const {
    policy.validate();
    if (policy.act_dim != 4) {
        throw ConfigError("point actor requires act_dim 4, got " +
                          std::to_string(policy.act_dim));
    }
    if (policy.obs_dim != kPointObsDim) {
        throw ConfigError("point actor requires the " + std::to_string(kPointObsDim) +
                          "-dim observation layout, got " + std::to_string(policy.obs_dim));
    }
    if (d_k == 0) throw ConfigError("d_k must be positive");
    for (std::size_t w : key_query_hidden) {
        if (w == 0) throw ConfigError("key/query hidden widths must be positive");
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ConfigError("temperature must be a positive finite value");
    }
}

TensorBuf grid_batch_images(const std::vector<GridObservation>& obs) {
    if (obs.empty()) throw UsageError("empty observation batch");
    const std::size_t per = kViewChannels * kViewSize * kViewSize;
    TensorBuf out = TensorBuf::zeros({obs.size(), kViewChannels, kViewSize, kViewSize});
    for (std::size_t i = 0; i < obs.size(); ++i) {
        if (obs[i].image.size() != per) {
            throw ShapeError("grid observation image has " +
                             std::to_string(obs[i].image.size()) + " values, expected " +
                             std::to_string(per));
        }
        std::copy(obs[i].image.data.begin(), obs[i].image.data.end(),
                  out.data.begin() + i * per);
    }
    return out;
}

TensorBuf grid_batch_carry(const std::vector<GridObservation>& obs) {
    if (obs.empty()) throw UsageError("empty observation batch");
    TensorBuf out = TensorBuf::zeros({obs.size(), 1});
    for (std::size_t i = 0; i < obs.size(); ++i) out.data[i] = obs[i].carrying ? 1.0 : 0.0;
    return out;
}

TensorBuf point_batch_obs(const std::vector<TensorBuf>& obs) {
    if (obs.empty()) throw UsageError("empty observation batch");
    TensorBuf out = TensorBuf::zeros({obs.size(), kPointObsDim});
    for (std::size_t i = 0; i < obs.size(); ++i) {
        if (obs[i].size() != kPointObsDim) {
            throw ShapeError("point observation has " + std::to_string(obs[i].size()) +
                             " values, expected " + std::to_string(kPointObsDim));
        }
        std::copy(obs[i].data.begin(), obs[i].data.end(), out.data.begin() + i * kPointObsDim);
    }
    return out;
}

std::map<std::string, TensorBuf> extract_inner_policy(const ParameterStore& params,
                                                      const std::string& actor_prefix) {
    const std::string want = actor_prefix + ".in.";
    std::map<std::string, TensorBuf> out;
    for (auto& [name, tensor] : params.snapshot()) {
        if (name.rfind(want, 0) != 0) continue;
        out.emplace(kSnapshotParamPrefix + "." + name.substr(want.size()), std::move(tensor));
    }
    if (out.empty()) throw UsageError("no parameters under '" + want + "'");
    return out;
}

// ---- grid actor ----

GridActor::GridActor(std::string prefix, GridActorConfig config, KnowledgeSet knowledge,
                     ParameterStore& params, CounterRng& init_rng)
    : prefix_(std::move(prefix)), config_(std::move(config)), knowledge_(std::move(knowledge)) {
    config_.validate();
    if (!knowledge_.empty()) {
        if (knowledge_.space() != ActionSpaceTag::grid7) {
            throw UsageError("grid actor given a knowledge set for another action space");
        }
        if (auto kd = knowledge_.key_dim(); kd && *kd != config_.d_k) {
            throw UsageError("knowledge keys have dimension " + std::to_string(*kd) +
                             ", actor uses d_k " + std::to_string(config_.d_k));
        }
    }
    inner_ = std::make_unique<GridPolicy>(prefix_ + ".in", config_.policy, params, init_rng);
    MLPSpec head;
    head.input_dim = config_.policy.trunk_width;
    head.output_dim = config_.d_k;
    key_head_ = std::make_unique<Mlp>(prefix_ + ".key", head, params, init_rng);
    query_head_ = std::make_unique<Mlp>(prefix_ + ".query", head, params, init_rng);
    if (!knowledge_.empty()) {
        key_table_ = make_key_table(prefix_ + ".keys", knowledge_, config_.d_k, params, init_rng);
    }
}

std::vector<DiscretePmf> GridActor::evaluate_knowledge(const GridObservation& obs) const {
    std::vector<DiscretePmf> out;
    out.reserve(knowledge_.size());
    for (const KnowledgeEntry& e : knowledge_.entries()) {
        out.push_back(e.mapping.evaluate_grid(obs));
    }
    return out;
}

GridActor::Batch GridActor::forward_batch(const std::vector<GridObservation>& obs,
                                          const std::vector<std::vector<DiscretePmf>>* knowledge,
                                          const AblationMask& mask) const {
    const std::size_t n = obs.size();
    const std::size_t acts = config_.policy.actions;
    if (knowledge && knowledge->size() != n) {
        throw UsageError("knowledge capture covers " + std::to_string(knowledge->size()) +
                         " observations, batch has " + std::to_string(n));
    }
    Batch b;
    b.inner_active = mask.inner;
    b.active = surviving_knowledge(mask, knowledge_.size());

    b.features = inner_->features(ad::constant(grid_batch_images(obs)),
                                  ad::constant(grid_batch_carry(obs)));
    b.k_in = key_head_->forward(b.features);
    b.query = query_head_->forward(b.features);
    b.pi_in = ad::softmax_rows(inner_->logits(b.features));

    std::vector<ad::Value> raw_parts;
    if (b.inner_active) raw_parts.push_back(ad::sum_cols(ad::mul(b.query, b.k_in)));
    if (!b.active.empty()) {
        ad::Value dots = ad::matmul_bt(b.query, key_table_);  // [N, m]
        raw_parts.push_back(select_cols(dots, b.active));
    }
    b.raw = raw_parts.size() == 1 ? raw_parts[0] : ad::concat_cols(raw_parts);
    b.weights = ad::softmax_rows(b.raw);

    ad::Value mix;
    std::size_t col = 0;
    if (b.inner_active) {
        mix = ad::mul_col(b.pi_in, ad::slice_cols(b.weights, 0, 1));
        col = 1;
    }
    for (std::size_t t = 0; t < b.active.size(); ++t) {
        const std::size_t j = b.active[t];
        TensorBuf pmfs = TensorBuf::zeros({n, acts});
        for (std::size_t i = 0; i < n; ++i) {
            if (knowledge && (*knowledge)[i].size() != knowledge_.size()) {
                throw UsageError("knowledge capture row covers " +
                                 std::to_string((*knowledge)[i].size()) + " components, set has " +
                                 std::to_string(knowledge_.size()));
            }
            const DiscretePmf pmf =
                knowledge ? (*knowledge)[i][j] : knowledge_.at(j).mapping.evaluate_grid(obs[i]);
            std::copy(pmf.p.begin(), pmf.p.end(), pmfs.data.begin() + i * acts);
        }
        ad::Value part = ad::mul_col(ad::constant(std::move(pmfs)),
                                     ad::slice_cols(b.weights, col + t, col + t + 1));
        mix = mix ? ad::add(mix, part) : part;
    }
    b.mixture = mix;
    return b;
}

ad::Value GridActor::log_prob(const Batch& batch, const std::vector<int>& actions) const {
    if (actions.size() != batch.mixture->rows()) {
        throw UsageError("action batch size " + std::to_string(actions.size()) +
                         " does not match forward batch " +
                         std::to_string(batch.mixture->rows()));
    }
    return ad::log_(ad::gather_cols(batch.mixture, actions));
}

ad::Value GridActor::entropy(const Batch& batch) const {
    return ad::neg(ad::sum_cols(ad::mul(batch.mixture, ad::log_(batch.mixture))));
}

std::vector<GridActResult> GridActor::act_batch(
    const std::vector<GridObservation>& obs, CounterRng& rng, const AblationMask& mask,
    std::vector<std::vector<DiscretePmf>>* captured) const {
    ad::NoGradGuard guard;
    if (captured) {
        captured->clear();
        captured->reserve(obs.size());
        for (const GridObservation& o : obs) captured->push_back(evaluate_knowledge(o));
    }
    Batch b = forward_batch(obs, captured, mask);
    std::vector<GridActResult> out(obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i) {
        GridActResult& r = out[i];
        r.mixture = row_of(b.mixture, i);
        const int a = rng.categorical(std::span<const double>(r.mixture));
        r.action = static_cast<GridAction>(a);
        r.log_prob = std::log(r.mixture[static_cast<std::size_t>(a)]);
        r.attention.raw = row_of(b.raw, i);
        r.attention.normalized = row_of(b.weights, i);
    }
    return out;
}

GridActResult GridActor::act(const GridObservation& obs, CounterRng& rng,
                             const AblationMask& mask) const {
    return act_batch({obs}, rng, mask).front();
}

// ---- point actor ----

PointActor::PointActor(std::string prefix, PointActorConfig config, KnowledgeSet knowledge,
                       ParameterStore& params, CounterRng& init_rng)
    : prefix_(std::move(prefix)), config_(std::move(config)), knowledge_(std::move(knowledge)) {
    config_.validate();
    if (!knowledge_.empty()) {
        if (knowledge_.space() != ActionSpaceTag::cont4) {
            throw UsageError("point actor given a knowledge set for another action space");
        }
        if (auto kd = knowledge_.key_dim(); kd && *kd != config_.d_k) {
            throw UsageError("knowledge keys have dimension " + std::to_string(*kd) +
                             ", actor uses d_k " + std::to_string(config_.d_k));
        }
    }
    inner_ = std::make_unique<PointPolicy>(prefix_ + ".in", config_.policy, params, init_rng);
    MLPSpec head;
    head.input_dim = config_.policy.obs_dim;
    for (std::size_t w : config_.key_query_hidden) head.hidden.emplace_back(w, Act::relu);
    head.output_dim = config_.d_k;
    key_head_ = std::make_unique<Mlp>(prefix_ + ".key", head, params, init_rng);
    query_head_ = std::make_unique<Mlp>(prefix_ + ".query", head, params, init_rng);
    if (!knowledge_.empty()) {
        key_table_ = make_key_table(prefix_ + ".keys", knowledge_, config_.d_k, params, init_rng);
    }
}

std::vector<GaussianActionParams> PointActor::evaluate_knowledge(const TensorBuf& obs) const {
    std::vector<GaussianActionParams> out;
    out.reserve(knowledge_.size());
    for (const KnowledgeEntry& e : knowledge_.entries()) {
        out.push_back(e.mapping.evaluate_point(obs));
    }
    return out;
}

PointActor::Batch PointActor::forward_batch(
    const std::vector<TensorBuf>& obs,
    const std::vector<std::vector<GaussianActionParams>>* knowledge,
    const AblationMask& mask) const {
    const std::size_t n = obs.size();
    if (knowledge && knowledge->size() != n) {
        throw UsageError("knowledge capture covers " + std::to_string(knowledge->size()) +
                         " observations, batch has " + std::to_string(n));
    }
    Batch b;
    b.n = n;
    b.inner_active = mask.inner;
    b.active = surviving_knowledge(mask, knowledge_.size());

    b.obs = ad::constant(point_batch_obs(obs));
    auto [mean, log_std] = inner_->mean_log_std(inner_->features(b.obs));
    b.mean = mean;
    b.log_std = log_std;
    b.k_in = key_head_->forward(b.obs);
    b.query = query_head_->forward(b.obs);

    std::vector<ad::Value> raw_parts;
    if (b.inner_active) raw_parts.push_back(ad::sum_cols(ad::mul(b.query, b.k_in)));
    if (!b.active.empty()) {
        ad::Value dots = ad::matmul_bt(b.query, key_table_);
        raw_parts.push_back(select_cols(dots, b.active));
    }
    b.raw = raw_parts.size() == 1 ? raw_parts[0] : ad::concat_cols(raw_parts);
    b.weights = ad::softmax_rows(b.raw);
    b.log_weights = ad::log_softmax_rows(b.raw);

    for (std::size_t j : b.active) {
        TensorBuf means = TensorBuf::zeros({n, 4});
        TensorBuf sigmas = TensorBuf::zeros({n, 4});
        bool squashed = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (knowledge && (*knowledge)[i].size() != knowledge_.size()) {
                throw UsageError("knowledge capture row covers " +
                                 std::to_string((*knowledge)[i].size()) + " components, set has " +
                                 std::to_string(knowledge_.size()));
            }
            const GaussianActionParams g =
                knowledge ? (*knowledge)[i][j] : knowledge_.at(j).mapping.evaluate_point(obs[i]);
            std::copy(g.mean.begin(), g.mean.end(), means.data.begin() + i * 4);
            std::copy(g.sigma.begin(), g.sigma.end(), sigmas.data.begin() + i * 4);
            if (i == 0) squashed = g.squashed;
        }
        b.k_mean.push_back(ad::constant(std::move(means)));
        b.k_sigma.push_back(ad::constant(std::move(sigmas)));
        b.k_squashed.push_back(squashed);
    }
    return b;
}

ad::Value PointActor::log_prob(const Batch& batch, const ad::Value& actions) const {
    std::vector<ad::Value> parts;  // per component: log w_j + log p_j(a), each [N, 1]
    std::size_t col = 0;
    if (batch.inner_active) {
        parts.push_back(ad::add(ad::slice_cols(batch.log_weights, 0, 1),
                                squashed_log_density(actions, batch.mean, batch.log_std)));
        col = 1;
    }
    for (std::size_t t = 0; t < batch.k_mean.size(); ++t) {
        ad::Value log_sigma = ad::constant(log_of(batch.k_sigma[t]));
        ad::Value comp = batch.k_squashed[t]
                             ? squashed_log_density(actions, batch.k_mean[t], log_sigma)
                             : gaussian_log_density(actions, batch.k_mean[t], log_sigma);
        parts.push_back(ad::add(ad::slice_cols(batch.log_weights, col + t, col + t + 1), comp));
    }
    if (parts.size() == 1) return parts[0];
    return ad::logsumexp_rows(ad::concat_cols(parts));
}

PointActor::Sample PointActor::sample(const Batch& batch, CounterRng& rng) const {
    const std::size_t n = batch.n;
    const std::size_t comps = (batch.inner_active ? 1 : 0) + batch.k_mean.size();

    // Straight-through Gumbel-softmax over the attention weights: the forward
    // value is the hard one-hot of the perturbed argmax, the gradient is the
    // relaxed softmax's.
    TensorBuf gumbel = TensorBuf::zeros({n, comps});
    for (double& g : gumbel.data) g = rng.gumbel();
    ad::Value soft = ad::softmax_rows(ad::scale(ad::add(batch.log_weights, ad::constant(gumbel)),
                                                1.0 / config_.temperature));
    TensorBuf hard = TensorBuf::zeros({n, comps});
    std::vector<int> component(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = i * comps;
        std::size_t arg = 0;
        for (std::size_t c = 1; c < comps; ++c) {
            if (soft->value[base + c] > soft->value[base + arg]) arg = c;
        }
        hard.data[base + arg] = 1.0;
        component[i] =
            batch.inner_active ? static_cast<int>(arg) : static_cast<int>(arg) + 1;
    }
    ad::Value st = ad::add(ad::constant(std::move(hard)), ad::sub(soft, ad::detach(soft)));

    // Per-component draws; only the selected column survives the forward pass.
    std::vector<ad::Value> draws;
    if (batch.inner_active) {
        TensorBuf xi = TensorBuf::zeros({n, 4});
        for (double& x : xi.data) x = rng.normal();
        draws.push_back(ad::tanh_(
            ad::add(batch.mean, ad::mul(ad::exp_(batch.log_std), ad::constant(xi)))));
    }
    for (std::size_t t = 0; t < batch.k_mean.size(); ++t) {
        TensorBuf d = TensorBuf::zeros({n, 4});
        for (std::size_t i = 0; i < d.data.size(); ++i) {
            d.data[i] = batch.k_mean[t]->value[i] + batch.k_sigma[t]->value[i] * rng.normal();
            if (batch.k_squashed[t]) d.data[i] = std::tanh(d.data[i]);
        }
        draws.push_back(ad::constant(std::move(d)));
    }

    ad::Value action;
    for (std::size_t c = 0; c < comps; ++c) {
        ad::Value part = ad::mul_col(draws[c], ad::slice_cols(st, c, c + 1));
        action = action ? ad::add(action, part) : part;
    }

    Sample s;
    s.action = action;
    s.log_prob = log_prob(batch, action);
    s.component = std::move(component);
    return s;
}

PointActResult PointActor::act(const TensorBuf& obs, CounterRng& rng,
                               const AblationMask& mask) const {
    ad::NoGradGuard guard;
    Batch b = forward_batch({obs}, nullptr, mask);
    Sample s = sample(b, rng);
    PointActResult r;
    r.action.dxyz = {s.action->value[0], s.action->value[1], s.action->value[2]};
    r.action.grip = s.action->value[3];
    r.log_prob = s.log_prob->value[0];
    r.component = s.component[0];
    r.attention.raw = row_of(b.raw, 0);
    r.attention.normalized = row_of(b.weights, 0);
    return r;
}

}  // namespace kgrl
