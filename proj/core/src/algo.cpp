#include "kgrl/algo.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

#include "kgrl/errors.hpp"

namespace kgrl {

namespace {

constexpr std::size_t kGoalSlot = 22;  // goal position occupies obs[22:25)

bool all_finite(const std::vector<double>& xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

void shuffle_indices(std::vector<std::size_t>& idx, CounterRng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        std::size_t j = rng.uniform_index(i);
        std::swap(idx[i - 1], idx[j]);
    }
}

ad::Value column_const(const std::vector<double>& xs) {
    return ad::constant(TensorBuf({xs.size(), 1}, std::vector<double>(xs)));
}

void drop_frozen_grads(ParameterStore& params, const std::vector<std::string>& names) {
    for (const auto& name : names) {
        if (!params.contains(name)) {
            throw UsageError("freeze_params entry '" + name +
                             "' is not a parameter of the stepped store");
        }
        params.get(name)->grad.clear();  // empty grad == zero gradient for Adam
    }
}

std::vector<TensorBuf> split_rows(const TensorBuf& m) {
    std::vector<TensorBuf> rows;
    const std::size_t n = m.rows(), c = m.cols();
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        rows.emplace_back(std::vector<std::size_t>{c},
                          std::vector<double>(m.data.begin() + static_cast<long>(i * c),
                                              m.data.begin() + static_cast<long>((i + 1) * c)));
    return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shared utilities
// ---------------------------------------------------------------------------

GaeResult gae_advantages(const std::vector<double>& rewards,
                         const std::vector<double>& values,
                         const std::vector<double>& dones, double bootstrap,
                         double gamma, double lam) {
    const std::size_t n = rewards.size();
    if (values.size() != n || dones.size() != n)
        throw UsageError("gae_advantages: rewards/values/dones lengths differ");
    if (!all_finite(rewards) || !all_finite(values) || !std::isfinite(bootstrap))
        throw UsageError("gae_advantages: non-finite input");
    for (double d : dones)
        if (d != 0.0 && d != 1.0) throw UsageError("gae_advantages: done flags must be 0 or 1");

    GaeResult out;
    out.advantages.resize(n);
    out.returns.resize(n);
    double gae = 0.0;
    for (std::size_t i = n; i-- > 0;) {
        const double next_value = (i + 1 < n) ? values[i + 1] : bootstrap;
        const double nonterminal = 1.0 - dones[i];
        const double delta = rewards[i] + gamma * next_value * nonterminal - values[i];
        gae = delta + gamma * lam * nonterminal * gae;
        out.advantages[i] = gae;
        out.returns[i] = gae + values[i];
    }
    return out;
}

void normalize_advantages(std::vector<double>& xs) {
    if (xs.empty()) return;
    const double mean = mean_of(xs);
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    const double std = std::sqrt(var / static_cast<double>(xs.size()));
    for (double& x : xs) x -= mean;
    if (std > 1e-8)
        for (double& x : xs) x /= std;
}

double global_grad_norm(const ParameterStore& params) {
    double sq = 0.0;
    for (const auto& name : params.names()) {
        const auto& g = params.get(name)->grad;
        for (double v : g) sq += v * v;
    }
    return std::sqrt(sq);
}

double clip_grad_norm(ParameterStore& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (const auto& name : params.names()) {
            auto& g = params.get(name)->grad;
            for (double& v : g) v *= scale;
        }
    }
    return norm;
}

void polyak_update(ParameterStore& target, const ParameterStore& online, double tau) {
    const auto tnames = target.names();
    if (tnames != online.names())
        throw UsageError("polyak_update: parameter sets differ between stores");
    for (const auto& name : tnames) {
        auto t = target.get(name);
        auto o = online.get(name);
        if (t->shape != o->shape)
            throw UsageError("polyak_update: shape mismatch for '" + name + "'");
        for (std::size_t i = 0; i < t->value.size(); ++i)
            t->value[i] = tau * o->value[i] + (1.0 - tau) * t->value[i];
    }
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

void PPOConfig::validate() const {
    if (n_envs == 0 || n_steps == 0) throw ConfigError("ppo: n_envs and n_steps must be positive");
    if (epochs == 0) throw ConfigError("ppo: epochs must be positive");
    if (minibatch == 0) throw ConfigError("ppo: minibatch must be positive");
    if (minibatch > rollout_size())
        throw ConfigError("ppo: minibatch larger than the rollout");
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("ppo: gamma must lie in (0, 1)");
    if (!(lam >= 0.0 && lam <= 1.0)) throw ConfigError("ppo: lam must lie in [0, 1]");
    if (!(clip > 0.0)) throw ConfigError("ppo: clip must be positive");
    if (!(value_coef >= 0.0) || !(entropy_coef >= 0.0))
        throw ConfigError("ppo: loss coefficients must be non-negative");
    if (!(lr > 0.0)) throw ConfigError("ppo: lr must be positive");
    if (!(max_grad_norm > 0.0)) throw ConfigError("ppo: max_grad_norm must be positive");
}

GridCritic::GridCritic(std::string prefix, GridPolicySpec spec, ParameterStore& params,
                       CounterRng& init_rng)
    : prefix_(std::move(prefix)), spec_(spec) {
    spec_.validate();
    enc_ = std::make_unique<ConvEncoder>(prefix_ + ".enc", spec_.encoder_spec(), params,
                                         init_rng);
    trunk_ = std::make_unique<Mlp>(
        prefix_ + ".trunk", MLPSpec{spec_.head_width, {}, spec_.trunk_width, Act::tanh},
        params, init_rng);
    v_ = std::make_unique<Mlp>(prefix_ + ".v", MLPSpec{spec_.trunk_width, {}, 1, Act::none},
                               params, init_rng);
}

ad::Value GridCritic::value(const ad::Value& img, const ad::Value& carry) const {
    return v_->forward(trunk_->forward(enc_->forward(img, carry)));
}

std::vector<double> GridCritic::values(const std::vector<GridObservation>& obs) const {
    ad::NoGradGuard guard;
    auto v = value(ad::constant(grid_batch_images(obs)),
                   ad::constant(grid_batch_carry(obs)));
    return v->value;
}

void GridRollout::validate() const {
    const std::size_t n = obs.size();
    if (n != n_envs * n_steps)
        throw UsageError("rollout: size does not match n_envs * n_steps");
    if (knowledge.size() != n || actions.size() != n || log_probs.size() != n ||
        rewards.size() != n || values.size() != n || dones.size() != n ||
        traces.size() != n)
        throw UsageError("rollout: per-step vectors are misaligned");
    if (bootstrap.size() != n_envs)
        throw UsageError("rollout: bootstrap must hold one value per env");
    if (!all_finite(log_probs)) throw UsageError("rollout: non-finite log-prob");
    for (double d : dones)
        if (d != 0.0 && d != 1.0) throw UsageError("rollout: done flags must be 0 or 1");
}

PPOUpdateStats ppo_update(GridActor& actor, GridCritic& critic, ParameterStore& params,
                          const GridRollout& rollout, const PPOConfig& cfg,
                          CounterRng& rng) {
    cfg.validate();
    rollout.validate();
    const std::size_t n = rollout.size();
    if (n != cfg.rollout_size())
        throw UsageError("ppo_update: rollout shape does not match the config");

    std::vector<double> advantages(n), returns(n);
    for (std::size_t e = 0; e < rollout.n_envs; ++e) {
        const std::size_t base = e * rollout.n_steps;
        auto seg = [&](const std::vector<double>& xs) {
            return std::vector<double>(xs.begin() + static_cast<long>(base),
                                       xs.begin() + static_cast<long>(base + rollout.n_steps));
        };
        auto g = gae_advantages(seg(rollout.rewards), seg(rollout.values), seg(rollout.dones),
                                rollout.bootstrap[e], cfg.gamma, cfg.lam);
        std::copy(g.advantages.begin(), g.advantages.end(),
                  advantages.begin() + static_cast<long>(base));
        std::copy(g.returns.begin(), g.returns.end(), returns.begin() + static_cast<long>(base));
    }
    normalize_advantages(advantages);

    const AblationMask mask = full_mask(actor.knowledge());
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    PPOUpdateStats stats;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_indices(order, rng);
        for (std::size_t start = 0; start < n; start += cfg.minibatch) {
            const std::size_t b = std::min(cfg.minibatch, n - start);
            std::vector<GridObservation> obs_mb;
            std::vector<std::vector<DiscretePmf>> know_mb;
            std::vector<int> act_mb;
            std::vector<double> oldlp_mb, adv_mb, ret_mb;
            obs_mb.reserve(b);
            know_mb.reserve(b);
            act_mb.reserve(b);
            for (std::size_t k = 0; k < b; ++k) {
                const std::size_t i = order[start + k];
                obs_mb.push_back(rollout.obs[i]);
                know_mb.push_back(rollout.knowledge[i]);
                act_mb.push_back(rollout.actions[i]);
                oldlp_mb.push_back(rollout.log_probs[i]);
                adv_mb.push_back(advantages[i]);
                ret_mb.push_back(returns[i]);
            }

            auto fb = actor.forward_batch(obs_mb, &know_mb, mask);
            auto lp = actor.log_prob(fb, act_mb);
            auto ent = actor.entropy(fb);
            auto ratio = ad::exp_(ad::sub(lp, column_const(oldlp_mb)));
            auto adv_c = column_const(adv_mb);
            auto surr = ad::minimum(ad::mul(ratio, adv_c),
                                    ad::mul(ad::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip),
                                            adv_c));
            auto policy_loss = ad::neg(ad::mean_all(surr));
            auto v = critic.value(ad::constant(grid_batch_images(obs_mb)),
                                  ad::constant(grid_batch_carry(obs_mb)));
            auto value_loss = ad::mean_all(ad::square(ad::sub(v, column_const(ret_mb))));
            auto entropy_mean = ad::mean_all(ent);
            auto loss = ad::add(ad::add(policy_loss, ad::scale(value_loss, cfg.value_coef)),
                                ad::scale(entropy_mean, -cfg.entropy_coef));

            if (!std::isfinite(loss->value[0])) {
                std::ostringstream msg;
                msg << "ppo_update: non-finite loss (epoch " << epoch << ", minibatch at "
                    << start << "): policy=" << policy_loss->value[0]
                    << " value=" << value_loss->value[0]
                    << " entropy=" << entropy_mean->value[0]
                    << " mean_adv=" << mean_of(adv_mb) << " mean_old_lp=" << mean_of(oldlp_mb);
                throw NumericError(msg.str());
            }

            params.zero_grad();
            ad::backward(loss);
            drop_frozen_grads(params, cfg.freeze_params);
            stats.grad_norm += clip_grad_norm(params, cfg.max_grad_norm);
            params.adam_step(cfg.lr);

            double kl = 0.0, clipped = 0.0;
            for (std::size_t k = 0; k < b; ++k) {
                kl += oldlp_mb[k] - lp->value[k];
                if (std::abs(ratio->value[k] - 1.0) > cfg.clip) clipped += 1.0;
            }
            stats.policy_loss += policy_loss->value[0];
            stats.value_loss += value_loss->value[0];
            stats.entropy += entropy_mean->value[0];
            stats.approx_kl += kl / static_cast<double>(b);
            stats.clip_fraction += clipped / static_cast<double>(b);
            ++stats.minibatches;
        }
    }
    const double m = static_cast<double>(stats.minibatches);
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.approx_kl /= m;
    stats.clip_fraction /= m;
    stats.grad_norm /= m;
    return stats;
}

PPOTrainer::PPOTrainer(PPOConfig cfg, GridConfig env_cfg, GridActor& actor,
                       GridCritic& critic, ParameterStore& params, std::uint64_t seed)
    : cfg_(cfg), actor_(actor), critic_(critic), params_(params),
      act_rng_(seed, 1), update_rng_(seed, 2) {
    cfg_.validate();
    env_cfg.validate();
    envs_.reserve(cfg_.n_envs);
    for (std::size_t e = 0; e < cfg_.n_envs; ++e) envs_.emplace_back(env_cfg, seed + e);
    cur_.reserve(cfg_.n_envs);
    for (auto& env : envs_) cur_.push_back(env.reset());
    ep_return_.assign(cfg_.n_envs, 0.0);
}

GridRollout PPOTrainer::collect(const AblationMask& mask) {
    const std::size_t n = cfg_.rollout_size();
    GridRollout out;
    out.n_envs = cfg_.n_envs;
    out.n_steps = cfg_.n_steps;
    out.obs.resize(n);
    out.knowledge.resize(n);
    out.actions.resize(n);
    out.log_probs.resize(n);
    out.rewards.resize(n);
    out.values.resize(n);
    out.dones.resize(n);
    out.traces.resize(n);
    win_episodes_ = 0;
    win_successes_ = 0;
    win_return_sum_ = 0.0;

    for (std::size_t t = 0; t < cfg_.n_steps; ++t) {
        std::vector<std::vector<DiscretePmf>> captured;
        auto results = actor_.act_batch(cur_, act_rng_, mask, &captured);
        auto vals = critic_.values(cur_);
        for (std::size_t e = 0; e < cfg_.n_envs; ++e) {
            const std::size_t i = e * cfg_.n_steps + t;
            out.obs[i] = cur_[e];
            out.knowledge[i] = std::move(captured[e]);
            out.actions[i] = static_cast<int>(results[e].action);
            out.log_probs[i] = results[e].log_prob;
            out.values[i] = vals[e];
            out.traces[i] = std::move(results[e].attention);

            auto r = envs_[e].step_state(results[e].action);
            out.rewards[i] = r.reward;
            out.dones[i] = r.done ? 1.0 : 0.0;
            ep_return_[e] += r.reward;
            ++total_steps_;
            if (r.done) {
                ++win_episodes_;
                if (r.reward > 0.0) ++win_successes_;
                win_return_sum_ += ep_return_[e];
                ep_return_[e] = 0.0;
                cur_[e] = envs_[e].reset();
            } else {
                cur_[e] = encode_observation(r.state);
            }
        }
    }
    auto boot = critic_.values(cur_);
    out.bootstrap.assign(boot.begin(), boot.end());
    return out;
}

PPOIterationStats PPOTrainer::iterate() {
    auto rollout = collect(full_mask(actor_.knowledge()));

    PPOIterationStats stats;
    if (!rollout.traces.empty()) {
        stats.mean_weights.assign(rollout.traces.front().normalized.size(), 0.0);
        for (const auto& tr : rollout.traces)
            for (std::size_t j = 0; j < stats.mean_weights.size(); ++j)
                stats.mean_weights[j] += tr.normalized[j];
        for (double& w : stats.mean_weights) w /= static_cast<double>(rollout.size());
    }
    stats.episodes = win_episodes_;
    stats.mean_return =
        win_episodes_ ? win_return_sum_ / static_cast<double>(win_episodes_) : 0.0;
    stats.success_rate =
        win_episodes_ ? static_cast<double>(win_successes_) / static_cast<double>(win_episodes_)
                      : 0.0;
    stats.update = ppo_update(actor_, critic_, params_, rollout, cfg_, update_rng_);
    stats.env_steps_total = total_steps_;
    return stats;
}

// ---------------------------------------------------------------------------
// SAC + hindsight relabeling
// ---------------------------------------------------------------------------

void SACConfig::validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("sac: gamma must lie in (0, 1)");
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("sac: tau must lie in [0, 1]");
    if (!(lr > 0.0)) throw ConfigError("sac: lr must be positive");
    if (!(alpha_lr >= 0.0)) throw ConfigError("sac: alpha_lr must be non-negative");
    if (!(init_alpha > 0.0)) throw ConfigError("sac: init_alpha must be positive");
    if (!std::isfinite(target_entropy)) throw ConfigError("sac: target_entropy must be finite");
    if (batch == 0) throw ConfigError("sac: batch must be positive");
    if (buffer_capacity == 0) throw ConfigError("sac: buffer capacity must be positive");
    if (update_every == 0) throw ConfigError("sac: update_every must be positive");
    if (actor_delay == 0) throw ConfigError("sac: actor_delay must be positive");
    if (critic_hidden.empty()) throw ConfigError("sac: critic needs at least one hidden layer");
    for (auto h : critic_hidden)
        if (h == 0) throw ConfigError("sac: critic hidden widths must be positive");
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay buffer: capacity must be positive");
}

void ReplayBuffer::push(PointTransition t) {
    if (data_.size() < capacity_) {
        data_.push_back(std::move(t));
    } else {
        data_[next_] = std::move(t);
    }
    next_ = (next_ + 1) % capacity_;
}

const PointTransition& ReplayBuffer::at(std::size_t i) const {
    if (i >= data_.size()) throw UsageError("replay buffer: index out of range");
    return data_[i];
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, CounterRng& rng) const {
    if (data_.empty()) throw UsageError("replay buffer: cannot sample from an empty buffer");
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = rng.uniform_index(data_.size());
    return idx;
}

std::vector<PointTransition> her_relabel(const std::vector<PointTransition>& episode,
                                         std::size_t k, CounterRng& rng) {
    std::vector<PointTransition> out;
    if (k == 0 || episode.empty()) return out;
    for (const auto& t : episode)
        if (t.obs.size() != kPointObsDim || t.next_obs.size() != kPointObsDim)
            throw UsageError("her_relabel: transitions must hold full observations");
    out.reserve(episode.size() * k);
    const std::size_t horizon = episode.size();
    for (std::size_t t = 0; t < horizon; ++t) {
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t u = t + rng.uniform_index(horizon - t);
            PointTransition r = episode[t];
            r.goal = episode[u].achieved_next;
            for (std::size_t d = 0; d < 3; ++d) {
                r.obs.data[kGoalSlot + d] = r.goal[d];
                r.next_obs.data[kGoalSlot + d] = r.goal[d];
            }
            const bool reached = point_goal_reached(r.achieved_next, r.goal);
            r.reward = reached ? 0.0 : -1.0;
            r.terminal = reached;
            out.push_back(std::move(r));
        }
    }
    return out;
}

SACCritics::SACCritics(const SACConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    MLPSpec q;
    q.input_dim = kPointObsDim + 4;
    for (auto h : cfg.critic_hidden) q.hidden.emplace_back(h, Act::relu);
    q.output_dim = 1;

    CounterRng rng(seed, 0);
    q1_ = std::make_unique<Mlp>("q1", q, critic_params_, rng);
    q2_ = std::make_unique<Mlp>("q2", q, critic_params_, rng);
    tq1_ = std::make_unique<Mlp>("q1", q, target_params_, rng);
    tq2_ = std::make_unique<Mlp>("q2", q, target_params_, rng);
    target_params_.load(critic_params_.snapshot());

    log_alpha_ = alpha_params_.create("log_alpha", TensorBuf::scalar(std::log(cfg.init_alpha)));
}

ad::Value SACCritics::q(int which, const ad::Value& obs, const ad::Value& action) const {
    if (which != 0 && which != 1) throw UsageError("sac critics: q index must be 0 or 1");
    auto in = ad::concat_cols({obs, action});
    return which == 0 ? q1_->forward(in) : q2_->forward(in);
}

std::vector<double> SACCritics::target_min_q(const TensorBuf& obs,
                                             const TensorBuf& action) const {
    ad::NoGradGuard guard;
    auto in = ad::concat_cols({ad::constant(obs), ad::constant(action)});
    auto a = tq1_->forward(in);
    auto b = tq2_->forward(in);
    std::vector<double> out(a->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a->value[i], b->value[i]);
    return out;
}

std::vector<double> SACCritics::online_min_q(const TensorBuf& obs,
                                             const TensorBuf& action) const {
    ad::NoGradGuard guard;
    auto in = ad::concat_cols({ad::constant(obs), ad::constant(action)});
    auto a = q1_->forward(in);
    auto b = q2_->forward(in);
    std::vector<double> out(a->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a->value[i], b->value[i]);
    return out;
}

double SACCritics::alpha() const { return std::exp(log_alpha_->value[0]); }

void SACCritics::polyak(double tau) { polyak_update(target_params_, critic_params_, tau); }

void SACBatch::validate() const {
    const std::size_t b = reward.size();
    if (b == 0) throw UsageError("sac batch: empty");
    if (obs.rows() != b || next_obs.rows() != b || action.rows() != b ||
        terminal.size() != b)
        throw UsageError("sac batch: row counts differ");
    if (obs.cols() != kPointObsDim || next_obs.cols() != kPointObsDim)
        throw UsageError("sac batch: observation width mismatch");
    if (action.cols() != 4) throw UsageError("sac batch: action width mismatch");
    if (!all_finite(reward)) throw UsageError("sac batch: non-finite reward");
    for (double t : terminal)
        if (t != 0.0 && t != 1.0) throw UsageError("sac batch: terminal flags must be 0 or 1");
}

SACBatch make_sac_batch(const ReplayBuffer& buffer, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw UsageError("sac batch: no indices");
    const std::size_t b = idx.size();
    std::vector<double> obs, act, next;
    obs.reserve(b * kPointObsDim);
    act.reserve(b * 4);
    next.reserve(b * kPointObsDim);
    SACBatch out;
    out.reward.reserve(b);
    out.terminal.reserve(b);
    for (std::size_t i : idx) {
        const auto& t = buffer.at(i);
        obs.insert(obs.end(), t.obs.data.begin(), t.obs.data.end());
        next.insert(next.end(), t.next_obs.data.begin(), t.next_obs.data.end());
        act.insert(act.end(), t.action.begin(), t.action.end());
        out.reward.push_back(t.reward);
        out.terminal.push_back(t.terminal ? 1.0 : 0.0);
    }
    out.obs = TensorBuf({b, kPointObsDim}, std::move(obs));
    out.action = TensorBuf({b, 4}, std::move(act));
    out.next_obs = TensorBuf({b, kPointObsDim}, std::move(next));
    out.validate();
    return out;
}

SACUpdateStats sac_update(PointActor& actor, ParameterStore& actor_params,
                          SACCritics& critics, const SACBatch& batch,
                          const SACConfig& cfg, bool update_actor, CounterRng& rng) {
    cfg.validate();
    batch.validate();
    const std::size_t b = batch.size();
    const AblationMask mask = full_mask(actor.knowledge());
    const double alpha = critics.alpha();

    SACUpdateStats stats;

    // Regression targets from the frozen copies (value-only pass).
    std::vector<double> y(b);
    {
        ad::NoGradGuard guard;
        auto fb = actor.forward_batch(split_rows(batch.next_obs), nullptr, mask);
        auto next_sample = actor.sample(fb, rng);
        TensorBuf next_actions({b, 4}, std::vector<double>(next_sample.action->value));
        auto tq = critics.target_min_q(batch.next_obs, next_actions);
        for (std::size_t i = 0; i < b; ++i) {
            y[i] = batch.reward[i] +
                   cfg.gamma * (1.0 - batch.terminal[i]) *
                       (tq[i] - alpha * next_sample.log_prob->value[i]);
        }
    }
    if (!all_finite(y)) throw NumericError("sac_update: non-finite regression target");

    auto obs_c = ad::constant(batch.obs);
    auto y_c = column_const(y);

    critics.critic_params().zero_grad();
    auto q1 = critics.q(0, obs_c, ad::constant(batch.action));
    auto q2 = critics.q(1, obs_c, ad::constant(batch.action));
    auto critic_loss = ad::add(ad::mean_all(ad::square(ad::sub(q1, y_c))),
                               ad::mean_all(ad::square(ad::sub(q2, y_c))));
    if (!std::isfinite(critic_loss->value[0])) {
        std::ostringstream msg;
        msg << "sac_update: non-finite critic loss: mean_y=" << mean_of(y)
            << " mean_q1=" << mean_of(q1->value) << " mean_q2=" << mean_of(q2->value);
        throw NumericError(msg.str());
    }
    ad::backward(critic_loss);
    critics.critic_params().adam_step(cfg.lr);
    stats.critic_loss = critic_loss->value[0];
    stats.mean_q = 0.5 * (mean_of(q1->value) + mean_of(q2->value));

    if (update_actor) {
        actor_params.zero_grad();
        critics.critic_params().zero_grad();  // scratch grads; never stepped from this graph
        auto fb = actor.forward_batch(split_rows(batch.obs), nullptr, mask);
        auto sample = actor.sample(fb, rng);
        auto qmin = ad::minimum(critics.q(0, obs_c, sample.action),
                                critics.q(1, obs_c, sample.action));
        auto actor_loss = ad::mean_all(ad::sub(ad::scale(sample.log_prob, alpha), qmin));
        if (!std::isfinite(actor_loss->value[0])) {
            std::ostringstream msg;
            msg << "sac_update: non-finite actor loss: mean_lp="
                << mean_of(sample.log_prob->value) << " mean_qmin=" << mean_of(qmin->value);
            throw NumericError(msg.str());
        }
        ad::backward(actor_loss);
        drop_frozen_grads(actor_params, cfg.freeze_params);
        actor_params.adam_step(cfg.lr);

        const double mean_lp = mean_of(sample.log_prob->value);
        if (cfg.alpha_lr > 0.0) {
            critics.alpha_params().zero_grad();
            auto alpha_loss =
                ad::sum_all(ad::scale(critics.log_alpha(), -(mean_lp + cfg.target_entropy)));
            ad::backward(alpha_loss);
            critics.alpha_params().adam_step(cfg.alpha_lr);
        }
        stats.actor_loss = actor_loss->value[0];
        stats.entropy = -mean_lp;
        stats.actor_updated = true;
    }

    critics.polyak(cfg.tau);
    stats.alpha = critics.alpha();
    return stats;
}

SACTrainer::SACTrainer(SACConfig cfg, PointConfig env_cfg, PointActor& actor,
                       ParameterStore& actor_params, std::uint64_t seed)
    : cfg_(cfg), actor_(actor), actor_params_(actor_params), critics_(cfg, seed + 1),
      buffer_(cfg.buffer_capacity), env_(env_cfg, seed), act_rng_(seed, 3),
      update_rng_(seed, 4), her_rng_(seed, 5) {
    cfg_.validate();
    env_cfg.validate();
    cur_obs_ = env_.reset();
}

void SACTrainer::finish_episode() {
    for (const auto& t : her_relabel(episode_, cfg_.her_k, her_rng_)) buffer_.push(t);
    for (auto& t : episode_) buffer_.push(std::move(t));
    episode_.clear();
    ep_return_ = 0.0;
    cur_obs_ = env_.reset();
}

SACRunStats SACTrainer::run(std::size_t env_steps) {
    return run(env_steps, full_mask(actor_.knowledge()));
}

SACRunStats SACTrainer::run(std::size_t env_steps, const AblationMask& mask) {
    SACRunStats stats;
    double return_sum = 0.0;
    std::size_t successes = 0, policy_actions = 0;

    for (std::size_t s = 0; s < env_steps; ++s) {
        ContinuousAction a;
        if (total_steps_ < cfg_.start_steps) {
            for (auto& d : a.dxyz) d = act_rng_.uniform(-1.0, 1.0);
            a.grip = act_rng_.uniform(-1.0, 1.0);
        } else {
            auto res = actor_.act(cur_obs_, act_rng_, mask);
            a = res.action;
            ++policy_actions;
            if (stats.mean_weights.empty())
                stats.mean_weights.assign(res.attention.normalized.size(), 0.0);
            for (std::size_t j = 0; j < stats.mean_weights.size(); ++j)
                stats.mean_weights[j] += res.attention.normalized[j];
        }

        const auto& pre = env_.state();
        const bool track_object = pre.config.variant == PointVariant::pick_place;
        PointTransition t;
        t.obs = cur_obs_;
        t.achieved = track_object ? pre.p_obj : pre.p_ee;
        t.goal = pre.p_goal;
        t.action = {a.dxyz[0], a.dxyz[1], a.dxyz[2], a.grip};

        auto r = env_.step_state(a);
        t.next_obs = encode_point_observation(r.state);
        t.achieved_next = track_object ? r.state.p_obj : r.state.p_ee;
        t.reward = r.reward;
        t.terminal = r.reward == 0.0;

        ep_return_ += r.reward;
        ++total_steps_;
        cur_obs_ = t.next_obs;
        const bool success = t.terminal;
        episode_.push_back(std::move(t));
        if (r.done) {
            ++stats.episodes;
            if (success) ++successes;
            return_sum += ep_return_;
            finish_episode();
        }

        if (total_steps_ % cfg_.update_every == 0) {
            if (buffer_.size() < cfg_.batch) {
                ++stats.skipped_updates;
            } else {
                auto idx = buffer_.sample_indices(cfg_.batch, update_rng_);
                auto batch = make_sac_batch(buffer_, idx);
                const bool update_actor = critic_updates_ % cfg_.actor_delay == 0;
                auto u = sac_update(actor_, actor_params_, critics_, batch, cfg_,
                                    update_actor, update_rng_);
                ++critic_updates_;
                ++stats.updates;
                stats.critic_loss += u.critic_loss;
                if (u.actor_updated) {
                    stats.actor_loss += u.actor_loss;
                    stats.entropy += u.entropy;
                }
                stats.alpha = u.alpha;
            }
        }
    }

    if (stats.updates) {
        stats.critic_loss /= static_cast<double>(stats.updates);
        stats.actor_loss /= static_cast<double>(stats.updates);
        stats.entropy /= static_cast<double>(stats.updates);
    }
    if (policy_actions)
        for (double& w : stats.mean_weights) w /= static_cast<double>(policy_actions);
    if (stats.episodes) {
        stats.mean_return = return_sum / static_cast<double>(stats.episodes);
        stats.success_rate =
            static_cast<double>(successes) / static_cast<double>(stats.episodes);
    }
    stats.env_steps_total = total_steps_;
    return stats;
}

}  // namespace kgrl
