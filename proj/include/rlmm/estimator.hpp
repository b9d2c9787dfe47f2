#pragma once
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>
#include <rlmm/csv.hpp>
#include <rlmm/dataset.hpp>
#include <rlmm/enumerate.hpp>
#include <rlmm/math.hpp>
#include <rlmm/prior.hpp>
#include <rlmm/rng.hpp>
#include <rlmm/value_model.hpp>

namespace rlmm {

struct FitConfig
{
    double lambda_bell = 1.0;
    double tau = 1.0;
    double eta = 1e-2;
    std::size_t batch_size = 256;
    int m_sgd = 50;
    int m_nr = 5;
    int k_outer = 20;
    std::uint64_t seed = 0;
    double eps_scale = 1e-8;
    double sigma2_floor = 1e-3;
    PopulationPrior prior_init{0.0, 0.25};
    bool estimate_prior = true;
    ModelKind kind = ModelKind::two_layer;
    int hidden = 64;
    std::optional<double> gamma;  // board discount when unset
    double rel_tol_stop = 0.0;    // 0 disables early stopping
    bool laplace_variance = true;  // sigma2 adds the mean posterior variance -1/H

    void validate() const
    {
        if (!(lambda_bell >= 0.0)) throw precondition_error("lambda_bell must be >= 0");
        if (!(tau > 0.0)) throw precondition_error("tau must be positive");
        if (!(eta >= 0.0)) throw precondition_error("eta must be >= 0");
        if (batch_size < 1) throw precondition_error("batch_size must be >= 1");
        if (m_sgd < 0 || m_nr < 1 || k_outer < 1) throw precondition_error("iteration counts out of range");
        if (!(eps_scale >= 0.0)) throw precondition_error("eps_scale must be >= 0");
        if (!(sigma2_floor > 0.0)) throw precondition_error("sigma2_floor must be positive");
        prior_init.validate();
        if (gamma && !(*gamma >= 0.0 && *gamma <= 1.0)) throw precondition_error("gamma outside [0,1]");
    }
};

/*
 * Dataset steps resolved against a board: unique visited states with their
 * legal sets, plus per-step indices into them. Steps follow the dataset's
 * canonical record order, so step i is data.records[i].
 */
struct StepTable
{
    std::vector<occupancy_t> states;
    std::vector<std::size_t> legal_begin;
    std::vector<int> legal;

    std::vector<std::uint32_t> person;
    std::vector<std::uint32_t> state;
    std::vector<std::uint32_t> next;
    std::vector<std::uint32_t> chosen;  // position of the action within the state's legal list
    std::vector<int> action;
    std::vector<double> reward;

    std::vector<std::string> person_ids;
    std::vector<std::size_t> person_begin;

    std::size_t num_steps() const { return state.size(); }
    std::size_t num_persons() const { return person_ids.size(); }
    std::size_t num_states() const { return states.size(); }
    std::span<const int> legal_of(std::size_t u) const
    {
        return {legal.data() + legal_begin[u], legal_begin[u + 1] - legal_begin[u]};
    }
    bool terminal(std::size_t u) const { return legal_begin[u + 1] == legal_begin[u]; }
    std::size_t state_index(occupancy_t s) const
    {
        auto it = std::lower_bound(states.begin(), states.end(), s);
        if (it == states.end() || *it != s) throw lookup_error("state not in step table");
        return static_cast<std::size_t>(it - states.begin());
    }
};

inline StepTable build_step_table(const Board& board, const Dataset& data)
{
    StepTable st;
    for (const auto& r : data.records) {
        st.states.push_back(r.state);
        st.states.push_back(r.next_state);
    }
    std::sort(st.states.begin(), st.states.end());
    st.states.erase(std::unique(st.states.begin(), st.states.end()), st.states.end());
    st.legal_begin.push_back(0);
    std::vector<int> buf;
    for (auto s : st.states) {
        if (!board.valid_state(s))
            throw precondition_error("state 0x" + EnumeratedTask::to_hex(s) + " has bits outside board '"
                                     + board.name() + "'");
        board.legal_actions(s, buf);
        if (board.is_solved(s)) buf.clear();
        st.legal.insert(st.legal.end(), buf.begin(), buf.end());
        st.legal_begin.push_back(st.legal.size());
    }
    for (const auto& ep : episodes(data)) {
        if (st.person_ids.empty() || st.person_ids.back() != ep.person_id) {
            st.person_ids.emplace_back(ep.person_id);
            st.person_begin.push_back(st.state.size());
        }
        const auto j = static_cast<std::uint32_t>(st.person_ids.size() - 1);
        for (const auto& r : ep.steps) {
            const auto u = st.state_index(r.state);
            const auto legal = st.legal_of(u);
            const auto it = std::find(legal.begin(), legal.end(), r.action);
            if (it == legal.end())
                throw precondition_error("person " + r.person_id + " episode " + r.episode_id + " step "
                                         + std::to_string(r.t) + ": action " + std::to_string(r.action)
                                         + " is not legal at state 0x" + EnumeratedTask::to_hex(r.state));
            if (board.successor(r.state, r.action) != r.next_state)
                throw precondition_error("person " + r.person_id + " episode " + r.episode_id + " step "
                                         + std::to_string(r.t) + ": next_state does not follow from the action");
            st.person.push_back(j);
            st.state.push_back(static_cast<std::uint32_t>(u));
            st.next.push_back(static_cast<std::uint32_t>(st.state_index(r.next_state)));
            st.chosen.push_back(static_cast<std::uint32_t>(it - legal.begin()));
            st.action.push_back(r.action);
            st.reward.push_back(r.reward);
        }
    }
    st.person_begin.push_back(st.state.size());
    return st;
}

/*
 * Q, normalized advantages and soft values for every state of a StepTable
 * under one theta. Advantages are centered over the legal set and divided by
 *   c = sqrt(mean over steps of centered(s_t, a_t)^2 + eps).
 */
struct AdvantageTable
{
    double scale = 1.0;
    std::vector<double> q;           // per legal entry
    std::vector<double> normalized;  // per legal entry
    std::vector<double> soft_value;  // per state; 0 when terminal

    std::span<const double> normalized_of(const StepTable& st, std::size_t u) const
    {
        return {normalized.data() + st.legal_begin[u], st.legal_begin[u + 1] - st.legal_begin[u]};
    }
};

inline AdvantageTable compute_advantages(const QParams& th, const FeatureMap& fmap, const StepTable& st, double eps,
                                         double tau = 1.0, std::optional<double> fixed_scale = std::nullopt)
{
    AdvantageTable at;
    at.q.resize(st.legal.size());
    at.normalized.resize(st.legal.size());
    at.soft_value.assign(st.num_states(), 0.0);
    std::vector<double> phi(fmap.dim());
    ForwardCache cache;
    for (std::size_t u = 0; u < st.num_states(); ++u) {
        if (st.terminal(u)) continue;
        fmap(st.states[u], phi);
        const auto legal = st.legal_of(u);
        std::span<double> q(at.q.data() + st.legal_begin[u], legal.size());
        q_values(th, phi, legal, q, cache);
        at.soft_value[u] = soft_value_of(q, tau);
        const double m = mean(q);
        for (std::size_t i = 0; i < legal.size(); ++i) at.normalized[st.legal_begin[u] + i] = q[i] - m;
    }
    if (fixed_scale) {
        at.scale = *fixed_scale;
    } else {
        if (st.num_steps() == 0) throw precondition_error("advantage scale over an empty dataset");
        double ss = 0.0;
        for (std::size_t i = 0; i < st.num_steps(); ++i) {
            const double a = at.normalized[st.legal_begin[st.state[i]] + st.chosen[i]];
            ss += a * a;
        }
        at.scale = std::sqrt(ss / static_cast<double>(st.num_steps()) + eps);
    }
    if (!(at.scale > 0.0) || !std::isfinite(at.scale))
        throw numeric_error("advantage scale is not positive and finite (eps = 0 with all-zero advantages?)");
    for (auto& v : at.normalized) v /= at.scale;
    return at;
}

inline double global_scale(const QParams& th, const FeatureMap& fmap, const StepTable& st, double eps)
{
    return compute_advantages(th, fmap, st, eps).scale;
}

inline double global_scale(const QParams& th, const Board& board, const Dataset& data, double eps)
{
    if (data.empty()) throw precondition_error("advantage scale over an empty dataset");
    return global_scale(th, FeatureMap::occupancy(board), build_step_table(board, data), eps);
}

// ---------------------------------------------------------------------------
// Person log-posterior and Newton updates
// ---------------------------------------------------------------------------

// One observed choice: normalized advantages of the legal set and the chosen position.
struct PersonStep
{
    std::span<const double> adv;
    std::size_t chosen = 0;
    double weight = 1.0;
};

inline std::vector<PersonStep> person_steps(const StepTable& st, const AdvantageTable& at, std::size_t j)
{
    std::vector<PersonStep> out;
    out.reserve(st.person_begin[j + 1] - st.person_begin[j]);
    for (auto i = st.person_begin[j]; i < st.person_begin[j + 1]; ++i)
        out.push_back({at.normalized_of(st, st.state[i]), st.chosen[i], 1.0});
    return out;
}

struct LogPost
{
    double value = 0.0;
    double gradient = 0.0;
    double hessian = 0.0;
};

/*
 * l(z) = sum_t w_t log pi(a_t | s_t, e^z) - (z - mu)^2 / (2 sigma2), with
 *   dl/dz   = sum_t w_t beta (A_t - m_t) - (z - mu)/sigma2
 *   d2l/dz2 = sum_t w_t [beta (A_t - m_t) - beta^2 v_t] - 1/sigma2
 * where m_t, v_t are the policy mean and variance of A at s_t.
 */
inline LogPost person_logpost(double z, std::span<const PersonStep> steps, const PopulationPrior& prior)
{
    const double beta = std::exp(z);
    LogPost out;
    for (const auto& s : steps) {
        const std::size_t n = s.adv.size();
        if (n <= 1) continue;
        double mx = s.adv[0];
        for (double a : s.adv) mx = std::max(mx, a);
        double zsum = 0.0, m1 = 0.0, m2 = 0.0;
        for (double a : s.adv) {
            const double e = std::exp(beta * (a - mx));
            zsum += e;
            m1 += e * a;
            m2 += e * a * a;
        }
        m1 /= zsum;
        m2 /= zsum;
        const double var = std::max(0.0, m2 - m1 * m1);
        const double ac = s.adv[s.chosen];
        out.value += s.weight * (beta * (ac - mx) - std::log(zsum));
        out.gradient += s.weight * beta * (ac - m1);
        out.hessian += s.weight * (beta * (ac - m1) - beta * beta * var);
    }
    const double d = z - prior.mu;
    out.value -= d * d / (2.0 * prior.sigma2);
    out.gradient -= d / prior.sigma2;
    out.hessian -= 1.0 / prior.sigma2;
    return out;
}

struct PersonEstimate
{
    std::string person_id;
    double z_hat = 0.0;
    double beta_hat = 1.0;
    double hessian = 0.0;
    double logpost = 0.0;
    bool fallback = false;  // hessian >= 0 at the returned point
    int fallback_steps = 0;
};

/*
 * Damped Newton on l(z): each step is halved up to 20 times until l does not
 * decrease. Where the curvature is not negative the step is a gradient
 * ascent step scaled by the prior variance instead.
 */
inline PersonEstimate newton_update_person(double z0, std::span<const PersonStep> steps, const PopulationPrior& prior,
                                           int m_nr)
{
    if (m_nr < 1) throw precondition_error("M_NR must be at least 1");
    PersonEstimate est;
    double z = z0;
    auto cur = person_logpost(z, steps, prior);
    for (int m = 0; m < m_nr; ++m) {
        double step;
        if (cur.hessian < 0.0) {
            step = -cur.gradient / cur.hessian;
        } else {
            step = cur.gradient * prior.sigma2;
            ++est.fallback_steps;
        }
        if (step == 0.0 || !std::isfinite(step)) break;
        bool accepted = false;
        for (int h = 0; h <= 20; ++h) {
            const double zt = z + step;
            const auto trial = person_logpost(zt, steps, prior);
            if (std::isfinite(trial.value) && trial.value >= cur.value) {
                z = zt;
                cur = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
    }
    est.z_hat = z;
    est.beta_hat = std::exp(z);
    est.hessian = cur.hessian;
    est.logpost = cur.value;
    est.fallback = !(cur.hessian < 0.0);
    return est;
}

struct PopulationUpdate
{
    PopulationPrior prior;
    bool warning = false;  // fewer than two persons; prior left unchanged
    bool floored = false;
};

inline PopulationUpdate update_population(std::span<const double> z, const PopulationPrior& current,
                                          double sigma2_floor)
{
    if (z.size() < 2) return {current, true, false};
    PopulationUpdate out;
    out.prior.mu = mean(z);
    const double v = population_variance(z);
    out.floored = !(v > sigma2_floor);
    out.prior.sigma2 = out.floored ? sigma2_floor : v;
    return out;
}

// Adds the mean Laplace posterior variance -1/H_j to the spread of the modes.
inline PopulationUpdate update_population(std::span<const double> z, std::span<const double> hessian,
                                          const PopulationPrior& current, double sigma2_floor)
{
    if (hessian.size() != z.size()) throw precondition_error("one hessian per person is required");
    auto out = update_population(z, current, sigma2_floor);
    if (out.warning) return out;
    double pv = 0.0;
    for (double h : hessian) pv += h < 0.0 ? -1.0 / h : current.sigma2;
    const double v = population_variance(z) + pv / static_cast<double>(z.size());
    out.floored = !(v > sigma2_floor);
    out.prior.sigma2 = out.floored ? sigma2_floor : v;
    return out;
}

// ---------------------------------------------------------------------------
// Objective terms
// ---------------------------------------------------------------------------

// -sum_j sum_t log pi(a_jt | s_jt, beta_j)
inline double behavioral_nll(const StepTable& st, const AdvantageTable& at, std::span<const double> z)
{
    double total = 0.0;
    for (std::size_t i = 0; i < st.num_steps(); ++i) {
        const auto adv = at.normalized_of(st, st.state[i]);
        if (adv.size() <= 1) continue;
        const double beta = std::exp(z[st.person[i]]);
        double mx = adv[0];
        for (double a : adv) mx = std::max(mx, a);
        double zs = 0.0;
        for (double a : adv) zs += std::exp(beta * (a - mx));
        total -= beta * (adv[st.chosen[i]] - mx) - std::log(zs);
    }
    return total;
}

inline double behavioral_nll(const QParams& th, const FeatureMap& fmap, const StepTable& st,
                             std::span<const double> z, double eps)
{
    return behavioral_nll(st, compute_advantages(th, fmap, st, eps), z);
}

// Mean squared Bellman residual over all steps, from a precomputed table.
inline double bellman_loss(const StepTable& st, const AdvantageTable& at, double gamma)
{
    if (st.num_steps() == 0) throw precondition_error("Bellman loss over an empty dataset");
    double s = 0.0;
    for (std::size_t i = 0; i < st.num_steps(); ++i) {
        const double q = at.q[st.legal_begin[st.state[i]] + st.chosen[i]];
        const double d = q - (st.reward[i] + gamma * at.soft_value[st.next[i]]);
        s += d * d;
    }
    return s / static_cast<double>(st.num_steps());
}

inline double prior_penalty(std::span<const double> z, const PopulationPrior& prior)
{
    double s = 0.0;
    for (double v : z) s += (v - prior.mu) * (v - prior.mu);
    return s / (2.0 * prior.sigma2);
}

// NLL + lambda * mean squared residual + sum_j (z_j - mu)^2 / (2 sigma2)
inline double penalized_objective(double nll, double bellman, std::span<const double> z, const PopulationPrior& prior,
                                  double lambda_bell)
{
    return nll + lambda_bell * bellman + prior_penalty(z, prior);
}

inline double penalized_objective(const QParams& th, const FeatureMap& fmap, const StepTable& st,
                                  std::span<const double> z, const FitConfig& cfg, const PopulationPrior& prior,
                                  double gamma)
{
    const auto at = compute_advantages(th, fmap, st, cfg.eps_scale, cfg.tau);
    return penalized_objective(behavioral_nll(st, at, z), bellman_loss(st, at, gamma), z, prior, cfg.lambda_bell);
}

// ---------------------------------------------------------------------------
// Value-function gradient stage
// ---------------------------------------------------------------------------

struct BatchLoss
{
    double nll = 0.0;      // mean over the batch
    double bellman = 0.0;  // mean squared residual over the batch
};

/*
 * Gradient of  mean_i NLL_i + lambda * mean_i delta_i^2  over the given steps,
 * with the advantage scale c held fixed. grad is overwritten.
 */
class BatchGradient
{
public:
    BatchGradient(const StepTable& st, const FeatureMap& fmap, double gamma, double tau, double lambda)
        : st_(st), fmap_(fmap), gamma_(gamma), tau_(tau), lambda_(lambda), phi_(fmap.dim()), phi_next_(fmap.dim())
    {
    }

    BatchLoss operator()(const QParams& th, std::span<const double> z, double c, std::span<const std::uint32_t> idx,
                         std::span<double> grad)
    {
        std::fill(grad.begin(), grad.end(), 0.0);
        BatchLoss out;
        if (idx.empty()) return out;
        const double inv_b = 1.0 / static_cast<double>(idx.size());
        for (auto i : idx) {
            const auto u = st_.state[i];
            const auto legal = st_.legal_of(u);
            const std::size_t n = legal.size();
            const std::size_t a = st_.chosen[i];
            fmap_(st_.states[u], phi_);
            q_.resize(n);
            q_values(th, phi_, legal, q_, cache_);

            const double beta = std::exp(z[st_.person[i]]);
            adv_.resize(n);
            const double m = mean(q_);
            for (std::size_t k = 0; k < n; ++k) adv_[k] = (q_[k] - m) / c;
            p_.resize(n);
            softmax(adv_, beta, p_);
            double mx = adv_[0];
            for (double x : adv_) mx = std::max(mx, x);
            double zs = 0.0;
            for (double x : adv_) zs += std::exp(beta * (x - mx));
            out.nll += (std::log(zs) - beta * (adv_[a] - mx)) * inv_b;
            // d(-log p_a)/dQ_d = -beta (1[d=a] - p_d) / c; the centering term cancels.
            gq_.resize(n);
            for (std::size_t k = 0; k < n; ++k) gq_[k] = -beta * ((k == a ? 1.0 : 0.0) - p_[k]) / c * inv_b;

            const auto v = st_.next[i];
            double vnext = 0.0;
            if (!st_.terminal(v)) {
                const auto legal_n = st_.legal_of(v);
                fmap_(st_.states[v], phi_next_);
                qn_.resize(legal_n.size());
                q_values(th, phi_next_, legal_n, qn_, cache_next_);
                vnext = soft_value_of(qn_, tau_);
            }
            const double delta = q_[a] - (st_.reward[i] + gamma_ * vnext);
            out.bellman += delta * delta * inv_b;
            const double gd = 2.0 * lambda_ * delta * inv_b;
            gq_[a] += gd;
            q_backward(th, phi_, legal, cache_, gq_, grad);
            if (!st_.terminal(v) && gd != 0.0) {
                const auto legal_n = st_.legal_of(v);
                pn_.resize(qn_.size());
                softmax(qn_, 1.0 / tau_, pn_);
                for (auto& x : pn_) x *= -gamma_ * gd;
                q_backward(th, phi_next_, legal_n, cache_next_, pn_, grad);
            }
        }
        return out;
    }

private:
    const StepTable& st_;
    const FeatureMap& fmap_;
    double gamma_, tau_, lambda_;
    std::vector<double> phi_, phi_next_, q_, qn_, adv_, p_, pn_, gq_;
    ForwardCache cache_, cache_next_;
};

/*
 * Mini-batches without replacement: a seeded shuffle per epoch; when fewer
 * than B indices remain the rest of the epoch is dropped and a new one begins.
 */
class BatchSampler
{
public:
    BatchSampler(std::size_t n, std::uint64_t seed)
        : perm_(n), rng_(seed)
    {
        std::iota(perm_.begin(), perm_.end(), 0u);
        reshuffle();
    }

    std::span<const std::uint32_t> next(std::size_t b)
    {
        if (b > perm_.size()) throw precondition_error("batch size exceeds the number of transitions");
        if (cursor_ + b > perm_.size()) reshuffle();
        std::span<const std::uint32_t> out(perm_.data() + cursor_, b);
        cursor_ += b;
        return out;
    }

    int epoch() const { return epoch_; }

private:
    void reshuffle()
    {
        std::shuffle(perm_.begin(), perm_.end(), rng_);
        cursor_ = 0;
        ++epoch_;
    }

    std::vector<std::uint32_t> perm_;
    rng_t rng_;
    std::size_t cursor_ = 0;
    int epoch_ = 0;
};

// M_SGD plain gradient steps on theta with z and c fixed.
inline void sgd_value_update(QParams& th, std::span<const double> z, double c, const StepTable& st,
                             const FeatureMap& fmap, const FitConfig& cfg, double gamma, BatchSampler& sampler,
                             std::size_t batch_size, int outer_iter = 0)
{
    if (batch_size > st.num_steps()) throw precondition_error("batch size exceeds the number of transitions");
    BatchGradient bg(st, fmap, gamma, cfg.tau, cfg.lambda_bell);
    std::vector<double> grad(th.size());
    for (int m = 0; m < cfg.m_sgd; ++m) {
        const auto idx = sampler.next(batch_size);
        bg(th, z, c, idx, grad);
        for (double g : grad)
            if (!std::isfinite(g))
                throw numeric_error("non-finite gradient in mini-batch " + std::to_string(m) + " of outer iteration "
                                    + std::to_string(outer_iter) + " (epoch " + std::to_string(sampler.epoch())
                                    + ", first step index " + std::to_string(idx.front()) + ")");
        for (std::size_t k = 0; k < grad.size(); ++k) th.params[k] -= cfg.eta * grad[k];
    }
}

// ---------------------------------------------------------------------------
// Block-coordinate MAP fit
// ---------------------------------------------------------------------------

struct TraceRow
{
    int iter = 0;
    double nll = 0.0;
    double bellman = 0.0;
    double objective = 0.0;
    double scale = 0.0;
    double mu = 0.0;
    double sigma2 = 0.0;
    double wall_time_person_stage = 0.0;
    double wall_time_value_stage = 0.0;
};

struct FitResult
{
    QParams theta;
    std::vector<PersonEstimate> persons;
    PopulationPrior prior;
    double scale = 1.0;
    std::vector<TraceRow> traces;
    std::size_t effective_batch = 0;
    int population_warnings = 0;
    double wall_time_person = 0.0;
    double wall_time_value = 0.0;
    double wall_time_total = 0.0;

    std::vector<double> z() const
    {
        std::vector<double> out;
        for (const auto& p : persons) out.push_back(p.z_hat);
        return out;
    }
};

/*
 * Each outer iteration: person Newton updates against the current
 * advantages, population moments, then M_SGD gradient steps on theta with c
 * fixed; c and the traced objective are then recomputed for the new theta.
 * A last person pass aligns the returned estimates with the returned theta.
 */
inline FitResult fit(const Dataset& data, const Board& board, const FeatureMap& fmap, const FitConfig& cfg)
{
    using clock = std::chrono::steady_clock;
    const auto t_start = clock::now();
    cfg.validate();
    if (data.empty()) throw precondition_error("cannot fit an empty dataset");
    const auto st = build_step_table(board, data);
    const double gamma = cfg.gamma.value_or(board.discount());

    FitResult res;
    res.theta = make_qparams(cfg.kind, fmap.dim(), board.num_actions(), cfg.hidden, derive_seed(cfg.seed, "theta"));
    res.prior = cfg.prior_init;
    res.effective_batch = std::min(cfg.batch_size, st.num_steps());
    std::vector<double> z(st.num_persons(), cfg.prior_init.mu);
    BatchSampler sampler(st.num_steps(), derive_seed(cfg.seed, "sgd"));

    std::vector<double> hess(st.num_persons(), 0.0);
    auto at = compute_advantages(res.theta, fmap, st, cfg.eps_scale, cfg.tau);
    double prev_objective = std::numeric_limits<double>::quiet_NaN();
    for (int k = 1; k <= cfg.k_outer; ++k) {
        const auto t0 = clock::now();
        for (std::size_t j = 0; j < st.num_persons(); ++j) {
            const auto steps = person_steps(st, at, j);
            const auto est = newton_update_person(z[j], steps, res.prior, cfg.m_nr);
            z[j] = est.z_hat;
            hess[j] = est.hessian;
        }
        if (cfg.estimate_prior) {
            const auto pu = cfg.laplace_variance ? update_population(z, hess, res.prior, cfg.sigma2_floor)
                                                 : update_population(z, res.prior, cfg.sigma2_floor);
            res.prior = pu.prior;
            res.population_warnings += pu.warning;
        }
        const auto t1 = clock::now();
        sgd_value_update(res.theta, z, at.scale, st, fmap, cfg, gamma, sampler, res.effective_batch, k);
        at = compute_advantages(res.theta, fmap, st, cfg.eps_scale, cfg.tau);
        const auto t2 = clock::now();

        TraceRow row;
        row.iter = k;
        row.nll = behavioral_nll(st, at, z);
        row.bellman = bellman_loss(st, at, gamma);
        row.objective = penalized_objective(row.nll, row.bellman, z, res.prior, cfg.lambda_bell);
        row.scale = at.scale;
        row.mu = res.prior.mu;
        row.sigma2 = res.prior.sigma2;
        row.wall_time_person_stage = std::chrono::duration<double>(t1 - t0).count();
        row.wall_time_value_stage = std::chrono::duration<double>(t2 - t1).count();
        if (!std::isfinite(row.objective))
            throw numeric_error("objective is not finite after outer iteration " + std::to_string(k));
        res.wall_time_person += row.wall_time_person_stage;
        res.wall_time_value += row.wall_time_value_stage;
        res.traces.push_back(row);
        if (cfg.rel_tol_stop > 0.0 && std::isfinite(prev_objective)
            && std::abs(row.objective - prev_objective) <= cfg.rel_tol_stop * std::abs(prev_objective))
            break;
        prev_objective = row.objective;
    }

    const auto t3 = clock::now();
    res.scale = at.scale;
    for (std::size_t j = 0; j < st.num_persons(); ++j) {
        const auto steps = person_steps(st, at, j);
        auto est = newton_update_person(z[j], steps, res.prior, cfg.m_nr);
        est.person_id = st.person_ids[j];
        res.persons.push_back(std::move(est));
    }
    res.wall_time_person += std::chrono::duration<double>(clock::now() - t3).count();
    res.wall_time_total = std::chrono::duration<double>(clock::now() - t_start).count();
    return res;
}

inline FitResult fit(const Dataset& data, const Board& board, const FitConfig& cfg)
{
    return fit(data, board, FeatureMap::occupancy(board), cfg);
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

inline std::string persons_csv(const std::vector<PersonEstimate>& persons)
{
    std::string out = "person_id,z_hat,beta_hat,hessian,fallback_flag\n";
    for (const auto& p : persons)
        out += p.person_id + "," + fmt_double(p.z_hat) + "," + fmt_double(p.beta_hat) + "," + fmt_double(p.hessian)
             + "," + (p.fallback ? "1" : "0") + "\n";
    return out;
}

// Wall times are written as 0 when deterministic output is requested.
inline std::string traces_csv(const std::vector<TraceRow>& traces, bool zero_times = false)
{
    std::string out = "iter,nll,bellman,objective,wall_time_person_stage,wall_time_value_stage\n";
    for (const auto& r : traces)
        out += std::to_string(r.iter) + "," + fmt_double(r.nll) + "," + fmt_double(r.bellman) + ","
             + fmt_double(r.objective) + "," + (zero_times ? "0" : fmt_double(r.wall_time_person_stage)) + ","
             + (zero_times ? "0" : fmt_double(r.wall_time_value_stage)) + "\n";
    return out;
}

inline std::vector<PersonEstimate> load_persons_csv(const std::string& path)
{
    std::vector<std::string> head;
    const auto rows = read_csv(path, &head);
    const auto ci = column(head, "person_id"), cz = column(head, "z_hat"), ch = column(head, "hessian"),
               cf = column(head, "fallback_flag");
    std::vector<PersonEstimate> out;
    for (const auto& r : rows) {
        PersonEstimate p;
        p.person_id = r[ci];
        p.z_hat = std::stod(r[cz]);
        p.beta_hat = std::exp(p.z_hat);
        p.hessian = std::stod(r[ch]);
        p.fallback = r[cf] == "1";
        out.push_back(std::move(p));
    }
    return out;
}

} // namespace rlmm
