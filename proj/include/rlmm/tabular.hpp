#pragma once
#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>
#include <Eigen/Dense>
#include <rlmm/dataset.hpp>
#include <rlmm/enumerate.hpp>
#include <rlmm/math.hpp>
#include <rlmm/prior.hpp>
#include <rlmm/rng.hpp>

namespace rlmm {

/*
 * Person-specific action values Q(s,a | beta), stored sparsely: q[k] is the
 * value of the k-th legal pair of the TransitionTable it was solved on.
 */
struct TabularQ
{
    double beta = 0.0;
    std::vector<double> q;
    int iterations_used = 0;
    double residual = 0.0;
};

/*
 * Soft-policy evaluation: Jacobi sweeps of
 *   Q(s,a) <- R(s,a,s') + gamma * sum_a' pi_beta(a'|s') Q(s',a'),
 * with zero continuation at terminal s'. Stops when the sup-norm change
 * falls to tol.
 */
inline TabularQ solve_q_for_beta(const TransitionTable& t, double beta, double tol = 1e-8, int max_iter = 10'000)
{
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw precondition_error("beta must be finite and >= 0");
    const std::size_t ns = t.num_states();
    TabularQ out;
    out.beta = beta;
    out.q.assign(t.action.size(), 0.0);
    std::vector<double> v(ns, 0.0), probs;
    double residual = std::numeric_limits<double>::infinity();
    int it = 0;
    while (it < max_iter) {
        for (std::size_t s = 0; s < ns; ++s) {
            if (t.terminal[s]) {
                v[s] = 0.0;
                continue;
            }
            const auto b = t.begin(s), n = t.degree(s);
            probs.resize(n);
            softmax(std::span<const double>(out.q.data() + b, n), beta, probs);
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += probs[i] * out.q[b + i];
            v[s] = acc;
        }
        residual = 0.0;
        for (std::size_t k = 0; k < out.q.size(); ++k) {
            const double nq = t.reward[k] + t.discount * v[t.next[k]];
            residual = std::max(residual, std::abs(nq - out.q[k]));
            out.q[k] = nq;
        }
        ++it;
        if (residual <= tol) break;
    }
    out.iterations_used = it;
    out.residual = residual;
    if (residual > tol)
        throw convergence_error("soft policy evaluation did not converge for beta=" + std::to_string(beta)
                                    + " within " + std::to_string(max_iter) + " sweeps",
                                residual);
    return out;
}

// Softmax of beta * Q(s, .) over the legal actions of s, in ascending action order.
inline std::vector<double> mdpmm_action_probs(const TransitionTable& t, const TabularQ& q, std::size_t s)
{
    if (s >= t.num_states()) throw lookup_error("state index out of range");
    if (t.terminal[s]) throw precondition_error("action probabilities requested at a terminal state");
    return softmax(std::span<const double>(q.q.data() + t.begin(s), t.degree(s)), q.beta);
}

// ---------------------------------------------------------------------------
// Population prior and quadrature
// ---------------------------------------------------------------------------

/*
 * Gauss-Hermite rule for a standard normal: E[f(Z)] ~ sum_k w_k f(z_k).
 * Built with Golub-Welsch on the probabilists' Hermite Jacobi matrix.
 * Nodes for log beta are mu + sqrt(sigma2) * z_k.
 */
struct QuadratureGrid
{
    std::vector<double> nodes;
    std::vector<double> weights;

    std::size_t size() const { return nodes.size(); }

    static QuadratureGrid gauss_hermite(int n)
    {
        if (n < 1) throw precondition_error("quadrature needs at least one node");
        Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
        for (int k = 1; k < n; ++k) j(k, k - 1) = j(k - 1, k) = std::sqrt(static_cast<double>(k));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j);
        QuadratureGrid g;
        g.nodes.resize(n);
        g.weights.resize(n);
        double total = 0.0;
        for (int k = 0; k < n; ++k) {
            g.nodes[k] = es.eigenvalues()(k);
            g.weights[k] = es.eigenvectors()(0, k) * es.eigenvectors()(0, k);
            total += g.weights[k];
        }
        for (auto& w : g.weights) w /= total;
        // Symmetrize against round-off so the rule is exact on odd moments.
        for (int k = 0; k < n / 2; ++k) {
            const double x = 0.5 * (g.nodes[n - 1 - k] - g.nodes[k]);
            const double w = 0.5 * (g.weights[k] + g.weights[n - 1 - k]);
            g.nodes[k] = -x;
            g.nodes[n - 1 - k] = x;
            g.weights[k] = g.weights[n - 1 - k] = w;
        }
        if (n % 2) g.nodes[n / 2] = 0.0;
        return g;
    }

    std::vector<double> log_beta_nodes(const PopulationPrior& prior) const
    {
        std::vector<double> out(nodes.size());
        const double sd = std::sqrt(prior.sigma2);
        for (std::size_t k = 0; k < nodes.size(); ++k) out[k] = prior.mu + sd * nodes[k];
        return out;
    }
};

inline std::vector<double> sample_population(const PopulationPrior& prior, std::size_t J, std::uint64_t seed)
{
    prior.validate();
    if (J < 1) throw precondition_error("population size must be at least 1");
    rng_t rng(derive_seed(seed, "population"));
    std::normal_distribution<double> normal(prior.mu, std::sqrt(prior.sigma2));
    std::vector<double> betas(J);
    for (auto& b : betas) b = std::exp(normal(rng));
    return betas;
}

// ---------------------------------------------------------------------------
// Trajectory generation
// ---------------------------------------------------------------------------

inline std::string person_label(std::size_t j)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "p%05zu", j);
    return buf;
}

inline std::string episode_label(std::size_t g)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "e%04zu", g);
    return buf;
}

namespace detail {

inline std::size_t draw_index(std::span<const double> probs, rng_t& rng)
{
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return i;
    }
    return probs.size() - 1;
}

/*
 * Runs games for every person from a start drawn uniformly among the
 * board's starts, choosing actions from policy(j, s, legal, probs_out).
 */
template <class Policy>
Dataset simulate_with_policy(const Board& board, std::span<const double> betas, std::size_t games,
                             std::uint64_t seed, Policy&& policy)
{
    Dataset d;
    d.board = board.name();
    std::vector<int> legal;
    std::vector<double> probs;
    const auto starts = board.initial_states();
    for (std::size_t j = 0; j < betas.size(); ++j) {
        const auto pid = person_label(j);
        d.true_beta[pid] = betas[j];
        rng_t rng(derive_seed(seed, "simulate", j));
        for (std::size_t g = 0; g < games; ++g) {
            const auto eid = episode_label(g);
            occupancy_t s = starts[0];
            if (starts.size() > 1) s = starts[std::uniform_int_distribution<std::size_t>(0, starts.size() - 1)(rng)];
            for (int t = 0; !board.is_terminal(s); ++t) {
                board.legal_actions(s, legal);
                probs.resize(legal.size());
                policy(j, s, std::span<const int>(legal), std::span<double>(probs));
                const int a = legal[draw_index(probs, rng)];
                const auto next = board.successor(s, a);
                d.records.push_back({pid, eid, t, s, a, board.reward(next), next, board.is_terminal(next)});
                s = next;
            }
        }
    }
    return d;
}

} // namespace detail

/*
 * Boltzmann play under each person's own tabular Q(s,a | beta_j). Q tables
 * are solved once per distinct beta.
 */
inline Dataset simulate_trajectories(const EnumeratedTask& task, std::span<const double> betas, std::size_t games,
                                     std::uint64_t seed, std::size_t cap = tabular_state_cap)
{
    if (task.size() > cap)
        throw capacity_error("task '" + task.board().name() + "' is too large for per-person tabular solves ("
                             + std::to_string(task.size()) + " states); use the score-table generator");
    const auto table = build_transitions(task, cap);
    std::map<double, TabularQ> cache;
    std::vector<const TabularQ*> qs(betas.size());
    for (std::size_t j = 0; j < betas.size(); ++j) {
        auto it = cache.find(betas[j]);
        if (it == cache.end()) it = cache.emplace(betas[j], solve_q_for_beta(table, betas[j])).first;
        qs[j] = &it->second;
    }
    return detail::simulate_with_policy(
        task.board(), betas, games, seed,
        [&](std::size_t j, occupancy_t s, std::span<const int>, std::span<double> out) {
            const auto idx = task.index_of(s);
            softmax(std::span<const double>(qs[j]->q.data() + table.begin(idx), table.degree(idx)), betas[j], out);
        });
}

/*
 * Beta-independent move scores for boards too large for per-person tables:
 * 1 if the move keeps the position solvable, 0 if it does not, 0.5 when a
 * bounded search cannot decide. Solvability comes from exact path counts when
 * the board enumerates within the tabular cap, otherwise from a memoized
 * depth-first probe with a node budget.
 */
class ScoreTable
{
public:
    explicit ScoreTable(Board board, std::size_t probe_budget = 2'000'000, bool use_counts = true)
        : board_(std::move(board)), budget_(probe_budget)
    {
        if (!use_counts) return;
        try {
            auto task = enumerate_reachable(board_, tabular_state_cap);
            const auto counts = solution_path_counts(task);
            for (std::size_t i = 0; i < task.size(); ++i) memo_[task.state(i)] = counts[i] > 0 ? 1 : 0;
            exact_ = true;
        } catch (const capacity_error&) {
            memo_.clear();
        }
    }

    const Board& board() const { return board_; }
    bool exact() const { return exact_; }

    double score(occupancy_t s, int a)
    {
        const auto next = board_.successor(s, a);
        const int v = solvable(next);
        return v < 0 ? 0.5 : v;
    }

    // 1 solvable, 0 not, -1 undecided within the budget.
    int solvable(occupancy_t s)
    {
        if (auto it = memo_.find(s); it != memo_.end()) return it->second;
        std::size_t nodes = 0;
        const int v = probe(s, nodes);
        return v;
    }

private:
    int probe(occupancy_t s, std::size_t& nodes)
    {
        if (auto it = memo_.find(s); it != memo_.end()) return it->second;
        if (board_.is_solved(s)) return memo_[s] = 1;
        if (++nodes > budget_) return -1;
        bool undecided = false;
        for (int a = 0; a < board_.num_actions(); ++a) {
            if (!board_.is_legal(s, a)) continue;
            const int v = probe(board_.successor(s, a), nodes);
            if (v == 1) return memo_[s] = 1;
            if (v < 0) undecided = true;
        }
        if (undecided) return -1;
        return memo_[s] = 0;
    }

    Board board_;
    std::size_t budget_;
    bool exact_ = false;
    std::unordered_map<occupancy_t, int> memo_;
};

/*
 * Boltzmann play over softmax(beta_j * S(s, a) / kappa), S centered over the
 * legal moves. With normalize set, kappa is the root mean square of the
 * chosen moves' centered scores in the generated data, found by fixed-point
 * iteration; otherwise kappa = 1 and the raw scores are used.
 */
inline Dataset simulate_scored(ScoreTable& scores, std::span<const double> betas, std::size_t games,
                               std::uint64_t seed, bool normalize = true, double* kappa_out = nullptr,
                               int rounds = 8)
{
    const Board& board = scores.board();
    std::vector<double> sc;
    auto centered = [&](occupancy_t s, std::span<const int> legal) {
        sc.resize(legal.size());
        double m = 0.0;
        for (std::size_t i = 0; i < legal.size(); ++i) m += sc[i] = scores.score(s, legal[i]);
        m /= static_cast<double>(legal.size());
        for (auto& v : sc) v -= m;
    };
    double kappa = 1.0;
    Dataset data;
    for (int round = 0; round < (normalize ? rounds : 1); ++round) {
        data = detail::simulate_with_policy(
            board, betas, games, seed, [&](std::size_t j, occupancy_t s, std::span<const int> legal, std::span<double> out) {
                centered(s, legal);
                softmax(sc, betas[j] / kappa, out);
            });
        if (!normalize) break;
        double ss = 0.0;
        std::size_t n = 0;
        std::vector<int> legal;
        for (const auto& r : data.records) {
            board.legal_actions(r.state, legal);
            centered(r.state, legal);
            const auto it = std::find(legal.begin(), legal.end(), r.action);
            const double d = sc[static_cast<std::size_t>(it - legal.begin())];
            ss += d * d;
            ++n;
        }
        const double next = n ? std::sqrt(ss / static_cast<double>(n)) : 1.0;
        if (!(next > 0.0)) break;
        const bool done = std::abs(next - kappa) <= 1e-6 * kappa;
        kappa = next;
        if (done) break;
    }
    if (normalize)
        data = detail::simulate_with_policy(
            board, betas, games, seed, [&](std::size_t j, occupancy_t s, std::span<const int> legal, std::span<double> out) {
                centered(s, legal);
                softmax(sc, betas[j] / kappa, out);
            });
    if (kappa_out) *kappa_out = kappa;
    return data;
}

// ---------------------------------------------------------------------------
// MDP-MM marginal likelihood and fit
// ---------------------------------------------------------------------------

struct MdpmmConfig
{
    int nodes = 21;
    double q_tol = 1e-8;
    int q_max_iter = 10'000;
    double search_tol = 1e-4;
    int grid_points = 17;
    double local_window = 0.25;
    int max_rounds = 50;
    double mu_lo = -4.0, mu_hi = 4.0;
    double log_sigma2_lo = std::log(1e-3), log_sigma2_hi = std::log(9.0);
    double sigma2_floor = 1e-3;
    PopulationPrior init;
    std::size_t cache_limit = 512;
};

struct MdpmmPerson
{
    std::string person_id;
    double beta_hat = 0.0;
    double log_beta_hat = 0.0;
};

struct MdpmmTraceRow
{
    int round = 0;
    double mu = 0.0;
    double sigma2 = 0.0;
    double loglik = 0.0;
};

struct MdpmmResult
{
    PopulationPrior prior;
    std::vector<MdpmmPerson> persons;
    double loglik = 0.0;
    bool sigma2_floored = false;
    int evaluations = 0;
    int q_solves = 0;
    double wall_time = 0.0;
    std::vector<MdpmmTraceRow> trace;
};

/*
 * Marginal likelihood over (mu, sigma2) with the reward structure fixed:
 *   log L = sum_j log sum_k w_k prod_t pi(a_jt | s_jt, beta = exp(lambda_k)).
 * Per-node Q tables are solved per evaluation and cached by beta.
 */
class MdpmmModel
{
public:
    MdpmmModel(const EnumeratedTask& task, const Dataset& data, MdpmmConfig cfg = {})
        : cfg_(cfg), table_(build_transitions(task)), grid_(QuadratureGrid::gauss_hermite(cfg.nodes))
    {
        const auto& board = task.board();
        for (const auto& ep : episodes(data)) {
            if (persons_.empty() || persons_.back() != ep.person_id) {
                persons_.emplace_back(ep.person_id);
                person_begin_.push_back(entries_.size());
            }
            for (const auto& r : ep.steps) {
                const auto idx = task.find(r.state);
                if (!idx) throw precondition_error("dataset state 0x" + EnumeratedTask::to_hex(r.state)
                                                   + " is not reachable on board '" + board.name() + "'");
                std::size_t k = table_.begin(*idx);
                while (k < table_.end(*idx) && table_.action[k] != r.action) ++k;
                if (k == table_.end(*idx))
                    throw precondition_error("action " + std::to_string(r.action) + " is not legal at state 0x"
                                             + EnumeratedTask::to_hex(r.state));
                entries_.push_back(static_cast<std::uint32_t>(k));
                entry_state_.push_back(static_cast<std::uint32_t>(*idx));
            }
        }
        person_begin_.push_back(entries_.size());
    }

    const QuadratureGrid& grid() const { return grid_; }
    const TransitionTable& table() const { return table_; }
    std::size_t num_persons() const { return persons_.size(); }
    int q_solves() const { return q_solves_; }

    // Per-legal-pair log pi for a given beta.
    const std::vector<double>& log_policy(double beta)
    {
        if (auto it = cache_.find(beta); it != cache_.end()) return it->second;
        if (cache_.size() >= cfg_.cache_limit) cache_.clear();
        const auto q = solve_q_for_beta(table_, beta, cfg_.q_tol, cfg_.q_max_iter);
        ++q_solves_;
        std::vector<double> lp(q.q.size(), 0.0);
        std::vector<double> scaled;
        for (std::size_t s = 0; s < table_.num_states(); ++s) {
            if (table_.terminal[s]) continue;
            const auto b = table_.begin(s), n = table_.degree(s);
            scaled.resize(n);
            for (std::size_t i = 0; i < n; ++i) scaled[i] = beta * q.q[b + i];
            const double lse = logsumexp(scaled);
            for (std::size_t i = 0; i < n; ++i) lp[b + i] = scaled[i] - lse;
        }
        return cache_.emplace(beta, std::move(lp)).first->second;
    }

    // L[j][k] = sum_t log pi(a_jt | s_jt, beta = exp(lambda_k)).
    std::vector<std::vector<double>> person_node_loglik(std::span<const double> log_betas)
    {
        std::vector<std::vector<double>> out(persons_.size(), std::vector<double>(log_betas.size(), 0.0));
        for (std::size_t k = 0; k < log_betas.size(); ++k) {
            const auto& lp = log_policy(std::exp(log_betas[k]));
            for (std::size_t j = 0; j < persons_.size(); ++j) {
                double acc = 0.0;
                for (auto e = person_begin_[j]; e < person_begin_[j + 1]; ++e) acc += lp[entries_[e]];
                out[j][k] = acc;
            }
        }
        return out;
    }

    double fixed_beta_loglik(double beta)
    {
        const double lb = std::log(beta);
        double total = 0.0;
        for (const auto& row : person_node_loglik(std::span<const double>(&lb, 1))) total += row[0];
        return total;
    }

    double marginal_loglik(const PopulationPrior& prior)
    {
        prior.validate();
        const auto nodes = grid_.log_beta_nodes(prior);
        const auto l = person_node_loglik(nodes);
        double total = 0.0;
        std::vector<double> terms(nodes.size());
        for (const auto& row : l) {
            for (std::size_t k = 0; k < nodes.size(); ++k) terms[k] = std::log(grid_.weights[k]) + row[k];
            total += logsumexp(terms);
        }
        return total;
    }

    // Posterior mean of beta per person under the prior, by quadrature.
    std::vector<MdpmmPerson> eap(const PopulationPrior& prior)
    {
        const auto nodes = grid_.log_beta_nodes(prior);
        const auto l = person_node_loglik(nodes);
        std::vector<MdpmmPerson> out;
        std::vector<double> terms(nodes.size());
        for (std::size_t j = 0; j < persons_.size(); ++j) {
            for (std::size_t k = 0; k < nodes.size(); ++k) terms[k] = std::log(grid_.weights[k]) + l[j][k];
            const double lse = logsumexp(terms);
            double b = 0.0;
            for (std::size_t k = 0; k < nodes.size(); ++k) b += std::exp(terms[k] - lse) * std::exp(nodes[k]);
            out.push_back({persons_[j], b, std::log(b)});
        }
        return out;
    }

    /*
     * Coordinate search: golden section on mu, then on log sigma2, repeated
     * until neither coordinate moves by more than search_tol.
     */
    MdpmmResult fit()
    {
        const auto t0 = std::chrono::steady_clock::now();
        MdpmmResult res;
        PopulationPrior p = cfg_.init;
        p.validate();
        double ll = marginal_loglik(p);
        res.evaluations = 1;
        res.trace.push_back({0, p.mu, p.sigma2, ll});
        bool converged = false;
        for (int round = 1; round <= cfg_.max_rounds; ++round) {
            const auto prev = p;
            // Full-range scan first; afterwards a local window that widens when the optimum sits on its edge.
            auto search = [&](auto&& f, double cur, double lo, double hi) {
                if (round == 1) return bracketed_max(f, lo, hi, cfg_.search_tol, cfg_.grid_points, &res.evaluations);
                double w = cfg_.local_window;
                for (;;) {
                    const double a = std::max(lo, cur - w), b = std::min(hi, cur + w);
                    const double x = golden_section_max(f, a, b, cfg_.search_tol, &res.evaluations);
                    const bool at_edge = (x - a < 2 * cfg_.search_tol && a > lo) || (b - x < 2 * cfg_.search_tol && b < hi);
                    if (!at_edge) return x;
                    cur = x;
                    w *= 2.0;
                }
            };
            const double m = search([&](double x) { return marginal_loglik({x, p.sigma2}); }, p.mu, cfg_.mu_lo,
                                    cfg_.mu_hi);
            if (const double v = marginal_loglik({m, p.sigma2}); v >= ll) {
                p.mu = m;
                ll = v;
            }
            const double ls = search([&](double x) { return marginal_loglik({p.mu, std::exp(x)}); },
                                     std::log(p.sigma2), cfg_.log_sigma2_lo, cfg_.log_sigma2_hi);
            if (const double v = marginal_loglik({p.mu, std::exp(ls)}); v >= ll) {
                p.sigma2 = std::exp(ls);
                ll = v;
            }
            res.evaluations += 2;
            // Pattern move along the round's displacement; coordinate steps alone creep along a correlated ridge.
            {
                const double dm = p.mu - prev.mu;
                const double ds = std::log(p.sigma2) - std::log(prev.sigma2);
                double step = 1.0;
                for (int k = 0; k < 12 && (dm != 0.0 || ds != 0.0); ++k, step *= 2.0) {
                    const double m = std::clamp(p.mu + step * dm, cfg_.mu_lo, cfg_.mu_hi);
                    const double ls = std::clamp(std::log(p.sigma2) + step * ds, cfg_.log_sigma2_lo, cfg_.log_sigma2_hi);
                    const double v = marginal_loglik({m, std::exp(ls)});
                    ++res.evaluations;
                    if (!(v > ll)) break;
                    p = {m, std::exp(ls)};
                    ll = v;
                }
            }
            res.trace.push_back({round, p.mu, p.sigma2, ll});
            if (std::abs(p.mu - prev.mu) <= cfg_.search_tol
                && std::abs(std::log(p.sigma2) - std::log(prev.sigma2)) <= cfg_.search_tol) {
                converged = true;
                break;
            }
        }
        if (!converged) {
            std::string msg = "MDP-MM coordinate search did not converge; trace:";
            for (const auto& r : res.trace)
                msg += " [" + std::to_string(r.round) + ": mu=" + std::to_string(r.mu)
                     + " sigma2=" + std::to_string(r.sigma2) + " ll=" + std::to_string(r.loglik) + "]";
            throw convergence_error(msg, std::abs(res.trace.back().loglik - res.trace[res.trace.size() - 2].loglik));
        }
        if (p.sigma2 < cfg_.sigma2_floor * (1.0 + 1e-2)) {
            p.sigma2 = cfg_.sigma2_floor;
            res.sigma2_floored = true;
            ll = marginal_loglik(p);
        }
        res.prior = p;
        res.loglik = ll;
        res.persons = eap(p);
        res.q_solves = q_solves_;
        res.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return res;
    }

private:
    MdpmmConfig cfg_;
    TransitionTable table_;
    QuadratureGrid grid_;
    std::vector<std::string> persons_;
    std::vector<std::size_t> person_begin_;
    std::vector<std::uint32_t> entries_;
    std::vector<std::uint32_t> entry_state_;
    std::map<double, std::vector<double>> cache_;
    int q_solves_ = 0;
};

inline MdpmmResult fit_mdpmm(const Dataset& data, const EnumeratedTask& task, MdpmmConfig cfg = {})
{
    const auto t0 = std::chrono::steady_clock::now();
    MdpmmModel model(task, data, cfg);
    auto res = model.fit();
    res.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

} // namespace rlmm
