#pragma once
#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>
#include <rlmm/csv.hpp>
#include <rlmm/enumerate.hpp>
#include <rlmm/estimator.hpp>
#include <rlmm/stats.hpp>

namespace rlmm {

// beta * (A(s,a) - E_pi[A(s,.)])
inline double step_score(const AdvantageView& adv, int chosen_action, double beta)
{
    if (!(beta > 0.0)) throw precondition_error("step score needs beta > 0");
    const auto a = adv.position(chosen_action);
    const auto p = softmax(adv.normalized, beta);
    double m = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) m += p[i] * adv.normalized[i];
    return beta * (adv.normalized[a] - m);
}

// Gap form: beta * (sum_a pi(a) Delta(s,a) - Delta(s, chosen)).
inline double step_score_gap(const AdvantageView& adv, int chosen_action, double beta)
{
    if (!(beta > 0.0)) throw precondition_error("step score needs beta > 0");
    const auto a = adv.position(chosen_action);
    const auto gaps = action_gaps(adv);
    const auto p = softmax(adv.normalized, beta);
    double mean_gap = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) mean_gap += p[i] * gaps[i];
    return beta * (mean_gap - gaps[a]);
}

// Two legal actions: beta (1 - p_opt) Delta if the better one is chosen, else -beta p_opt Delta.
inline double step_score_binary(const AdvantageView& adv, int chosen_action, double beta)
{
    if (adv.normalized.size() != 2) throw precondition_error("binary step score needs exactly two legal actions");
    const auto best = unique_argmax(adv);
    const double delta = adv.normalized[best] - adv.normalized[1 - best];
    const double p_opt = optimal_action_prob(adv, beta);
    if (adv.position(chosen_action) == best) return beta * (1.0 - p_opt) * delta;
    return -beta * p_opt * delta;
}

inline double influence(double score, double hessian)
{
    if (!(hessian < 0.0)) throw precondition_error("influence needs a negative hessian at the mode");
    return -score / hessian;
}

struct InfluenceRecord
{
    std::string person_id;
    std::string episode_id;
    int t = 0;
    occupancy_t state = 0;
    int action = 0;
    double score = 0.0;
    double influence = 0.0;
    bool chose_optimal = false;
};

struct InfluenceReport
{
    std::vector<InfluenceRecord> records;
    std::vector<std::string> excluded_persons;  // non-negative hessian
};

/*
 * Per-step scores and influences at each person's estimate. The hessians are
 * the ones reported by the estimator for the same advantages.
 */
inline InfluenceReport compute_influence(const Dataset& data, const StepTable& st, const AdvantageTable& at,
                                         const std::vector<PersonEstimate>& persons)
{
    std::map<std::string, const PersonEstimate*> by_id;
    for (const auto& p : persons) by_id[p.person_id] = &p;
    InfluenceReport rep;
    for (std::size_t j = 0; j < st.num_persons(); ++j) {
        auto it = by_id.find(st.person_ids[j]);
        if (it == by_id.end()) throw lookup_error("no estimate for person '" + st.person_ids[j] + "'");
        const auto& est = *it->second;
        if (est.fallback || !(est.hessian < 0.0)) {
            rep.excluded_persons.push_back(est.person_id);
            continue;
        }
        const double beta = std::exp(est.z_hat);
        for (auto i = st.person_begin[j]; i < st.person_begin[j + 1]; ++i) {
            const auto& r = data.records[i];
            const auto adv = at.normalized_of(st, st.state[i]);
            const auto p = softmax(adv, beta);
            double m = 0.0, top = adv[0];
            for (std::size_t k = 0; k < adv.size(); ++k) {
                m += p[k] * adv[k];
                top = std::max(top, adv[k]);
            }
            InfluenceRecord rec;
            rec.person_id = r.person_id;
            rec.episode_id = r.episode_id;
            rec.t = r.t;
            rec.state = r.state;
            rec.action = r.action;
            rec.score = beta * (adv[st.chosen[i]] - m);
            rec.influence = influence(rec.score, est.hessian);
            rec.chose_optimal = adv[st.chosen[i]] == top
                             && std::count(adv.begin(), adv.end(), top) == 1 && adv.size() > 1;
            rep.records.push_back(std::move(rec));
        }
    }
    return rep;
}

struct RankRule
{
    std::optional<std::size_t> top_k;
    std::optional<double> percent;  // keep the top p percent by |influence|

    static RankRule top(std::size_t k) { return {k, std::nullopt}; }
    static RankRule top_percent(double p) { return {std::nullopt, p}; }
};

// Descending |influence|; ties broken by (person, episode, t).
inline std::vector<InfluenceRecord> rank_critical_steps(std::vector<InfluenceRecord> records, RankRule rule)
{
    if (records.empty()) throw precondition_error("no influence records to rank");
    std::sort(records.begin(), records.end(), [](const InfluenceRecord& a, const InfluenceRecord& b) {
        const double x = std::abs(a.influence), y = std::abs(b.influence);
        if (x != y) return x > y;
        return std::tie(a.person_id, a.episode_id, a.t) < std::tie(b.person_id, b.episode_id, b.t);
    });
    std::size_t keep = records.size();
    if (rule.top_k) keep = std::min(keep, *rule.top_k);
    if (rule.percent) {
        if (!(*rule.percent >= 0.0 && *rule.percent <= 100.0)) throw precondition_error("percent outside [0,100]");
        keep = std::min(keep, static_cast<std::size_t>(std::ceil(*rule.percent / 100.0 * records.size() - 1e-9)));
    }
    records.resize(keep);
    return records;
}

/*
 * A band of persons by estimated-beta percentile. Membership uses the
 * interpolated percentile thresholds t_lo, t_hi of the included persons:
 * beta >= t_lo (unless lo = 0) and beta < t_hi (beta <= t_hi when hi = 100).
 */
struct Band
{
    std::string label;
    double lo = 0.0;
    double hi = 100.0;
};

inline std::vector<Band> default_bands()
{
    return {{"q1", 0, 20},        {"q2", 20, 40},   {"q3", 40, 60}, {"q4", 60, 80}, {"q5", 80, 100},
            {"lowest10", 0, 10}, {"rest", 10, 90}, {"highest10", 90, 100}, {"all", 0, 100}};
}

inline bool in_band(double beta, const Band& b, double t_lo, double t_hi)
{
    const bool lo_ok = b.lo <= 0.0 || beta >= t_lo;
    const bool hi_ok = b.hi >= 100.0 ? beta <= t_hi : beta < t_hi;
    return lo_ok && hi_ok;
}

struct StepAggregate
{
    std::string band;
    int step = 0;
    double mean_abs_influence = 0.0;
    std::size_t n = 0;
};

inline std::vector<StepAggregate> aggregate_by_step(const std::vector<InfluenceRecord>& records,
                                                    const std::map<std::string, double>& beta_hat,
                                                    const std::vector<Band>& bands = default_bands())
{
    std::vector<double> betas;
    for (const auto& r : records)
        if (auto it = beta_hat.find(r.person_id); it == beta_hat.end())
            throw lookup_error("no beta estimate for person '" + r.person_id + "'");
    std::map<std::string, double> included;
    for (const auto& r : records) included[r.person_id] = beta_hat.at(r.person_id);
    for (const auto& [id, b] : included) betas.push_back(b);
    int max_t = -1;
    for (const auto& r : records) max_t = std::max(max_t, r.t);

    std::vector<StepAggregate> out;
    for (const auto& band : bands) {
        if (!(band.lo >= 0.0 && band.hi <= 100.0 && band.lo <= band.hi))
            throw precondition_error("band '" + band.label + "' edges outside [0,100]");
        double t_lo = 0.0, t_hi = 0.0;
        if (!betas.empty()) {
            t_lo = percentile(betas, band.lo);
            t_hi = percentile(betas, band.hi);
        }
        std::vector<double> sum(max_t + 1, 0.0);
        std::vector<std::size_t> cnt(max_t + 1, 0);
        for (const auto& r : records) {
            if (!in_band(included[r.person_id], band, t_lo, t_hi)) continue;
            sum[r.t] += std::abs(r.influence);
            ++cnt[r.t];
        }
        for (int t = 0; t <= max_t; ++t)
            out.push_back({band.label, t, cnt[t] ? sum[t] / static_cast<double>(cnt[t]) : 0.0, cnt[t]});
    }
    return out;
}

struct CollapseRow
{
    int step = 0;
    double mean_paths = 0.0;
    std::size_t n = 0;
};

// Mean N(s_t) over all records at each step index.
inline std::vector<CollapseRow> solution_collapse_profile(const EnumeratedTask& task, const Dataset& data,
                                                          std::size_t cap = tabular_state_cap)
{
    const auto counts = solution_path_counts(task, cap);
    std::vector<double> sum;
    std::vector<std::size_t> cnt;
    for (const auto& r : data.records) {
        if (static_cast<std::size_t>(r.t) >= sum.size()) {
            sum.resize(r.t + 1, 0.0);
            cnt.resize(r.t + 1, 0);
        }
        sum[r.t] += static_cast<double>(counts[task.index_of(r.state)]);
        ++cnt[r.t];
    }
    std::vector<CollapseRow> out;
    for (std::size_t t = 0; t < sum.size(); ++t)
        out.push_back({static_cast<int>(t), cnt[t] ? sum[t] / static_cast<double>(cnt[t]) : 0.0, cnt[t]});
    return out;
}

// ---------------------------------------------------------------------------
// Perturb-and-refit validation
// ---------------------------------------------------------------------------

// Newton to numerical convergence from z0 (for oracle comparisons).
inline PersonEstimate polish_mode(double z0, std::span<const PersonStep> steps, const PopulationPrior& prior,
                                  int max_iter = 200)
{
    auto est = newton_update_person(z0, steps, prior, 1);
    for (int i = 1; i < max_iter; ++i) {
        const double before = est.z_hat;
        est = newton_update_person(est.z_hat, steps, prior, 1);
        if (std::abs(est.z_hat - before) < 1e-14) break;
    }
    return est;
}

/*
 * (z(eps) - z) / eps, where z(eps) maximizes l_j(z) + eps * l_jt(z).
 */
inline double refit_influence(std::vector<PersonStep> steps, std::size_t t, const PopulationPrior& prior, double z_mode,
                              double eps)
{
    steps[t].weight += eps;
    const auto pert = polish_mode(z_mode, steps, prior);
    return (pert.z_hat - z_mode) / eps;
}

struct RefitCheck
{
    std::string person_id;
    int step = 0;
    double influence = 0.0;
    double refit = 0.0;
    double rel_error = 0.0;
};

struct RefitSummary
{
    std::vector<RefitCheck> checks;
    double max_rel_error = 0.0;
    std::size_t persons_checked = 0;
};

/*
 * For every non-fallback person: polish the mode, compute analytic
 * influences there, and refit with each above-median-|I| step upweighted.
 */
inline RefitSummary validate_influence(const StepTable& st, const AdvantageTable& at,
                                       const std::vector<PersonEstimate>& persons, const PopulationPrior& prior,
                                       double eps = 1e-3, std::size_t max_persons = 0)
{
    RefitSummary out;
    for (std::size_t j = 0; j < st.num_persons(); ++j) {
        if (max_persons && out.persons_checked >= max_persons) break;
        auto steps = person_steps(st, at, j);
        const auto mode = polish_mode(persons.at(j).z_hat, steps, prior);
        if (mode.fallback) continue;
        const double beta = std::exp(mode.z_hat);
        std::vector<double> infl(steps.size());
        for (std::size_t t = 0; t < steps.size(); ++t) {
            const auto p = softmax(steps[t].adv, beta);
            double m = 0.0;
            for (std::size_t k = 0; k < p.size(); ++k) m += p[k] * steps[t].adv[k];
            infl[t] = influence(beta * (steps[t].adv[steps[t].chosen] - m), mode.hessian);
        }
        std::vector<double> mag(infl.size());
        for (std::size_t t = 0; t < infl.size(); ++t) mag[t] = std::abs(infl[t]);
        if (mag.empty()) continue;
        const double med = percentile(mag, 50.0);
        ++out.persons_checked;
        for (std::size_t t = 0; t < steps.size(); ++t) {
            if (!(mag[t] > med)) continue;
            const double r = refit_influence(steps, t, prior, mode.z_hat, eps);
            const double rel = std::abs(r - infl[t]) / std::abs(infl[t]);
            out.checks.push_back({st.person_ids[j], static_cast<int>(t), infl[t], r, rel});
            out.max_rel_error = std::max(out.max_rel_error, rel);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string influence_csv(const std::vector<InfluenceRecord>& records)
{
    std::string out = "person_id,episode_id,t,state_bitmask_hex,action_id,score,influence,chose_optimal\n";
    for (const auto& r : records)
        out += r.person_id + "," + r.episode_id + "," + std::to_string(r.t) + ",0x" + EnumeratedTask::to_hex(r.state)
             + "," + std::to_string(r.action) + "," + fmt_double(r.score) + "," + fmt_double(r.influence) + ","
             + (r.chose_optimal ? "1" : "0") + "\n";
    return out;
}

inline std::string aggregates_csv(const std::vector<StepAggregate>& rows)
{
    std::string out = "band,step,mean_abs_influence,n\n";
    for (const auto& r : rows)
        out += r.band + "," + std::to_string(r.step) + "," + fmt_double(r.mean_abs_influence) + ","
             + std::to_string(r.n) + "\n";
    return out;
}

inline std::string collapse_csv(const std::vector<CollapseRow>& rows)
{
    std::string out = "step,mean_solution_paths,n\n";
    for (const auto& r : rows)
        out += std::to_string(r.step) + "," + fmt_double(r.mean_paths) + "," + std::to_string(r.n) + "\n";
    return out;
}

} // namespace rlmm
