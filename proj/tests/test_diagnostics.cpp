#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <rlmm/boards.hpp>
#include <rlmm/diagnostics.hpp>
#include <rlmm/tabular.hpp>

#include "oracle.hpp"

using namespace rlmm;

namespace {

AdvantageView random_view(std::mt19937_64& rng, std::size_t n)
{
    std::normal_distribution<double> g(0.0, 1.5);
    std::vector<int> legal(n);
    std::vector<double> a(n);
    for (std::size_t i = 0; i < n; ++i) {
        legal[i] = static_cast<int>(3 * i + 1);
        a[i] = g(rng);
    }
    return advantage_view(legal, center_advantages(a));
}

struct Fitted
{
    Board board;
    Dataset data;
    FeatureMap fmap;
    StepTable st;
    FitResult res;
    AdvantageTable at;
};

Fitted fitted(const char* name, std::size_t J, std::size_t games, std::uint64_t seed, double sd = 0.5, int k_outer = 4)
{
    Board b(builtin_board(name));
    const auto task = enumerate_reachable(b);
    auto data = simulate_trajectories(task, sample_population({0.0, sd * sd}, J, seed), games, seed);
    auto fmap = FeatureMap::occupancy(b);
    auto st = build_step_table(b, data);
    FitConfig cfg;
    cfg.k_outer = k_outer;
    cfg.batch_size = 64;
    auto res = fit(data, b, fmap, cfg);
    auto at = compute_advantages(res.theta, fmap, st, cfg.eps_scale, cfg.tau);
    return {std::move(b), std::move(data), std::move(fmap), std::move(st), std::move(res), std::move(at)};
}

InfluenceRecord rec(const char* p, const char* e, int t, double infl)
{
    InfluenceRecord r;
    r.person_id = p;
    r.episode_id = e;
    r.t = t;
    r.influence = infl;
    r.score = infl;
    return r;
}

} // namespace

TEST(StepScore, SingleActionIsZero)
{
    const std::vector<int> legal{5};
    const std::vector<double> a{0.0};
    EXPECT_EQ(step_score(advantage_view(legal, a), 5, 2.0), 0.0);
    EXPECT_EQ(step_score_gap(advantage_view(legal, a), 5, 2.0), 0.0);
}

TEST(StepScore, BinaryArithmetic)
{
    const std::vector<int> legal{0, 1};
    const std::vector<double> a{0.5, -0.5};
    const auto v = advantage_view(legal, a);
    const double expect = 1.0 - 1.0 / (1.0 + std::exp(-1.0));
    EXPECT_NEAR(step_score(v, 0, 1.0), expect, 1e-15);
    EXPECT_NEAR(step_score(v, 0, 1.0), 0.2689414213699951, 1e-15);
    EXPECT_NEAR(step_score_binary(v, 0, 1.0), expect, 1e-15);
    EXPECT_NEAR(step_score_binary(v, 1, 1.0), -(1.0 - expect), 1e-15);
    EXPECT_THROW(step_score(v, 2, 1.0), precondition_error);
    EXPECT_THROW(step_score(v, 0, 0.0), precondition_error);
}

TEST(StepScore, FormsAgreeOnRandomStates)
{
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> n(1, 8);
    std::uniform_real_distribution<double> lb(-2.0, 2.5);
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
        const auto v = random_view(rng, n(rng));
        const double beta = std::exp(lb(rng));
        const int chosen = v.legal[rng() % v.legal.size()];
        const double a = step_score(v, chosen, beta);
        worst = std::max(worst, std::abs(a - step_score_gap(v, chosen, beta)));
        if (v.legal.size() == 2) worst = std::max(worst, std::abs(a - step_score_binary(v, chosen, beta)));
    }
    EXPECT_LT(worst, 1e-12);
}

TEST(StepScore, SignFollowsOptimality)
{
    std::mt19937_64 rng(2);
    for (int k = 0; k < 200; ++k) {
        const auto v = random_view(rng, 2);
        const auto best = unique_argmax(v);
        EXPECT_GT(step_score(v, v.legal[best], 0.7), 0.0);
        EXPECT_LT(step_score(v, v.legal[1 - best], 0.7), 0.0);
    }
}

TEST(StepScore, MatchesLogLikelihoodDerivative)
{
    std::mt19937_64 rng(3);
    for (int k = 0; k < 50; ++k) {
        const auto v = random_view(rng, 4);
        const int chosen = v.legal[k % 4];
        const double z = 0.3;
        auto ll = [&](double zz) {
            const auto p = softmax(v.normalized, std::exp(zz));
            return std::log(p[v.position(chosen)]);
        };
        const double h = 1e-5;
        EXPECT_NEAR(step_score(v, chosen, std::exp(z)), (ll(z + h) - ll(z - h)) / (2 * h), 1e-8);
    }
}

TEST(Influence, Arithmetic)
{
    EXPECT_EQ(influence(0.0, -3.0), 0.0);
    EXPECT_DOUBLE_EQ(influence(0.5, -2.0), 0.25);
    EXPECT_DOUBLE_EQ(influence(2.0 * 0.5, -2.0), 2.0 * influence(0.5, -2.0));
    EXPECT_THROW(influence(0.5, 0.0), precondition_error);
    EXPECT_THROW(influence(0.5, 1.0), precondition_error);
}

TEST(Influence, RecordsMatchScoreForms)
{
    const auto f = fitted("tiny-cross", 6, 6, 4);
    const auto rep = compute_influence(f.data, f.st, f.at, f.res.persons);
    ASSERT_FALSE(rep.records.empty());
    std::map<std::string, const PersonEstimate*> by;
    for (const auto& p : f.res.persons) by[p.person_id] = &p;
    std::size_t i = 0;
    for (const auto& r : rep.records) {
        while (f.data.records[i].person_id != r.person_id || f.data.records[i].episode_id != r.episode_id
               || f.data.records[i].t != r.t)
            ++i;
        const auto u = f.st.state[i];
        const std::span<const int> legal(f.st.legal.data() + f.st.legal_begin[u],
                                         f.st.legal_begin[u + 1] - f.st.legal_begin[u]);
        const auto v = advantage_view(legal, f.at.normalized_of(f.st, u), f.at.scale);
        const double beta = std::exp(by.at(r.person_id)->z_hat);
        EXPECT_NEAR(r.score, step_score(v, r.action, beta), 1e-12);
        EXPECT_NEAR(r.score, step_score_gap(v, r.action, beta), 1e-12);
        EXPECT_NEAR(r.influence, -r.score / by.at(r.person_id)->hessian, 1e-12);
        EXPECT_TRUE(r.influence == 0.0 || std::signbit(r.influence) == std::signbit(r.score));
        if (legal.size() == 2) {
            EXPECT_NEAR(r.score, step_score_binary(v, r.action, beta), 1e-12);
            if (r.chose_optimal) EXPECT_GT(r.score, 0.0);
            else EXPECT_LT(r.score, 0.0);
        }
    }
}

TEST(Influence, ScoresSumToPriorResidualAtMode)
{
    const auto f = fitted("big-cross", 8, 5, 5);
    for (std::size_t j = 0; j < f.st.num_persons(); ++j) {
        const auto steps = person_steps(f.st, f.at, j);
        const auto mode = polish_mode(f.res.persons[j].z_hat, steps, f.res.prior);
        ASSERT_FALSE(mode.fallback);
        const double beta = std::exp(mode.z_hat);
        double s = 0.0;
        for (const auto& st : steps) {
            const auto p = softmax(st.adv, beta);
            double m = 0.0;
            for (std::size_t k = 0; k < p.size(); ++k) m += p[k] * st.adv[k];
            s += beta * (st.adv[st.chosen] - m);
        }
        EXPECT_NEAR(s, (mode.z_hat - f.res.prior.mu) / f.res.prior.sigma2, 1e-3) << j;
    }
}

TEST(Influence, AgreesWithPerturbAndRefit)
{
    const auto f = fitted("big-cross", 10, 5, 6);
    const auto v = validate_influence(f.st, f.at, f.res.persons, f.res.prior, 1e-3);
    EXPECT_EQ(v.persons_checked, 10u);
    ASSERT_GT(v.checks.size(), 20u);
    EXPECT_LT(v.max_rel_error, 0.05);
}

TEST(Influence, FallbackPersonsExcluded)
{
    auto f = fitted("tiny-cross", 4, 3, 7);
    auto persons = f.res.persons;
    persons[1].fallback = true;
    const auto rep = compute_influence(f.data, f.st, f.at, persons);
    ASSERT_EQ(rep.excluded_persons.size(), 1u);
    EXPECT_EQ(rep.excluded_persons[0], persons[1].person_id);
    for (const auto& r : rep.records) EXPECT_NE(r.person_id, persons[1].person_id);
}

TEST(Rank, Rules)
{
    std::vector<InfluenceRecord> rs{rec("b", "1", 0, 0.5), rec("a", "1", 2, -0.9), rec("a", "1", 1, 0.5),
                                    rec("c", "2", 0, 0.1)};
    const auto top = rank_critical_steps(rs, RankRule::top(1));
    ASSERT_EQ(top.size(), 1u);
    EXPECT_EQ(top[0].influence, -0.9);
    const auto all = rank_critical_steps(rs, RankRule::top_percent(100.0));
    ASSERT_EQ(all.size(), 4u);
    EXPECT_EQ(all[1].person_id, "a");
    EXPECT_EQ(all[2].person_id, "b");
    EXPECT_EQ(all[3].influence, 0.1);
    EXPECT_EQ(rank_critical_steps(rs, RankRule::top_percent(50.0)).size(), 2u);
    EXPECT_THROW(rank_critical_steps({}, RankRule::top(1)), precondition_error);
}

TEST(Rank, TopTenIsDeterministic)
{
    const auto a = fitted("tiny-cross", 6, 6, 8);
    const auto b = fitted("tiny-cross", 6, 6, 8);
    const auto ra = rank_critical_steps(compute_influence(a.data, a.st, a.at, a.res.persons).records, RankRule::top(10));
    const auto rb = rank_critical_steps(compute_influence(b.data, b.st, b.at, b.res.persons).records, RankRule::top(10));
    ASSERT_EQ(ra.size(), 10u);
    for (std::size_t i = 0; i < ra.size(); ++i) {
        EXPECT_EQ(ra[i].person_id, rb[i].person_id);
        EXPECT_EQ(ra[i].t, rb[i].t);
        EXPECT_EQ(ra[i].influence, rb[i].influence);
    }
}

TEST(Aggregate, ConstantInfluence)
{
    std::vector<InfluenceRecord> rs;
    std::map<std::string, double> beta;
    for (int p = 0; p < 10; ++p) {
        const std::string id = "p" + std::to_string(p);
        beta[id] = 0.5 + p;
        for (int t = 0; t < 3; ++t) rs.push_back(rec(id.c_str(), "1", t, -0.75));
    }
    for (const auto& a : aggregate_by_step(rs, beta))
        if (a.n) EXPECT_DOUBLE_EQ(a.mean_abs_influence, 0.75);
}

TEST(Aggregate, BandsMatchIndependentPercentiles)
{
    std::mt19937_64 rng(9);
    std::lognormal_distribution<double> ln(0.0, 0.8);
    std::vector<InfluenceRecord> rs;
    std::map<std::string, double> beta;
    std::vector<double> sorted;
    for (int p = 0; p < 37; ++p) {
        const std::string id = "p" + std::to_string(p);
        beta[id] = ln(rng);
        sorted.push_back(beta[id]);
        rs.push_back(rec(id.c_str(), "1", 0, 1.0));
    }
    std::sort(sorted.begin(), sorted.end());
    auto pct = [&](double q) {
        const double pos = q / 100.0 * (sorted.size() - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const auto hi = std::min(lo + 1, sorted.size() - 1);
        return sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);
    };
    const auto rows = aggregate_by_step(rs, beta);
    std::size_t quintile_total = 0;
    for (const auto& band : default_bands()) {
        std::size_t expect = 0;
        for (double b : sorted) {
            const bool lo = band.lo == 0.0 || b >= pct(band.lo);
            const bool hi = band.hi == 100.0 ? b <= pct(band.hi) : b < pct(band.hi);
            expect += lo && hi;
        }
        const auto it = std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r.band == band.label; });
        ASSERT_NE(it, rows.end());
        EXPECT_EQ(it->n, expect) << band.label;
        if (band.label[0] == 'q') quintile_total += it->n;
    }
    EXPECT_EQ(quintile_total, sorted.size());
}

TEST(Aggregate, EmptyBandIsZeroRow)
{
    std::vector<InfluenceRecord> rs{rec("a", "1", 0, 1.0), rec("a", "1", 1, 1.0)};
    const auto rows = aggregate_by_step(rs, {{"a", 1.0}}, {{"mid", 40, 60}, {"all", 0, 100}});
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0].n, 0u);
    EXPECT_EQ(rows[0].mean_abs_influence, 0.0);
    EXPECT_EQ(rows[2].n, 1u);
    EXPECT_THROW(aggregate_by_step(rs, {{"b", 1.0}}), lookup_error);
}

TEST(Aggregate, LowBetaBandHasLargerEarlyInfluence)
{
    const auto f = fitted("big-L", 40, 5, 10, 0.8, FitConfig{}.k_outer);
    const auto rep = compute_influence(f.data, f.st, f.at, f.res.persons);
    std::map<std::string, double> beta;
    for (const auto& p : f.res.persons) beta[p.person_id] = p.beta_hat;
    const auto rows = aggregate_by_step(rep.records, beta, {{"low", 0, 20}, {"high", 80, 100}});
    std::map<int, double> low, high;
    for (const auto& r : rows) (r.band == "low" ? low : high)[r.step] = r.mean_abs_influence;
    double lo = 0.0, hi = 0.0;
    for (int t = 0; t < 5; ++t) {
        lo += low[t];
        hi += high[t];
    }
    EXPECT_GT(lo, hi);
}

TEST(Collapse, MatchesExhaustiveCounts)
{
    for (const char* name : {"line-5", "tiny-cross"}) {
        const Board b(builtin_board(name));
        const auto task = enumerate_reachable(b);
        const auto data = simulate_trajectories(task, sample_population({0.0, 0.5}, 5, 11), 4, 11);
        const auto rows = solution_collapse_profile(task, data);
        std::map<int, std::pair<double, std::size_t>> expect;
        for (const auto& r : data.records) {
            oracle::Grid g = b.spec().mask;
            for (auto& row : g)
                for (auto& ch : row) ch = ch == '#' ? '_' : ' ';
            for (int i = 0; i < b.num_cells(); ++i)
                if (r.state >> i & 1) g[b.cells()[i].row][b.cells()[i].col] = 'o';
            expect[r.t].first += static_cast<double>(oracle::count_paths(g));
            ++expect[r.t].second;
        }
        ASSERT_EQ(rows.size(), expect.size());
        for (const auto& row : rows) {
            EXPECT_EQ(row.n, expect[row.step].second);
            EXPECT_NEAR(row.mean_paths, expect[row.step].first / expect[row.step].second, 1e-12);
        }
        const auto counts = solution_path_counts(task);
        const double n0 = static_cast<double>(counts[task.index_of(data.records[0].state)]);
        EXPECT_EQ(rows[0].mean_paths, n0);
        for (const auto& ep : episodes(data))
            for (std::size_t k = 1; k < ep.steps.size(); ++k)
                EXPECT_LE(counts[task.index_of(ep.steps[k].state)], counts[task.index_of(ep.steps[k - 1].state)]);
    }
}

TEST(Csv, InfluenceAndAggregateHeaders)
{
    std::vector<InfluenceRecord> rs{rec("a", "1", 0, 0.25)};
    rs[0].state = 0x1b;
    rs[0].chose_optimal = true;
    const auto text = influence_csv(rs);
    EXPECT_EQ(text.substr(0, text.find('\n')),
              "person_id,episode_id,t,state_bitmask_hex,action_id,score,influence,chose_optimal");
    EXPECT_NE(text.find("a,1,0,0x1b,0,"), std::string::npos);
    const auto agg = aggregates_csv({{"q1", 0, 0.5, 3}});
    EXPECT_EQ(agg, "band,step,mean_abs_influence,n\nq1,0,0.5,3\n");
}
