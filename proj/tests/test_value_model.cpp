#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include <rlmm/boards.hpp>
#include <rlmm/estimator.hpp>
#include <rlmm/tabular.hpp>
#include <rlmm/value_model.hpp>

#include "fd.hpp"

using namespace rlmm;

namespace {

QParams random_params(ModelKind kind, int d, int a, int h, std::uint64_t seed, double sd = 0.5)
{
    auto th = make_qparams(kind, d, a, h, seed);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    for (auto& p : th.params) p = n(rng);
    return th;
}

std::vector<double> random_phi(int d, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> phi(d);
    for (auto& x : phi) x = u(rng);
    return phi;
}

} // namespace

TEST(QValues, ZeroParamsGiveZero)
{
    auto th = make_qparams(ModelKind::two_layer, 5, 4, 8, 1);
    std::fill(th.params.begin(), th.params.end(), 0.0);
    const std::vector<int> legal{0, 2, 3};
    for (double q : q_values(th, random_phi(5, 2), legal)) EXPECT_EQ(q, 0.0);
    const auto lin = make_qparams(ModelKind::linear, 5, 4, 0, 1);
    for (double q : q_values(lin, random_phi(5, 2), legal)) EXPECT_EQ(q, 0.0);
}

TEST(QValues, LinearOneHotReadsWeightRow)
{
    auto th = random_params(ModelKind::linear, 6, 3, 0, 4);
    std::fill(th.params.begin() + static_cast<long>(th.b1()), th.params.end(), 0.0);
    std::vector<double> phi(6, 0.0);
    phi[4] = 1.0;
    const std::vector<int> legal{0, 1, 2};
    const auto q = q_values(th, phi, legal);
    for (int a = 0; a < 3; ++a) EXPECT_EQ(q[a], th.params[4 * 3 + a]);
}

TEST(QValues, DimensionMismatch)
{
    const auto th = make_qparams(ModelKind::two_layer, 5, 4, 8, 1);
    const std::vector<int> legal{0};
    EXPECT_THROW(q_values(th, std::vector<double>(4), legal), precondition_error);
    const std::vector<int> bad{7};
    EXPECT_THROW(q_values(th, std::vector<double>(5), bad), precondition_error);
}

TEST(QValues, ParamCountAndInit)
{
    const auto th = make_qparams(ModelKind::two_layer, 10, 7, 64, 3);
    EXPECT_EQ(th.size(), 10u * 64 + 64 + 64u * 7 + 7);
    EXPECT_EQ(make_qparams(ModelKind::linear, 10, 7, 64, 3).size(), 10u * 7 + 7);
    EXPECT_TRUE(th.all_finite());
    EXPECT_EQ(th, make_qparams(ModelKind::two_layer, 10, 7, 64, 3));
    EXPECT_NE(th, make_qparams(ModelKind::two_layer, 10, 7, 64, 4));
}

TEST(QValues, GradientMatchesFiniteDifferences)
{
    for (auto kind : {ModelKind::linear, ModelKind::two_layer}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto th = random_params(kind, 6, 5, 7, 100 + seed);
            const auto phi = random_phi(6, 200 + seed);
            const std::vector<int> legal{0, 2, 4};
            const std::vector<double> w{0.3, -1.2, 0.7};
            ForwardCache cache;
            std::vector<double> q(3), grad(th.size(), 0.0);
            q_values(th, phi, legal, q, cache);
            q_backward(th, phi, legal, cache, w, grad);
            auto f = [&](const std::vector<double>& p) {
                auto t = th;
                t.params = p;
                const auto qq = q_values(t, phi, legal);
                return w[0] * qq[0] + w[1] * qq[1] + w[2] * qq[2];
            };
            EXPECT_LT(fd::rel_error(grad, fd::gradient(f, th.params)), 1e-5) << to_string(kind) << " " << seed;
        }
    }
}

TEST(Checkpoint, RoundTripsExactly)
{
    const auto th = random_params(ModelKind::two_layer, 9, 6, 5, 12);
    const auto path = (std::filesystem::temp_directory_path() / "rlmm_theta_test.ckpt").string();
    save_checkpoint(th, path);
    EXPECT_EQ(load_checkpoint(path), th);
    std::stringstream ss(serialize(th));
    EXPECT_EQ(deserialize_qparams(ss), th);
    std::stringstream bad("not-a-checkpoint 1\n");
    EXPECT_THROW(deserialize_qparams(bad), schema_error);
    std::filesystem::remove(path);
}

TEST(Advantages, Centering)
{
    const std::vector<double> q{1, 2, 6};
    EXPECT_EQ(center_advantages(q), (std::vector<double>{-2, -1, 3}));
    const std::vector<double> c(4, 3.5);
    for (double v : center_advantages(c)) EXPECT_EQ(v, 0.0);
    const std::vector<double> one{7.0};
    EXPECT_EQ(center_advantages(one), std::vector<double>{0.0});
    EXPECT_THROW(center_advantages(std::vector<double>{}), precondition_error);
}

TEST(Advantages, ZeroSumAtEveryState)
{
    const Board b(builtin_board("big-cross"));
    const auto fmap = FeatureMap::occupancy(b);
    const auto th = make_qparams(ModelKind::two_layer, fmap, b, 16, 5);
    const auto task = enumerate_reachable(b);
    for (auto s : task.states()) {
        const auto legal = b.legal_actions(s);
        if (legal.empty()) continue;
        const auto v = normalized_advantages(th, fmap, s, legal, 0.7);
        double sum = 0.0;
        for (double x : v.centered) sum += x;
        EXPECT_NEAR(sum, 0.0, 1e-10);
        for (std::size_t i = 0; i < v.centered.size(); ++i) EXPECT_NEAR(v.normalized[i], v.centered[i] / 0.7, 1e-15);
    }
}

TEST(Advantages, NormalizedArithmetic)
{
    const std::vector<int> legal{0, 1, 2};
    auto th = make_qparams(ModelKind::linear, 1, 3, 0, 0);
    th.params = {0, 0, 0, 1, 2, 6};  // weights then biases
    std::vector<double> phi{0.0};
    const auto q = q_values(th, phi, legal);
    EXPECT_EQ(q, (std::vector<double>{1, 2, 6}));
    const auto c = center_advantages(q);
    std::vector<double> n(3);
    for (int i = 0; i < 3; ++i) n[i] = c[i] / 2.0;
    EXPECT_EQ(n, (std::vector<double>{-1, -0.5, 1.5}));
}

TEST(Advantages, ScaleInvarianceLinear)
{
    const Board b(builtin_board("tiny-cross"));
    const auto task = enumerate_reachable(b);
    const auto data = simulate_trajectories(task, std::vector<double>{1.0, 2.0}, 5, 1);
    const auto fmap = FeatureMap::occupancy(b);
    const auto st = build_step_table(b, data);
    const auto th = random_params(ModelKind::linear, fmap.dim(), b.num_actions(), 0, 9);
    const auto base = compute_advantages(th, fmap, st, 0.0);
    for (double c : {0.1, 3.0, 100.0}) {
        auto scaled = th;
        for (auto& p : scaled.params) p *= c;
        const auto at = compute_advantages(scaled, fmap, st, 0.0);
        EXPECT_NEAR(at.scale, c * base.scale, 1e-12 * c * base.scale);
        for (std::size_t k = 0; k < at.normalized.size(); ++k) EXPECT_NEAR(at.normalized[k], base.normalized[k], 1e-10);
    }
}

TEST(Advantages, BiasShiftInvariance)
{
    const Board b(builtin_board("tiny-cross"));
    const auto fmap = FeatureMap::occupancy(b);
    const auto th = make_qparams(ModelKind::two_layer, fmap, b, 8, 2);
    auto shifted = th;
    for (int a = 0; a < th.num_actions; ++a) shifted.params[th.b2() + a] += 4.25;
    const auto s = b.initial_state();
    const auto legal = b.legal_actions(s);
    const auto v1 = normalized_advantages(th, fmap, s, legal, 1.0);
    const auto v2 = normalized_advantages(shifted, fmap, s, legal, 1.0);
    for (std::size_t i = 0; i < legal.size(); ++i) EXPECT_NEAR(v1.centered[i], v2.centered[i], 1e-12);
}

TEST(GlobalScale, Cases)
{
    const Board b(builtin_board("tiny-cross"));
    const auto task = enumerate_reachable(b);
    const auto data = simulate_trajectories(task, std::vector<double>{1.0}, 3, 4);
    auto th = make_qparams(ModelKind::linear, FeatureMap::occupancy(b), b, 0, 0);
    EXPECT_DOUBLE_EQ(global_scale(th, b, data, 1e-8), std::sqrt(1e-8));

    // One observation whose chosen centered advantage is 3.
    Dataset one;
    one.board = b.name();
    one.records = {data.records.front()};
    const auto legal = b.legal_actions(one.records[0].state);
    ASSERT_GE(legal.size(), 2u);
    th.params.assign(th.size(), 0.0);
    const auto n = static_cast<double>(legal.size());
    th.params[th.b1() + one.records[0].action] = 3.0 * n / (n - 1.0);
    EXPECT_NEAR(global_scale(th, b, one, 0.0), 3.0, 1e-12);

    auto th2 = random_params(ModelKind::linear, b.num_cells() + 2, b.num_actions(), 0, 5);
    const double c1 = global_scale(th2, b, data, 0.0);
    for (auto& p : th2.params) p *= 2.0;
    EXPECT_DOUBLE_EQ(global_scale(th2, b, data, 0.0), 2.0 * c1);
}

TEST(Policy, SoftmaxCases)
{
    const std::vector<int> legal{3, 5, 8};
    const auto v = advantage_view(legal, std::vector<double>{-1.0, 0.2, 0.8});
    for (double p : policy_probs(v, 0.0)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
    const auto two = advantage_view(std::vector<int>{0, 1}, std::vector<double>{0.0, std::log(3.0)});
    EXPECT_NEAR(policy_probs(two, 1.0)[1], 0.75, 1e-12);
    const auto sharp = policy_probs(v, 50.0);
    EXPECT_GT(sharp[2], 0.999);
    for (double beta : {0.01, 1.0, 7.0, 50.0}) {
        const auto p = policy_probs(v, beta);
        EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(), 2);
        EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
    }
    const auto big = advantage_view(legal, std::vector<double>{-1000.0, 999.0, 1000.0});
    for (double p : policy_probs(big, 1.0)) EXPECT_TRUE(std::isfinite(p));
    EXPECT_THROW(policy_probs(v, -1.0), precondition_error);
}

TEST(Policy, OptimalActionProbability)
{
    const auto binary = advantage_view(std::vector<int>{0, 1}, std::vector<double>{0.5, -0.5});
    EXPECT_NEAR(optimal_action_prob(binary, 2.0), 1.0 / (1.0 + std::exp(-2.0)), 1e-12);
    EXPECT_NEAR(optimal_action_prob(binary, 2.0), 0.8808, 1e-4);
    const auto tied = advantage_view(std::vector<int>{0, 1}, std::vector<double>{0.0, 0.0});
    EXPECT_THROW(optimal_action_prob(tied, 1.0), tie_error);
    const auto multi = advantage_view(std::vector<int>{1, 4, 6, 9}, std::vector<double>{0.3, -1.1, 0.9, -0.1});
    for (double beta : {0.0, 0.5, 3.0}) {
        double z = 0.0;
        for (double a : multi.normalized) z += std::exp(beta * a);
        EXPECT_NEAR(optimal_action_prob(multi, beta), std::exp(beta * 0.9) / z, 1e-12);
        EXPECT_NEAR(optimal_action_prob(multi, beta), policy_probs(multi, beta)[2], 1e-12);
    }
}

TEST(SoftValue, Identities)
{
    const std::vector<double> one{2.5};
    EXPECT_EQ(soft_value_of(one, 0.7), 2.5);
    const std::vector<double> eq(4, 1.25);
    EXPECT_NEAR(soft_value_of(eq, 0.5), 1.25 + 0.5 * std::log(4.0), 1e-14);
    const std::vector<double> gap{1.0, 0.0, 0.0};
    const double v = soft_value_of(gap, 1e-3);
    EXPECT_GE(v, 1.0);
    EXPECT_LE(v - 1.0, 1e-3 * std::log(3.0));
    const std::vector<double> big{1000.0, -1000.0, 999.0};
    EXPECT_TRUE(std::isfinite(soft_value_of(big, 1.0)));
    EXPECT_EQ(soft_value_of(std::vector<double>{}, 1.0), 0.0);
    EXPECT_THROW(soft_value_of(one, 0.0), precondition_error);
}

TEST(Bellman, ResidualCases)
{
    const Board b(line5_board());
    const auto fmap = FeatureMap::occupancy(b);
    auto th = random_params(ModelKind::linear, fmap.dim(), b.num_actions(), 0, 3);
    // Move into the dead state {1,4}: terminal successor.
    const occupancy_t s = 0b11100;
    const int a = b.legal_actions(s).front();
    const Transition tr{s, a, b.reward(b.successor(s, a)), b.successor(s, a)};
    ASSERT_TRUE(b.is_terminal(tr.next_state));
    const double q = q_values(th, fmap(s), std::vector<int>{a})[0];
    EXPECT_NEAR(bellman_residual(th, b, fmap, tr), q - tr.reward, 1e-15);
    th.params[th.b1() + a] += tr.reward - q;
    EXPECT_NEAR(bellman_residual(th, b, fmap, tr), 0.0, 1e-12);

    const Transition first{b.initial_state(), b.legal_actions(b.initial_state()).front(), 0.0,
                           b.successor(b.initial_state(), b.legal_actions(b.initial_state()).front())};
    const double q0 = q_values(th, fmap(first.state), std::vector<int>{first.action})[0];
    EXPECT_NEAR(bellman_residual(th, b, fmap, first, {0.0, 1.0}), q0, 1e-15);
}

TEST(Bellman, LossMeanAndOrdering)
{
    const Board b(builtin_board("tiny-cross"));
    const auto task = enumerate_reachable(b);
    const auto data = simulate_trajectories(task, std::vector<double>{1.0}, 4, 2);
    const auto fmap = FeatureMap::occupancy(b);
    const auto th = make_qparams(ModelKind::two_layer, fmap, b, 8, 6);
    std::vector<Transition> batch;
    for (const auto& r : data.records) batch.push_back({r.state, r.action, r.reward, r.next_state});
    double mean_sq = 0.0;
    for (const auto& tr : batch) mean_sq += std::pow(bellman_residual(th, b, fmap, tr), 2);
    mean_sq /= static_cast<double>(batch.size());
    const double loss = bellman_loss(th, b, fmap, batch);
    EXPECT_NEAR(loss, mean_sq, 1e-14);
    std::reverse(batch.begin(), batch.end());
    EXPECT_NEAR(bellman_loss(th, b, fmap, batch), loss, 1e-14);
    EXPECT_THROW(bellman_loss(th, b, fmap, std::span<const Transition>{}), precondition_error);
}

TEST(Bellman, ResidualsOfPlusMinusOneGiveOne)
{
    const Board b(line5_board());
    const auto fmap = FeatureMap::occupancy(b);
    auto th = make_qparams(ModelKind::linear, fmap, b, 0, 0);
    // Two moves into dead states, Q set so the residuals are +1 and -1.
    const occupancy_t s1 = 0b11100, s2 = 0b00111;
    const int a1 = b.legal_actions(s1).front(), a2 = b.legal_actions(s2).front();
    th.params[th.b1() + a1] = -1.0 + 1.0;
    th.params[th.b1() + a2] = -1.0 - 1.0;
    const std::vector<Transition> batch{{s1, a1, -1.0, b.successor(s1, a1)}, {s2, a2, -1.0, b.successor(s2, a2)}};
    EXPECT_NEAR(bellman_residual(th, b, fmap, batch[0]), 1.0, 1e-15);
    EXPECT_NEAR(bellman_residual(th, b, fmap, batch[1]), -1.0, 1e-15);
    EXPECT_NEAR(bellman_loss(th, b, fmap, batch), 1.0, 1e-15);
}

TEST(Bellman, PlantedSoftConsistentTable)
{
    for (const char* name : {"line-5", "tiny-cross"}) {
        const Board b(builtin_board(name));
        const auto task = enumerate_reachable(b);
        const BellmanConfig cfg{b.discount(), 0.8};
        // Soft-Bellman table by recursion over increasing peg count.
        std::map<occupancy_t, std::map<int, double>> q;
        std::vector<occupancy_t> order(task.states().begin(), task.states().end());
        std::sort(order.begin(), order.end(), [](auto x, auto y) { return std::popcount(x) < std::popcount(y); });
        for (auto s : order) {
            if (b.is_terminal(s)) continue;
            for (int a : b.legal_actions(s)) {
                const auto n = b.successor(s, a);
                double v = 0.0;
                if (!b.is_terminal(n)) {
                    std::vector<double> qn;
                    for (int c : b.legal_actions(n)) qn.push_back(q[n][c]);
                    v = soft_value_of(qn, cfg.tau);
                }
                q[s][a] = b.reward(n) + cfg.gamma * v;
            }
        }
        const auto fmap = FeatureMap::one_hot(std::vector<occupancy_t>(task.states().begin(), task.states().end()));
        auto th = make_qparams(ModelKind::linear, fmap, b, 0, 0);
        for (std::size_t i = 0; i < task.size(); ++i)
            for (const auto& [a, v] : q[task.state(i)]) th.params[i * th.num_actions + a] = v;
        std::vector<Transition> all;
        for (auto s : task.states())
            for (int a : b.legal_actions(s)) all.push_back({s, a, b.reward(b.successor(s, a)), b.successor(s, a)});
        EXPECT_LT(bellman_loss(th, b, fmap, all, cfg), 1e-6) << name;
    }
}

TEST(Bellman, GradientMatchesFiniteDifferences)
{
    const Board b(builtin_board("tiny-cross"));
    const auto task = enumerate_reachable(b);
    const auto data = simulate_trajectories(task, std::vector<double>{1.0}, 3, 8);
    const auto fmap = FeatureMap::occupancy(b);
    std::vector<Transition> batch;
    for (const auto& r : data.records) batch.push_back({r.state, r.action, r.reward, r.next_state});
    for (auto kind : {ModelKind::linear, ModelKind::two_layer})
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto th = random_params(kind, fmap.dim(), b.num_actions(), 6, 40 + seed, 0.3);
            const BellmanConfig cfg{0.9, 0.7};
            std::vector<double> grad(th.size());
            bellman_loss_grad(th, b, fmap, batch, grad, cfg);
            auto f = [&](const std::vector<double>& p) {
                auto t = th;
                t.params = p;
                return bellman_loss(t, b, fmap, batch, cfg);
            };
            EXPECT_LT(fd::rel_error(grad, fd::gradient(f, th.params)), 1e-5) << to_string(kind) << " " << seed;

            // Single residual gradient.
            std::vector<double> g1(th.size(), 0.0);
            BellmanEvaluator ev(th, b, fmap, cfg);
            ev.residual(batch.front(), g1);
            auto r = [&](const std::vector<double>& p) {
                auto t = th;
                t.params = p;
                return bellman_residual(t, b, fmap, batch.front(), cfg);
            };
            EXPECT_LT(fd::rel_error(g1, fd::gradient(r, th.params)), 1e-5);
        }
}

TEST(Features, OneHotMap)
{
    const auto f = FeatureMap::one_hot({9, 3, 5, 3});
    EXPECT_EQ(f.dim(), 3);
    EXPECT_EQ(f(5), (std::vector<double>{0, 1, 0}));
    EXPECT_THROW(f(4), lookup_error);
    EXPECT_EQ(parse_model_kind("linear"), ModelKind::linear);
    EXPECT_THROW(parse_model_kind("cnn"), precondition_error);
}
