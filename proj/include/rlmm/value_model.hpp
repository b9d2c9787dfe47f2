#pragma once
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>
#include <rlmm/board.hpp>
#include <rlmm/math.hpp>
#include <rlmm/rng.hpp>

namespace rlmm {

/*
 * State features for the value model. Occupancy features are the board's
 * cell indicators plus the two normalized counts; one-hot features index a
 * fixed sorted state list (used for tabular-equivalent linear models).
 */
class FeatureMap
{
public:
    static FeatureMap occupancy(const Board& board)
    {
        FeatureMap f;
        f.cells_ = board.num_cells();
        f.dim_ = f.cells_ + 2;
        return f;
    }

    static FeatureMap one_hot(std::vector<occupancy_t> states)
    {
        FeatureMap f;
        std::sort(states.begin(), states.end());
        states.erase(std::unique(states.begin(), states.end()), states.end());
        f.states_ = std::move(states);
        f.dim_ = static_cast<int>(f.states_.size());
        return f;
    }

    bool is_one_hot() const { return cells_ == 0; }
    int dim() const { return dim_; }

    void operator()(occupancy_t s, std::span<double> out) const
    {
        if (static_cast<int>(out.size()) != dim_) throw precondition_error("feature buffer has wrong length");
        if (!is_one_hot()) {
            for (int i = 0; i < cells_; ++i) out[i] = static_cast<double>(s >> i & 1);
            const double pegs = std::popcount(s);
            out[cells_] = pegs / cells_;
            out[cells_ + 1] = (cells_ - pegs) / cells_;
            return;
        }
        std::fill(out.begin(), out.end(), 0.0);
        auto it = std::lower_bound(states_.begin(), states_.end(), s);
        if (it == states_.end() || *it != s) throw lookup_error("state has no one-hot feature index");
        out[it - states_.begin()] = 1.0;
    }

    std::vector<double> operator()(occupancy_t s) const
    {
        std::vector<double> out(dim_);
        (*this)(s, out);
        return out;
    }

private:
    int cells_ = 0;
    int dim_ = 0;
    std::vector<occupancy_t> states_;
};

enum class ModelKind { linear, two_layer };

inline std::string to_string(ModelKind k) { return k == ModelKind::linear ? "linear" : "two-layer"; }

inline ModelKind parse_model_kind(const std::string& s)
{
    if (s == "linear") return ModelKind::linear;
    if (s == "two-layer" || s == "two_layer" || s == "mlp") return ModelKind::two_layer;
    throw precondition_error("unknown model kind '" + s + "'");
}

/*
 * Shared action-value function, one output head per global action.
 * Flat parameter layout:
 *   linear:    W[i*A + a] (D x A), b[a]
 *   two-layer: W1[i*H + h] (D x H), b1[h], W2[h*A + a] (H x A), b2[a]
 */
struct QParams
{
    ModelKind kind = ModelKind::two_layer;
    int input_dim = 0;
    int hidden = 0;
    int num_actions = 0;
    std::uint64_t seed = 0;
    std::vector<double> params;

    std::size_t size() const { return params.size(); }

    static std::size_t count(ModelKind kind, int d, int h, int a)
    {
        if (kind == ModelKind::linear) return static_cast<std::size_t>(d) * a + a;
        return static_cast<std::size_t>(d) * h + h + static_cast<std::size_t>(h) * a + a;
    }

    // Offsets into params.
    std::size_t w1() const { return 0; }
    std::size_t b1() const { return static_cast<std::size_t>(input_dim) * (kind == ModelKind::linear ? num_actions : hidden); }
    std::size_t w2() const { return b1() + hidden; }
    std::size_t b2() const { return w2() + static_cast<std::size_t>(hidden) * num_actions; }

    bool all_finite() const
    {
        for (double v : params)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const QParams&, const QParams&) = default;
};

// Linear heads start at zero; two-layer weights draw from N(0, 2/fan_in), biases zero.
inline QParams make_qparams(ModelKind kind, int input_dim, int num_actions, int hidden, std::uint64_t seed)
{
    if (input_dim < 1 || num_actions < 1) throw precondition_error("model dimensions must be positive");
    if (kind == ModelKind::two_layer && hidden < 1) throw precondition_error("hidden width must be positive");
    QParams p;
    p.kind = kind;
    p.input_dim = input_dim;
    p.hidden = kind == ModelKind::linear ? 0 : hidden;
    p.num_actions = num_actions;
    p.seed = seed;
    p.params.assign(QParams::count(kind, input_dim, p.hidden, num_actions), 0.0);
    if (kind == ModelKind::two_layer) {
        rng_t rng(derive_seed(seed, "theta-init"));
        std::normal_distribution<double> n1(0.0, std::sqrt(2.0 / input_dim));
        std::normal_distribution<double> n2(0.0, std::sqrt(2.0 / p.hidden));
        for (std::size_t i = 0; i < p.b1(); ++i) p.params[i] = n1(rng);
        for (std::size_t i = p.w2(); i < p.b2(); ++i) p.params[i] = n2(rng);
    }
    return p;
}

inline QParams make_qparams(ModelKind kind, const FeatureMap& fmap, const Board& board, int hidden,
                            std::uint64_t seed)
{
    return make_qparams(kind, fmap.dim(), board.num_actions(), hidden, seed);
}

// Scratch space for one forward pass; reused by the matching backward pass.
struct ForwardCache
{
    std::vector<double> hidden;
};

/*
 * Q_theta(phi, a) for each a in legal, written to out. Only the requested
 * heads are evaluated.
 */
inline void q_values(const QParams& th, std::span<const double> phi, std::span<const int> legal, std::span<double> out,
                     ForwardCache& cache)
{
    if (static_cast<int>(phi.size()) != th.input_dim)
        throw precondition_error("feature length " + std::to_string(phi.size()) + " does not match model input "
                                 + std::to_string(th.input_dim));
    if (out.size() != legal.size()) throw precondition_error("output buffer length mismatch");
    const double* p = th.params.data();
    const int A = th.num_actions;
    for (int a : legal)
        if (a < 0 || a >= A) throw precondition_error("action id " + std::to_string(a) + " outside the model heads");
    if (th.kind == ModelKind::linear) {
        for (std::size_t k = 0; k < legal.size(); ++k) {
            const int a = legal[k];
            double acc = p[th.b1() + a];
            for (int i = 0; i < th.input_dim; ++i)
                if (phi[i] != 0.0) acc += phi[i] * p[static_cast<std::size_t>(i) * A + a];
            out[k] = acc;
        }
        return;
    }
    const int H = th.hidden;
    cache.hidden.assign(p + th.b1(), p + th.b1() + H);
    for (int i = 0; i < th.input_dim; ++i) {
        const double x = phi[i];
        if (x == 0.0) continue;
        const double* row = p + static_cast<std::size_t>(i) * H;
        for (int h = 0; h < H; ++h) cache.hidden[h] += x * row[h];
    }
    for (auto& v : cache.hidden) v = std::tanh(v);
    const double* w2 = p + th.w2();
    for (std::size_t k = 0; k < legal.size(); ++k) {
        const int a = legal[k];
        double acc = p[th.b2() + a];
        for (int h = 0; h < H; ++h) acc += cache.hidden[h] * w2[static_cast<std::size_t>(h) * A + a];
        out[k] = acc;
    }
}

inline std::vector<double> q_values(const QParams& th, std::span<const double> phi, std::span<const int> legal)
{
    ForwardCache cache;
    std::vector<double> out(legal.size());
    q_values(th, phi, legal, out, cache);
    return out;
}

/*
 * grad += sum_k gq[k] * dQ(phi, legal[k]) / dtheta. Needs the cache from the
 * forward pass on the same (phi, legal).
 */
inline void q_backward(const QParams& th, std::span<const double> phi, std::span<const int> legal,
                       const ForwardCache& cache, std::span<const double> gq, std::span<double> grad)
{
    const int A = th.num_actions;
    double* g = grad.data();
    if (th.kind == ModelKind::linear) {
        for (std::size_t k = 0; k < legal.size(); ++k) {
            const int a = legal[k];
            if (gq[k] == 0.0) continue;
            g[th.b1() + a] += gq[k];
            for (int i = 0; i < th.input_dim; ++i)
                if (phi[i] != 0.0) g[static_cast<std::size_t>(i) * A + a] += phi[i] * gq[k];
        }
        return;
    }
    const int H = th.hidden;
    const double* w2 = th.params.data() + th.w2();
    thread_local std::vector<double> dpre;
    dpre.assign(H, 0.0);
    for (std::size_t k = 0; k < legal.size(); ++k) {
        const int a = legal[k];
        const double gk = gq[k];
        if (gk == 0.0) continue;
        g[th.b2() + a] += gk;
        for (int h = 0; h < H; ++h) {
            g[th.w2() + static_cast<std::size_t>(h) * A + a] += cache.hidden[h] * gk;
            dpre[h] += w2[static_cast<std::size_t>(h) * A + a] * gk;
        }
    }
    for (int h = 0; h < H; ++h) dpre[h] *= 1.0 - cache.hidden[h] * cache.hidden[h];
    for (int h = 0; h < H; ++h) g[th.b1() + h] += dpre[h];
    for (int i = 0; i < th.input_dim; ++i) {
        const double x = phi[i];
        if (x == 0.0) continue;
        double* row = g + static_cast<std::size_t>(i) * H;
        for (int h = 0; h < H; ++h) row[h] += x * dpre[h];
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: text header plus one hexfloat per parameter.
// ---------------------------------------------------------------------------

inline constexpr const char* checkpoint_magic = "rlmm-qparams";
inline constexpr int checkpoint_version = 1;

inline std::string serialize(const QParams& th)
{
    std::string out;
    char buf[64];
    out += std::string(checkpoint_magic) + " " + std::to_string(checkpoint_version) + "\n";
    out += "kind " + to_string(th.kind) + "\n";
    out += "input_dim " + std::to_string(th.input_dim) + "\n";
    out += "hidden " + std::to_string(th.hidden) + "\n";
    out += "actions " + std::to_string(th.num_actions) + "\n";
    out += "seed " + std::to_string(th.seed) + "\n";
    out += "count " + std::to_string(th.params.size()) + "\n";
    for (double v : th.params) {
        std::snprintf(buf, sizeof buf, "%a\n", v);
        out += buf;
    }
    return out;
}

inline QParams deserialize_qparams(std::istream& in)
{
    QParams th;
    std::string magic, key, kind;
    int version = 0;
    if (!(in >> magic >> version) || magic != checkpoint_magic || version != checkpoint_version)
        throw schema_error("not a parameter checkpoint (bad header)");
    std::size_t count = 0;
    auto expect = [&](const char* name) {
        if (!(in >> key) || key != name) throw schema_error(std::string("checkpoint: expected '") + name + "'");
    };
    expect("kind");
    in >> kind;
    th.kind = parse_model_kind(kind);
    expect("input_dim");
    in >> th.input_dim;
    expect("hidden");
    in >> th.hidden;
    expect("actions");
    in >> th.num_actions;
    expect("seed");
    in >> th.seed;
    expect("count");
    in >> count;
    if (!in || count != QParams::count(th.kind, th.input_dim, th.hidden, th.num_actions))
        throw schema_error("checkpoint: parameter count does not match the architecture");
    th.params.resize(count);
    std::string tok;
    for (std::size_t i = 0; i < count; ++i) {
        if (!(in >> tok)) throw schema_error("checkpoint: truncated parameter list");
        char* end = nullptr;
        th.params[i] = std::strtod(tok.c_str(), &end);
        if (end != tok.c_str() + tok.size()) throw schema_error("checkpoint: bad number '" + tok + "'");
    }
    return th;
}

inline void save_checkpoint(const QParams& th, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    out << serialize(th);
}

inline QParams load_checkpoint(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw lookup_error("cannot open checkpoint '" + path + "'");
    return deserialize_qparams(in);
}

// ---------------------------------------------------------------------------
// Advantages and policy
// ---------------------------------------------------------------------------

inline std::vector<double> center_advantages(std::span<const double> q)
{
    if (q.empty()) throw precondition_error("centering over an empty action set");
    const double m = mean(q);
    std::vector<double> out(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) out[i] = q[i] - m;
    return out;
}

struct AdvantageView
{
    occupancy_t state = 0;
    std::vector<int> legal;
    std::vector<double> centered;
    double scale = 1.0;
    std::vector<double> normalized;

    std::size_t position(int action) const
    {
        for (std::size_t i = 0; i < legal.size(); ++i)
            if (legal[i] == action) return i;
        throw precondition_error("action " + std::to_string(action) + " is not legal at this state");
    }
};

inline AdvantageView normalized_advantages(const QParams& th, const FeatureMap& fmap, occupancy_t s,
                                           std::span<const int> legal, double c)
{
    if (!(c > 0.0)) throw precondition_error("advantage scale must be positive");
    AdvantageView v;
    v.state = s;
    v.legal.assign(legal.begin(), legal.end());
    v.centered = center_advantages(q_values(th, fmap(s), legal));
    v.scale = c;
    v.normalized.resize(v.centered.size());
    for (std::size_t i = 0; i < v.centered.size(); ++i) v.normalized[i] = v.centered[i] / c;
    return v;
}

// View built from precomputed normalized advantages.
inline AdvantageView advantage_view(std::span<const int> legal, std::span<const double> normalized, double c = 1.0)
{
    AdvantageView v;
    v.legal.assign(legal.begin(), legal.end());
    v.normalized.assign(normalized.begin(), normalized.end());
    v.scale = c;
    v.centered.resize(v.normalized.size());
    for (std::size_t i = 0; i < v.normalized.size(); ++i) v.centered[i] = v.normalized[i] * c;
    return v;
}

inline std::vector<double> policy_probs(const AdvantageView& adv, double beta)
{
    if (!(beta >= 0.0)) throw precondition_error("beta must be >= 0");
    return softmax(adv.normalized, beta);
}

// Index of the unique highest normalized advantage; tie_error otherwise.
inline std::size_t unique_argmax(const AdvantageView& adv)
{
    if (adv.normalized.empty()) throw precondition_error("argmax over an empty action set");
    std::size_t best = 0;
    for (std::size_t i = 1; i < adv.normalized.size(); ++i)
        if (adv.normalized[i] > adv.normalized[best]) best = i;
    const double top = adv.normalized[best];
    const double tol = 1e-12 * std::max(1.0, std::abs(top));
    for (std::size_t i = 0; i < adv.normalized.size(); ++i)
        if (i != best && top - adv.normalized[i] <= tol)
            throw tie_error("tied highest advantage between actions " + std::to_string(adv.legal[best]) + " and "
                            + std::to_string(adv.legal[i]));
    return best;
}

// Gap Delta(s,a) = A(s,a*) - A(s,a) for every legal a.
inline std::vector<double> action_gaps(const AdvantageView& adv)
{
    const auto best = unique_argmax(adv);
    std::vector<double> out(adv.normalized.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = adv.normalized[best] - adv.normalized[i];
    return out;
}

/*
 * Probability of the highest-advantage action in gap form:
 *   1 / (1 + sum_{a != a*} exp(-beta * Delta(s,a))).
 */
inline double optimal_action_prob(const AdvantageView& adv, double beta)
{
    const auto gaps = action_gaps(adv);
    double denom = 1.0;
    for (double g : gaps)
        if (g > 0.0) denom += std::exp(-beta * g);
    return 1.0 / denom;
}

struct SoftValueConfig
{
    double tau = 1.0;
};

// tau * logsumexp(q / tau); 0 over an empty (terminal) set.
inline double soft_value_of(std::span<const double> q, double tau)
{
    if (!(tau > 0.0)) throw precondition_error("soft value temperature must be positive");
    if (q.empty()) return 0.0;
    double m = q[0];
    for (double v : q) m = std::max(m, v);
    double s = 0.0;
    for (double v : q) s += std::exp((v - m) / tau);
    return m + tau * std::log(s);
}

inline double soft_value(const QParams& th, const FeatureMap& fmap, occupancy_t s, std::span<const int> legal,
                         SoftValueConfig cfg = {})
{
    if (legal.empty()) return 0.0;
    return soft_value_of(q_values(th, fmap(s), legal), cfg.tau);
}

struct Transition
{
    occupancy_t state = 0;
    int action = 0;
    double reward = 0.0;
    occupancy_t next_state = 0;
};

struct BellmanConfig
{
    double gamma = 0.95;
    double tau = 1.0;
};

/*
 * Evaluates delta = Q(s,a) - (r + gamma * V(s')) and, when grad is
 * non-empty, adds weight * d delta / d theta to it. Terminal successors
 * (no legal actions) have V = 0.
 */
class BellmanEvaluator
{
public:
    BellmanEvaluator(const QParams& th, const Board& board, const FeatureMap& fmap, BellmanConfig cfg)
        : th_(th), board_(board), fmap_(fmap), cfg_(cfg), phi_(fmap.dim()), phi_next_(fmap.dim())
    {
    }

    double residual(const Transition& tr, std::span<double> grad = {}, double weight = 1.0)
    {
        fmap_(tr.state, phi_);
        const int a = tr.action;
        double q = 0.0;
        q_values(th_, phi_, std::span<const int>(&a, 1), std::span<double>(&q, 1), cache_);
        double v = 0.0;
        const bool terminal = board_.is_terminal(tr.next_state);
        if (!terminal) {
            board_.legal_actions(tr.next_state, legal_);
            fmap_(tr.next_state, phi_next_);
            qn_.resize(legal_.size());
            q_values(th_, phi_next_, legal_, qn_, cache_next_);
            v = soft_value_of(qn_, cfg_.tau);
        }
        const double delta = q - (tr.reward + cfg_.gamma * v);
        if (!grad.empty()) {
            const double one = weight;
            q_backward(th_, phi_, std::span<const int>(&a, 1), cache_, std::span<const double>(&one, 1), grad);
            if (!terminal) {
                // dV/dQ(s',b) = softmax(Q(s',.)/tau)_b
                pn_.resize(qn_.size());
                softmax(qn_, 1.0 / cfg_.tau, pn_);
                for (auto& p : pn_) p *= -cfg_.gamma * weight;
                q_backward(th_, phi_next_, legal_, cache_next_, pn_, grad);
            }
        }
        return delta;
    }

private:
    const QParams& th_;
    const Board& board_;
    const FeatureMap& fmap_;
    BellmanConfig cfg_;
    std::vector<double> phi_, phi_next_, qn_, pn_;
    std::vector<int> legal_;
    ForwardCache cache_, cache_next_;
};

inline double bellman_residual(const QParams& th, const Board& board, const FeatureMap& fmap, const Transition& tr,
                               BellmanConfig cfg = {})
{
    BellmanEvaluator ev(th, board, fmap, cfg);
    return ev.residual(tr);
}

inline double bellman_loss(const QParams& th, const Board& board, const FeatureMap& fmap,
                           std::span<const Transition> batch, BellmanConfig cfg = {})
{
    if (batch.empty()) throw precondition_error("Bellman loss over an empty batch");
    BellmanEvaluator ev(th, board, fmap, cfg);
    double s = 0.0;
    for (const auto& tr : batch) {
        const double d = ev.residual(tr);
        s += d * d;
    }
    return s / static_cast<double>(batch.size());
}

// Mean squared residual and its gradient (written into grad, which is overwritten).
inline double bellman_loss_grad(const QParams& th, const Board& board, const FeatureMap& fmap,
                                std::span<const Transition> batch, std::span<double> grad, BellmanConfig cfg = {})
{
    if (batch.empty()) throw precondition_error("Bellman loss over an empty batch");
    std::fill(grad.begin(), grad.end(), 0.0);
    BellmanEvaluator ev(th, board, fmap, cfg);
    std::vector<double> gd(th.size());
    double s = 0.0;
    const double n = static_cast<double>(batch.size());
    for (const auto& tr : batch) {
        std::fill(gd.begin(), gd.end(), 0.0);
        const double d = ev.residual(tr, gd);
        s += d * d;
        for (std::size_t i = 0; i < gd.size(); ++i) grad[i] += 2.0 * d * gd[i] / n;
    }
    return s / n;
}

} // namespace rlmm
