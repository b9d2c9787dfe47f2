#pragma once
#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>
#include <rlmm/board.hpp>

namespace rlmm {

inline constexpr std::size_t default_state_cap = 50'000'000;

/*
 * Fully enumerated finite MDP over a board. States are stored sorted by
 * bitmask, so dense indices are stable for a given board. Legal sets and
 * successors are derived from the bitmask on demand; build_transitions()
 * materializes them when a solver needs the explicit table.
 */
class EnumeratedTask
{
public:
    EnumeratedTask(Board board, std::vector<occupancy_t> sorted_states)
        : board_(std::move(board)), states_(std::move(sorted_states))
    {
        initial_index_ = index_of(board_.initial_state());
    }

    const Board& board() const { return board_; }
    std::size_t size() const { return states_.size(); }
    int num_actions() const { return board_.num_actions(); }
    double discount() const { return board_.discount(); }
    std::span<const occupancy_t> states() const { return states_; }
    occupancy_t state(std::size_t idx) const { return states_.at(idx); }
    std::size_t initial_index() const { return initial_index_; }

    std::optional<std::size_t> find(occupancy_t s) const
    {
        auto it = std::lower_bound(states_.begin(), states_.end(), s);
        if (it == states_.end() || *it != s) return std::nullopt;
        return static_cast<std::size_t>(it - states_.begin());
    }

    std::size_t index_of(occupancy_t s) const
    {
        auto idx = find(s);
        if (!idx) throw lookup_error("state 0x" + to_hex(s) + " not in enumerated task '" + board_.name() + "'");
        return *idx;
    }

    std::vector<int> legal(std::size_t idx) const { return board_.legal_actions(state(idx)); }
    bool terminal(std::size_t idx) const { return board_.is_terminal(state(idx)); }
    bool solved(std::size_t idx) const { return board_.is_solved(state(idx)); }

    std::size_t next(std::size_t idx, int a) const { return index_of(board_.apply(state(idx), a)); }
    double reward(std::size_t idx, int a) const { return board_.reward(board_.apply(state(idx), a)); }

    static std::string to_hex(occupancy_t s)
    {
        static constexpr char digits[] = "0123456789abcdef";
        std::string out;
        do {
            out.push_back(digits[s & 0xf]);
            s >>= 4;
        } while (s);
        std::reverse(out.begin(), out.end());
        return out;
    }

private:
    Board board_;
    std::vector<occupancy_t> states_;
    std::size_t initial_index_ = 0;
};

inline std::vector<occupancy_t> sorted_starts(const Board& board)
{
    std::vector<occupancy_t> starts(board.initial_states().begin(), board.initial_states().end());
    std::sort(starts.begin(), starts.end());
    starts.erase(std::unique(starts.begin(), starts.end()), starts.end());
    return starts;
}

/*
 * Breadth-first closure from the start configurations. Each jump removes
 * one peg, so with equal-sized starts the frontier at depth k holds exactly
 * the reachable states with k fewer pegs and only needs deduplication within
 * itself; a final sort-unique pass covers mixed-size starts and fixes the
 * canonical order.
 */
inline EnumeratedTask enumerate_reachable(const Board& board, std::size_t cap = default_state_cap)
{
    std::vector<occupancy_t> frontier = sorted_starts(board);
    std::vector<occupancy_t> all = frontier;
    std::vector<occupancy_t> next;
    const int na = board.num_actions();
    while (!frontier.empty()) {
        next.clear();
        for (auto s : frontier)
            for (int a = 0; a < na; ++a)
                if (board.is_legal(s, a)) next.push_back(board.successor(s, a));
        std::sort(next.begin(), next.end());
        next.erase(std::unique(next.begin(), next.end()), next.end());
        if (all.size() + next.size() > cap)
            throw capacity_error("enumeration of '" + board.name() + "' exceeds the state cap of "
                                 + std::to_string(cap));
        all.insert(all.end(), next.begin(), next.end());
        frontier.swap(next);
    }
    std::vector<occupancy_t>().swap(next);
    std::vector<occupancy_t>().swap(frontier);
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    return EnumeratedTask(board, std::move(all));
}

// Independent depth-first enumerator used to cross-check the BFS closure.
inline std::vector<occupancy_t> enumerate_reachable_dfs(const Board& board, std::size_t cap = 1'000'000)
{
    std::unordered_set<occupancy_t> seen(board.initial_states().begin(), board.initial_states().end());
    std::vector<occupancy_t> stack(seen.begin(), seen.end());
    while (!stack.empty()) {
        const auto s = stack.back();
        stack.pop_back();
        for (const auto& m : board.actions()) {
            const bool from = s >> m.from_bit & 1, over = s >> m.over_bit & 1, to = s >> m.to_bit & 1;
            if (!from || !over || to) continue;
            occupancy_t n = s;
            n &= ~(occupancy_t{1} << m.from_bit);
            n &= ~(occupancy_t{1} << m.over_bit);
            n |= occupancy_t{1} << m.to_bit;
            if (seen.insert(n).second) {
                if (seen.size() > cap)
                    throw capacity_error("DFS enumeration of '" + board.name() + "' exceeds its cap");
                stack.push_back(n);
            }
        }
    }
    std::vector<occupancy_t> out(seen.begin(), seen.end());
    std::sort(out.begin(), out.end());
    return out;
}

/*
 * Explicit CSR transition table over legal (state, action) pairs.
 * This is the O(|S| |A_s|) structure the tabular solvers need.
 */
struct TransitionTable
{
    std::vector<std::size_t> offsets;  // size |S| + 1
    std::vector<int> action;
    std::vector<std::uint32_t> next;
    std::vector<double> reward;
    std::vector<std::uint8_t> terminal;
    std::vector<std::uint8_t> solved;
    double discount = 1.0;

    std::size_t num_states() const { return terminal.size(); }
    std::size_t begin(std::size_t s) const { return offsets[s]; }
    std::size_t end(std::size_t s) const { return offsets[s + 1]; }
    std::size_t degree(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
};

inline constexpr std::size_t tabular_state_cap = 1'000'000;

inline TransitionTable build_transitions(const EnumeratedTask& task, std::size_t cap = tabular_state_cap)
{
    if (task.size() > cap)
        throw capacity_error("task '" + task.board().name() + "' has " + std::to_string(task.size())
                             + " states; tabular methods are capped at " + std::to_string(cap));
    const auto& board = task.board();
    TransitionTable t;
    t.discount = task.discount();
    t.offsets.reserve(task.size() + 1);
    t.offsets.push_back(0);
    t.terminal.resize(task.size());
    t.solved.resize(task.size());
    for (std::size_t i = 0; i < task.size(); ++i) {
        const auto s = task.state(i);
        t.solved[i] = board.is_solved(s);
        for (int a = 0; a < board.num_actions(); ++a) {
            if (!board.is_legal(s, a)) continue;
            const auto n = board.successor(s, a);
            t.action.push_back(a);
            t.next.push_back(static_cast<std::uint32_t>(task.index_of(n)));
            t.reward.push_back(board.reward(n));
        }
        t.offsets.push_back(t.action.size());
        t.terminal[i] = t.solved[i] || t.offsets[i + 1] == t.offsets[i];
    }
    return t;
}

/*
 * N(s): number of legal move sequences from s to a solved state.
 * N(solved) = 1 (empty path), N(dead) = 0. States are visited in
 * increasing peg count so successors are always finished first.
 */
inline std::vector<std::uint64_t> solution_path_counts(const EnumeratedTask& task,
                                                       std::size_t cap = tabular_state_cap)
{
    const auto table = build_transitions(task, cap);
    std::vector<std::size_t> order(task.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::popcount(task.state(a)) < std::popcount(task.state(b));
    });
    std::vector<std::uint64_t> n(task.size(), 0);
    for (auto s : order) {
        if (table.solved[s]) {
            n[s] = 1;
            continue;
        }
        std::uint64_t total = 0;
        for (auto k = table.begin(s); k < table.end(s); ++k)
            if (__builtin_add_overflow(total, n[table.next[k]], &total))
                throw capacity_error("solution path count overflows 64 bits");
        n[s] = total;
    }
    return n;
}

inline std::uint64_t count_solution_paths(const EnumeratedTask& task, occupancy_t s,
                                          std::size_t cap = tabular_state_cap)
{
    const auto idx = task.index_of(s);
    return solution_path_counts(task, cap)[idx];
}

// Moves from a start configuration to the nearest solved state; nullopt if unsolvable.
inline std::optional<int> shortest_solution_length(const EnumeratedTask& task)
{
    const auto& board = task.board();
    std::vector<occupancy_t> frontier = sorted_starts(board), next;
    for (int depth = 0; !frontier.empty(); ++depth) {
        for (auto s : frontier)
            if (board.is_solved(s)) return depth;
        next.clear();
        for (auto s : frontier)
            for (int a = 0; a < board.num_actions(); ++a)
                if (board.is_legal(s, a)) next.push_back(board.successor(s, a));
        std::sort(next.begin(), next.end());
        next.erase(std::unique(next.begin(), next.end()), next.end());
        frontier.swap(next);
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Symmetry classes and calibration
// ---------------------------------------------------------------------------

/*
 * Bit permutations induced by the rotations and reflections of the board's
 * bounding box that map the mask (and goal cell) onto itself. Each is stored
 * as per-byte lookup tables. The identity is always first.
 */
class SymmetryGroup
{
public:
    explicit SymmetryGroup(const Board& board)
    {
        const auto& spec = board.spec();
        const int R = spec.rows(), C = spec.cols();
        const int n = board.num_cells();
        bytes_ = (n + 7) / 8;
        for (int k = 0; k < 8; ++k) {
            if (k % 2 == 1 && R != C) continue;
            std::vector<int> perm(n);
            bool ok = true;
            for (int i = 0; i < n && ok; ++i) {
                const auto c = board.cells()[i];
                const auto t = transform(k, c, R, C);
                if (!spec.playable(t)) ok = false;
                else perm[i] = board.bit(t);
            }
            if (ok && spec.goal.kind == GoalKind::single_peg_at_cell)
                ok = transform(k, spec.goal.cell, R, C) == spec.goal.cell;
            if (!ok) continue;
            std::vector<std::array<occupancy_t, 256>> tables(bytes_);
            for (int b = 0; b < bytes_; ++b)
                for (int v = 0; v < 256; ++v) {
                    occupancy_t o = 0;
                    for (int j = 0; j < 8; ++j)
                        if ((v >> j & 1) && b * 8 + j < n) o |= occupancy_t{1} << perm[b * 8 + j];
                    tables[b][v] = o;
                }
            tables_.push_back(std::move(tables));
        }
    }

    std::size_t size() const { return tables_.size(); }

    occupancy_t apply(std::size_t g, occupancy_t s) const
    {
        occupancy_t o = 0;
        for (int b = 0; b < bytes_; ++b) o |= tables_[g][b][(s >> (8 * b)) & 0xff];
        return o;
    }

    // Smallest bitmask in the orbit of s.
    occupancy_t canonical(occupancy_t s) const
    {
        occupancy_t best = s;
        for (std::size_t g = 1; g < tables_.size(); ++g) best = std::min(best, apply(g, s));
        return best;
    }

private:
    // k: 0 identity, 1 rot90, 2 rot180, 3 rot270, 4 flip cols, 5 flip rows, 6 transpose, 7 anti-transpose.
    static Cell transform(int k, Cell c, int R, int C)
    {
        const int r = c.row, q = c.col, mr = R - 1, mc = C - 1;
        switch (k) {
        case 0: return {r, q};
        case 1: return {q, mr - r};
        case 2: return {mr - r, mc - q};
        case 3: return {mc - q, r};
        case 4: return {r, mc - q};
        case 5: return {mr - r, q};
        case 6: return {q, r};
        default: return {mc - q, mr - r};
        }
    }

    int bytes_ = 0;
    std::vector<std::vector<std::array<occupancy_t, 256>>> tables_;
};

// Canonical representatives of the reachable symmetry classes, sorted.
inline std::vector<occupancy_t> enumerate_reachable_classes(const Board& board, std::size_t cap = default_state_cap)
{
    const SymmetryGroup group(board);
    std::vector<occupancy_t> frontier;
    for (auto s : board.initial_states()) frontier.push_back(group.canonical(s));
    std::sort(frontier.begin(), frontier.end());
    frontier.erase(std::unique(frontier.begin(), frontier.end()), frontier.end());
    std::vector<occupancy_t> all = frontier, next;
    const int na = board.num_actions();
    while (!frontier.empty()) {
        next.clear();
        for (auto s : frontier)
            for (int a = 0; a < na; ++a)
                if (board.is_legal(s, a)) next.push_back(group.canonical(board.successor(s, a)));
        std::sort(next.begin(), next.end());
        next.erase(std::unique(next.begin(), next.end()), next.end());
        if (all.size() + next.size() > cap)
            throw capacity_error("class enumeration of '" + board.name() + "' exceeds the state cap of "
                                 + std::to_string(cap));
        all.insert(all.end(), next.begin(), next.end());
        frontier.swap(next);
    }
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    return all;
}

// Solution length from the start set by breadth-first search over symmetry classes.
inline std::optional<int> shortest_solution_length_classes(const Board& board)
{
    const SymmetryGroup group(board);
    std::vector<occupancy_t> frontier, next;
    for (auto s : board.initial_states()) frontier.push_back(group.canonical(s));
    std::sort(frontier.begin(), frontier.end());
    frontier.erase(std::unique(frontier.begin(), frontier.end()), frontier.end());
    for (int depth = 0; !frontier.empty(); ++depth) {
        for (auto s : frontier)
            if (board.is_solved(s)) return depth;
        next.clear();
        for (auto s : frontier)
            for (int a = 0; a < board.num_actions(); ++a)
                if (board.is_legal(s, a)) next.push_back(group.canonical(board.successor(s, a)));
        std::sort(next.begin(), next.end());
        next.erase(std::unique(next.begin(), next.end()), next.end());
        frontier.swap(next);
    }
    return std::nullopt;
}

struct CalibrationResult
{
    std::string board;
    std::size_t states = 0;
    int actions = 0;
    std::optional<int> solution_length;
    bool symmetry_classes = false;
    std::optional<bool> dual_agreement;  // unset when the DFS cross-check is skipped
    std::optional<ExpectedCounts> expected;

    bool states_match() const { return expected && static_cast<std::int64_t>(states) == expected->states; }
    bool actions_match() const { return expected && actions == expected->actions; }
    bool length_match() const { return expected && solution_length && *solution_length == expected->solution_length; }
    bool matches() const { return states_match() && actions_match() && length_match(); }
};

/*
 * Counts used for calibration. Boards flagged count_symmetry_classes are
 * counted up to symmetry; the DFS cross-check runs on raw enumerations up to
 * dual_cap states.
 */
inline CalibrationResult calibrate(const Board& board, std::size_t cap = default_state_cap,
                                   std::size_t dual_cap = 1'000'000)
{
    CalibrationResult out;
    out.board = board.name();
    out.actions = board.num_actions();
    out.expected = board.spec().expected;
    out.symmetry_classes = board.spec().count_symmetry_classes;
    if (out.symmetry_classes) {
        out.states = enumerate_reachable_classes(board, cap).size();
        out.solution_length = shortest_solution_length_classes(board);
        return out;
    }
    const auto task = enumerate_reachable(board, cap);
    out.states = task.size();
    out.solution_length = shortest_solution_length(task);
    if (task.size() <= dual_cap) {
        const auto dfs = enumerate_reachable_dfs(board, dual_cap);
        out.dual_agreement = std::equal(dfs.begin(), dfs.end(), task.states().begin(), task.states().end());
    }
    return out;
}

} // namespace rlmm
