#pragma once
#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>
#include <rlmm/error.hpp>

namespace rlmm {

// One bit per playable cell, row-major over the playable cells of a board.
using occupancy_t = std::uint64_t;

struct Cell
{
    int row = 0;
    int col = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
    friend auto operator<=>(const Cell&, const Cell&) = default;
};

enum class GoalKind { single_peg_anywhere, single_peg_at_cell };

struct Goal
{
    GoalKind kind = GoalKind::single_peg_anywhere;
    Cell cell{};  // used by single_peg_at_cell
    friend bool operator==(const Goal&, const Goal&) = default;
};

/*
 * Terminal-goal reward: R(s,a,s') = solved if s' satisfies the goal,
 * dead if s' is terminal without satisfying it, step otherwise.
 */
struct RewardSpec
{
    double solved = 1.0;
    double dead = -1.0;
    double step = 0.0;
    friend bool operator==(const RewardSpec&, const RewardSpec&) = default;
};

// Reference counts a board is calibrated against.
struct ExpectedCounts
{
    std::int64_t states = 0;
    std::int64_t actions = 0;
    int solution_length = 0;
    friend bool operator==(const ExpectedCounts&, const ExpectedCounts&) = default;
};

struct BoardSpec
{
    std::string name;
    // '#' playable, '.' not playable; all rows the same width.
    std::vector<std::string> mask;
    // Empty cells of each start configuration; every other playable cell holds a peg.
    // The first entry is the primary start.
    std::vector<std::vector<Cell>> initial_empty;
    Goal goal;
    double discount = 0.95;
    RewardSpec reward;
    std::optional<ExpectedCounts> expected;
    // Calibration counts states up to the board's symmetries instead of raw bitmasks.
    bool count_symmetry_classes = false;

    int rows() const { return static_cast<int>(mask.size()); }
    int cols() const { return mask.empty() ? 0 : static_cast<int>(mask.front().size()); }

    bool playable(Cell c) const
    {
        return c.row >= 0 && c.row < rows() && c.col >= 0 && c.col < cols()
            && mask[c.row][c.col] == '#';
    }

    std::vector<Cell> initial_pegs(std::size_t start = 0) const
    {
        std::vector<Cell> pegs;
        const auto& empty = initial_empty.at(start);
        for (int r = 0; r < rows(); ++r)
            for (int c = 0; c < cols(); ++c)
                if (mask[r][c] == '#' && std::find(empty.begin(), empty.end(), Cell{r, c}) == empty.end())
                    pegs.push_back({r, c});
        return pegs;
    }

    friend bool operator==(const BoardSpec&, const BoardSpec&) = default;
};

inline int playable_cell_count(const BoardSpec& spec)
{
    int n = 0;
    for (const auto& row : spec.mask) n += static_cast<int>(std::count(row.begin(), row.end(), '#'));
    return n;
}

inline void validate(const BoardSpec& spec)
{
    if (spec.mask.empty()) throw precondition_error("board '" + spec.name + "': empty mask");
    for (const auto& row : spec.mask) {
        if (static_cast<int>(row.size()) != spec.cols())
            throw precondition_error("board '" + spec.name + "': ragged mask rows");
        for (char ch : row)
            if (ch != '#' && ch != '.')
                throw precondition_error("board '" + spec.name + "': mask characters must be '#' or '.'");
    }
    const int n = playable_cell_count(spec);
    if (n < 4) throw precondition_error("board '" + spec.name + "': fewer than 4 playable cells");
    if (n > 64) throw capacity_error("board '" + spec.name + "': more than 64 playable cells");
    if (spec.initial_empty.empty())
        throw precondition_error("board '" + spec.name + "': no start configuration");
    for (auto empty : spec.initial_empty) {
        if (empty.empty())
            throw precondition_error("board '" + spec.name + "': no empty playable cell at start");
        std::sort(empty.begin(), empty.end());
        if (std::adjacent_find(empty.begin(), empty.end()) != empty.end())
            throw precondition_error("board '" + spec.name + "': duplicate initial empty cell");
        for (const auto& c : empty)
            if (!spec.playable(c))
                throw precondition_error("board '" + spec.name + "': initial empty cell outside mask at ("
                                         + std::to_string(c.row) + "," + std::to_string(c.col) + ")");
    }
    if (spec.goal.kind == GoalKind::single_peg_at_cell && !spec.playable(spec.goal.cell))
        throw precondition_error("board '" + spec.name + "': goal cell outside mask");
    if (!(spec.discount >= 0.0 && spec.discount <= 1.0))
        throw precondition_error("board '" + spec.name + "': discount outside [0,1]");
}

struct MoveAction
{
    Cell from, over, to;
    int from_bit = 0, over_bit = 0, to_bit = 0;
    int global_id = 0;
};

/*
 * Compiled board geometry. Everything here works on raw occupancy bitmasks,
 * so it never needs the enumerated state table.
 */
class Board
{
public:
    explicit Board(BoardSpec spec)
        : spec_(std::move(spec))
    {
        validate(spec_);
        bit_of_.assign(static_cast<std::size_t>(spec_.rows() * spec_.cols()), -1);
        for (int r = 0; r < spec_.rows(); ++r)
            for (int c = 0; c < spec_.cols(); ++c)
                if (spec_.mask[r][c] == '#') {
                    bit_of_[r * spec_.cols() + c] = static_cast<int>(cells_.size());
                    cells_.push_back({r, c});
                }

        constexpr std::array<std::array<int, 2>, 4> dirs{{{0, 1}, {1, 0}, {0, -1}, {-1, 0}}};
        for (const auto& from : cells_)
            for (const auto& d : dirs) {
                const Cell over{from.row + d[0], from.col + d[1]};
                const Cell to{from.row + 2 * d[0], from.col + 2 * d[1]};
                if (!spec_.playable(over) || !spec_.playable(to)) continue;
                MoveAction a{from, over, to, bit(from), bit(over), bit(to),
                             static_cast<int>(actions_.size())};
                actions_.push_back(a);
                need_.push_back((occupancy_t{1} << a.from_bit) | (occupancy_t{1} << a.over_bit));
                target_.push_back(occupancy_t{1} << a.to_bit);
            }

        for (const auto& empty : spec_.initial_empty) {
            occupancy_t s = full_mask();
            for (const auto& c : empty) s &= ~(occupancy_t{1} << bit(c));
            initial_.push_back(s);
        }
        if (spec_.goal.kind == GoalKind::single_peg_at_cell)
            goal_mask_ = occupancy_t{1} << bit(spec_.goal.cell);
    }

    const BoardSpec& spec() const { return spec_; }
    const std::string& name() const { return spec_.name; }
    double discount() const { return spec_.discount; }
    int num_cells() const { return static_cast<int>(cells_.size()); }
    int num_actions() const { return static_cast<int>(actions_.size()); }
    std::span<const Cell> cells() const { return cells_; }
    std::span<const MoveAction> actions() const { return actions_; }
    const MoveAction& action(int id) const
    {
        if (id < 0 || id >= num_actions()) throw lookup_error("unknown action id " + std::to_string(id));
        return actions_[id];
    }
    occupancy_t initial_state() const { return initial_.front(); }
    std::span<const occupancy_t> initial_states() const { return initial_; }
    occupancy_t full_mask() const
    {
        return num_cells() == 64 ? ~occupancy_t{0} : (occupancy_t{1} << num_cells()) - 1;
    }

    int bit(Cell c) const
    {
        if (!spec_.playable(c))
            throw lookup_error("cell (" + std::to_string(c.row) + "," + std::to_string(c.col) + ") not playable");
        return bit_of_[c.row * spec_.cols() + c.col];
    }

    bool valid_state(occupancy_t s) const { return (s & ~full_mask()) == 0; }

    bool is_legal(occupancy_t s, int a) const
    {
        return (s & need_[a]) == need_[a] && (s & target_[a]) == 0;
    }

    // Legal action ids at s, ascending.
    std::vector<int> legal_actions(occupancy_t s) const
    {
        std::vector<int> out;
        legal_actions(s, out);
        return out;
    }

    void legal_actions(occupancy_t s, std::vector<int>& out) const
    {
        out.clear();
        for (int a = 0; a < num_actions(); ++a)
            if (is_legal(s, a)) out.push_back(a);
    }

    bool has_legal_action(occupancy_t s) const
    {
        for (int a = 0; a < num_actions(); ++a)
            if (is_legal(s, a)) return true;
        return false;
    }

    // Successor without legality checks.
    occupancy_t successor(occupancy_t s, int a) const { return (s & ~need_[a]) | target_[a]; }

    occupancy_t apply(occupancy_t s, int a) const
    {
        const auto& m = action(a);
        if (!(s >> m.from_bit & 1)) throw precondition_error("illegal move " + describe(a) + ": from-cell is empty");
        if (!(s >> m.over_bit & 1)) throw precondition_error("illegal move " + describe(a) + ": jumped cell is empty");
        if (s >> m.to_bit & 1) throw precondition_error("illegal move " + describe(a) + ": landing cell is occupied");
        return successor(s, a);
    }

    bool is_solved(occupancy_t s) const
    {
        if (spec_.goal.kind == GoalKind::single_peg_at_cell) return s == goal_mask_;
        return std::popcount(s) == 1;
    }

    bool is_terminal(occupancy_t s) const { return is_solved(s) || !has_legal_action(s); }

    double reward(occupancy_t next) const
    {
        if (is_solved(next)) return spec_.reward.solved;
        if (!has_legal_action(next)) return spec_.reward.dead;
        return spec_.reward.step;
    }

    std::string describe(int a) const
    {
        const auto& m = actions_[a];
        auto cell = [](Cell c) { return "(" + std::to_string(c.row) + "," + std::to_string(c.col) + ")"; };
        return cell(m.from) + "->" + cell(m.over) + "->" + cell(m.to);
    }

    /*
     * Feature layout: one 0/1 occupancy indicator per playable cell,
     * then pegs/cells and empties/cells.
     */
    int feature_dim() const { return num_cells() + 2; }

    void features(occupancy_t s, std::span<double> out) const
    {
        if (static_cast<int>(out.size()) != feature_dim())
            throw precondition_error("feature buffer has wrong length");
        const int n = num_cells();
        for (int i = 0; i < n; ++i) out[i] = static_cast<double>(s >> i & 1);
        const double pegs = std::popcount(s);
        out[n] = pegs / n;
        out[n + 1] = (n - pegs) / n;
    }

    std::vector<double> features(occupancy_t s) const
    {
        std::vector<double> out(feature_dim());
        features(s, out);
        return out;
    }

private:
    BoardSpec spec_;
    std::vector<int> bit_of_;
    std::vector<Cell> cells_;
    std::vector<MoveAction> actions_;
    std::vector<occupancy_t> need_, target_;
    std::vector<occupancy_t> initial_;
    occupancy_t goal_mask_ = 0;
};

} // namespace rlmm
