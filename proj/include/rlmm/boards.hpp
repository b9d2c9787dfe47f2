#pragma once
#include <fstream>
#include <sstream>
#include <string>
#include <vector>
#include <json.hpp>
#include <rlmm/board.hpp>

namespace rlmm {

namespace detail {

inline std::vector<std::vector<Cell>> single_start(std::vector<Cell> empty) { return {std::move(empty)}; }

} // namespace detail

inline BoardSpec line5_board()
{
    BoardSpec b;
    b.name = "line-5";
    b.mask = {"#####"};
    b.initial_empty = detail::single_start({{0, 2}});
    return b;
}

inline BoardSpec tiny_cross_board()
{
    BoardSpec b;
    b.name = "tiny-cross";
    b.mask = {
        "...#...",
        "#######",
        "...#...",
    };
    b.initial_empty = detail::single_start({{1, 0}, {1, 6}, {2, 3}});
    b.expected = ExpectedCounts{22, 12, 5};
    return b;
}

inline BoardSpec big_cross_board()
{
    BoardSpec b;
    b.name = "big-cross";
    b.mask = {
        ".###.",
        "#####",
        "#####",
        "..#..",
    };
    b.initial_empty = detail::single_start({{0, 3}, {1, 4}, {2, 0}, {2, 4}, {3, 2}});
    b.expected = ExpectedCounts{153, 22, 8};
    return b;
}

inline BoardSpec big_l_board()
{
    BoardSpec b;
    b.name = "big-L";
    b.mask = {
        "##....",
        "##....",
        "##....",
        "##....",
        "######",
        "#####.",
    };
    b.initial_empty = detail::single_start({{4, 0}, {4, 4}, {4, 5}, {5, 1}, {5, 4}});
    b.expected = ExpectedCounts{807, 30, 13};
    return b;
}

inline BoardSpec diamond_board()
{
    BoardSpec b;
    b.name = "diamond";
    b.mask = {
        "...#...",
        "..###..",
        ".#####.",
        "#######",
        "#######",
        ".#####.",
        "..###..",
    };
    b.initial_empty = detail::single_start({{0, 3}, {1, 2}, {1, 4}, {2, 1}, {2, 2}, {2, 5}, {3, 0}, {3, 1},
                                            {3, 2}, {3, 5}, {3, 6}, {4, 0}, {4, 1}, {4, 2}, {4, 6}, {5, 3},
                                            {6, 2}, {6, 3}, {6, 4}});
    b.expected = ExpectedCounts{5923, 70, 11};
    return b;
}

// Full 4x4 grid. The start set is every solvable single-empty position
// (the eight non-corner edge cells); the union of their closures is the task.
inline BoardSpec grid4x4_board()
{
    BoardSpec b;
    b.name = "grid-4x4";
    b.mask = {"####", "####", "####", "####"};
    b.initial_empty = {{{0, 1}}, {{0, 2}}, {{1, 0}}, {{1, 3}}, {{2, 0}}, {{2, 3}}, {{3, 1}}, {{3, 2}}};
    b.expected = ExpectedCounts{9336, 32, 14};
    return b;
}

// English 33-hole board, centre empty.
inline BoardSpec cross7x7_board()
{
    BoardSpec b;
    b.name = "cross-7x7";
    b.mask = {
        "..###..",
        "..###..",
        "#######",
        "#######",
        "#######",
        "..###..",
        "..###..",
    };
    b.initial_empty = detail::single_start({{3, 3}});
    b.expected = ExpectedCounts{23'475'688, 76, 23};
    b.count_symmetry_classes = true;
    return b;
}

inline std::vector<BoardSpec> builtin_boards()
{
    return {tiny_cross_board(), big_cross_board(), big_l_board(), diamond_board(),
            grid4x4_board(), cross7x7_board(), line5_board()};
}

inline BoardSpec builtin_board(const std::string& name)
{
    for (auto& b : builtin_boards())
        if (b.name == name) return b;
    throw lookup_error("unknown board '" + name + "'");
}

// ---------------------------------------------------------------------------
// Board data files (JSON)
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json board_to_json(const BoardSpec& b)
{
    nlohmann::ordered_json j;
    j["name"] = b.name;
    j["mask"] = b.mask;
    auto starts = nlohmann::ordered_json::array();
    for (const auto& empty : b.initial_empty) {
        auto cells = nlohmann::ordered_json::array();
        for (const auto& c : empty) cells.push_back({c.row, c.col});
        starts.push_back(cells);
    }
    j["initial_empty"] = starts;
    if (b.goal.kind == GoalKind::single_peg_anywhere) {
        j["goal"] = {{"kind", "single-peg-anywhere"}};
    } else {
        j["goal"] = {{"kind", "single-peg-at-cell"}, {"cell", {b.goal.cell.row, b.goal.cell.col}}};
    }
    j["discount"] = b.discount;
    j["reward"] = {{"rule", "terminal-goal"},
                   {"solved", b.reward.solved},
                   {"dead", b.reward.dead},
                   {"step", b.reward.step}};
    if (b.expected)
        j["expected"] = {{"states", b.expected->states},
                         {"actions", b.expected->actions},
                         {"solution_length", b.expected->solution_length}};
    if (b.count_symmetry_classes) j["state_count"] = "symmetry-classes";
    return j;
}

inline BoardSpec board_from_json(const nlohmann::json& j)
{
    auto cell = [](const nlohmann::json& c) {
        if (!c.is_array() || c.size() != 2) throw schema_error("board cell must be [row, col]");
        return Cell{c[0].get<int>(), c[1].get<int>()};
    };
    try {
        BoardSpec b;
        b.name = j.at("name").get<std::string>();
        b.mask = j.at("mask").get<std::vector<std::string>>();
        const auto& starts = j.at("initial_empty");
        if (!starts.is_array() || starts.empty()) throw schema_error("initial_empty must be a non-empty list");
        // A flat list of cells is accepted as a single start.
        if (starts.front().is_array() && !starts.front().empty() && starts.front().front().is_number()) {
            std::vector<Cell> empty;
            for (const auto& c : starts) empty.push_back(cell(c));
            b.initial_empty.push_back(std::move(empty));
        } else {
            for (const auto& s : starts) {
                std::vector<Cell> empty;
                for (const auto& c : s) empty.push_back(cell(c));
                b.initial_empty.push_back(std::move(empty));
            }
        }
        if (j.contains("goal")) {
            const auto kind = j["goal"].at("kind").get<std::string>();
            if (kind == "single-peg-anywhere") {
                b.goal.kind = GoalKind::single_peg_anywhere;
            } else if (kind == "single-peg-at-cell") {
                b.goal.kind = GoalKind::single_peg_at_cell;
                b.goal.cell = cell(j["goal"].at("cell"));
            } else {
                throw schema_error("unknown goal kind '" + kind + "'");
            }
        }
        b.discount = j.value("discount", 0.95);
        if (j.contains("reward")) {
            const auto& r = j["reward"];
            const auto rule = r.value("rule", std::string("terminal-goal"));
            if (rule != "terminal-goal") throw schema_error("unknown reward rule '" + rule + "'");
            b.reward.solved = r.value("solved", 1.0);
            b.reward.dead = r.value("dead", -1.0);
            b.reward.step = r.value("step", 0.0);
        }
        if (j.contains("expected")) {
            const auto& e = j["expected"];
            b.expected = ExpectedCounts{e.at("states").get<std::int64_t>(), e.at("actions").get<std::int64_t>(),
                                        e.at("solution_length").get<int>()};
        }
        const auto count = j.value("state_count", std::string("raw"));
        if (count != "raw" && count != "symmetry-classes") throw schema_error("unknown state_count '" + count + "'");
        b.count_symmetry_classes = count == "symmetry-classes";
        validate(b);
        return b;
    } catch (const nlohmann::json::exception& e) {
        throw schema_error(std::string("malformed board file: ") + e.what());
    }
}

inline BoardSpec load_board(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw lookup_error("cannot open board file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw schema_error("board file '" + path + "' is not valid JSON: " + e.what());
    }
    return board_from_json(j);
}

inline void save_board(const BoardSpec& b, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write board file '" + path + "'");
    out << board_to_json(b).dump(2) << '\n';
}

// Accepts a builtin name or a path to a board file.
inline BoardSpec resolve_board(const std::string& name_or_path)
{
    for (auto& b : builtin_boards())
        if (b.name == name_or_path) return b;
    return load_board(name_or_path);
}

} // namespace rlmm
