#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>
#include <json.hpp>
#include <rlmm/board.hpp>
#include <rlmm/error.hpp>

namespace rlmm {

inline constexpr const char* dataset_schema = "rlmm-trajectories";
inline constexpr int dataset_schema_version = 1;

struct TrajectoryRecord
{
    std::string person_id;
    std::string episode_id;
    int t = 0;
    occupancy_t state = 0;
    int action = 0;
    double reward = 0.0;
    occupancy_t next_state = 0;
    bool terminal = false;

    friend bool operator==(const TrajectoryRecord&, const TrajectoryRecord&) = default;
};

inline bool canonical_less(const TrajectoryRecord& a, const TrajectoryRecord& b)
{
    return std::tie(a.person_id, a.episode_id, a.t) < std::tie(b.person_id, b.episode_id, b.t);
}

struct Dataset
{
    std::string board;
    std::vector<TrajectoryRecord> records;
    // Simulation ground truth, keyed by person id. Empty for observed logs.
    std::map<std::string, double> true_beta;

    bool empty() const { return records.empty(); }
    std::size_t size() const { return records.size(); }
};

struct EpisodeView
{
    std::string_view person_id;
    std::string_view episode_id;
    std::span<const TrajectoryRecord> steps;
};

// Episodes in canonical order. Requires canonical record order.
inline std::vector<EpisodeView> episodes(const Dataset& d)
{
    std::vector<EpisodeView> out;
    std::size_t i = 0;
    while (i < d.records.size()) {
        std::size_t j = i + 1;
        while (j < d.records.size() && d.records[j].person_id == d.records[i].person_id
               && d.records[j].episode_id == d.records[i].episode_id)
            ++j;
        out.push_back({d.records[i].person_id, d.records[i].episode_id,
                       std::span<const TrajectoryRecord>(d.records.data() + i, j - i)});
        i = j;
    }
    return out;
}

// Distinct person ids in canonical order.
inline std::vector<std::string> person_ids(const Dataset& d)
{
    std::vector<std::string> out;
    for (const auto& r : d.records)
        if (out.empty() || out.back() != r.person_id) out.push_back(r.person_id);
    return out;
}

inline void canonicalize(Dataset& d)
{
    std::stable_sort(d.records.begin(), d.records.end(), canonical_less);
}

/*
 * Checks the record invariants on a canonically ordered dataset and returns
 * the indices of offending records: duplicate (person, episode, t), gaps in
 * t, terminal flags anywhere but the last step.
 */
inline std::vector<std::size_t> invariant_violations(const Dataset& d)
{
    std::vector<std::size_t> bad;
    for (const auto& ep : episodes(d)) {
        const std::size_t base = static_cast<std::size_t>(ep.steps.data() - d.records.data());
        for (std::size_t k = 0; k < ep.steps.size(); ++k) {
            const auto& r = ep.steps[k];
            const bool last = k + 1 == ep.steps.size();
            if (r.t != static_cast<int>(k) || (r.terminal && !last)) bad.push_back(base + k);
        }
    }
    return bad;
}

namespace detail {

inline std::string hex64(occupancy_t s)
{
    char buf[24];
    std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(s));
    return buf;
}

inline occupancy_t parse_hex64(const std::string& text)
{
    std::size_t pos = 0;
    const std::string body = text.rfind("0x", 0) == 0 ? text.substr(2) : text;
    if (body.empty() || body.size() > 16) throw schema_error("bad state bitmask '" + text + "'");
    const auto value = std::stoull(body, &pos, 16);
    if (pos != body.size()) throw schema_error("bad state bitmask '" + text + "'");
    return value;
}

inline std::string record_line(const TrajectoryRecord& r)
{
    nlohmann::ordered_json j;
    j["person"] = r.person_id;
    j["episode"] = r.episode_id;
    j["t"] = r.t;
    j["state"] = hex64(r.state);
    j["action"] = r.action;
    j["reward"] = r.reward;
    j["next_state"] = hex64(r.next_state);
    j["terminal"] = r.terminal;
    return j.dump();
}

inline std::string header_line(const std::string& board)
{
    nlohmann::ordered_json j;
    j["schema"] = dataset_schema;
    j["version"] = dataset_schema_version;
    j["board"] = board;
    return j.dump();
}

} // namespace detail

// Canonical text form: header line, then one record per line in canonical order.
inline std::string serialize(const Dataset& d)
{
    std::vector<const TrajectoryRecord*> order;
    order.reserve(d.records.size());
    for (const auto& r : d.records) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return canonical_less(*a, *b); });
    std::string out = detail::header_line(d.board) + '\n';
    for (const auto* r : order) {
        out += detail::record_line(*r);
        out += '\n';
    }
    return out;
}

// FNV-1a over the canonical serialization, as 16 hex digits.
inline std::string fingerprint(const Dataset& d)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : serialize(d)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void save_dataset(const Dataset& d, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset '" + path + "'");
    out << serialize(d);
}

inline Dataset parse_dataset(std::istream& in, const std::string& source = "<stream>")
{
    Dataset d;
    std::vector<std::size_t> bad_lines;
    std::vector<std::size_t> record_line_no;
    std::string first_error;
    auto fail = [&](std::size_t line_no, const std::string& why) {
        if (first_error.empty()) first_error = why;
        bad_lines.push_back(line_no);
    };

    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            fail(line_no, "line " + std::to_string(line_no) + " is not valid JSON");
            continue;
        }
        if (!have_header) {
            have_header = true;
            if (!j.is_object() || j.value("schema", std::string()) != dataset_schema
                || j.value("version", 0) != dataset_schema_version) {
                fail(line_no, "missing or unsupported header line");
                continue;
            }
            d.board = j.value("board", std::string());
            continue;
        }
        try {
            TrajectoryRecord r;
            r.person_id = j.at("person").get<std::string>();
            r.episode_id = j.at("episode").get<std::string>();
            r.t = j.at("t").get<int>();
            r.state = detail::parse_hex64(j.at("state").get<std::string>());
            r.action = j.at("action").get<int>();
            r.reward = j.at("reward").get<double>();
            r.next_state = detail::parse_hex64(j.at("next_state").get<std::string>());
            r.terminal = j.at("terminal").get<bool>();
            if (r.t < 0 || r.action < 0 || !std::isfinite(r.reward)) throw schema_error("field out of range");
            d.records.push_back(std::move(r));
            record_line_no.push_back(line_no);
        } catch (const std::exception& e) {
            fail(line_no, "line " + std::to_string(line_no) + ": " + e.what());
        }
    }

    if (bad_lines.empty()) {
        // Sort a permutation so violations can be reported by source line.
        std::vector<std::size_t> perm(d.records.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        std::stable_sort(perm.begin(), perm.end(),
                         [&](std::size_t a, std::size_t b) { return canonical_less(d.records[a], d.records[b]); });
        Dataset sorted{d.board, {}, {}};
        sorted.records.reserve(d.records.size());
        for (auto i : perm) sorted.records.push_back(d.records[i]);
        for (std::size_t k = 1; k < sorted.records.size(); ++k) {
            const auto& a = sorted.records[k - 1];
            const auto& b = sorted.records[k];
            if (a.person_id == b.person_id && a.episode_id == b.episode_id && a.t == b.t)
                fail(record_line_no[perm[k]], "duplicate (person, episode, t) at line "
                                                  + std::to_string(record_line_no[perm[k]]));
        }
        if (bad_lines.empty())
            for (auto k : invariant_violations(sorted))
                fail(record_line_no[perm[k]], "episode step invariant violated at line "
                                                  + std::to_string(record_line_no[perm[k]]));
        d.records = std::move(sorted.records);
    }

    if (!bad_lines.empty()) {
        std::sort(bad_lines.begin(), bad_lines.end());
        bad_lines.erase(std::unique(bad_lines.begin(), bad_lines.end()), bad_lines.end());
        if (bad_lines.size() > 10) bad_lines.resize(10);
        std::string msg = source + ": " + first_error + " (offending lines:";
        for (auto l : bad_lines) msg += " " + std::to_string(l);
        msg += ")";
        throw schema_error(msg, bad_lines);
    }
    return d;
}

inline Dataset load_dataset(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw lookup_error("cannot open dataset '" + path + "'");
    return parse_dataset(in, path);
}

// Truths sidecar: person_id,true_beta
inline void save_truths(const Dataset& d, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write truths file '" + path + "'");
    out << "person_id,true_beta\n";
    char buf[64];
    for (const auto& [id, beta] : d.true_beta) {
        std::snprintf(buf, sizeof buf, "%.17g", beta);
        out << id << ',' << buf << '\n';
    }
}

inline std::map<std::string, double> load_truths(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw lookup_error("cannot open truths file '" + path + "'");
    std::map<std::string, double> out;
    std::string line;
    std::getline(in, line);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw schema_error("truths line " + std::to_string(line_no) + " malformed");
        out[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
    }
    return out;
}

// Mean undiscounted return per episode, by person.
inline std::map<std::string, double> person_mean_return(const Dataset& d)
{
    std::map<std::string, double> sum;
    std::map<std::string, std::size_t> n;
    for (const auto& ep : episodes(d)) {
        double g = 0.0;
        for (const auto& r : ep.steps) g += r.reward;
        sum[std::string(ep.person_id)] += g;
        ++n[std::string(ep.person_id)];
    }
    for (auto& [id, v] : sum) v /= static_cast<double>(n[id]);
    return sum;
}

// ---------------------------------------------------------------------------
// Ingestion filters
// ---------------------------------------------------------------------------

struct FilterReport
{
    std::size_t kept = 0;
    std::size_t dropped = 0;
};

/*
 * Keeps step t when the cumulative reward moves by at least delta_min
 * (|cum(t) - cum(t-1)| >= delta_min), plus each episode's first and last
 * step. Cumulative reward comes from the record stream itself.
 */
inline Dataset filter_steps(const Dataset& d, double delta_min, FilterReport* report = nullptr)
{
    Dataset out{d.board, {}, d.true_beta};
    FilterReport rep;
    for (const auto& ep : episodes(d)) {
        double cum_prev = 0.0, cum = 0.0;
        int t_new = 0;
        for (std::size_t k = 0; k < ep.steps.size(); ++k) {
            cum_prev = cum;
            cum += ep.steps[k].reward;
            const bool edge = k == 0 || k + 1 == ep.steps.size();
            if (edge || std::abs(cum - cum_prev) >= delta_min) {
                auto r = ep.steps[k];
                r.t = t_new++;
                out.records.push_back(std::move(r));
                ++rep.kept;
            } else {
                ++rep.dropped;
            }
        }
    }
    if (report) *report = rep;
    return out;
}

inline constexpr std::size_t default_long_episode_cap = 200;

/*
 * Episodes longer than long_cap keep their trailing ceil(tail_fraction * len)
 * steps, clamped to long_cap; episodes whose resulting length is below
 * min_len are dropped. The clamp makes a second application a no-op.
 */
inline Dataset filter_episodes(const Dataset& d, std::size_t min_len, double tail_fraction,
                               std::size_t long_cap = default_long_episode_cap,
                               FilterReport* report = nullptr)
{
    if (!(tail_fraction > 0.0 && tail_fraction <= 1.0))
        throw precondition_error("tail_fraction must lie in (0, 1]");
    Dataset out{d.board, {}, d.true_beta};
    FilterReport rep;
    for (const auto& ep : episodes(d)) {
        std::size_t keep = ep.steps.size();
        if (keep > long_cap) {
            keep = static_cast<std::size_t>(std::ceil(tail_fraction * static_cast<double>(keep) - 1e-12));
            keep = std::min(keep, long_cap);
        }
        if (keep < min_len) {
            rep.dropped += ep.steps.size();
            continue;
        }
        const std::size_t first = ep.steps.size() - keep;
        for (std::size_t k = first; k < ep.steps.size(); ++k) {
            auto r = ep.steps[k];
            r.t = static_cast<int>(k - first);
            out.records.push_back(std::move(r));
        }
        rep.kept += keep;
        rep.dropped += first;
    }
    if (report) *report = rep;
    return out;
}

} // namespace rlmm
