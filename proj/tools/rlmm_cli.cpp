// rlmm_cli: boards, simulation, RLMM and MDP-MM fits, influence diagnostics,
// benchmark and report tables. Every command writes manifest.json into --out.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <rlmm/boards.hpp>
#include <rlmm/csv.hpp>
#include <rlmm/dataset.hpp>
#include <rlmm/diagnostics.hpp>
#include <rlmm/enumerate.hpp>
#include <rlmm/estimator.hpp>
#include <rlmm/stats.hpp>
#include <rlmm/tabular.hpp>
#include <rlmm/value_model.hpp>

#ifndef RLMM_VERSION
#define RLMM_VERSION "0.1.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace rlmm;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_runtime = 1;
constexpr int exit_invalid = 2;

struct usage_error : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Options: defaults < config file < flags
// ---------------------------------------------------------------------------

enum class Kind { real, integer, text, flag, list };

struct OptSpec
{
    std::string name;
    Kind kind;
    json def;
    std::string help;
};

struct Command
{
    std::string name;
    std::string help;
    std::vector<OptSpec> opts;
    std::string positional;  // name of a positional list option, if any
    CLI::App* app = nullptr;
    std::map<std::string, std::string> raw;
    std::map<std::string, bool> flags;
    std::vector<std::string> pos;
    std::string config_path;
};

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

json convert(const OptSpec& o, const std::string& v)
{
    try {
        switch (o.kind) {
        case Kind::real: return std::stod(v);
        case Kind::integer: return std::stoll(v);
        case Kind::list: return split_list(v);
        default: return v;
        }
    } catch (const std::exception&) {
        throw usage_error("--" + o.name + ": cannot parse '" + v + "'");
    }
}

void check_type(const OptSpec& o, const json& v)
{
    if (v.is_null() && o.def.is_null()) return;
    bool ok = true;
    switch (o.kind) {
    case Kind::real: ok = v.is_number(); break;
    case Kind::integer: ok = v.is_number_integer(); break;
    case Kind::text: ok = v.is_string(); break;
    case Kind::flag: ok = v.is_boolean(); break;
    case Kind::list: ok = v.is_array(); break;
    }
    if (!ok) throw usage_error("config key '" + o.name + "' has the wrong type");
}

json defaults(const Command& c)
{
    json cfg = json::object();
    for (const auto& o : c.opts) cfg[o.name] = o.def;
    return cfg;
}

json overlay(const Command& c, json cfg, const json& file)
{
    for (auto it = file.begin(); it != file.end(); ++it) {
        auto spec = std::find_if(c.opts.begin(), c.opts.end(), [&](const OptSpec& o) { return o.name == it.key(); });
        if (spec == c.opts.end()) throw usage_error("unknown config key '" + it.key() + "' for " + c.name);
        check_type(*spec, it.value());
        cfg[it.key()] = it.value();
    }
    return cfg;
}

json resolve(const Command& c)
{
    json cfg = defaults(c);
    if (!c.config_path.empty()) {
        std::ifstream in(c.config_path);
        if (!in) throw usage_error("cannot open config file '" + c.config_path + "'");
        json file;
        try {
            in >> file;
        } catch (const json::exception& e) {
            throw usage_error("config file '" + c.config_path + "' is not valid JSON: " + e.what());
        }
        if (!file.is_object()) throw usage_error("config file must hold a JSON object");
        cfg = overlay(c, cfg, file);
    }
    for (const auto& o : c.opts) {
        const std::string flag = "--" + o.name;
        if (o.name == c.positional) {
            if (!c.pos.empty()) cfg[o.name] = c.pos;
            continue;
        }
        if (c.app->count(flag) == 0) continue;
        if (o.kind == Kind::flag) cfg[o.name] = c.flags.at(o.name);
        else cfg[o.name] = convert(o, c.raw.at(o.name));
    }
    return cfg;
}

void register_command(CLI::App& root, Command& c)
{
    c.app = root.add_subcommand(c.name, c.help);
    c.app->add_option("--config", c.config_path, "JSON config file; flags override its values");
    for (const auto& o : c.opts) {
        if (o.name == c.positional) {
            c.app->add_option(o.name, c.pos, o.help);
        } else if (o.kind == Kind::flag) {
            c.flags[o.name] = false;
            c.app->add_flag("--" + o.name, c.flags[o.name], o.help);
        } else {
            c.raw[o.name];
            c.app->add_option("--" + o.name, c.raw[o.name], o.help);
        }
    }
}

// Options shared by every command.
void add_common(std::vector<OptSpec>& opts, bool out_required = true)
{
    opts.push_back({"out", Kind::text, out_required ? json("") : json(nullptr), "output directory"});
    opts.push_back({"seed", Kind::integer, 0, "master seed"});
    opts.push_back({"deterministic", Kind::flag, false, "single-threaded, wall-time columns written as 0"});
    opts.push_back({"threads", Kind::integer, 1, "worker cap (runs are single-threaded)"});
}

void add_fit_options(std::vector<OptSpec>& opts)
{
    const FitConfig d;
    opts.push_back({"lambda-bell", Kind::real, d.lambda_bell, "Bellman penalty weight"});
    opts.push_back({"tau", Kind::real, d.tau, "soft-value temperature"});
    opts.push_back({"eta", Kind::real, d.eta, "learning rate"});
    opts.push_back({"batch-size", Kind::integer, d.batch_size, "mini-batch size"});
    opts.push_back({"m-sgd", Kind::integer, d.m_sgd, "gradient steps per outer iteration"});
    opts.push_back({"m-nr", Kind::integer, d.m_nr, "Newton steps per person per outer iteration"});
    opts.push_back({"k-outer", Kind::integer, d.k_outer, "outer iterations"});
    opts.push_back({"eps-scale", Kind::real, d.eps_scale, "constant inside the scale square root"});
    opts.push_back({"sigma2-floor", Kind::real, d.sigma2_floor, "population variance floor"});
    opts.push_back({"prior-mu", Kind::real, d.prior_init.mu, "initial prior mean of log beta"});
    opts.push_back({"prior-sigma2", Kind::real, d.prior_init.sigma2, "initial prior variance of log beta"});
    opts.push_back({"fixed-prior", Kind::flag, false, "keep the prior at its initial value"});
    opts.push_back({"prior-variance", Kind::text, "laplace", "population variance rule: laplace | moments"});
    opts.push_back({"kind", Kind::text, "two-layer", "value model: linear | two-layer"});
    opts.push_back({"hidden", Kind::integer, d.hidden, "hidden width of the two-layer model"});
    opts.push_back({"gamma", Kind::real, nullptr, "discount (board value when unset)"});
    opts.push_back({"features", Kind::text, "occupancy", "state features: occupancy | one-hot"});
    opts.push_back({"rel-tol-stop", Kind::real, 0.0, "relative objective change for early stop (0 = off)"});
}

FitConfig fit_config(const json& cfg)
{
    FitConfig f;
    f.lambda_bell = cfg["lambda-bell"].get<double>();
    f.tau = cfg["tau"].get<double>();
    f.eta = cfg["eta"].get<double>();
    const auto b = cfg["batch-size"].get<long long>();
    if (b < 1) throw usage_error("--batch-size must be >= 1");
    f.batch_size = static_cast<std::size_t>(b);
    f.m_sgd = static_cast<int>(cfg["m-sgd"].get<long long>());
    f.m_nr = static_cast<int>(cfg["m-nr"].get<long long>());
    f.k_outer = static_cast<int>(cfg["k-outer"].get<long long>());
    f.seed = cfg["seed"].get<std::uint64_t>();
    f.eps_scale = cfg["eps-scale"].get<double>();
    f.sigma2_floor = cfg["sigma2-floor"].get<double>();
    f.prior_init = {cfg["prior-mu"].get<double>(), cfg["prior-sigma2"].get<double>()};
    f.estimate_prior = !cfg["fixed-prior"].get<bool>();
    const auto pv = cfg["prior-variance"].get<std::string>();
    if (pv != "laplace" && pv != "moments") throw usage_error("--prior-variance must be laplace or moments");
    f.laplace_variance = pv == "laplace";
    f.kind = parse_model_kind(cfg["kind"].get<std::string>());
    f.hidden = static_cast<int>(cfg["hidden"].get<long long>());
    if (!cfg["gamma"].is_null()) f.gamma = cfg["gamma"].get<double>();
    f.rel_tol_stop = cfg["rel-tol-stop"].get<double>();
    f.validate();
    return f;
}

// ---------------------------------------------------------------------------
// Run bookkeeping
// ---------------------------------------------------------------------------

struct Run
{
    std::string command;
    json config;
    fs::path out;
    bool deterministic = false;
    json stage_times = json::object();
    json results = json::object();
    std::vector<std::string> outputs;
    std::string fingerprint;
    std::string board;

    void write(const std::string& name, const std::string& text)
    {
        write_text((out / name).string(), text);
        outputs.push_back(name);
    }

    void time(const std::string& stage, double seconds) { stage_times[stage] = seconds; }

    // Wall-time value as written into CSV columns.
    std::string csv_time(double seconds) const { return deterministic ? "0" : fmt_double(seconds); }

    void finish() const
    {
        json m;
        m["command"] = command;
        m["config"] = config;
        m["seed"] = config.value("seed", json(0));
        m["dataset_fingerprint"] = fingerprint;
        m["board"] = board;
        m["version"] = RLMM_VERSION;
        m["deterministic"] = deterministic;
        m["stage_times"] = stage_times;
        m["results"] = results;
        m["outputs"] = outputs;
        write_text((out / "manifest.json").string(), m.dump(2) + "\n");
    }
};

Run start_run(const std::string& command, const json& cfg, bool out_required = true)
{
    Run r;
    r.command = command;
    r.config = cfg;
    r.deterministic = cfg.value("deterministic", false);
    const auto& out = cfg["out"];
    if (out.is_null() || out.get<std::string>().empty()) {
        if (out_required) throw usage_error(command + ": --out is required");
        return r;
    }
    r.out = out.get<std::string>();
    fs::create_directories(r.out);
    return r;
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string text(const json& cfg, const std::string& key)
{
    const auto& v = cfg[key];
    return v.is_null() ? std::string() : v.get<std::string>();
}

std::string required(const json& cfg, const std::string& key)
{
    auto v = text(cfg, key);
    if (v.empty()) throw usage_error("--" + key + " is required");
    return v;
}

Board board_for(const json& cfg, const Dataset* data = nullptr)
{
    auto name = text(cfg, "board");
    if (name.empty() && data) name = data->board;
    if (name.empty()) throw usage_error("--board is required");
    return Board(resolve_board(name));
}

std::map<std::string, double> beta_map(const std::vector<PersonEstimate>& persons)
{
    std::map<std::string, double> out;
    for (const auto& p : persons) out[p.person_id] = p.beta_hat;
    return out;
}

std::optional<double> rmse_if(const std::map<std::string, double>& est, const std::map<std::string, double>& truth)
{
    if (truth.empty()) return std::nullopt;
    return rmse_log_beta(est, truth);
}

// Truths from --truths, else truths.csv beside the data file.
std::map<std::string, double> truths_for(const json& cfg, const Dataset& data)
{
    const auto path = text(cfg, "truths");
    if (!path.empty()) return load_truths(path);
    if (!data.true_beta.empty()) return data.true_beta;
    const auto side = fs::path(text(cfg, "data")).parent_path() / "truths.csv";
    if (fs::exists(side)) return load_truths(side.string());
    return {};
}

std::string recovery_csv(const std::map<std::string, double>& est, const std::map<std::string, double>& truth)
{
    std::string out = "person_id,true_beta,beta_hat,log_beta_hat\n";
    for (const auto& [id, b] : est) {
        auto it = truth.find(id);
        out += id + "," + (it == truth.end() ? std::string() : fmt_double(it->second)) + "," + fmt_double(b) + ","
             + fmt_double(std::log(b)) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// boards
// ---------------------------------------------------------------------------

int cmd_boards(const json& cfg)
{
    auto run = start_run("boards", cfg, false);
    std::vector<std::string> names;
    for (const auto& n : cfg["boards"]) names.push_back(n.get<std::string>());
    if (names.empty())
        for (const auto& b : builtin_boards()) names.push_back(b.name);
    const bool enumerate = cfg["enumerate"].get<std::string>() != "false";
    const bool check = cfg["check"].get<bool>();
    const auto cap = static_cast<std::size_t>(cfg["cap"].get<long long>());
    const auto export_dir = text(cfg, "export");

    std::string csv = "board,rows,cols,cells,actions,states,solution_length,count,dual_agreement,expected_states,"
                      "expected_actions,expected_length,status\n";
    bool mismatch = false;
    std::printf("%-11s %5s %12s %8s %-9s %-28s %s\n", "board", "|A|", "|S|", "length", "dual", "expected", "status");
    for (const auto& name : names) {
        const auto spec = resolve_board(name);
        const Board board(spec);
        if (!export_dir.empty()) {
            fs::create_directories(export_dir);
            save_board(spec, (fs::path(export_dir) / (spec.name + ".json")).string());
        }
        std::string expected = "-";
        if (spec.expected)
            expected = std::to_string(spec.expected->states) + "/" + std::to_string(spec.expected->actions) + "/"
                     + std::to_string(spec.expected->solution_length);
        if (!enumerate) {
            std::printf("%-11s %5d %12s %8s %-9s %-28s %s\n", spec.name.c_str(), board.num_actions(), "-", "-", "-",
                        expected.c_str(), "not enumerated");
            csv += spec.name + "," + std::to_string(spec.rows()) + "," + std::to_string(spec.cols()) + ","
                 + std::to_string(board.num_cells()) + "," + std::to_string(board.num_actions()) + ",,,,,,,,skipped\n";
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        const auto c = calibrate(board, cap);
        run.time(spec.name, seconds_since(t0));
        std::string status = "n/a";
        if (c.expected) {
            status = c.matches() ? "PASS" : "MISMATCH";
            if (!c.matches()) {
                std::string why;
                if (!c.states_match()) why += " states";
                if (!c.actions_match()) why += " actions";
                if (!c.length_match()) why += " length";
                status += " (" + why.substr(1) + ")";
            }
        }
        if (c.dual_agreement && !*c.dual_agreement) status += " DUAL-DISAGREE";
        if (check && ((c.expected && !c.matches()) || (c.dual_agreement && !*c.dual_agreement))) mismatch = true;
        const auto len = c.solution_length ? std::to_string(*c.solution_length) : std::string("none");
        const auto dual = c.dual_agreement ? (*c.dual_agreement ? "agree" : "DISAGREE") : "skipped";
        std::printf("%-11s %5d %12zu %8s %-9s %-28s %s\n", spec.name.c_str(), c.actions, c.states, len.c_str(), dual,
                    expected.c_str(), status.c_str());
        csv += spec.name + "," + std::to_string(spec.rows()) + "," + std::to_string(spec.cols()) + ","
             + std::to_string(board.num_cells()) + "," + std::to_string(c.actions) + "," + std::to_string(c.states)
             + "," + len + "," + (c.symmetry_classes ? "symmetry-classes" : "raw") + "," + dual + ","
             + (c.expected ? std::to_string(c.expected->states) + "," + std::to_string(c.expected->actions) + ","
                                 + std::to_string(c.expected->solution_length)
                           : std::string(",,"))
             + "," + status + "\n";
    }
    if (!run.out.empty()) {
        run.board = names.size() == 1 ? names.front() : "";
        run.write("boards.csv", csv);
        run.results["calibration_ok"] = !mismatch;
        run.finish();
    }
    return mismatch ? exit_invalid : exit_ok;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

int cmd_simulate(const json& cfg)
{
    auto run = start_run("simulate", cfg);
    const auto board = board_for(cfg);
    const PopulationPrior prior{cfg["mu"].get<double>(), cfg["sigma2"].get<double>()};
    prior.validate();
    const auto J = cfg["persons"].get<long long>();
    const auto G = cfg["games"].get<long long>();
    if (J < 1 || G < 1) throw usage_error("--persons and --games must be >= 1");
    const auto seed = cfg["seed"].get<std::uint64_t>();
    const auto generator = cfg["generator"].get<std::string>();

    const auto t0 = std::chrono::steady_clock::now();
    const auto betas = sample_population(prior, static_cast<std::size_t>(J), seed);
    Dataset data;
    if (generator == "tabular") {
        EnumeratedTask task = [&] {
            try {
                return enumerate_reachable(board, tabular_state_cap);
            } catch (const capacity_error&) {
                throw capacity_error("board '" + board.name()
                                     + "' is too large for per-person tabular solves; use --generator score");
            }
        }();
        data = simulate_trajectories(task, betas, static_cast<std::size_t>(G), seed);
    } else if (generator == "score") {
        ScoreTable scores(board);
        double kappa = 1.0;
        data = simulate_scored(scores, betas, static_cast<std::size_t>(G), seed, !cfg["raw-scores"].get<bool>(),
                               &kappa);
        run.results["score_scale"] = kappa;
        run.results["score_exact"] = scores.exact();
    } else {
        throw usage_error("--generator must be tabular or score");
    }
    run.time("simulate", seconds_since(t0));

    save_dataset(data, (run.out / "data.jsonl").string());
    run.outputs.push_back("data.jsonl");
    save_truths(data, (run.out / "truths.csv").string());
    run.outputs.push_back("truths.csv");
    run.fingerprint = fingerprint(data);
    run.board = board.name();
    run.results["persons"] = J;
    run.results["episodes"] = episodes(data).size();
    run.results["records"] = data.size();
    std::size_t solved = 0;
    for (const auto& ep : episodes(data)) solved += board.is_solved(ep.steps.back().next_state);
    run.results["solved_episodes"] = solved;
    run.finish();
    std::printf("simulated %lld persons x %lld games on %s: %zu records, fingerprint %s\n", J, G, board.name().c_str(),
                data.size(), run.fingerprint.c_str());
    return exit_ok;
}

// ---------------------------------------------------------------------------
// fit-rlmm
// ---------------------------------------------------------------------------

FeatureMap feature_map(const json& cfg, const Board& board, const Dataset& data)
{
    const auto f = cfg["features"].get<std::string>();
    if (f == "occupancy") return FeatureMap::occupancy(board);
    if (f == "one-hot") {
        std::vector<occupancy_t> states;
        for (const auto& r : data.records) {
            states.push_back(r.state);
            states.push_back(r.next_state);
        }
        return FeatureMap::one_hot(std::move(states));
    }
    throw usage_error("--features must be occupancy or one-hot");
}

Dataset load_input(const json& cfg, Run& run)
{
    const auto path = required(cfg, "data");
    auto data = load_dataset(path);
    run.fingerprint = fingerprint(data);
    return data;
}

int cmd_fit_rlmm(const json& cfg)
{
    auto run = start_run("fit-rlmm", cfg);
    const auto data = load_input(cfg, run);
    if (data.empty()) throw precondition_error("dataset is empty");
    const auto board = board_for(cfg, &data);
    run.board = board.name();
    const auto fcfg = fit_config(cfg);
    const auto fmap = feature_map(cfg, board, data);

    const auto res = fit(data, board, fmap, fcfg);
    run.time("fit", res.wall_time_total);
    run.time("person_stage", res.wall_time_person);
    run.time("value_stage", res.wall_time_value);

    save_checkpoint(res.theta, (run.out / "theta.ckpt").string());
    run.outputs.push_back("theta.ckpt");
    run.write("persons.csv", persons_csv(res.persons));
    run.write("traces.csv", traces_csv(res.traces, run.deterministic));

    const auto est = beta_map(res.persons);
    const auto truth = truths_for(cfg, data);
    json summary;
    summary["prior"] = {{"mu", res.prior.mu}, {"sigma2", res.prior.sigma2}};
    summary["scale"] = res.scale;
    summary["effective_batch"] = res.effective_batch;
    summary["population_warnings"] = res.population_warnings;
    std::size_t fallbacks = 0;
    for (const auto& p : res.persons) fallbacks += p.fallback;
    summary["fallback_persons"] = fallbacks;
    if (auto r = rmse_if(est, truth)) {
        summary["rmse_log_beta"] = *r;
        run.write("recovery.csv", recovery_csv(est, truth));
    }
    // beta_hat against mean episode return.
    const auto ret = person_mean_return(data);
    std::vector<double> x, y;
    for (const auto& [id, b] : est) {
        x.push_back(std::log(b));
        y.push_back(ret.at(id));
    }
    try {
        const auto c = correlations(x, y);
        summary["alignment"] = {{"pearson", c.pearson}, {"spearman", c.spearman}};
    } catch (const std::exception& e) {
        summary["alignment"] = {{"error", e.what()}};
    }
    run.write("summary.json", summary.dump(2) + "\n");
    run.results = summary;
    if (!run.deterministic) {
        std::string timing = "stage,seconds\n";
        for (auto it = run.stage_times.begin(); it != run.stage_times.end(); ++it)
            timing += it.key() + "," + fmt_double(it.value().get<double>()) + "\n";
        run.write("timing.csv", timing);
    }
    run.finish();
    std::printf("fit-rlmm %s: %zu persons, mu %.4f sigma2 %.4f", board.name().c_str(), res.persons.size(),
                res.prior.mu, res.prior.sigma2);
    if (summary.contains("rmse_log_beta")) std::printf(", rmse(log beta) %.4f", summary["rmse_log_beta"].get<double>());
    std::printf(", %.2fs\n", res.wall_time_total);
    return exit_ok;
}

// ---------------------------------------------------------------------------
// fit-mdpmm
// ---------------------------------------------------------------------------

MdpmmConfig mdpmm_config(const json& cfg)
{
    MdpmmConfig m;
    m.nodes = static_cast<int>(cfg["nodes"].get<long long>());
    m.q_tol = cfg["q-tol"].get<double>();
    m.q_max_iter = static_cast<int>(cfg["q-max-iter"].get<long long>());
    m.search_tol = cfg["search-tol"].get<double>();
    m.max_rounds = static_cast<int>(cfg["max-rounds"].get<long long>());
    m.sigma2_floor = cfg["sigma2-floor"].get<double>();
    m.init = {cfg["prior-mu"].get<double>(), cfg["prior-sigma2"].get<double>()};
    m.init.validate();
    if (m.nodes < 1) throw usage_error("--nodes must be >= 1");
    return m;
}

int cmd_fit_mdpmm(const json& cfg)
{
    auto run = start_run("fit-mdpmm", cfg);
    const auto data = load_input(cfg, run);
    if (data.empty()) throw precondition_error("dataset is empty");
    const auto board = board_for(cfg, &data);
    run.board = board.name();
    const auto mcfg = mdpmm_config(cfg);
    const auto task = enumerate_reachable(board, tabular_state_cap);
    const auto res = fit_mdpmm(data, task, mcfg);
    run.time("fit", res.wall_time);

    std::map<std::string, double> est;
    for (const auto& p : res.persons) est[p.person_id] = p.beta_hat;
    const auto truth = truths_for(cfg, data);
    run.write("persons.csv", recovery_csv(est, truth));
    std::string trace = "round,mu,sigma2,loglik\n";
    for (const auto& r : res.trace)
        trace += std::to_string(r.round) + "," + fmt_double(r.mu) + "," + fmt_double(r.sigma2) + ","
               + fmt_double(r.loglik) + "\n";
    run.write("trace.csv", trace);

    json summary;
    summary["prior"] = {{"mu", res.prior.mu}, {"sigma2", res.prior.sigma2}};
    summary["loglik"] = res.loglik;
    summary["sigma2_floored"] = res.sigma2_floored;
    summary["evaluations"] = res.evaluations;
    summary["q_solves"] = res.q_solves;
    if (auto r = rmse_if(est, truth)) summary["rmse_log_beta"] = *r;
    run.write("summary.json", summary.dump(2) + "\n");
    std::string meta;
    meta += "nodes " + std::to_string(mcfg.nodes) + "\n";
    meta += "q_tol " + fmt_double(mcfg.q_tol) + "\n";
    meta += "q_max_iter " + std::to_string(mcfg.q_max_iter) + "\n";
    meta += "search_tol " + fmt_double(mcfg.search_tol) + "\n";
    meta += "states " + std::to_string(task.size()) + "\n";
    meta += "wall_time " + run.csv_time(res.wall_time) + "\n";
    run.write("fit_meta.txt", meta);
    run.results = summary;
    if (!run.deterministic) run.write("timing.csv", "stage,seconds\nfit," + fmt_double(res.wall_time) + "\n");
    run.finish();
    std::printf("fit-mdpmm %s: mu %.4f sigma2 %.4f", board.name().c_str(), res.prior.mu, res.prior.sigma2);
    if (summary.contains("rmse_log_beta")) std::printf(", rmse(log beta) %.4f", summary["rmse_log_beta"].get<double>());
    std::printf(", %.2fs\n", res.wall_time);
    return exit_ok;
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

int cmd_benchmark(const json& cfg)
{
    auto run = start_run("benchmark", cfg);
    const PopulationPrior prior{cfg["mu"].get<double>(), cfg["sigma2"].get<double>()};
    prior.validate();
    const auto J = static_cast<std::size_t>(cfg["persons"].get<long long>());
    const auto G = static_cast<std::size_t>(cfg["games"].get<long long>());
    const auto seed = cfg["seed"].get<std::uint64_t>();
    const auto fcfg = fit_config(cfg);
    MdpmmConfig mcfg;

    std::string runtime = "board,states,actions,mdpmm_seconds,rlmm_seconds,speedup\n";
    std::string rmse = "board,states,mdpmm_rmse,rlmm_rmse\n";
    std::vector<double> tm, tr;
    std::vector<std::size_t> sizes;
    for (const auto& name : cfg["boards"]) {
        const Board board(resolve_board(name.get<std::string>()));
        const auto task = enumerate_reachable(board, tabular_state_cap);
        const auto betas = sample_population(prior, J, seed);
        const auto data = simulate_trajectories(task, betas, G, seed);
        const auto m = fit_mdpmm(data, task, mcfg);
        const auto r = fit(data, board, fcfg);
        std::map<std::string, double> em;
        for (const auto& p : m.persons) em[p.person_id] = p.beta_hat;
        const double rm = rmse_log_beta(em, data.true_beta), rr = rmse_log_beta(beta_map(r.persons), data.true_beta);
        run.time(board.name() + "/mdpmm", m.wall_time);
        run.time(board.name() + "/rlmm", r.wall_time_total);
        tm.push_back(m.wall_time);
        tr.push_back(r.wall_time_total);
        sizes.push_back(task.size());
        runtime += board.name() + "," + std::to_string(task.size()) + "," + std::to_string(board.num_actions()) + ","
                 + run.csv_time(m.wall_time) + "," + run.csv_time(r.wall_time_total) + ","
                 + run.csv_time(m.wall_time / r.wall_time_total) + "\n";
        rmse += board.name() + "," + std::to_string(task.size()) + "," + fmt_double(rm) + "," + fmt_double(rr) + "\n";
        std::printf("%-11s |S| %7zu  MDP-MM %8.2fs rmse %.4f   RLMM %8.2fs rmse %.4f\n", board.name().c_str(),
                    task.size(), m.wall_time, rm, r.wall_time_total, rr);
    }
    run.write("runtime.csv", runtime);
    run.write("rmse.csv", rmse);
    bool ok = !tm.empty();
    if (ok) {
        bool monotone = true;
        for (std::size_t i = 1; i < tm.size(); ++i) monotone = monotone && tm[i] > tm[i - 1];
        const double spread = *std::max_element(tr.begin(), tr.end()) / *std::min_element(tr.begin(), tr.end());
        const double speedup = tm.back() / tr.back();
        run.results["mdpmm_monotone"] = monotone;
        run.results["rlmm_spread"] = spread;
        run.results["speedup_largest"] = speedup;
        std::printf("MDP-MM increasing: %s; RLMM max/min: %.2f; speedup on %s: %.1fx\n", monotone ? "yes" : "no",
                    spread, cfg["boards"].back().get<std::string>().c_str(), speedup);
        ok = monotone && spread < 2.0 && speedup >= 5.0;
    }
    run.results["trend_ok"] = ok;
    run.finish();
    return cfg["check"].get<bool>() && !ok ? exit_invalid : exit_ok;
}

// ---------------------------------------------------------------------------
// influence
// ---------------------------------------------------------------------------

json read_json(const fs::path& p)
{
    std::ifstream in(p);
    if (!in) throw lookup_error("cannot open '" + p.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw schema_error("'" + p.string() + "' is not valid JSON: " + e.what());
    }
    return j;
}

int cmd_influence(const json& cfg)
{
    auto run = start_run("influence", cfg);
    const auto data = load_input(cfg, run);
    const fs::path fit_dir = required(cfg, "fit");
    const auto fit_manifest = read_json(fit_dir / "manifest.json");
    if (fit_manifest.value("command", "") != "fit-rlmm")
        throw precondition_error("'" + fit_dir.string() + "' is not a fit-rlmm run");
    if (fit_manifest.value("dataset_fingerprint", "") != run.fingerprint)
        throw precondition_error("dataset fingerprint differs from the one the fit was run on");
    const auto& fit_cfg = fit_manifest["config"];
    const auto board = board_for(fit_cfg, &data);
    run.board = board.name();
    const auto fmap = feature_map(fit_cfg, board, data);
    const auto theta = load_checkpoint((fit_dir / "theta.ckpt").string());
    const auto persons = load_persons_csv((fit_dir / "persons.csv").string());
    const auto summary = read_json(fit_dir / "summary.json");
    const PopulationPrior prior{summary["prior"]["mu"].get<double>(), summary["prior"]["sigma2"].get<double>()};

    const auto t0 = std::chrono::steady_clock::now();
    const auto st = build_step_table(board, data);
    const auto at = compute_advantages(theta, fmap, st, fit_cfg["eps-scale"].get<double>(), fit_cfg["tau"].get<double>());
    const auto rep = compute_influence(data, st, at, persons);
    run.time("influence", seconds_since(t0));
    run.write("influence.csv", influence_csv(rep.records));
    run.results["records"] = rep.records.size();
    run.results["excluded_persons"] = rep.excluded_persons;

    if (!rep.records.empty()) {
        const auto top = cfg["top"].get<long long>();
        const auto pct = cfg["percent"];
        const auto rule = pct.is_null() ? RankRule::top(static_cast<std::size_t>(std::max(0LL, top)))
                                        : RankRule::top_percent(pct.get<double>());
        run.write("critical.csv", influence_csv(rank_critical_steps(rep.records, rule)));
        run.write("aggregates.csv", aggregates_csv(aggregate_by_step(rep.records, beta_map(persons))));
    }
    try {
        const auto task = enumerate_reachable(board, tabular_state_cap);
        run.write("collapse.csv", collapse_csv(solution_collapse_profile(task, data)));
    } catch (const capacity_error&) {
        run.results["collapse"] = "skipped: board too large for path counting";
    }
    if (cfg["validate"].get<bool>()) {
        const auto t1 = std::chrono::steady_clock::now();
        const auto v = validate_influence(st, at, persons, prior, cfg["eps"].get<double>(),
                                          static_cast<std::size_t>(cfg["max-persons"].get<long long>()));
        run.time("validate", seconds_since(t1));
        std::string csv = "person_id,step,influence,refit,rel_error\n";
        for (const auto& c : v.checks)
            csv += c.person_id + "," + std::to_string(c.step) + "," + fmt_double(c.influence) + "," + fmt_double(c.refit)
                 + "," + fmt_double(c.rel_error) + "\n";
        run.write("validation.csv", csv);
        run.results["validation"] = {{"persons", v.persons_checked}, {"checks", v.checks.size()},
                                     {"max_rel_error", v.max_rel_error}};
        std::printf("eps-refit validation: %zu steps over %zu persons, max relative error %.3g\n", v.checks.size(),
                    v.persons_checked, v.max_rel_error);
    }
    run.finish();
    std::printf("influence %s: %zu records, %zu persons excluded\n", board.name().c_str(), rep.records.size(),
                rep.excluded_persons.size());
    return exit_ok;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

std::vector<fs::path> find_manifests(const std::vector<std::string>& dirs)
{
    std::vector<fs::path> out;
    for (const auto& d : dirs) {
        if (!fs::is_directory(d)) throw lookup_error("'" + d + "' is not a directory");
        for (const auto& e : fs::recursive_directory_iterator(d))
            if (e.is_regular_file() && e.path().filename() == "manifest.json") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string num(const json& j, const char* key)
{
    return j.contains(key) && j[key].is_number() ? fmt_double(j[key].get<double>()) : std::string();
}

int cmd_report(const json& cfg)
{
    std::vector<std::string> dirs;
    for (const auto& d : cfg["runs"]) dirs.push_back(d.get<std::string>());
    if (dirs.empty()) throw usage_error("report: no run directories given");
    const auto manifests = find_manifests(dirs);
    if (manifests.empty()) {
        std::fprintf(stderr, "report: no manifest.json found under the given directories\n");
        return exit_invalid;
    }
    auto run = start_run("report", cfg, false);

    // Keyed by (board, dataset fingerprint).
    struct Row
    {
        std::string mdpmm_rmse, rlmm_rmse, mdpmm_time, rlmm_time;
    };
    std::map<std::pair<std::string, std::string>, Row> rows;
    std::string corr = "board,run,pearson,spearman\n";
    std::string bench_rt = "board,states,actions,mdpmm_seconds,rlmm_seconds,speedup\n";
    std::string bench_rmse = "board,states,mdpmm_rmse,rlmm_rmse\n";
    bool any_bench = false;
    for (const auto& p : manifests) {
        const auto m = read_json(p);
        const auto cmd = m.value("command", "");
        const std::pair<std::string, std::string> key{m.value("board", ""), m.value("dataset_fingerprint", "")};
        const auto& res = m["results"];
        const auto& times = m["stage_times"];
        if (cmd == "fit-rlmm") {
            rows[key].rlmm_rmse = num(res, "rmse_log_beta");
            rows[key].rlmm_time = num(times, "fit");
            if (res.contains("alignment") && res["alignment"].contains("pearson"))
                corr += key.first + "," + p.parent_path().string() + "," + num(res["alignment"], "pearson") + ","
                      + num(res["alignment"], "spearman") + "\n";
        } else if (cmd == "fit-mdpmm") {
            rows[key].mdpmm_rmse = num(res, "rmse_log_beta");
            rows[key].mdpmm_time = num(times, "fit");
        } else if (cmd == "benchmark") {
            any_bench = true;
            const auto dir = p.parent_path();
            for (const auto& [file, target] : {std::pair{"runtime.csv", &bench_rt}, {"rmse.csv", &bench_rmse}}) {
                std::ifstream in(dir / file);
                std::string line;
                std::getline(in, line);
                while (std::getline(in, line))
                    if (!line.empty()) *target += line + "\n";
            }
        }
    }
    std::string rmse = "board,dataset,mdpmm_rmse,rlmm_rmse\n";
    std::string large = "board,dataset,rlmm_rmse\n";
    std::string runtime = "board,dataset,mdpmm_seconds,rlmm_seconds,speedup\n";
    std::string md = "## RMSE of log beta\n\n| board | MDP-MM | RLMM |\n|---|---|---|\n";
    for (const auto& [key, r] : rows) {
        const auto& [board, fp] = key;
        if (!r.mdpmm_rmse.empty()) {
            rmse += board + "," + fp + "," + r.mdpmm_rmse + "," + r.rlmm_rmse + "\n";
            md += "| " + board + " | " + r.mdpmm_rmse + " | " + (r.rlmm_rmse.empty() ? "-" : r.rlmm_rmse) + " |\n";
        } else if (!r.rlmm_rmse.empty()) {
            large += board + "," + fp + "," + r.rlmm_rmse + "\n";
            md += "| " + board + " | - | " + r.rlmm_rmse + " |\n";
        }
        if (!r.mdpmm_time.empty() && !r.rlmm_time.empty()) {
            const double s = std::stod(r.mdpmm_time) / std::stod(r.rlmm_time);
            runtime += board + "," + fp + "," + r.mdpmm_time + "," + r.rlmm_time + "," + fmt_double(s) + "\n";
        }
    }
    if (run.out.empty()) {
        std::cout << md << "\n" << rmse << "\n" << large << "\n" << runtime << "\n" << corr;
        if (any_bench) std::cout << "\n" << bench_rt << "\n" << bench_rmse;
        return exit_ok;
    }
    run.write("rmse_table.csv", rmse);
    run.write("rmse_large_table.csv", large);
    run.write("runtime_table.csv", runtime);
    run.write("correlation_table.csv", corr);
    if (any_bench) {
        run.write("benchmark_runtime.csv", bench_rt);
        run.write("benchmark_rmse.csv", bench_rmse);
    }
    run.write("report.md", md);
    run.results["manifests"] = manifests.size();
    run.finish();
    std::cout << md;
    return exit_ok;
}

// ---------------------------------------------------------------------------
// command table
// ---------------------------------------------------------------------------

std::vector<Command> make_commands()
{
    std::vector<Command> cmds;
    {
        Command c{"boards", "enumerate builtin boards and check calibration counts", {}, "boards"};
        c.opts.push_back({"boards", Kind::list, json::array(), "board names or files (default: all builtins)"});
        c.opts.push_back({"check", Kind::flag, false, "exit 2 on any calibration mismatch"});
        c.opts.push_back({"enumerate", Kind::text, "true", "false prints specs without enumerating"});
        c.opts.push_back({"cap", Kind::integer, static_cast<long long>(default_state_cap), "state cap"});
        c.opts.push_back({"export", Kind::text, nullptr, "write board JSON files into this directory"});
        add_common(c.opts, false);
        cmds.push_back(std::move(c));
    }
    {
        Command c{"simulate", "simulate Boltzmann play for a log-normal population", {}, ""};
        c.opts.push_back({"board", Kind::text, "tiny-cross", "board name or file"});
        c.opts.push_back({"persons", Kind::integer, 50, "number of persons J"});
        c.opts.push_back({"games", Kind::integer, 50, "games per person"});
        c.opts.push_back({"mu", Kind::real, 0.0, "population mean of log beta"});
        c.opts.push_back({"sigma2", Kind::real, 0.25, "population variance of log beta"});
        c.opts.push_back({"generator", Kind::text, "tabular", "tabular | score"});
        c.opts.push_back({"raw-scores", Kind::flag, false, "score generator: use unnormalized move scores"});
        add_common(c.opts);
        cmds.push_back(std::move(c));
    }
    {
        Command c{"fit-rlmm", "block-coordinate MAP fit of the RLMM", {}, ""};
        c.opts.push_back({"data", Kind::text, "", "dataset file"});
        c.opts.push_back({"board", Kind::text, nullptr, "board name or file (default: dataset header)"});
        c.opts.push_back({"truths", Kind::text, nullptr, "truths CSV for recovery scoring"});
        add_fit_options(c.opts);
        add_common(c.opts);
        cmds.push_back(std::move(c));
    }
    {
        Command c{"fit-mdpmm", "quadrature marginal-likelihood fit of the tabular MDP-MM", {}, ""};
        const MdpmmConfig d;
        c.opts.push_back({"data", Kind::text, "", "dataset file"});
        c.opts.push_back({"board", Kind::text, nullptr, "board name or file (default: dataset header)"});
        c.opts.push_back({"truths", Kind::text, nullptr, "truths CSV for recovery scoring"});
        c.opts.push_back({"nodes", Kind::integer, d.nodes, "Gauss-Hermite nodes"});
        c.opts.push_back({"q-tol", Kind::real, d.q_tol, "sup-norm tolerance of the Q solves"});
        c.opts.push_back({"q-max-iter", Kind::integer, d.q_max_iter, "max sweeps per Q solve"});
        c.opts.push_back({"search-tol", Kind::real, d.search_tol, "coordinate search tolerance"});
        c.opts.push_back({"max-rounds", Kind::integer, d.max_rounds, "coordinate search rounds"});
        c.opts.push_back({"sigma2-floor", Kind::real, d.sigma2_floor, "variance floor"});
        c.opts.push_back({"prior-mu", Kind::real, 0.0, "initial mu"});
        c.opts.push_back({"prior-sigma2", Kind::real, 0.25, "initial sigma2"});
        add_common(c.opts);
        cmds.push_back(std::move(c));
    }
    {
        Command c{"benchmark", "simulate and fit both models across boards", {}, ""};
        c.opts.push_back({"boards", Kind::list, json::array({"tiny-cross", "big-cross", "big-L", "diamond"}),
                          "boards in increasing size"});
        c.opts.push_back({"persons", Kind::integer, 50, "persons per board"});
        c.opts.push_back({"games", Kind::integer, 50, "games per person"});
        c.opts.push_back({"mu", Kind::real, 0.0, "population mean of log beta"});
        c.opts.push_back({"sigma2", Kind::real, 0.25, "population variance of log beta"});
        c.opts.push_back({"check", Kind::flag, false, "exit 2 unless the runtime trend holds"});
        add_fit_options(c.opts);
        add_common(c.opts);
        cmds.push_back(std::move(c));
    }
    {
        Command c{"influence", "per-step influence diagnostics for a fitted RLMM", {}, ""};
        c.opts.push_back({"data", Kind::text, "", "dataset file the fit used"});
        c.opts.push_back({"fit", Kind::text, "", "fit-rlmm output directory"});
        c.opts.push_back({"top", Kind::integer, 20, "top-K critical steps"});
        c.opts.push_back({"percent", Kind::real, nullptr, "keep the top p percent instead of top-K"});
        c.opts.push_back({"validate", Kind::flag, false, "run the eps perturb-and-refit check"});
        c.opts.push_back({"eps", Kind::real, 1e-3, "perturbation size for --validate"});
        c.opts.push_back({"max-persons", Kind::integer, 0, "limit persons in --validate (0 = all)"});
        add_common(c.opts);
        cmds.push_back(std::move(c));
    }
    {
        Command c{"report", "consolidate run directories into tables", {}, "runs"};
        c.opts.push_back({"runs", Kind::list, json::array(), "run directories"});
        add_common(c.opts, false);
        cmds.push_back(std::move(c));
    }
    return cmds;
}

int dispatch(const std::string& command, const json& cfg)
{
    if (command == "boards") return cmd_boards(cfg);
    if (command == "simulate") return cmd_simulate(cfg);
    if (command == "fit-rlmm") return cmd_fit_rlmm(cfg);
    if (command == "fit-mdpmm") return cmd_fit_mdpmm(cfg);
    if (command == "benchmark") return cmd_benchmark(cfg);
    if (command == "influence") return cmd_influence(cfg);
    if (command == "report") return cmd_report(cfg);
    throw usage_error("unknown command '" + command + "'");
}

// Re-executes a manifest's command with its recorded config into a new directory.
int cmd_rerun(const std::string& manifest_path, const std::string& out, std::vector<Command>& cmds)
{
    const auto m = read_json(manifest_path);
    const auto command = m.value("command", "");
    auto it = std::find_if(cmds.begin(), cmds.end(), [&](const Command& c) { return c.name == command; });
    if (it == cmds.end()) throw usage_error("manifest has unknown command '" + command + "'");
    json cfg = overlay(*it, defaults(*it), m.at("config"));
    if (out.empty()) throw usage_error("rerun: --out is required");
    cfg["out"] = out;
    const auto fp = m.value("dataset_fingerprint", "");
    if (!fp.empty() && cfg.contains("data") && cfg["data"].is_string() && !cfg["data"].get<std::string>().empty()) {
        const auto now = fingerprint(load_dataset(cfg["data"].get<std::string>()));
        if (now != fp) throw precondition_error("input dataset fingerprint changed since the recorded run");
    }
    return dispatch(command, cfg);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"RLMM measurement-model toolkit"};
    app.require_subcommand(1);
    auto cmds = make_commands();
    for (auto& c : cmds) register_command(app, c);
    std::string rerun_manifest, rerun_out;
    auto* rerun = app.add_subcommand("rerun", "re-run a command from its manifest");
    rerun->add_option("manifest", rerun_manifest, "manifest.json of the original run")->required();
    rerun->add_option("--out", rerun_out, "output directory for the re-run")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? exit_ok : exit_invalid;
    }

    try {
        if (rerun->parsed()) return cmd_rerun(rerun_manifest, rerun_out, cmds);
        for (auto& c : cmds)
            if (c.app->parsed()) return dispatch(c.name, resolve(c));
        return exit_invalid;
    } catch (const usage_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_invalid;
    } catch (const precondition_error& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return exit_invalid;
    } catch (const schema_error& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return exit_invalid;
    } catch (const lookup_error& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return exit_invalid;
    } catch (const capacity_error& e) {
        std::fprintf(stderr, "capacity: %s\n", e.what());
        return exit_invalid;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_runtime;
    }
}
