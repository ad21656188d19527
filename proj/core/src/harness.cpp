#include "kgrl/harness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "kgrl/blob.hpp"
#include "kgrl/errors.hpp"
#include "run_record_schema.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace kgrl {

namespace {

constexpr const char* kRunFormat = "kgrl-run-v1";
constexpr std::size_t kMaxVisited = 512;

// --------------------------- JSON field helpers ----------------------------
// Every extraction failure reports the full field path, so a bad config tells
// the user exactly which entry to fix.

json parse_json_or_throw(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

std::string idx_path(const std::string& base, std::size_t i) {
    return base + "[" + std::to_string(i) + "]";
}

const json* maybe(const json& obj, const char* key) {
    if (!obj.is_object()) return nullptr;
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
}

const json& need(const json& obj, const std::string& path, const char* key) {
    if (!obj.is_object()) throw ConfigError(path + ": expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw ConfigError(path + "." + key + ": missing required field");
    return *it;
}

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError(path + ": expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known = known || it.key() == k;
        if (!known) throw ConfigError(path + "." + it.key() + ": unknown field");
    }
}

std::uint64_t as_u64(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0)
        return static_cast<std::uint64_t>(v.get<std::int64_t>());
    throw ConfigError(path + ": expected a non-negative integer");
}

std::size_t as_size(const json& v, const std::string& path) {
    return static_cast<std::size_t>(as_u64(v, path));
}

double as_number(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    return v.get<double>();
}

std::string as_string(const json& v, const std::string& path) {
    if (!v.is_string()) throw ConfigError(path + ": expected a string");
    return v.get<std::string>();
}

std::vector<std::size_t> as_size_array(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + ": expected an array of non-negative integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_size(v[i], idx_path(path, i)));
    return out;
}

// Point-rule activation distances admit "inf" (always active); JSON itself
// has no infinity literal.
double as_epsilon(const json& v, const std::string& path) {
    if (v.is_string()) {
        if (v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
        throw ConfigError(path + ": expected a positive number or \"inf\"");
    }
    if (!v.is_number()) throw ConfigError(path + ": expected a positive number or \"inf\"");
    return v.get<double>();
}

// --------------------------- schema validation -----------------------------

void schema_check(const json& schema, const json& inst, const std::string& path) {
    const std::string type = schema.value("type", "");
    auto fail = [&](const std::string& msg) { throw ConfigError(path + ": " + msg); };
    if (type == "object") {
        if (!inst.is_object()) fail("expected an object");
        if (const json* req = maybe(schema, "required")) {
            for (const auto& r : *req) {
                const std::string key = r.get<std::string>();
                if (!inst.contains(key))
                    throw ConfigError(path + "." + key + ": missing required field");
            }
        }
        const json* props = maybe(schema, "properties");
        if (props && schema.value("additionalProperties", true) == false) {
            for (auto it = inst.begin(); it != inst.end(); ++it)
                if (!props->contains(it.key()))
                    throw ConfigError(path + "." + it.key() + ": unknown field");
        }
        if (props) {
            for (auto it = props->begin(); it != props->end(); ++it)
                if (inst.contains(it.key()))
                    schema_check(it.value(), inst.at(it.key()), path + "." + it.key());
        }
    } else if (type == "array") {
        if (!inst.is_array()) fail("expected an array");
        if (const json* mi = maybe(schema, "minItems")) {
            if (inst.size() < mi->get<std::size_t>())
                fail("expected at least " + mi->dump() + " items");
        }
        if (const json* items = maybe(schema, "items")) {
            for (std::size_t i = 0; i < inst.size(); ++i)
                schema_check(*items, inst[i], idx_path(path, i));
        }
    } else if (type == "string") {
        if (!inst.is_string()) fail("expected a string");
    } else if (type == "integer") {
        if (!inst.is_number_integer() && !inst.is_number_unsigned()) fail("expected an integer");
    } else if (type == "number") {
        if (!inst.is_number()) fail("expected a number");
    } else if (type == "boolean") {
        if (!inst.is_boolean()) fail("expected a boolean");
    }
}

// ------------------------------- file io -----------------------------------

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void spill(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("write failed for " + path);
}

// ------------------------------- CSV ---------------------------------------

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    cells.push_back(cur);
    return cells;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t col(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw IoError("CSV is missing column '" + name + "'");
    }
};

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    CsvTable t;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (t.header.empty())
            t.header = std::move(cells);
        else
            t.rows.push_back(std::move(cells));
    }
    if (t.header.empty()) throw IoError(path + ": empty CSV");
    return t;
}

double csv_num(const std::vector<std::string>& row, std::size_t i) {
    return std::strtod(row.at(i).c_str(), nullptr);
}

// ------------------------------- SVG ---------------------------------------

struct ChartSeries {
    std::string label;
    std::vector<std::array<double, 2>> pts;
};

std::string svg_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else out += c;
    }
    return out;
}

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

void write_line_chart(const std::string& path, const std::string& title,
                      const std::string& xlabel, const std::string& ylabel,
                      const std::vector<ChartSeries>& series) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#17becf", "#e377c2"};
    constexpr double W = 720, H = 440, L = 70, R = 695, T = 34, B = 384;

    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool any = false;
    for (const auto& s : series) {
        for (const auto& p : s.pts) {
            if (!any) {
                xmin = xmax = p[0];
                ymin = ymax = p[1];
                any = true;
            }
            xmin = std::min(xmin, p[0]);
            xmax = std::max(xmax, p[0]);
            ymin = std::min(ymin, p[1]);
            ymax = std::max(ymax, p[1]);
        }
    }
    if (xmax - xmin < 1e-12) { xmin -= 0.5; xmax += 0.5; }
    if (ymax - ymin < 1e-12) { ymin -= 0.5; ymax += 0.5; }
    const double xpad = (xmax - xmin) * 0.04, ypad = (ymax - ymin) * 0.04;
    xmin -= xpad; xmax += xpad; ymin -= ypad; ymax += ypad;
    auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (R - L); };
    auto py = [&](double y) { return B - (y - ymin) / (ymax - ymin) * (B - T); };

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"#ffffff\"/>\n"
      << "<text x=\"" << (L + R) / 2 << "\" y=\"20\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
    for (int k = 0; k <= 4; ++k) {
        const double tx = xmin + (xmax - xmin) * k / 4.0;
        const double ty = ymin + (ymax - ymin) * k / 4.0;
        s << "<line x1=\"" << px(tx) << "\" y1=\"" << T << "\" x2=\"" << px(tx) << "\" y2=\"" << B
          << "\" stroke=\"#e5e5e5\"/>\n"
          << "<line x1=\"" << L << "\" y1=\"" << py(ty) << "\" x2=\"" << R << "\" y2=\""
          << py(ty) << "\" stroke=\"#e5e5e5\"/>\n"
          << "<text x=\"" << px(tx) << "\" y=\"" << B + 16
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
          << fmt_g(tx) << "</text>\n"
          << "<text x=\"" << L - 6 << "\" y=\"" << py(ty) + 3
          << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
          << fmt_g(ty) << "</text>\n";
    }
    s << "<line x1=\"" << L << "\" y1=\"" << B << "\" x2=\"" << R << "\" y2=\"" << B
      << "\" stroke=\"#333333\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << B
      << "\" stroke=\"#333333\"/>\n"
      << "<text x=\"" << (L + R) / 2 << "\" y=\"" << H - 8
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << svg_escape(xlabel) << "</text>\n"
      << "<text x=\"14\" y=\"" << (T + B) / 2 << "\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 "
      << (T + B) / 2 << ")\">" << svg_escape(ylabel) << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = palette[i % 8];
        const auto& pts = series[i].pts;
        if (!pts.empty()) {
            s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            for (const auto& p : pts) s << px(p[0]) << "," << py(p[1]) << " ";
            s << "\"/>\n";
            if (pts.size() <= 32)
                for (const auto& p : pts)
                    s << "<circle cx=\"" << px(p[0]) << "\" cy=\"" << py(p[1])
                      << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
        }
        const double ly = T + 10 + static_cast<double>(i) * 16;
        s << "<line x1=\"" << R - 160 << "\" y1=\"" << ly << "\" x2=\"" << R - 140 << "\" y2=\""
          << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
          << "<text x=\"" << R - 134 << "\" y=\"" << ly + 4
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << svg_escape(series[i].label)
          << "</text>\n";
    }
    s << "</svg>\n";
    spill(path, s.str());
}

// --------------------------- shared run helpers -----------------------------

bool safe_name(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '_' || c == '.' || c == '-';
        if (!ok) return false;
    }
    return true;
}

// Effective component name of a knowledge entry before packs are loaded
// (pack names default at load time, so they may be empty here).
std::string pre_load_name(const KnowledgeSourceConfig& src) {
    if (!src.name.empty()) return src.name;
    return src.is_pack() ? std::string() : src.scripted;
}

std::uint64_t eval_env_seed(std::uint64_t train_seed, std::size_t eval_index) {
    // Disjoint from the small consecutive seeds handed to training envs.
    return 0x5EEDULL + (train_seed + 1) * 1000003ULL +
           static_cast<std::uint64_t>(eval_index) * 7919ULL;
}

void append_curve_row(std::ofstream& out, std::size_t step, std::uint64_t seed,
                      const EvalMetrics& m) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%zu,%llu,%.10g,%.10g,%.10g", step,
                  static_cast<unsigned long long>(seed), m.mean_return, m.min_return,
                  m.success_rate);
    out << buf << '\n';
}

json metrics_json(const EvalMetrics& m) {
    return json{{"episodes", m.episodes},
                {"mean_return", m.mean_return},
                {"min_return", m.min_return},
                {"success_rate", m.success_rate}};
}

EvalMetrics metrics_from(const json& j) {
    EvalMetrics m;
    m.episodes = j.at("episodes").get<std::size_t>();
    m.mean_return = j.at("mean_return").get<double>();
    m.min_return = j.at("min_return").get<double>();
    m.success_rate = j.at("success_rate").get<double>();
    return m;
}

int argmax_of(const std::vector<double>& xs) {
    int best = 0;
    for (std::size_t i = 1; i < xs.size(); ++i)
        if (xs[i] > xs[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

std::size_t open_door_count(const GridState& s) {
    std::size_t n = 0;
    for (const auto& c : s.cells)
        if (c.object == GridObject::door && c.door == DoorState::open) ++n;
    return n;
}

std::vector<std::string> component_labels(const KnowledgeSet& set) {
    std::vector<std::string> names{"inner"};
    for (const auto& e : set.entries()) names.push_back(e.name);
    return names;
}

fs::path pack_blob_sidecar(const fs::path& manifest) {
    fs::path p = manifest;
    if (p.extension() == ".json")
        p.replace_extension(".blob");
    else
        p += ".blob";
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
    if (!safe_name(name))
        throw ConfigError("config.name: must be non-empty and use only [A-Za-z0-9_.-]");
    if (task != "grid" && task != "point")
        throw ConfigError("config.env.task: expected \"grid\" or \"point\"");
    if (actor_kind != "baseline" && actor_kind != "kgrl")
        throw ConfigError("config.actor.kind: expected \"baseline\" or \"kgrl\"");
    if (actor_kind == "baseline" && !knowledge.empty())
        throw ConfigError("config.knowledge: a baseline actor takes no knowledge entries");
    if (actor_kind == "kgrl" && knowledge.empty())
        throw ConfigError(
            "config.knowledge: a knowledge-grounded actor needs at least one entry");

    static const std::set<std::string> kGridRules{"grid_kg1_pickup_key", "grid_kg2_open_door",
                                                  "grid_kg3_reach_goal"};
    static const std::set<std::string> kPointRules{"cont_kg1_to_goal", "cont_kg2_to_object"};
    std::vector<std::string> effective;
    for (std::size_t i = 0; i < knowledge.size(); ++i) {
        const auto& src = knowledge[i];
        const std::string path = idx_path("config.knowledge", i);
        if (src.scripted.empty() == src.pack.empty())
            throw ConfigError(path + ": exactly one of \"scripted\" or \"pack\" is required");
        if (!src.name.empty() && !safe_name(src.name))
            throw ConfigError(path + ".name: must use only [A-Za-z0-9_.-]");
        if (!src.is_pack()) {
            const auto& rules = (task == "grid") ? kGridRules : kPointRules;
            if (!rules.count(src.scripted))
                throw ConfigError(path + ".scripted: unknown " + task + " rule \"" +
                                  src.scripted + "\"");
            if (task == "point" && !(src.epsilon > 0.0))
                throw ConfigError(path + ".epsilon: must be positive (or \"inf\")");
        }
        const std::string eff = pre_load_name(src);
        if (eff == "inner")
            throw ConfigError(path + ".name: \"inner\" is reserved for the inner policy");
        if (!eff.empty() && std::count(effective.begin(), effective.end(), eff))
            throw ConfigError(path + ".name: duplicate component name \"" + eff + "\"");
        effective.push_back(eff);
    }

    if (seeds.empty()) throw ConfigError("config.seeds: at least one seed is required");
    for (std::size_t i = 0; i < seeds.size(); ++i)
        for (std::size_t j = i + 1; j < seeds.size(); ++j)
            if (seeds[i] == seeds[j])
                throw ConfigError("config.seeds: duplicate seed " + std::to_string(seeds[i]));
    if (total_steps == 0) throw ConfigError("config.total_steps: must be positive");
    if (eval_every == 0 || eval_every > total_steps)
        throw ConfigError("config.eval_every: must lie in [1, total_steps]");
    if (eval_episodes == 0) throw ConfigError("config.eval_episodes: must be positive");
    if (final_eval_episodes == 0)
        throw ConfigError("config.final_eval_episodes: must be positive");
    if (out_dir.empty()) throw ConfigError("config.out_dir: must be non-empty");

    try {
        if (is_grid())
            grid.validate();
        else
            point.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("config.env: ") + e.what());
    }
    try {
        if (is_grid())
            grid_actor.validate();
        else
            point_actor.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("config.actor: ") + e.what());
    }
    try {
        if (is_grid())
            ppo.validate();
        else
            sac.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("config.algo: ") + e.what());
    }
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
    const json j = parse_json_or_throw(json_text, "config");
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    check_keys(j, "config",
               {"name", "env", "actor", "knowledge", "algo", "seeds", "total_steps",
                "eval_every", "eval_episodes", "final_eval_episodes", "out_dir"});
    ExperimentConfig cfg;
    cfg.name = as_string(need(j, "config", "name"), "config.name");

    const json& env = need(j, "config", "env");
    cfg.task = as_string(need(env, "config.env", "task"), "config.env.task");
    if (cfg.task == "grid") {
        check_keys(env, "config.env", {"task", "variant", "width", "height", "max_steps"});
        try {
            cfg.grid.variant = grid_variant_from_string(
                as_string(need(env, "config.env", "variant"), "config.env.variant"));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("config.env.variant: ") + e.what());
        }
        cfg.grid.width = as_size(need(env, "config.env", "width"), "config.env.width");
        cfg.grid.height = as_size(need(env, "config.env", "height"), "config.env.height");
        if (const json* v = maybe(env, "max_steps"))
            cfg.grid.max_steps = as_size(*v, "config.env.max_steps");
    } else if (cfg.task == "point") {
        check_keys(env, "config.env", {"task", "variant", "goal_range_scale", "max_steps"});
        try {
            cfg.point.variant = point_variant_from_string(
                as_string(need(env, "config.env", "variant"), "config.env.variant"));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("config.env.variant: ") + e.what());
        }
        if (const json* v = maybe(env, "goal_range_scale"))
            cfg.point.goal_range_scale = as_number(*v, "config.env.goal_range_scale");
        if (const json* v = maybe(env, "max_steps"))
            cfg.point.max_steps = as_size(*v, "config.env.max_steps");
    } else {
        throw ConfigError("config.env.task: expected \"grid\" or \"point\"");
    }

    const json& actor = need(j, "config", "actor");
    cfg.actor_kind = as_string(need(actor, "config.actor", "kind"), "config.actor.kind");
    if (cfg.is_grid()) {
        check_keys(actor, "config.actor",
                   {"kind", "d_k", "channels", "kernel", "stride", "head_width", "trunk_width"});
        if (const json* v = maybe(actor, "d_k"))
            cfg.grid_actor.d_k = as_size(*v, "config.actor.d_k");
        if (const json* v = maybe(actor, "channels")) {
            auto ch = as_size_array(*v, "config.actor.channels");
            if (ch.size() != 3)
                throw ConfigError("config.actor.channels: expected exactly 3 entries");
            std::copy(ch.begin(), ch.end(), cfg.grid_actor.policy.channels.begin());
        }
        if (const json* v = maybe(actor, "kernel"))
            cfg.grid_actor.policy.kernel = as_size(*v, "config.actor.kernel");
        if (const json* v = maybe(actor, "stride"))
            cfg.grid_actor.policy.stride = as_size(*v, "config.actor.stride");
        if (const json* v = maybe(actor, "head_width"))
            cfg.grid_actor.policy.head_width = as_size(*v, "config.actor.head_width");
        if (const json* v = maybe(actor, "trunk_width"))
            cfg.grid_actor.policy.trunk_width = as_size(*v, "config.actor.trunk_width");
    } else {
        check_keys(actor, "config.actor",
                   {"kind", "d_k", "temperature", "hidden", "key_query_hidden"});
        if (const json* v = maybe(actor, "d_k"))
            cfg.point_actor.d_k = as_size(*v, "config.actor.d_k");
        if (const json* v = maybe(actor, "temperature"))
            cfg.point_actor.temperature = as_number(*v, "config.actor.temperature");
        if (const json* v = maybe(actor, "hidden"))
            cfg.point_actor.policy.hidden = as_size_array(*v, "config.actor.hidden");
        if (const json* v = maybe(actor, "key_query_hidden"))
            cfg.point_actor.key_query_hidden =
                as_size_array(*v, "config.actor.key_query_hidden");
    }

    if (const json* kn = maybe(j, "knowledge")) {
        if (!kn->is_array()) throw ConfigError("config.knowledge: expected an array");
        for (std::size_t i = 0; i < kn->size(); ++i) {
            const json& e = (*kn)[i];
            const std::string path = idx_path("config.knowledge", i);
            check_keys(e, path, {"scripted", "pack", "epsilon", "name"});
            KnowledgeSourceConfig src;
            const json* scripted = maybe(e, "scripted");
            const json* pack = maybe(e, "pack");
            if ((scripted != nullptr) == (pack != nullptr))
                throw ConfigError(path + ": exactly one of \"scripted\" or \"pack\" is required");
            if (scripted) {
                src.scripted = as_string(*scripted, path + ".scripted");
                if (cfg.is_grid()) {
                    if (maybe(e, "epsilon"))
                        throw ConfigError(path + ".epsilon: grid rules take no epsilon");
                } else {
                    src.epsilon =
                        as_epsilon(need(e, path, "epsilon"), path + ".epsilon");
                }
            } else {
                src.pack = as_string(*pack, path + ".pack");
                if (maybe(e, "epsilon"))
                    throw ConfigError(path + ".epsilon: packs take no epsilon");
            }
            if (const json* v = maybe(e, "name")) src.name = as_string(*v, path + ".name");
            cfg.knowledge.push_back(std::move(src));
        }
    }

    const json& algo = need(j, "config", "algo");
    const std::string algo_name =
        as_string(need(algo, "config.algo", "name"), "config.algo.name");
    if (cfg.is_grid()) {
        if (algo_name != "ppo")
            throw ConfigError("config.algo.name: the grid task trains with \"ppo\"");
        check_keys(algo, "config.algo",
                   {"name", "n_envs", "n_steps", "epochs", "minibatch", "gamma", "lam", "clip",
                    "value_coef", "entropy_coef", "lr", "max_grad_norm"});
        if (const json* v = maybe(algo, "n_envs"))
            cfg.ppo.n_envs = as_size(*v, "config.algo.n_envs");
        if (const json* v = maybe(algo, "n_steps"))
            cfg.ppo.n_steps = as_size(*v, "config.algo.n_steps");
        if (const json* v = maybe(algo, "epochs"))
            cfg.ppo.epochs = as_size(*v, "config.algo.epochs");
        if (const json* v = maybe(algo, "minibatch"))
            cfg.ppo.minibatch = as_size(*v, "config.algo.minibatch");
        if (const json* v = maybe(algo, "gamma"))
            cfg.ppo.gamma = as_number(*v, "config.algo.gamma");
        if (const json* v = maybe(algo, "lam")) cfg.ppo.lam = as_number(*v, "config.algo.lam");
        if (const json* v = maybe(algo, "clip")) cfg.ppo.clip = as_number(*v, "config.algo.clip");
        if (const json* v = maybe(algo, "value_coef"))
            cfg.ppo.value_coef = as_number(*v, "config.algo.value_coef");
        if (const json* v = maybe(algo, "entropy_coef"))
            cfg.ppo.entropy_coef = as_number(*v, "config.algo.entropy_coef");
        if (const json* v = maybe(algo, "lr")) cfg.ppo.lr = as_number(*v, "config.algo.lr");
        if (const json* v = maybe(algo, "max_grad_norm"))
            cfg.ppo.max_grad_norm = as_number(*v, "config.algo.max_grad_norm");
    } else {
        if (algo_name != "sac")
            throw ConfigError("config.algo.name: the point task trains with \"sac\"");
        check_keys(algo, "config.algo",
                   {"name", "gamma", "tau", "lr", "alpha_lr", "init_alpha", "target_entropy",
                    "batch", "buffer_capacity", "her_k", "start_steps", "update_every",
                    "actor_delay", "critic_hidden"});
        if (const json* v = maybe(algo, "gamma"))
            cfg.sac.gamma = as_number(*v, "config.algo.gamma");
        if (const json* v = maybe(algo, "tau")) cfg.sac.tau = as_number(*v, "config.algo.tau");
        if (const json* v = maybe(algo, "lr")) cfg.sac.lr = as_number(*v, "config.algo.lr");
        if (const json* v = maybe(algo, "alpha_lr"))
            cfg.sac.alpha_lr = as_number(*v, "config.algo.alpha_lr");
        if (const json* v = maybe(algo, "init_alpha"))
            cfg.sac.init_alpha = as_number(*v, "config.algo.init_alpha");
        if (const json* v = maybe(algo, "target_entropy"))
            cfg.sac.target_entropy = as_number(*v, "config.algo.target_entropy");
        if (const json* v = maybe(algo, "batch"))
            cfg.sac.batch = as_size(*v, "config.algo.batch");
        if (const json* v = maybe(algo, "buffer_capacity"))
            cfg.sac.buffer_capacity = as_size(*v, "config.algo.buffer_capacity");
        if (const json* v = maybe(algo, "her_k"))
            cfg.sac.her_k = as_size(*v, "config.algo.her_k");
        if (const json* v = maybe(algo, "start_steps"))
            cfg.sac.start_steps = as_size(*v, "config.algo.start_steps");
        if (const json* v = maybe(algo, "update_every"))
            cfg.sac.update_every = as_size(*v, "config.algo.update_every");
        if (const json* v = maybe(algo, "actor_delay"))
            cfg.sac.actor_delay = as_size(*v, "config.algo.actor_delay");
        if (const json* v = maybe(algo, "critic_hidden"))
            cfg.sac.critic_hidden = as_size_array(*v, "config.algo.critic_hidden");
    }

    const json& seeds = need(j, "config", "seeds");
    if (!seeds.is_array()) throw ConfigError("config.seeds: expected an array");
    for (std::size_t i = 0; i < seeds.size(); ++i)
        cfg.seeds.push_back(as_u64(seeds[i], idx_path("config.seeds", i)));

    cfg.total_steps = as_size(need(j, "config", "total_steps"), "config.total_steps");
    cfg.eval_every = as_size(need(j, "config", "eval_every"), "config.eval_every");
    if (const json* v = maybe(j, "eval_episodes"))
        cfg.eval_episodes = as_size(*v, "config.eval_episodes");
    if (const json* v = maybe(j, "final_eval_episodes"))
        cfg.final_eval_episodes = as_size(*v, "config.final_eval_episodes");
    cfg.out_dir = as_string(need(j, "config", "out_dir"), "config.out_dir");

    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    return parse_experiment_config(slurp(path));
}

std::string experiment_config_text(const ExperimentConfig& c) {
    json j;
    j["name"] = c.name;
    if (c.is_grid()) {
        j["env"] = json{{"task", "grid"},
                        {"variant", grid_variant_to_string(c.grid.variant)},
                        {"width", c.grid.width},
                        {"height", c.grid.height},
                        {"max_steps", c.grid.max_steps}};
        j["actor"] = json{{"kind", c.actor_kind},
                          {"d_k", c.grid_actor.d_k},
                          {"channels", c.grid_actor.policy.channels},
                          {"kernel", c.grid_actor.policy.kernel},
                          {"stride", c.grid_actor.policy.stride},
                          {"head_width", c.grid_actor.policy.head_width},
                          {"trunk_width", c.grid_actor.policy.trunk_width}};
        j["algo"] = json{{"name", "ppo"},
                         {"n_envs", c.ppo.n_envs},
                         {"n_steps", c.ppo.n_steps},
                         {"epochs", c.ppo.epochs},
                         {"minibatch", c.ppo.minibatch},
                         {"gamma", c.ppo.gamma},
                         {"lam", c.ppo.lam},
                         {"clip", c.ppo.clip},
                         {"value_coef", c.ppo.value_coef},
                         {"entropy_coef", c.ppo.entropy_coef},
                         {"lr", c.ppo.lr},
                         {"max_grad_norm", c.ppo.max_grad_norm}};
    } else {
        j["env"] = json{{"task", "point"},
                        {"variant", point_variant_to_string(c.point.variant)},
                        {"goal_range_scale", c.point.goal_range_scale},
                        {"max_steps", c.point.max_steps}};
        j["actor"] = json{{"kind", c.actor_kind},
                          {"d_k", c.point_actor.d_k},
                          {"temperature", c.point_actor.temperature},
                          {"hidden", c.point_actor.policy.hidden},
                          {"key_query_hidden", c.point_actor.key_query_hidden}};
        j["algo"] = json{{"name", "sac"},
                         {"gamma", c.sac.gamma},
                         {"tau", c.sac.tau},
                         {"lr", c.sac.lr},
                         {"alpha_lr", c.sac.alpha_lr},
                         {"init_alpha", c.sac.init_alpha},
                         {"target_entropy", c.sac.target_entropy},
                         {"batch", c.sac.batch},
                         {"buffer_capacity", c.sac.buffer_capacity},
                         {"her_k", c.sac.her_k},
                         {"start_steps", c.sac.start_steps},
                         {"update_every", c.sac.update_every},
                         {"actor_delay", c.sac.actor_delay},
                         {"critic_hidden", c.sac.critic_hidden}};
    }
    json kn = json::array();
    for (const auto& src : c.knowledge) {
        json e;
        if (src.is_pack()) {
            e["pack"] = src.pack;
        } else {
            e["scripted"] = src.scripted;
            if (!c.is_grid())
                e["epsilon"] = std::isinf(src.epsilon) ? json("inf") : json(src.epsilon);
        }
        if (!src.name.empty()) e["name"] = src.name;
        kn.push_back(std::move(e));
    }
    j["knowledge"] = std::move(kn);
    j["seeds"] = c.seeds;
    j["total_steps"] = c.total_steps;
    j["eval_every"] = c.eval_every;
    j["eval_episodes"] = c.eval_episodes;
    j["final_eval_episodes"] = c.final_eval_episodes;
    j["out_dir"] = c.out_dir;
    return j.dump(2) + "\n";
}

KnowledgeSet build_knowledge(const ExperimentConfig& cfg) {
    KnowledgeSet set;
    const std::string expect_layout = cfg.is_grid() ? kGridObsLayout : kPointObsLayout;
    for (std::size_t i = 0; i < cfg.knowledge.size(); ++i) {
        const auto& src = cfg.knowledge[i];
        const std::string path = idx_path("config.knowledge", i);
        try {
            if (src.is_pack()) {
                LoadedPack p = load_pack(src.pack);
                if (p.mapping.obs_layout() != expect_layout)
                    throw ConfigError("pack observes " + p.mapping.obs_layout() +
                                      " but the " + cfg.task + " task provides " + expect_layout);
                std::string nm = src.name.empty() ? p.name : src.name;
                set.add(KnowledgeEntry{std::move(nm), std::move(p.mapping), std::move(p.key)});
            } else if (cfg.is_grid()) {
                set.add(KnowledgeEntry{src.name.empty() ? src.scripted : src.name,
                                       KnowledgeMapping::scripted_grid(src.scripted),
                                       std::nullopt});
            } else {
                set.add(KnowledgeEntry{src.name.empty() ? src.scripted : src.name,
                                       KnowledgeMapping::scripted_point(src.scripted, src.epsilon),
                                       std::nullopt});
            }
        } catch (const IoError& e) {
            throw IoError(path + ": " + e.what());
        } catch (const ConfigError& e) {
            throw ConfigError(path + ": " + e.what());
        } catch (const UsageError& e) {
            throw ConfigError(path + ": " + e.what());
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// Bundles and checkpoints
// ---------------------------------------------------------------------------

GridBundle make_grid_bundle(const ExperimentConfig& cfg, std::uint64_t seed, bool with_critic) {
    if (!cfg.is_grid()) throw UsageError("make_grid_bundle: config task is \"point\"");
    GridBundle b;
    b.store = std::make_unique<ParameterStore>();
    CounterRng init_rng(seed, 0);
    b.actor = std::make_unique<GridActor>(kActorPrefix, cfg.grid_actor, build_knowledge(cfg),
                                          *b.store, init_rng);
    if (with_critic)
        b.critic = std::make_unique<GridCritic>(kCriticPrefix, cfg.grid_actor.policy, *b.store,
                                                init_rng);
    return b;
}

PointBundle make_point_bundle(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (cfg.is_grid()) throw UsageError("make_point_bundle: config task is \"grid\"");
    PointBundle b;
    b.store = std::make_unique<ParameterStore>();
    CounterRng init_rng(seed, 0);
    b.actor = std::make_unique<PointActor>(kActorPrefix, cfg.point_actor, build_knowledge(cfg),
                                           *b.store, init_rng);
    return b;
}

void save_actor_checkpoint(const ParameterStore& store, const std::string& blob_path) {
    std::map<std::string, TensorBuf> actor_only;
    const std::string prefix = kActorPrefix + ".";
    for (auto& [name, value] : store.snapshot())
        if (name.rfind(prefix, 0) == 0) actor_only.emplace(name, std::move(value));
    if (actor_only.empty())
        throw UsageError("save_actor_checkpoint: store holds no \"" + prefix + "*\" parameters");
    write_param_blob(blob_path, actor_only);
}

void load_actor_checkpoint(ParameterStore& store, const std::string& blob_path) {
    store.load(read_param_blob(blob_path));
}

// ---------------------------------------------------------------------------
// Greedy evaluation
// ---------------------------------------------------------------------------

GridAction greedy_grid_action(const GridActor& actor, const GridObservation& obs,
                              const AblationMask& mask, AttentionTrace* trace) {
    ad::NoGradGuard guard;
    GridActor::Batch b = actor.forward_batch({obs}, nullptr, mask);
    if (trace) {
        trace->raw = b.raw->value;
        trace->normalized = b.weights->value;
    }
    return static_cast<GridAction>(argmax_of(b.mixture->value));
}

ContinuousAction greedy_point_action(const PointActor& actor, const TensorBuf& obs,
                                     const AblationMask& mask, AttentionTrace* trace,
                                     int* component) {
    ad::NoGradGuard guard;
    PointActor::Batch b = actor.forward_batch({obs}, nullptr, mask);
    if (trace) {
        trace->raw = b.raw->value;
        trace->normalized = b.weights->value;
    }
    const int c = argmax_of(b.weights->value);
    if (component) *component = c;
    std::array<double, 4> a{};
    if (b.inner_active && c == 0) {
        for (std::size_t d = 0; d < 4; ++d) a[d] = std::tanh(b.mean->value[d]);
    } else {
        const std::size_t t = static_cast<std::size_t>(c) - (b.inner_active ? 1 : 0);
        for (std::size_t d = 0; d < 4; ++d) a[d] = b.k_mean[t]->value[d];
        if (b.k_squashed[t])
            for (std::size_t d = 0; d < 4; ++d) a[d] = std::tanh(a[d]);
    }
    ContinuousAction act;
    act.dxyz = {a[0], a[1], a[2]};
    act.grip = a[3];
    return act;
}

EvalMetrics evaluate_grid_policy(const GridActor& actor, const GridConfig& env_cfg,
                                 const AblationMask& mask, std::size_t episodes,
                                 std::uint64_t env_seed,
                                 std::vector<GridObservation>* visited) {
    if (episodes == 0) throw UsageError("evaluate_grid_policy: episodes must be positive");
    GridEnv env(env_cfg, env_seed);
    EvalMetrics m;
    m.episodes = episodes;
    double total = 0.0, worst = std::numeric_limits<double>::infinity();
    std::size_t successes = 0;
    for (std::size_t ep = 0; ep < episodes; ++ep) {
        GridObservation obs = env.reset();
        double ret = 0.0;
        while (true) {
            if (visited && visited->size() < kMaxVisited) visited->push_back(obs);
            const GridAction a = greedy_grid_action(actor, obs, mask);
            GridStepResult r = env.step_state(a);
            ret += r.reward;
            if (r.done) {
                if (r.reward > 0.0) ++successes;
                break;
            }
            obs = encode_observation(r.state);
        }
        total += ret;
        worst = std::min(worst, ret);
    }
    m.mean_return = total / static_cast<double>(episodes);
    m.min_return = worst;
    m.success_rate = static_cast<double>(successes) / static_cast<double>(episodes);
    return m;
}

EvalMetrics evaluate_point_policy(const PointActor& actor, const PointConfig& env_cfg,
                                  const AblationMask& mask, std::size_t episodes,
                                  std::uint64_t env_seed, std::vector<TensorBuf>* visited) {
    if (episodes == 0) throw UsageError("evaluate_point_policy: episodes must be positive");
    PointEnv env(env_cfg, env_seed);
    EvalMetrics m;
    m.episodes = episodes;
    double total = 0.0, worst = std::numeric_limits<double>::infinity();
    std::size_t successes = 0;
    for (std::size_t ep = 0; ep < episodes; ++ep) {
        TensorBuf obs = env.reset();
        double ret = 0.0;
        while (true) {
            if (visited && visited->size() < kMaxVisited) visited->push_back(obs);
            const ContinuousAction a = greedy_point_action(actor, obs, mask);
            PointStepResult r = env.step_state(a);
            ret += r.reward;
            if (r.done) {
                if (r.reward == 0.0) ++successes;
                break;
            }
            obs = encode_point_observation(r.state);
        }
        total += ret;
        worst = std::min(worst, ret);
    }
    m.mean_return = total / static_cast<double>(episodes);
    m.min_return = worst;
    m.success_rate = static_cast<double>(successes) / static_cast<double>(episodes);
    return m;
}

TensorBuf mean_inner_key_grid(const GridActor& actor, const std::vector<GridObservation>& obs) {
    if (obs.empty()) throw UsageError("mean_inner_key_grid: need at least one observation");
    ad::NoGradGuard guard;
    GridActor::Batch b = actor.forward_batch(obs, nullptr, full_mask(actor.knowledge()));
    const std::size_t n = obs.size();
    const std::size_t d = b.k_in->value.size() / n;
    TensorBuf key = TensorBuf::zeros({d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) key.data[k] += b.k_in->value[i * d + k];
    for (std::size_t k = 0; k < d; ++k) key.data[k] /= static_cast<double>(n);
    return key;
}

TensorBuf mean_inner_key_point(const PointActor& actor, const std::vector<TensorBuf>& obs) {
    if (obs.empty()) throw UsageError("mean_inner_key_point: need at least one observation");
    ad::NoGradGuard guard;
    PointActor::Batch b = actor.forward_batch(obs, nullptr, full_mask(actor.knowledge()));
    const std::size_t n = obs.size();
    const std::size_t d = b.k_in->value.size() / n;
    TensorBuf key = TensorBuf::zeros({d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) key.data[k] += b.k_in->value[i * d + k];
    for (std::size_t k = 0; k < d; ++k) key.data[k] /= static_cast<double>(n);
    return key;
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

std::string run_record_schema_text() { return detail::kRunRecordSchemaText; }

void validate_run_record_text(const std::string& json_text) {
    const json j = parse_json_or_throw(json_text, "run.json");
    const json schema = parse_json_or_throw(detail::kRunRecordSchemaText, "run record schema");
    schema_check(schema, j, "run.json");
    if (j.at("format").get<std::string>() != kRunFormat)
        throw ConfigError("run.json.format: unsupported format \"" +
                          j.at("format").get<std::string>() + "\"");
    const json& seeds = j.at("seeds");
    for (std::size_t s = 0; s < seeds.size(); ++s) {
        const json& evals = seeds[s].at("evals");
        for (std::size_t i = 1; i < evals.size(); ++i) {
            if (evals[i].at("step").get<std::uint64_t>() <=
                evals[i - 1].at("step").get<std::uint64_t>())
                throw ConfigError(idx_path("run.json.seeds", s) +
                                  ".evals: steps must be strictly increasing");
        }
    }
    parse_experiment_config(j.at("config").dump());
}

namespace {

json run_record_json(const RunRecord& rec) {
    json j;
    j["format"] = kRunFormat;
    j["config"] = json::parse(experiment_config_text(rec.config));
    j["git_describe"] = rec.git_describe;
    json seeds = json::array();
    for (const auto& s : rec.seeds) {
        json evals = json::array();
        for (const auto& e : s.evals) {
            json row = metrics_json(e.metrics);
            row["step"] = e.step;
            evals.push_back(std::move(row));
        }
        seeds.push_back(json{{"seed", s.seed},
                             {"evals", std::move(evals)},
                             {"final", metrics_json(s.final_eval)},
                             {"actor_blob", s.actor_blob},
                             {"pack", s.pack_manifest}});
    }
    j["seeds"] = std::move(seeds);
    return j;
}

}  // namespace

void write_run_record(const RunRecord& record, const std::string& path) {
    const std::string text = run_record_json(record).dump(2) + "\n";
    validate_run_record_text(text);
    spill(path, text);
}

RunRecord read_run_record(const std::string& path) {
    const std::string text = slurp(path);
    validate_run_record_text(text);
    const json j = json::parse(text);
    RunRecord rec;
    rec.config = parse_experiment_config(j.at("config").dump());
    rec.git_describe = j.at("git_describe").get<std::string>();
    for (const json& s : j.at("seeds")) {
        SeedRunResult r;
        r.seed = s.at("seed").get<std::uint64_t>();
        for (const json& e : s.at("evals"))
            r.evals.push_back(EvalPoint{e.at("step").get<std::size_t>(), metrics_from(e)});
        r.final_eval = metrics_from(s.at("final"));
        r.actor_blob = s.at("actor_blob").get<std::string>();
        r.pack_manifest = s.at("pack").get<std::string>();
        rec.seeds.push_back(std::move(r));
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

SeedRunResult train_grid_seed(const ExperimentConfig& cfg, std::uint64_t seed, bool freeze_keys,
                              const fs::path& out_root, std::ofstream& curves) {
    const std::string seed_name = "seed" + std::to_string(seed);
    const fs::path seed_dir = out_root / seed_name;
    fs::create_directories(seed_dir);

    GridBundle b = make_grid_bundle(cfg, seed, true);
    PPOConfig pcfg = cfg.ppo;
    if (freeze_keys) pcfg.freeze_params.push_back(kActorPrefix + ".keys");
    PPOTrainer trainer(pcfg, cfg.grid, *b.actor, *b.critic, *b.store, seed);

    std::ofstream stats(seed_dir / "stats.jsonl");
    if (!stats) throw IoError("cannot write " + (seed_dir / "stats.jsonl").string());

    SeedRunResult r;
    r.seed = seed;
    const AblationMask mask = full_mask(b.actor->knowledge());
    auto record = [&](std::size_t step, const EvalMetrics& m) {
        r.evals.push_back(EvalPoint{step, m});
        append_curve_row(curves, step, seed, m);
    };

    record(0, evaluate_grid_policy(*b.actor, cfg.grid, mask, cfg.eval_episodes,
                                   eval_env_seed(seed, 0)));
    std::size_t next_mark = cfg.eval_every;
    while (trainer.total_steps() < cfg.total_steps) {
        const PPOIterationStats it = trainer.iterate();
        stats << json{{"step", it.env_steps_total},
                      {"episodes", it.episodes},
                      {"mean_return", it.mean_return},
                      {"success_rate", it.success_rate},
                      {"policy_loss", it.update.policy_loss},
                      {"value_loss", it.update.value_loss},
                      {"entropy", it.update.entropy},
                      {"approx_kl", it.update.approx_kl},
                      {"clip_fraction", it.update.clip_fraction},
                      {"grad_norm", it.update.grad_norm},
                      {"mean_weights", it.mean_weights}}
                     .dump()
              << '\n';
        if (trainer.total_steps() >= next_mark && trainer.total_steps() < cfg.total_steps) {
            record(trainer.total_steps(),
                   evaluate_grid_policy(*b.actor, cfg.grid, mask, cfg.eval_episodes,
                                        eval_env_seed(seed, r.evals.size())));
            next_mark = (trainer.total_steps() / cfg.eval_every + 1) * cfg.eval_every;
        }
    }

    std::vector<GridObservation> visited;
    r.final_eval = evaluate_grid_policy(*b.actor, cfg.grid, mask, cfg.final_eval_episodes,
                                        eval_env_seed(seed, r.evals.size()), &visited);
    record(trainer.total_steps(), r.final_eval);

    r.actor_blob = seed_name + "/actor.blob";
    save_actor_checkpoint(*b.store, (out_root / r.actor_blob).string());
    r.pack_manifest = seed_name + "/pack.json";
    save_pack((out_root / r.pack_manifest).string(), cfg.name,
              KnowledgeMapping::frozen_grid(cfg.grid_actor.policy,
                                            extract_inner_policy(*b.store, kActorPrefix)),
              mean_inner_key_grid(*b.actor, visited));
    return r;
}

SeedRunResult train_point_seed(const ExperimentConfig& cfg, std::uint64_t seed, bool freeze_keys,
                               const fs::path& out_root, std::ofstream& curves) {
    const std::string seed_name = "seed" + std::to_string(seed);
    const fs::path seed_dir = out_root / seed_name;
    fs::create_directories(seed_dir);

    PointBundle b = make_point_bundle(cfg, seed);
    SACConfig scfg = cfg.sac;
    if (freeze_keys) scfg.freeze_params.push_back(kActorPrefix + ".keys");
    SACTrainer trainer(scfg, cfg.point, *b.actor, *b.store, seed);

    std::ofstream stats(seed_dir / "stats.jsonl");
    if (!stats) throw IoError("cannot write " + (seed_dir / "stats.jsonl").string());

    SeedRunResult r;
    r.seed = seed;
    const AblationMask mask = full_mask(b.actor->knowledge());
    auto record = [&](std::size_t step, const EvalMetrics& m) {
        r.evals.push_back(EvalPoint{step, m});
        append_curve_row(curves, step, seed, m);
    };

    record(0, evaluate_point_policy(*b.actor, cfg.point, mask, cfg.eval_episodes,
                                    eval_env_seed(seed, 0)));
    while (trainer.total_steps() < cfg.total_steps) {
        const std::size_t next_event =
            std::min(cfg.total_steps,
                     (trainer.total_steps() / cfg.eval_every + 1) * cfg.eval_every);
        const SACRunStats st = trainer.run(next_event - trainer.total_steps(), mask);
        stats << json{{"step", st.env_steps_total},
                      {"episodes", st.episodes},
                      {"mean_return", st.mean_return},
                      {"success_rate", st.success_rate},
                      {"updates", st.updates},
                      {"skipped_updates", st.skipped_updates},
                      {"critic_loss", st.critic_loss},
                      {"actor_loss", st.actor_loss},
                      {"alpha", st.alpha},
                      {"entropy", st.entropy},
                      {"mean_weights", st.mean_weights}}
                     .dump()
              << '\n';
        if (trainer.total_steps() < cfg.total_steps) {
            record(trainer.total_steps(),
                   evaluate_point_policy(*b.actor, cfg.point, mask, cfg.eval_episodes,
                                         eval_env_seed(seed, r.evals.size())));
        }
    }

    std::vector<TensorBuf> visited;
    r.final_eval = evaluate_point_policy(*b.actor, cfg.point, mask, cfg.final_eval_episodes,
                                         eval_env_seed(seed, r.evals.size()), &visited);
    record(trainer.total_steps(), r.final_eval);

    r.actor_blob = seed_name + "/actor.blob";
    save_actor_checkpoint(*b.store, (out_root / r.actor_blob).string());
    r.pack_manifest = seed_name + "/pack.json";
    save_pack((out_root / r.pack_manifest).string(), cfg.name,
              KnowledgeMapping::frozen_point(cfg.point_actor.policy,
                                             extract_inner_policy(*b.store, kActorPrefix)),
              mean_inner_key_point(*b.actor, visited));
    return r;
}

}  // namespace

RunRecord run_training(const ExperimentConfig& cfg_in, const TrainOptions& opts) {
    ExperimentConfig cfg = cfg_in;
    if (!opts.out_override.empty()) cfg.out_dir = opts.out_override;
    cfg.validate();
    if (opts.freeze_keys && cfg.actor_kind != "kgrl")
        throw ConfigError("freeze_keys requires a knowledge-grounded actor");

    std::vector<std::uint64_t> seeds = cfg.seeds;
    if (opts.only_seed) {
        if (!std::count(seeds.begin(), seeds.end(), *opts.only_seed))
            throw ConfigError("seed " + std::to_string(*opts.only_seed) +
                              " is not in config.seeds");
        seeds = {*opts.only_seed};
    }

    const fs::path out_root(cfg.out_dir);
    fs::create_directories(out_root);
    std::ofstream curves(out_root / "curves.csv");
    if (!curves) throw IoError("cannot write " + (out_root / "curves.csv").string());
    curves << kCurvesCsvHeader << '\n';

    RunRecord rec;
    rec.config = cfg;
    rec.git_describe = git_describe_or_unknown();
    for (std::uint64_t seed : seeds) {
        rec.seeds.push_back(cfg.is_grid()
                                ? train_grid_seed(cfg, seed, opts.freeze_keys, out_root, curves)
                                : train_point_seed(cfg, seed, opts.freeze_keys, out_root, curves));
        curves.flush();
    }

    write_run_record(rec, (out_root / "run.json").string());
    render_curves_svg((out_root / "curves.csv").string(), (out_root / "curves.svg").string());
    return rec;
}

// ---------------------------------------------------------------------------
// Evaluation / transfer
// ---------------------------------------------------------------------------

namespace {

const SeedRunResult& pick_seed(const RunRecord& rec,
                               const std::optional<std::uint64_t>& wanted) {
    if (!wanted) return rec.seeds.front();
    for (const auto& s : rec.seeds)
        if (s.seed == *wanted) return s;
    throw ConfigError("trained seed " + std::to_string(*wanted) + " is not part of this run");
}

}  // namespace

EvalReport run_evaluation(const std::string& run_dir, const EvalOptions& opts) {
    if (opts.episodes == 0) throw ConfigError("episodes: must be positive");
    const RunRecord rec = read_run_record((fs::path(run_dir) / "run.json").string());
    const SeedRunResult& sr = pick_seed(rec, opts.trained_seed);

    ExperimentConfig cfg = rec.config;
    if (opts.variant_override) {
        try {
            if (cfg.is_grid())
                cfg.grid.variant = grid_variant_from_string(*opts.variant_override);
            else
                cfg.point.variant = point_variant_from_string(*opts.variant_override);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("variant override: ") + e.what());
        }
    }
    if (opts.goal_range_override) {
        if (cfg.is_grid())
            throw ConfigError("goal-range override applies to the point task only");
        cfg.point.goal_range_scale = *opts.goal_range_override;
    }
    if (cfg.is_grid())
        cfg.grid.validate();
    else
        cfg.point.validate();

    // Evaluation must never mutate stored artifacts: hash every file it loads.
    std::vector<std::string> guarded;
    guarded.push_back((fs::path(run_dir) / sr.actor_blob).string());
    for (const auto& src : cfg.knowledge) {
        if (!src.is_pack()) continue;
        guarded.push_back(src.pack);
        const fs::path side = pack_blob_sidecar(src.pack);
        if (fs::exists(side)) guarded.push_back(side.string());
    }
    std::vector<std::uint64_t> before;
    before.reserve(guarded.size());
    for (const auto& f : guarded) before.push_back(fnv1a_file(f));

    EvalReport rep;
    rep.trained_seed = sr.seed;
    if (cfg.is_grid()) {
        GridBundle b = make_grid_bundle(cfg, sr.seed, false);
        load_actor_checkpoint(*b.store, (fs::path(run_dir) / sr.actor_blob).string());
        const AblationMask mask = opts.drop.empty()
                                      ? full_mask(b.actor->knowledge())
                                      : make_ablation(b.actor->knowledge(), opts.drop);
        rep.metrics =
            evaluate_grid_policy(*b.actor, cfg.grid, mask, opts.episodes, opts.eval_seed);
        rep.env_desc = "grid/" + grid_variant_to_string(cfg.grid.variant) + " " +
                       std::to_string(cfg.grid.width) + "x" + std::to_string(cfg.grid.height);
    } else {
        PointBundle b = make_point_bundle(cfg, sr.seed);
        load_actor_checkpoint(*b.store, (fs::path(run_dir) / sr.actor_blob).string());
        const AblationMask mask = opts.drop.empty()
                                      ? full_mask(b.actor->knowledge())
                                      : make_ablation(b.actor->knowledge(), opts.drop);
        rep.metrics =
            evaluate_point_policy(*b.actor, cfg.point, mask, opts.episodes, opts.eval_seed);
        rep.env_desc = "point/" + point_variant_to_string(cfg.point.variant) +
                       " goal_range_scale=" + fmt_g(cfg.point.goal_range_scale);
    }

    for (std::size_t i = 0; i < guarded.size(); ++i)
        if (fnv1a_file(guarded[i]) != before[i])
            throw IoError("evaluation mutated " + guarded[i]);
    return rep;
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

TraceResult run_trace(const std::string& run_dir, const TraceOptions& opts) {
    const RunRecord rec = read_run_record((fs::path(run_dir) / "run.json").string());
    const SeedRunResult& sr = pick_seed(rec, opts.trained_seed);
    const ExperimentConfig& cfg = rec.config;

    TraceResult t;
    const fs::path csv =
        opts.out_csv.empty() ? fs::path(run_dir) / "trace.csv" : fs::path(opts.out_csv);
    fs::path svg = csv;
    svg.replace_extension(".svg");

    if (cfg.is_grid()) {
        GridBundle b = make_grid_bundle(cfg, sr.seed, false);
        load_actor_checkpoint(*b.store, (fs::path(run_dir) / sr.actor_blob).string());
        t.component_names = component_labels(b.actor->knowledge());
        const AblationMask mask = full_mask(b.actor->knowledge());
        GridEnv env(cfg.grid, opts.episode_seed);
        GridObservation obs = env.reset();
        for (std::size_t step = 0;; ++step) {
            AttentionTrace at;
            const GridAction a = greedy_grid_action(*b.actor, obs, mask, &at);
            const GridState prev = env.state();
            const GridStepResult r = env.step_state(a);
            t.episode_return += r.reward;
            std::string event = "none";
            if (r.done && r.reward > 0.0)
                event = "success";
            else if (!prev.carrying_key && r.state.carrying_key)
                event = "key_pickup";
            else if (open_door_count(r.state) > open_door_count(prev))
                event = "door_open";
            t.steps.push_back(step);
            t.chosen.push_back(argmax_of(at.normalized));
            t.events.push_back(event);
            t.raw.push_back(at.raw);
            t.normalized.push_back(at.normalized);
            if (r.done) break;
            obs = encode_observation(r.state);
        }
    } else {
        PointBundle b = make_point_bundle(cfg, sr.seed);
        load_actor_checkpoint(*b.store, (fs::path(run_dir) / sr.actor_blob).string());
        t.component_names = component_labels(b.actor->knowledge());
        const AblationMask mask = full_mask(b.actor->knowledge());
        PointEnv env(cfg.point, opts.episode_seed);
        TensorBuf obs = env.reset();
        for (std::size_t step = 0;; ++step) {
            AttentionTrace at;
            const ContinuousAction a = greedy_point_action(*b.actor, obs, mask, &at);
            const bool held_before = env.state().object_held;
            const PointStepResult r = env.step_state(a);
            t.episode_return += r.reward;
            std::string event = "none";
            if (r.reward == 0.0)
                event = "success";
            else if (!held_before && r.state.object_held)
                event = "grasp";
            t.steps.push_back(step);
            t.chosen.push_back(argmax_of(at.normalized));
            t.events.push_back(event);
            t.raw.push_back(at.raw);
            t.normalized.push_back(at.normalized);
            if (r.done) break;
            obs = encode_point_observation(r.state);
        }
    }

    for (std::size_t i = 1; i < t.chosen.size(); ++i)
        if (t.chosen[i] != t.chosen[i - 1]) ++t.dominant_switches;

    std::ostringstream out;
    out << "step,chosen,event";
    for (const auto& n : t.component_names) out << ",raw_" << n;
    for (const auto& n : t.component_names) out << ",norm_" << n;
    out << '\n';
    char buf[40];
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
        out << t.steps[i] << ',' << t.chosen[i] << ',' << t.events[i];
        for (double v : t.raw[i]) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out << buf;
        }
        for (double v : t.normalized[i]) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out << buf;
        }
        out << '\n';
    }
    spill(csv.string(), out.str());
    render_trace_svg(csv.string(), svg.string());
    t.csv_path = csv.string();
    t.svg_path = svg.string();
    return t;
}

// ---------------------------------------------------------------------------
// Goal-range sweep
// ---------------------------------------------------------------------------

std::vector<SweepRow> run_goal_range_sweep(const std::string& run_dir,
                                           const SweepOptions& opts) {
    if (opts.episodes == 0) throw ConfigError("episodes: must be positive");
    const RunRecord rec = read_run_record((fs::path(run_dir) / "run.json").string());
    if (rec.config.is_grid())
        throw ConfigError("the goal-range sweep applies to point-task runs");
    const SeedRunResult& sr = pick_seed(rec, opts.trained_seed);

    std::vector<double> scales = opts.scales;
    if (scales.empty())
        for (int i = 1; i <= 10; ++i) scales.push_back(static_cast<double>(i) / 10.0);

    PointBundle b = make_point_bundle(rec.config, sr.seed);
    load_actor_checkpoint(*b.store, (fs::path(run_dir) / sr.actor_blob).string());
    const AblationMask mask = full_mask(b.actor->knowledge());

    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < scales.size(); ++i) {
        PointConfig pc = rec.config.point;
        pc.goal_range_scale = scales[i];
        try {
            pc.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(idx_path("scales", i) + ": " + e.what());
        }
        SweepRow row;
        row.scale = scales[i];
        row.metrics =
            evaluate_point_policy(*b.actor, pc, mask, opts.episodes, opts.eval_seed);
        rows.push_back(row);
    }

    const fs::path csv = fs::path(run_dir) / "sweep.csv";
    std::ostringstream out;
    out << kSweepCsvHeader << '\n';
    for (const auto& row : rows) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "%.10g,%zu,%.10g,%.10g,%.10g", row.scale,
                      row.metrics.episodes, row.metrics.mean_return, row.metrics.min_return,
                      row.metrics.success_rate);
        out << buf << '\n';
    }
    spill(csv.string(), out.str());
    render_sweep_svg(csv.string(), (fs::path(run_dir) / "sweep.svg").string());
    return rows;
}

// ---------------------------------------------------------------------------
// Plot rendering (from the CSV artifacts of record)
// ---------------------------------------------------------------------------

void render_curves_svg(const std::string& csv_path, const std::string& svg_path) {
    const CsvTable t = read_csv(csv_path);
    const std::size_t step_c = t.col("step"), seed_c = t.col("seed"),
                      mean_c = t.col("mean_return");
    std::vector<ChartSeries> series;
    for (const auto& row : t.rows) {
        const std::string label = "seed " + row.at(seed_c);
        auto it = std::find_if(series.begin(), series.end(),
                               [&](const ChartSeries& s) { return s.label == label; });
        if (it == series.end()) {
            series.push_back(ChartSeries{label, {}});
            it = series.end() - 1;
        }
        it->pts.push_back({csv_num(row, step_c), csv_num(row, mean_c)});
    }
    write_line_chart(svg_path, "greedy evaluation return", "env steps", "mean return", series);
}

void render_trace_svg(const std::string& csv_path, const std::string& svg_path) {
    const CsvTable t = read_csv(csv_path);
    const std::size_t step_c = t.col("step");
    std::vector<ChartSeries> series;
    for (std::size_t c = 0; c < t.header.size(); ++c) {
        if (t.header[c].rfind("norm_", 0) != 0) continue;
        ChartSeries s;
        s.label = t.header[c].substr(5);
        for (const auto& row : t.rows) s.pts.push_back({csv_num(row, step_c), csv_num(row, c)});
        series.push_back(std::move(s));
    }
    write_line_chart(svg_path, "attention weights over one episode", "step",
                     "normalized weight", series);
}

void render_sweep_svg(const std::string& csv_path, const std::string& svg_path) {
    const CsvTable t = read_csv(csv_path);
    const std::size_t scale_c = t.col("scale"), succ_c = t.col("success_rate");
    ChartSeries s;
    s.label = "success rate";
    for (const auto& row : t.rows) s.pts.push_back({csv_num(row, scale_c), csv_num(row, succ_c)});
    write_line_chart(svg_path, "success rate by goal-range scale", "goal range scale",
                     "success rate", {s});
}

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::uint64_t hash = 14695981039346656037ULL;
    char buf[65536];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        const std::streamsize n = in.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            hash ^= static_cast<unsigned char>(buf[i]);
            hash *= 1099511628211ULL;
        }
        if (!in) break;
    }
    return hash;
}

std::string git_describe_or_unknown() {
    FILE* pipe = ::popen("git describe --always --dirty 2>/dev/null", "r");
    if (!pipe) return "unknown";
    std::string out;
    char buf[256];
    while (std::fgets(buf, sizeof buf, pipe)) out += buf;
    ::pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r' || out.back() == ' '))
        out.pop_back();
    return out.empty() ? "unknown" : out;
}

}  // namespace kgrl
