#include "bias_audit/config.hpp"

#include <cctype>
#include <charconv>
#include <set>

namespace bias_audit {

namespace {

class ValueParser {
public:
    ValueParser(std::string_view text, std::size_t line) : s_(text), line_(line) {}

    json parse_value() {
        skip_ws();
        if (pos_ >= s_.size()) fail("missing value");
        const char c = s_[pos_];
        if (c == '"') return parse_string();
        if (c == '[') return parse_array();
        if (s_.substr(pos_).starts_with("true")) {
            pos_ += 4;
            return true;
        }
        if (s_.substr(pos_).starts_with("false")) {
            pos_ += 5;
            return false;
        }
        return parse_number();
    }

    void expect_end() {
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] != '#') fail("unexpected text after value");
    }

private:
    [[noreturn]] void fail(const std::string& what) const { throw ParseError(line_, what); }

    void skip_ws() {
        while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
    }

    json parse_string() {
        ++pos_;
        std::string out;
        while (pos_ < s_.size() && s_[pos_] != '"') {
            char c = s_[pos_++];
            if (c == '\\') {
                if (pos_ >= s_.size()) fail("unterminated escape");
                const char e = s_[pos_++];
                switch (e) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default: fail(std::string("unsupported escape \\") + e);
                }
            } else {
                out += c;
            }
        }
        if (pos_ >= s_.size()) fail("unterminated string");
        ++pos_;
        return out;
    }

    json parse_array() {
        ++pos_;
        json arr = json::array();
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
            ++pos_;
            return arr;
        }
        for (;;) {
            arr.push_back(parse_value());
            skip_ws();
            if (pos_ >= s_.size()) fail("unterminated array");
            if (s_[pos_] == ',') {
                ++pos_;
                skip_ws();
                if (pos_ < s_.size() && s_[pos_] == ']') {
                    ++pos_;
                    return arr;
                }
                continue;
            }
            if (s_[pos_] == ']') {
                ++pos_;
                return arr;
            }
            fail("expected ',' or ']'");
        }
    }

    json parse_number() {
        const std::size_t start = pos_;
        while (pos_ < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '-' ||
                                    s_[pos_] == '+' || s_[pos_] == '.' || s_[pos_] == 'e' || s_[pos_] == 'E' ||
                                    s_[pos_] == '_')) {
            ++pos_;
        }
        std::string tok;
        for (char c : s_.substr(start, pos_ - start)) {
            if (c != '_') tok += c;
        }
        if (tok.empty()) fail("unrecognized value");
        const bool is_float = tok.find_first_of(".eE") != std::string::npos;
        if (!is_float) {
            std::int64_t v = 0;
            const char* b = tok.data() + (tok[0] == '+' ? 1 : 0);
            auto [p, ec] = std::from_chars(b, tok.data() + tok.size(), v);
            if (ec != std::errc() || p != tok.data() + tok.size()) fail("bad integer '" + tok + "'");
            return v;
        }
        try {
            std::size_t used = 0;
            double v = std::stod(tok, &used);
            if (used != tok.size()) fail("bad number '" + tok + "'");
            return v;
        } catch (const std::logic_error&) {
            fail("bad number '" + tok + "'");
        }
    }

    std::string_view s_;
    std::size_t line_;
    std::size_t pos_ = 0;
};

bool valid_key(std::string_view k) {
    if (k.empty()) return false;
    for (char c : k) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
    }
    return true;
}

// Typed field readers that reject wrong types and unknown keys.
class Section {
public:
    Section(const json& doc, std::string name) : name_(std::move(name)) {
        if (doc.contains(name_)) {
            if (!doc[name_].is_object()) throw ConfigError("[" + name_ + "] is not a table");
            obj_ = doc[name_];
        }
    }
    Section(json obj, std::string name, bool) : obj_(std::move(obj)), name_(std::move(name)) {}

    template <typename T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (!obj_.contains(key)) return;
        const json& v = obj_[key];
        try {
            if constexpr (std::is_same_v<T, double>) {
                if (!v.is_number()) throw ConfigError("");
                out = v.get<double>();
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) throw ConfigError("");
                out = v.get<T>();
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError("");
                out = v.get<std::string>();
            } else {
                if (!v.is_array()) throw ConfigError("");
                out = v.get<T>();
            }
        } catch (const std::exception&) {
            throw ConfigError(name_ + "." + key + " has the wrong type");
        }
    }

    void finish() const {
        if (!obj_.is_object()) return;
        for (const auto& [k, _] : obj_.items()) {
            if (!seen_.count(k)) throw ConfigError("unknown key " + name_ + "." + k);
        }
    }

private:
    json obj_ = json::object();
    std::string name_;
    std::set<std::string> seen_;
};

}  // namespace

json parse_toml_subset(std::string_view text) {
    json doc = json::object();
    json* table = &doc;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (line[0] == '[') {
            const auto close = line.find(']');
            if (close == std::string::npos) throw ParseError(line_no, "unterminated table header");
            const std::string rest = trim(std::string_view(line).substr(close + 1));
            if (!rest.empty() && rest[0] != '#') throw ParseError(line_no, "text after table header");
            table = &doc;
            std::string name = trim(std::string_view(line).substr(1, close - 1));
            std::size_t start = 0;
            while (true) {
                const auto dot = name.find('.', start);
                std::string part = trim(std::string_view(name).substr(start, dot == std::string::npos ? std::string::npos : dot - start));
                if (!valid_key(part)) throw ParseError(line_no, "bad table name '" + name + "'");
                if (table->contains(part) && !(*table)[part].is_object()) {
                    throw ParseError(line_no, "table '" + part + "' clashes with a key");
                }
                table = &(*table)[part];
                if (table->is_null()) *table = json::object();
                if (dot == std::string::npos) break;
                start = dot + 1;
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(line_no, "expected key = value");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        if (!valid_key(key)) throw ParseError(line_no, "bad key '" + key + "'");
        if (table->contains(key)) throw ParseError(line_no, "duplicate key '" + key + "'");
        ValueParser vp(std::string_view(line).substr(eq + 1), line_no);
        json value = vp.parse_value();
        vp.expect_end();
        (*table)[key] = std::move(value);
    }
    return doc;
}

RunConfig config_from_document(const json& doc, const fs::path& source) {
    static const std::set<std::string> known = {"run", "roles", "thresholds", "counts", "eval", "stub", "providers"};
    for (const auto& [k, _] : doc.items()) {
        if (!known.count(k)) throw ConfigError("unknown section [" + k + "]");
    }
    RunConfig c;
    c.source = source;

    Section run(doc, "run");
    std::string caption_format = "tsv";
    run.read("seed", c.seed);
    run.read("captions", c.captions);
    run.read("caption_format", caption_format);
    run.read("templates_dir", c.templates_dir);
    run.read("fewshot", c.fewshot);
    run.read("cache_dir", c.cache_dir);
    run.read("image_width", c.image_width);
    run.read("image_height", c.image_height);
    run.finish();
    auto fmt = parse_caption_format(caption_format);
    if (!fmt) throw ConfigError("run.caption_format must be tsv or jsonl");
    c.caption_format = *fmt;
    if (c.image_width < 1 || c.image_height < 1) throw ConfigError("image size must be positive");

    Section th(doc, "thresholds");
    th.read("impact_min", c.impact_min);
    th.read("clip", c.clip_threshold);
    th.read("tau", c.tau);
    th.read("jaccard", c.jaccard);
    th.finish();
    if (c.impact_min < 1 || c.impact_min > 5) throw ConfigError("thresholds.impact_min must be in [1,5]");
    if (c.clip_threshold < -1 || c.clip_threshold > 1) throw ConfigError("thresholds.clip must be in [-1,1]");
    if (c.tau < 0 || c.tau > 1) throw ConfigError("thresholds.tau must be in [0,1]");
    if (c.jaccard <= 0 || c.jaccard > 1) throw ConfigError("thresholds.jaccard must be in (0,1]");

    Section counts(doc, "counts");
    std::int64_t batch = static_cast<std::int64_t>(c.batch_size);
    counts.read("n_tasks", c.n_tasks);
    counts.read("n_pairs", c.n_pairs);
    counts.read("max_retries", c.max_retries);
    counts.read("max_regenerations", c.max_regenerations);
    counts.read("max_reasks", c.max_reasks);
    counts.read("batch_size", batch);
    counts.finish();
    if (c.n_tasks < 1 || c.n_pairs < 1 || c.max_retries < 0 || c.max_regenerations < 0 || c.max_reasks < 0 ||
        batch < 1) {
        throw ConfigError("counts must be positive (retry budgets nonnegative)");
    }
    c.batch_size = static_cast<std::size_t>(batch);

    Section ev(doc, "eval");
    std::string calibration = "l1";
    ev.read("calibration", calibration);
    ev.finish();
    auto cv = parse_calibration_variant(calibration);
    if (!cv) throw ConfigError("eval.calibration must be l1 or rms");
    c.calibration = *cv;

    Section stub(doc, "stub");
    std::string scorer_mode = "aligned";
    stub.read("delay_ms", c.stub.delay_ms);
    stub.read("refuse_if_contains", c.stub.refuse_if_contains);
    stub.read("scorer_mode", scorer_mode);
    stub.finish();
    if (scorer_mode == "aligned") {
        c.stub.scorer_mode = StubScorerMode::Aligned;
    } else if (scorer_mode == "hashed") {
        c.stub.scorer_mode = StubScorerMode::Hashed;
    } else {
        throw ConfigError("stub.scorer_mode must be aligned or hashed");
    }

    if (doc.contains("providers")) {
        if (!doc["providers"].is_object()) throw ConfigError("[providers] must hold [providers.<id>] tables");
        for (const auto& [id, table] : doc["providers"].items()) {
            if (!table.is_object()) throw ConfigError("providers." + id + " must be a table");
            Section p(table, "providers." + id, true);
            ProviderConfig pc;
            pc.provider_id = id;
            pc.auth_env = default_auth_env(id);
            std::string kind = "chat";
            std::string style = "wire";
            p.read("kind", kind);
            p.read("base_url", pc.base_url);
            p.read("model", pc.model);
            p.read("auth_env", pc.auth_env);
            p.read("api_style", style);
            p.read("max_in_flight", pc.max_in_flight);
            p.read("requests_per_minute", pc.requests_per_minute);
            p.read("timeout_seconds", pc.timeout_seconds);
            p.finish();
            auto k = parse_provider_kind(kind);
            if (!k) throw ConfigError("providers." + id + ".kind is not a provider kind: " + kind);
            pc.kind = *k;
            auto st = parse_api_style(style);
            if (!st) throw ConfigError("providers." + id + ".api_style is not known: " + style);
            pc.api_style = *st;
            validate(pc);
            c.providers[id] = pc;
        }
    }

    Section roles(doc, "roles");
    roles.read("miner", c.roles.miner);
    roles.read("taskgen", c.roles.taskgen);
    roles.read("independence", c.roles.independence);
    roles.read("judge", c.roles.judge);
    roles.read("image_gen", c.roles.image_gen);
    roles.read("scorer", c.roles.scorer);
    roles.read("models", c.roles.models);
    roles.finish();
    if (c.roles.independence.empty()) c.roles.independence = c.roles.taskgen;

    auto check_role = [&](const std::string& role, const std::string& id, std::initializer_list<ProviderKind> kinds) {
        if (id.empty()) return;
        auto it = c.providers.find(id);
        if (it == c.providers.end()) throw ConfigError("roles." + role + " names unknown provider '" + id + "'");
        for (auto k : kinds) {
            if (it->second.kind == k) return;
        }
        throw ConfigError("roles." + role + " provider '" + id + "' has kind " +
                          std::string(to_string(it->second.kind)));
    };
    check_role("miner", c.roles.miner, {ProviderKind::Chat, ProviderKind::VisionChat});
    check_role("taskgen", c.roles.taskgen, {ProviderKind::Chat, ProviderKind::VisionChat});
    check_role("independence", c.roles.independence, {ProviderKind::Chat, ProviderKind::VisionChat});
    check_role("judge", c.roles.judge, {ProviderKind::Chat, ProviderKind::VisionChat});
    check_role("image_gen", c.roles.image_gen, {ProviderKind::ImageGen});
    check_role("scorer", c.roles.scorer, {ProviderKind::Scorer});
    std::set<std::string> model_ids;
    for (const auto& m : c.roles.models) {
        check_role("models", m, {ProviderKind::VisionChat});
        if (!model_ids.insert(m).second) throw ConfigError("roles.models lists '" + m + "' twice");
    }
    return c;
}

RunConfig load_config(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    try {
        return config_from_document(parse_toml_subset(read_file(path)), fs::absolute(path));
    } catch (const ParseError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

fs::path resolve_path(const RunConfig& cfg, const std::string& p) {
    if (p.empty()) return {};
    fs::path path(p);
    if (path.is_absolute() || cfg.source.empty()) return path;
    return cfg.source.parent_path() / path;
}

json RunConfig::to_json() const {
    json providers_json = json::object();
    for (const auto& [id, p] : providers) {
        providers_json[id] = {{"kind", to_string(p.kind)},
                              {"base_url", p.base_url},
                              {"model", p.model},
                              {"auth_env", p.auth_env},
                              {"api_style", to_string(p.api_style)},
                              {"max_in_flight", p.max_in_flight},
                              {"requests_per_minute", p.requests_per_minute},
                              {"timeout_seconds", p.timeout_seconds}};
    }
    return {{"run",
             {{"seed", seed},
              {"captions", captions},
              {"caption_format", caption_format == CaptionFormat::Tsv ? "tsv" : "jsonl"},
              {"templates_dir", templates_dir},
              {"fewshot", fewshot},
              {"cache_dir", cache_dir},
              {"image_width", image_width},
              {"image_height", image_height}}},
            {"thresholds", {{"impact_min", impact_min}, {"clip", clip_threshold}, {"tau", tau}, {"jaccard", jaccard}}},
            {"counts",
             {{"n_tasks", n_tasks},
              {"n_pairs", n_pairs},
              {"max_retries", max_retries},
              {"max_regenerations", max_regenerations},
              {"max_reasks", max_reasks},
              {"batch_size", batch_size}}},
            {"eval", {{"calibration", calibration == CalibrationVariant::L1 ? "l1" : "rms"}}},
            {"stub",
             {{"delay_ms", stub.delay_ms},
              {"refuse_if_contains", stub.refuse_if_contains},
              {"scorer_mode", stub.scorer_mode == StubScorerMode::Aligned ? "aligned" : "hashed"}}},
            {"roles",
             {{"miner", roles.miner},
              {"taskgen", roles.taskgen},
              {"independence", roles.independence},
              {"judge", roles.judge},
              {"image_gen", roles.image_gen},
              {"scorer", roles.scorer},
              {"models", roles.models}}},
            {"providers", providers_json}};
}

std::string RunConfig::digest() const { return sha256_hex(to_json().dump()); }

std::string default_stub_config_text() {
    return R"(# Every role served by deterministic in-process stubs.
[run]
seed = 20250101
image_width = 64
image_height = 64

[thresholds]
impact_min = 4
clip = 0.2
tau = 0.2

[counts]
n_tasks = 5
n_pairs = 1
max_retries = 3

[eval]
calibration = "l1"

[roles]
miner = "stub-llm"
taskgen = "stub-llm"
judge = "stub-llm"
image_gen = "stub-image"
scorer = "stub-scorer"
models = ["stub-vlm"]

[providers.stub-llm]
kind = "chat"
base_url = "stub:"
requests_per_minute = 1000000
max_in_flight = 8
model = "stub-chat-1"

[providers.stub-vlm]
kind = "vision_chat"
base_url = "stub:"
requests_per_minute = 1000000
max_in_flight = 8
model = "stub-vision-1"

[providers.stub-image]
kind = "image_gen"
base_url = "stub:"
requests_per_minute = 1000000
max_in_flight = 8
model = "stub-noise-1"

[providers.stub-scorer]
kind = "scorer"
base_url = "stub:"
requests_per_minute = 1000000
max_in_flight = 8
model = "stub-score-1"
)";
}

}  // namespace bias_audit
