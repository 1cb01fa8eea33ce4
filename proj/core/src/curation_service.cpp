#include "bias_audit/curation_service.hpp"

#include <cctype>
#include <charconv>
#include <set>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "http_server_options.hpp"

namespace bias_audit {

std::optional<CurationVerb> parse_curation_verb(std::string_view s) {
    if (s == "approve") return CurationVerb::Approve;
    if (s == "reject") return CurationVerb::Reject;
    if (s == "merge") return CurationVerb::Merge;
    return std::nullopt;
}

BiasAttribute apply_action(KnowledgeBase& kb, const CurationAction& action) {
    auto rec = kb.get(action.attribute_id);
    if (!rec) throw UnknownAttribute(action.attribute_id);
    switch (action.action) {
        case CurationVerb::Approve: rec->status = AttributeStatus::Approved; break;
        case CurationVerb::Reject: rec->status = AttributeStatus::Rejected; break;
        case CurationVerb::Merge:
            if (action.target_id.empty()) throw PreconditionError("merge needs target_id");
            rec->status = AttributeStatus::Merged;
            rec->merged_into = action.target_id;
            break;
    }
    if (!action.actor.empty()) rec->extra["actor"] = action.actor;
    if (!action.note.empty()) rec->extra["note"] = action.note;
    kb.append(*rec);
    return *kb.get(action.attribute_id);
}

std::string_view to_string(BandStatus s) {
    switch (s) {
        case BandStatus::Under: return "under";
        case BandStatus::InBand: return "in_band";
        case BandStatus::Over: return "over";
    }
    return "under";
}

BandStatus band_status(std::size_t approved) {
    if (approved < static_cast<std::size_t>(kBandLow)) return BandStatus::Under;
    if (approved > static_cast<std::size_t>(kBandHigh)) return BandStatus::Over;
    return BandStatus::InBand;
}

BalanceReport category_balance(const KnowledgeBase& kb) {
    BalanceReport out;
    for (std::size_t i = 0; i < kAllCategories.size(); ++i) out.categories[i].category = kAllCategories[i];
    for (const auto& rec : kb.query(KbQuery{.status = std::set{AttributeStatus::Approved}, .category = {}, .min_score = {}})) {
        for (auto& c : out.categories) {
            if (c.category == rec.category) ++c.approved;
        }
        ++out.total;
    }
    for (auto& c : out.categories) c.status = band_status(c.approved);
    return out;
}

json to_json(const BalanceReport& b) {
    json cats = json::object();
    for (const auto& c : b.categories) {
        cats[std::string(to_string(c.category))] = {{"approved", c.approved}, {"status", to_string(c.status)}};
    }
    return {{"band", {kBandLow, kBandHigh}}, {"categories", cats}, {"total", b.total}};
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kPlaceholderPage = R"(<!doctype html>
<html lang="en">
<head><meta charset="utf-8"><title>Bias attribute curation</title></head>
<body>
<h1>Bias attribute curation</h1>
<p>The curation UI bundle is not installed. The JSON API is available under <code>/api/</code>:</p>
<ul>
<li><a href="/api/attributes?status=candidate">/api/attributes?status=candidate</a></li>
<li><a href="/api/balance">/api/balance</a></li>
<li><a href="/api/duplicates">/api/duplicates</a></li>
<li><a href="/api/results/summary">/api/results/summary</a></li>
</ul>
</body>
</html>
)";

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", message}});
}

std::optional<int> parse_int(const std::string& s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
    return v;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        std::string part = trim(std::string_view(s).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (!part.empty()) out.push_back(part);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::vector<json> read_rows_if_present(const fs::path& p) {
    if (!fs::exists(p)) return {};
    return read_jsonl(p);
}

bool is_hex_digest(const std::string& s) {
    if (s.size() != 64) return false;
    for (char c : s) {
        if (!std::isxdigit(static_cast<unsigned char>(c)) || std::isupper(static_cast<unsigned char>(c))) return false;
    }
    return true;
}

}  // namespace

CurationService::CurationService(KnowledgeBase& kb, CurationServiceOptions options)
    : kb_(kb), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
    detail::exclusive_bind(*server_);
    install_routes();
}

CurationService::~CurationService() { stop(); }

void CurationService::install_routes() {
    auto& srv = *server_;
    srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        } catch (...) {
            send_error(res, 500, "unknown error");
        }
    });

    srv.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, {{"status", "ok"}}); });

    srv.Get("/api/attributes", [this](const httplib::Request& req, httplib::Response& res) {
        KbQuery q;
        if (req.has_param("status")) {
            std::set<AttributeStatus> st;
            for (const auto& s : split_commas(req.get_param_value("status"))) {
                auto v = parse_status(s);
                if (!v) return send_error(res, 400, "unknown status '" + s + "'");
                st.insert(*v);
            }
            if (!st.empty()) q.status = st;
        }
        if (req.has_param("category")) {
            std::set<AttributeCategory> cats;
            for (const auto& s : split_commas(req.get_param_value("category"))) {
                auto v = parse_category_lenient(s);
                if (!v) return send_error(res, 400, "unknown category '" + s + "'");
                cats.insert(*v);
            }
            if (!cats.empty()) q.category = cats;
        }
        if (req.has_param("min_score")) {
            auto v = parse_int(req.get_param_value("min_score"));
            if (!v) return send_error(res, 400, "min_score must be an integer");
            q.min_score = *v;
        }
        std::size_t offset = 0;
        std::optional<std::size_t> limit;
        if (req.has_param("offset")) {
            auto v = parse_int(req.get_param_value("offset"));
            if (!v || *v < 0) return send_error(res, 400, "offset must be a nonnegative integer");
            offset = static_cast<std::size_t>(*v);
        }
        if (req.has_param("limit")) {
            auto v = parse_int(req.get_param_value("limit"));
            if (!v || *v < 0) return send_error(res, 400, "limit must be a nonnegative integer");
            limit = static_cast<std::size_t>(*v);
        }
        const auto records = kb_.query(q);
        json arr = json::array();
        for (std::size_t i = offset; i < records.size(); ++i) {
            if (limit && arr.size() >= *limit) break;
            arr.push_back(to_json(records[i]));
        }
        send_json(res, 200, arr);
    });

    srv.Post(R"(/api/attributes/([^/]+)/action)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        json body = json::parse(req.body, nullptr, false);
        if (body.is_discarded() || !body.is_object()) return send_error(res, 400, "body must be a JSON object");
        if (!body.contains("action") || !body["action"].is_string()) return send_error(res, 400, "missing action");
        auto verb = parse_curation_verb(body["action"].get<std::string>());
        if (!verb) return send_error(res, 400, "action must be approve, reject or merge");
        for (const char* key : {"target_id", "actor", "note"}) {
            if (body.contains(key) && !body[key].is_string() && !body[key].is_null()) {
                return send_error(res, 400, std::string(key) + " must be a string");
            }
        }
        auto str = [&](const char* key) {
            return body.contains(key) && body[key].is_string() ? body[key].get<std::string>() : std::string();
        };
        CurationAction action{id, *verb, str("target_id"), str("actor"), str("note")};
        if (*verb == CurationVerb::Merge && action.target_id.empty()) {
            return send_error(res, 400, "merge needs target_id");
        }
        try {
            send_json(res, 200, to_json(apply_action(kb_, action)));
        } catch (const UnknownAttribute& e) {
            send_error(res, 404, std::string("unknown attribute ") + e.what());
        } catch (const IllegalTransition& e) {
            send_error(res, 409, e.what());
        } catch (const DuplicateId& e) {
            send_error(res, 409, e.what());
        } catch (const PreconditionError& e) {
            send_error(res, 400, e.what());
        }
    });

    srv.Get("/api/balance", [this](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, to_json(category_balance(kb_)));
    });

    srv.Get("/api/duplicates", [this](const httplib::Request&, httplib::Response& res) {
        const auto records = kb_.query(KbQuery{.status = std::set{AttributeStatus::Candidate, AttributeStatus::Approved},
                                               .category = {},
                                               .min_score = {}});
        json clusters = json::array();
        if (!records.empty()) clusters = find_duplicates(records, options_.jaccard_min);
        send_json(res, 200, {{"jaccard_min", options_.jaccard_min}, {"clusters", clusters}});
    });

    srv.Get("/api/tasks", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string attr = req.has_param("attribute_id") ? req.get_param_value("attribute_id") : "";
        json arr = json::array();
        for (const auto& row : read_rows_if_present(options_.run_dir / "tasks" / "tasks.jsonl")) {
            if (attr.empty() || row.value("attribute_id", "") == attr) arr.push_back(row);
        }
        send_json(res, 200, arr);
    });

    srv.Get(R"(/api/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        std::string hash = req.matches[1];
        if (hash.ends_with(".png")) hash.resize(hash.size() - 4);
        if (!is_hex_digest(hash)) return send_error(res, 400, "not a content hash");
        const fs::path p = options_.run_dir / "images" / "store" / hash.substr(0, 2) / (hash + ".png");
        if (options_.run_dir.empty() || !fs::exists(p)) return send_error(res, 404, "no such image");
        res.set_content(read_file(p), "image/png");
    });

    srv.Get("/api/results/summary", [this](const httplib::Request&, httplib::Response& res) {
        const fs::path p = options_.run_dir / "eval" / "metrics.json";
        if (options_.run_dir.empty() || !fs::exists(p)) return send_json(res, 200, json::object());
        json j = json::parse(read_file(p), nullptr, false);
        if (j.is_discarded()) return send_error(res, 500, "metrics.json is not valid JSON");
        send_json(res, 200, j);
    });

    srv.Get(R"(/api/results/([^/]+)/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string model = req.matches[1];
        const std::string attr = req.matches[2];
        const fs::path eval = options_.run_dir / "eval";
        json verdict;
        for (const auto& row : read_rows_if_present(eval / "verdicts.jsonl")) {
            if (row.value("model_id", "") == model && row.value("attribute_id", "") == attr) verdict = row;
        }
        if (verdict.is_null()) return send_error(res, 404, "no verdict for " + model + " / " + attr);
        auto matching = [&](const fs::path& p) {
            json arr = json::array();
            for (const auto& row : read_rows_if_present(p)) {
                if (row.value("model_id", "") == model && row.value("attribute_id", "") == attr) arr.push_back(row);
            }
            return arr;
        };
        json responses = matching(eval / "responses.jsonl");
        std::set<std::string> image_ids;
        for (const auto& r : responses) image_ids.insert(r.value("image_id", ""));
        json images = json::array();
        for (const auto& row : read_rows_if_present(options_.run_dir / "images" / "manifest.jsonl")) {
            if (image_ids.count(row.value("image_id", ""))) images.push_back(row);
        }
        json entropy = matching(eval / "entropy.jsonl");
        send_json(res, 200,
                  {{"verdict", verdict},
                   {"task_verdicts", matching(eval / "task_verdicts.jsonl")},
                   {"responses", responses},
                   {"images", images},
                   {"entropy", entropy.empty() ? json(nullptr) : entropy.front()}});
    });

    if (!options_.static_dir.empty() && fs::exists(options_.static_dir / "index.html")) {
        srv.set_mount_point("/", options_.static_dir.string());
    } else {
        srv.Get("/", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(std::string(kPlaceholderPage), "text/html; charset=utf-8");
        });
    }
}

int CurationService::start(const std::string& host, int port) {
    const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw PortInUse("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return bound;
}

void CurationService::run(const std::string& host, int port) {
    if (!server_->bind_to_port(host, port)) throw PortInUse("cannot bind " + host + ":" + std::to_string(port));
    spdlog::info("curation service listening on http://{}:{}/", host, port);
    server_->listen_after_bind();
}

void CurationService::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace bias_audit
