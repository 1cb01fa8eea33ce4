// bias_audit: command-line driver for the audit pipeline.

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <functional>
#include <optional>
#include <pthread.h>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "bias_audit/config.hpp"
#include "bias_audit/curation_service.hpp"
#include "bias_audit/imagegen.hpp"
#include "bias_audit/pipeline.hpp"
#include "bias_audit/stubs.hpp"
#include "bias_audit/transport.hpp"

namespace ba = bias_audit;
namespace fs = std::filesystem;

namespace {

struct GlobalFlags {
    std::string config;
    std::string kb;
    std::string run;
    std::vector<std::string> models;
    std::optional<std::int64_t> seed;
    bool force = false;
    std::string log_level = "info";
};

ba::RunConfig load_run_config(const GlobalFlags& g) {
    std::string path = g.config;
    if (path.empty()) {
        if (const char* env = std::getenv("BIAS_AUDIT_CONFIG")) path = env;
    }
    if (path.empty()) throw ba::ConfigError("no config: pass --config or set BIAS_AUDIT_CONFIG");
    return ba::load_config(path);
}

fs::path require_run_dir(const GlobalFlags& g) {
    if (g.run.empty()) throw ba::PreconditionError("--run <dir> is required");
    return g.run;
}

ba::Pipeline open_pipeline(const GlobalFlags& g, bool auto_approve = false) {
    ba::RunOptions opts;
    opts.force = g.force;
    opts.seed = g.seed;
    opts.models = g.models;
    opts.kb_path = g.kb;
    opts.auto_approve = auto_approve;
    return ba::Pipeline(load_run_config(g), require_run_dir(g), opts);
}

void print_checkpoint(ba::Stage s, const ba::StageCheckpoint& cp) {
    std::cout << ba::to_string(s) << ": " << ba::to_string(cp.status) << " " << cp.detail.dump() << "\n";
}

/// Blocks SIGINT/SIGTERM in every thread and runs `on_signal` from a waiter thread.
class SignalStopper {
public:
    explicit SignalStopper(std::function<void()> on_signal) {
        sigemptyset(&set_);
        sigaddset(&set_, SIGINT);
        sigaddset(&set_, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &set_, nullptr);
        waiter_ = std::thread([this, fn = std::move(on_signal)] {
            int sig = 0;
            sigwait(&set_, &sig);
            if (!done_) fn();
        });
    }
    ~SignalStopper() {
        done_ = true;
        pthread_kill(waiter_.native_handle(), SIGTERM);
        waiter_.join();
    }

private:
    sigset_t set_{};
    std::atomic<bool> done_{false};
    std::thread waiter_;
};

int serve_curation(const GlobalFlags& g, const std::string& host, int port, const std::string& static_dir) {
    fs::path kb_path = g.kb;
    if (kb_path.empty()) kb_path = require_run_dir(g) / "kb.jsonl";
    auto kb = ba::KnowledgeBase::open(kb_path);
    ba::CurationServiceOptions opts;
    opts.run_dir = g.run;
    opts.static_dir = static_dir;
    ba::CurationService service(kb, opts);
    SignalStopper stopper([&] { service.stop(); });
    spdlog::info("curation service on http://{}:{}/ (kb {})", host, port, kb_path.string());
    service.run(host, port);
    return ba::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Counterfactual VQA bias audit pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalFlags g;
    app.add_option("--config", g.config, "Run configuration (default: $BIAS_AUDIT_CONFIG)");
    app.add_option("--kb", g.kb, "Knowledge base file (default: <run>/kb.jsonl)");
    app.add_option("--run", g.run, "Run directory");
    app.add_option("--model", g.models, "Vision model provider id to audit (repeatable)");
    app.add_option("--seed", g.seed, "Run seed (overrides the config)");
    app.add_flag("--force", g.force, "Skip predecessor and digest checks");
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error"}));

    std::vector<std::pair<CLI::App*, ba::Stage>> stage_commands;
    for (auto [name, stage, help] : {std::tuple{"mine", ba::Stage::Mine, "Mine candidate attributes from captions"},
                                     std::tuple{"tasks", ba::Stage::Tasks, "Generate VQA tasks for approved attributes"},
                                     std::tuple{"images", ba::Stage::Images, "Generate and filter counterfactual image pairs"},
                                     std::tuple{"eval", ba::Stage::Eval, "Run VQA, judge consistency and compute metrics"},
                                     std::tuple{"report", ba::Stage::Report, "Write the Markdown, CSV and JSON reports"}}) {
        stage_commands.emplace_back(app.add_subcommand(name, help), stage);
    }

    auto* curate = app.add_subcommand("curate", "Curate the knowledge base (serves the curation API by default)");
    bool auto_approve = false;
    bool curate_done = false;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string static_dir;
    curate->add_flag("--auto-approve", auto_approve, "Approve every candidate and complete the stage");
    curate->add_flag("--done", curate_done, "Accept the knowledge base as curated and complete the stage");
    curate->add_option("--host", host);
    curate->add_option("--port", port);
    curate->add_option("--static", static_dir, "Directory with the curation UI bundle");

    auto* serve = app.add_subcommand("serve", "Serve the curation API and UI");
    serve->add_option("--host", host);
    serve->add_option("--port", port);
    serve->add_option("--static", static_dir, "Directory with the curation UI bundle");

    auto* filter = app.add_subcommand("filter", "Audit the image manifest against the similarity filter");

    auto* stub_server = app.add_subcommand("stub-server", "Serve the stub providers over the wire contract");
    stub_server->add_option("--host", host);
    stub_server->add_option("--port", port);

    auto* init_config = app.add_subcommand("init-config", "Print a configuration that runs every role on stubs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ba::kExitOk : ba::kExitPrecondition;
    }

    auto logger = spdlog::stderr_color_mt("bias_audit");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(g.log_level));

    try {
        for (auto [cmd, stage] : stage_commands) {
            if (cmd->parsed()) {
                auto p = open_pipeline(g);
                print_checkpoint(stage, p.run_stage(stage));
                return ba::kExitOk;
            }
        }
        if (curate->parsed()) {
            if (auto_approve || curate_done) {
                auto p = open_pipeline(g, auto_approve);
                print_checkpoint(ba::Stage::Curate, p.run_stage(ba::Stage::Curate));
                return ba::kExitOk;
            }
            // Holds the run lock while serving; closing the service marks curation done.
            auto p = open_pipeline(g);
            serve_curation(g, host, port, static_dir);
            print_checkpoint(ba::Stage::Curate, p.run_stage(ba::Stage::Curate));
            return ba::kExitOk;
        }
        if (serve->parsed()) return serve_curation(g, host, port, static_dir);
        if (filter->parsed()) {
            const fs::path run = require_run_dir(g);
            double threshold = ba::kDefaultClipThreshold;
            if (!g.config.empty() || std::getenv("BIAS_AUDIT_CONFIG")) threshold = load_run_config(g).clip_threshold;
            const auto rows = ba::read_jsonl(ba::RunLayout{run}.image_manifest());
            const auto violations = ba::audit_manifest(rows, run, threshold);
            std::size_t retained = 0;
            for (const auto& r : rows) retained += r.value("retained", false) ? 1 : 0;
            for (const auto& v : violations) std::cout << v.image_id << ": " << v.problem << "\n";
            std::cout << retained << " retained images checked, " << violations.size() << " violations\n";
            return violations.empty() ? ba::kExitOk : ba::kExitPrecondition;
        }
        if (stub_server->parsed()) {
            ba::WireServer server(ba::make_stub_chat_backend(), ba::make_stub_image_backend(),
                                  ba::make_stub_scorer_backend());
            SignalStopper stopper([&] { server.stop(); });
            spdlog::info("stub providers on http://{}:{}/", host, port);
            server.run(host, port);
            return ba::kExitOk;
        }
        if (init_config->parsed()) {
            std::cout << ba::default_stub_config_text();
            return ba::kExitOk;
        }
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return ba::exit_code_for(e);
    }
    return ba::kExitOk;
}
