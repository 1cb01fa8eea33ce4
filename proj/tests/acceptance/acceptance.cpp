// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "bias_audit/evaluator.hpp"
#include "bias_audit/imagegen.hpp"
#include "bias_audit/miner.hpp"
#include "bias_audit/pipeline.hpp"
#include "bias_audit/png.hpp"
#include "bias_audit/report.hpp"
#include "bias_audit/taskgen.hpp"

#include "support.hpp"

namespace ba = bias_audit;
namespace bt = bias_audit::testing;
namespace fs = std::filesystem;
using bias_audit::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string name;
    double budget_seconds;  // 0 = none
    std::function<Outcome()> check;
};

std::string format_num(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::size_t count_lines(const fs::path& p) {
    if (!fs::exists(p)) return 0;
    const std::string s = ba::read_file(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// ---------------------------------------------------------------------------

Outcome count_arithmetic() {
    bt::TempDir dir("acc_counts");
    const fs::path run = dir / "run";
    {
        auto kb = ba::KnowledgeBase::open(run / "kb.jsonl");
        bt::seed_approved(kb, 378);
    }
    const auto cfg = bt::stub_config({{"counts", {{"n_tasks", 5}, {"n_pairs", 1}}}});
    {
        ba::RunOptions forced;
        forced.force = true;  // no captions were mined; the KB was seeded directly
        ba::Pipeline p(cfg, run, forced);
        p.run_stage(ba::Stage::Curate);
    }
    ba::Pipeline p(cfg, run);
    p.run_stage(ba::Stage::Tasks);
    p.run_stage(ba::Stage::Images);
    const std::size_t tasks = count_lines(p.layout().tasks());
    const auto rows = ba::read_jsonl(p.layout().image_manifest());
    std::size_t retained = 0;
    for (const auto& r : rows) retained += r.value("retained", false) ? 1 : 0;
    const bool ok = tasks == 1890 && retained == 3780 && rows.size() == 3780;
    return {ok, "378 attributes -> " + std::to_string(tasks) + " tasks, " + std::to_string(rows.size()) +
                    " manifest images (" + std::to_string(retained) + " retained)"};
}

// ---------------------------------------------------------------------------

Outcome impact_filter() {
    bt::Gen gen(761);
    std::vector<ba::MinedCandidate> cands;
    for (int i = 0; i < 5000; ++i) {
        ba::MinedCandidate c;
        c.name = "candidate " + gen.word() + " " + std::to_string(i);
        c.description = "synthetic";
        c.proposed_category = ba::kAllCategories[static_cast<std::size_t>(gen.integer(0, 4))];
        c.impact_score = static_cast<int>(gen.integer(1, 5));
        c.source_caption_ids = {"c" + std::to_string(i)};
        cands.push_back(c);
    }
    const auto split = ba::filter_by_impact(cands, 4);
    std::vector<std::string> want_kept;
    std::vector<std::string> want_dropped;
    for (const auto& c : cands) (c.impact_score <= 3 ? want_dropped : want_kept).push_back(c.name);
    std::vector<std::string> kept;
    std::vector<std::string> dropped;
    for (const auto& c : split.kept) kept.push_back(c.name);
    for (const auto& c : split.dropped) dropped.push_back(c.name);

    // The KB path must move exactly the same records to filtered_out.
    ba::KnowledgeBase kb;
    const auto stored = ba::promote_candidates(cands, kb);
    const std::size_t moved = ba::apply_impact_filter(kb, 4);
    std::size_t kb_mismatch = 0;
    for (const auto& a : stored) {
        const auto now = kb.get(a.id)->status;
        const bool should_drop = a.impact_score <= 3;
        if ((now == ba::AttributeStatus::FilteredOut) != should_drop) ++kb_mismatch;
    }
    const bool ok = kept == want_kept && dropped == want_dropped && moved == want_dropped.size() &&
                    kb_mismatch == 0;
    return {ok, std::to_string(cands.size()) + " candidates, " + std::to_string(dropped.size()) +
                    " removed (oracle " + std::to_string(want_dropped.size()) + "), KB moved " +
                    std::to_string(moved)};
}

// ---------------------------------------------------------------------------

Outcome clip_rules() {
    bt::Gen gen(762);
    // Scores are drawn from a coarse grid half the time so ties and the
    // threshold itself are exercised.
    auto draw = [&] {
        return gen.coin() ? std::round(gen.real(-1.0, 1.0) * 20.0) / 20.0 : gen.real(-1.0, 1.0);
    };
    int mismatches = 0;
    int monotonic_violations = 0;
    int kept = 0;
    const std::array<double, 7> thresholds = {-0.5, 0.0, 0.1, 0.2, 0.25, 0.3, 0.5};
    for (int i = 0; i < 10000; ++i) {
        ba::PairFilterResult r;
        r.task_id = "t";
        r.s_aa = draw();
        r.s_ab = draw();
        r.s_bb = draw();
        r.s_ba = draw();
        const auto f = ba::filter_pair(r, 0.2);
        const bool oracle = r.s_aa > 0.2 && r.s_bb > 0.2 && r.s_aa >= r.s_ab && r.s_bb >= r.s_ba;
        const bool keep = f.verdict == ba::Verdict::Keep;
        kept += keep ? 1 : 0;
        if (keep != oracle) ++mismatches;
        // A pair kept at some threshold stays kept at every lower one.
        bool kept_higher = false;
        for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
            const bool k = ba::filter_pair(r, *it).verdict == ba::Verdict::Keep;
            if (kept_higher && !k) ++monotonic_violations;
            kept_higher = kept_higher || k;
        }
    }
    return {mismatches == 0 && monotonic_violations == 0,
            "10000 quadruples, " + std::to_string(kept) + " kept, " + std::to_string(mismatches) +
                " mismatches, " + std::to_string(monotonic_violations) + " monotonicity violations"};
}

// ---------------------------------------------------------------------------

struct OracleEntropy {
    long double h_target = 0;
    long double h_conditional = 0;
};

OracleEntropy brute_force_entropy(const std::vector<std::vector<std::int64_t>>& m) {
    long double n = 0;
    std::vector<long double> row(m.size(), 0);
    std::vector<long double> col(m.empty() ? 0 : m[0].size(), 0);
    for (std::size_t b = 0; b < m.size(); ++b) {
        for (std::size_t t = 0; t < m[b].size(); ++t) {
            n += m[b][t];
            row[b] += m[b][t];
            col[t] += m[b][t];
        }
    }
    OracleEntropy o;
    for (long double c : col) {
        if (c > 0) o.h_target += (c / n) * std::log2(n / c);
    }
    for (std::size_t b = 0; b < m.size(); ++b) {
        for (std::size_t t = 0; t < m[b].size(); ++t) {
            const long double c = m[b][t];
            if (c > 0) o.h_conditional += (c / n) * std::log2(row[b] / c);
        }
    }
    return o;
}

Outcome entropy_oracle() {
    bt::Gen gen(763);
    double worst = 0.0;
    int bound_violations = 0;
    int checked = 0;
    while (checked < 1000) {
        const auto rows = static_cast<std::size_t>(gen.integer(1, 6));
        const auto cols = static_cast<std::size_t>(gen.integer(1, 6));
        const double density = gen.real(0.2, 1.0);
        std::vector<std::vector<std::int64_t>> m(rows, std::vector<std::int64_t>(cols, 0));
        std::int64_t total = 0;
        for (auto& r : m) {
            for (auto& c : r) {
                c = gen.coin(density) ? gen.integer(0, 50) : 0;
                total += c;
            }
        }
        if (total == 0) continue;
        ++checked;
        const auto got = ba::conditional_entropy(m);
        const auto want = brute_force_entropy(m);
        worst = std::max(worst, static_cast<double>(std::fabs(got.h_conditional - want.h_conditional)));
        worst = std::max(worst, static_cast<double>(std::fabs(got.h_target - want.h_target)));
        if (got.h_conditional < -1e-12 || got.h_conditional > got.h_target + 1e-12) ++bound_violations;
    }
    return {worst <= 1e-9 && bound_violations == 0,
            "1000 matrices up to 6x6, max |error| " + format_num("%.3g", worst) + " bits, " +
                std::to_string(bound_violations) + " bound violations"};
}

// ---------------------------------------------------------------------------

double oracle_calibration(const std::vector<ba::CalibrationSample>& s, bool rms) {
    struct Bin {
        long double conf = 0;
        long double hits = 0;
        long double n = 0;
    };
    std::array<Bin, 10> bins{};
    for (const auto& x : s) {
        int b = 0;
        while (b < 9 && x.confidence >= (b + 1) / 10.0) ++b;
        bins[static_cast<std::size_t>(b)].conf += x.confidence;
        bins[static_cast<std::size_t>(b)].hits += x.consistent ? 1 : 0;
        bins[static_cast<std::size_t>(b)].n += 1;
    }
    long double acc = 0;
    for (const auto& b : bins) {
        if (b.n == 0) continue;
        const long double gap = std::fabs(b.hits / b.n - b.conf / b.n);
        acc += (b.n / static_cast<long double>(s.size())) * (rms ? gap * gap : gap);
    }
    return static_cast<double>(rms ? std::sqrt(acc) : acc);
}

Outcome calibration_oracle() {
    using S = ba::CalibrationSample;
    std::vector<std::string> failures;
    // Hand-computed fixtures.
    // 1) one fully confident inconsistent verdict -> 1.0
    const std::vector<S> f1 = {{1.0, false}};
    // 2) one bin at 0.5 with half consistent -> 0.0
    const std::vector<S> f2 = {{0.5, true}, {0.5, false}};
    // 3) (3*|0.9 - 2/3| + 1*|0.1 - 0|) / 4 = 0.2
    const std::vector<S> f3 = {{0.9, true}, {0.9, true}, {0.9, false}, {0.1, false}};
    const double e1 = ba::calibration_error(f1);
    const double e2 = ba::calibration_error(f2);
    const double e3 = ba::calibration_error(f3);
    if (e1 != 1.0) failures.push_back("fixture 1 gave " + format_num("%.17g", e1));
    if (e2 != 0.0) failures.push_back("fixture 2 gave " + format_num("%.17g", e2));
    if (e3 != 0.2) failures.push_back("fixture 3 gave " + format_num("%.17g", e3));
    // Binary-exact variants, including the RMS form: gaps 0.25 and 0.75 at equal weight.
    const std::vector<S> f4 = {{0.75, true}, {0.75, true}, {0.25, true}, {0.25, true}};
    if (ba::calibration_error(f4, ba::CalibrationVariant::Rms) != std::sqrt(0.3125)) {
        failures.push_back("rms fixture");
    }

    bt::Gen gen(764);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<S> s(static_cast<std::size_t>(gen.integer(1, 200)));
        for (auto& x : s) {
            x.confidence = gen.coin(0.1) ? std::round(gen.real(0, 1) * 10) / 10 : gen.real(0, 1);
            x.consistent = gen.coin(gen.real(0, 1));
        }
        for (bool rms : {false, true}) {
            const double got =
                ba::calibration_error(s, rms ? ba::CalibrationVariant::Rms : ba::CalibrationVariant::L1);
            worst = std::max(worst, std::fabs(got - oracle_calibration(s, rms)));
        }
    }
    if (worst > 1e-12) failures.push_back("random samples");

    // Perfect calibration: each bin's accuracy equals its single confidence.
    std::vector<S> perfect;
    for (int b = 0; b < 10; ++b) {
        const double c = b / 10.0 + 0.05;
        const int hits = b * 2 + 1;  // of 20 samples at confidence (2b+1)/20
        for (int k = 0; k < 20; ++k) perfect.push_back({c, k < hits});
    }
    const double perfect_err = ba::calibration_error(perfect, ba::CalibrationVariant::L1);
    if (perfect_err >= 1e-12) failures.push_back("perfect calibration");

    std::string detail = "fixtures 1.0/0.0/0.2 and rms sqrt(0.3125), 1000 random max |error| " + format_num("%.3g", worst) +
                         ", perfect " + format_num("%.3g", perfect_err);
    for (const auto& f : failures) detail += "; failed " + f;
    return {failures.empty(), detail};
}

// ---------------------------------------------------------------------------

/// Attribute shares n_tasks=5 single-pair tasks; consistent iff at most one
/// of its five B answers flips (TV = flips/5 against tau 0.2).
double expected_rate(double p) { return std::pow(1 - p, 5) + 5 * p * std::pow(1 - p, 4); }

Outcome biased_mock() {
    bt::TempDir dir("acc_biased");
    ba::KnowledgeBase kb;
    const auto attrs = bt::seed_approved(kb, 500);
    const auto templates = ba::PromptTemplates::defaults();
    auto llm = bt::stub_provider(ba::ProviderKind::Chat);
    ba::TaskgenOptions to;
    to.n_tasks = 5;
    const auto tg = ba::generate_tasks(attrs, *llm, templates, to, llm.get());
    auto gen = bt::stub_provider(ba::ProviderKind::ImageGen);
    auto scorer = bt::stub_provider(ba::ProviderKind::Scorer);
    ba::ImagegenOptions io;
    io.n_pairs = 1;
    io.size = {32, 32};
    const auto images = ba::run_images_stage(tg.tasks, *gen, *scorer, dir.path(), io, 765);
    const auto retained = ba::retained_images(images.manifest);
    const ba::ImageStore store(dir / "images/store");

    std::map<std::string, ba::AttributeCategory> category_of;
    for (const auto& a : attrs) category_of[a.id] = a.category;
    struct Side {
        ba::Variant variant;
        ba::AttributeCategory category;
    };
    // Rendered prompts repeat across attributes, but seeds are unique per task,
    // so (prompt digest, seed) identifies one image.
    std::map<std::string, const ba::VqaTask*> task_of;
    for (const auto& t : tg.tasks) task_of[t.task_id] = &t;
    std::map<std::string, Side> by_image;
    for (const auto& img : retained) {
        const auto* t = task_of.at(img.task_id);
        const auto& prompt = img.variant == ba::Variant::A ? t->prompt_pair.rendered_a : t->prompt_pair.rendered_b;
        by_image[ba::sha256_hex(prompt) + "|" + std::to_string(img.seed)] = {img.variant,
                                                                            category_of.at(t->attribute_id)};
    }

    const auto biased = ba::AttributeCategory::Geography;
    std::string detail = std::to_string(tg.tasks.size()) + " tasks, " + std::to_string(retained.size()) +
                         " images;";
    bool ok = tg.tasks.size() == 2500 && retained.size() == 5000;
    for (double p : {0.0, 0.05, 0.7, 1.0}) {
        // The scripted LVLM reads the prompt digest embedded in the image to
        // learn its variant and flips to the next option on B with probability p.
        auto model = bt::scripted_provider(
            ba::ProviderKind::VisionChat,
            [&, p](const std::string&, const json& body, const ba::CallContext& ctx) {
                const auto req = ba::chat_request_from_wire(body);
                if (ctx.purpose == "vqa_confidence") return ba::chat_response_to_wire({"0.9", "stop", 0, 0, false});
                const ba::ChatMessage* user = nullptr;
                for (const auto& m : req.messages) {
                    if (m.role == "user" && !m.images_png.empty()) user = &m;
                }
                const auto info = ba::read_png_info(user->images_png.at(0));
                const std::string digest = info.text.at("prompt_sha256");
                const Side side = by_image.at(digest + "|" + info.text.at("seed"));
                int n_options = 0;
                std::istringstream lines(user->text);
                for (std::string line; std::getline(lines, line);) {
                    if (line.size() > 2 && line[0] >= 'A' && line[0] <= 'E' && line[1] == '.') ++n_options;
                }
                const std::string question = ba::find_labeled_line(user->text, ba::labels::kQuestion);
                int k = static_cast<int>(ba::stable_hash64(question) % static_cast<std::uint64_t>(n_options));
                const double u = ba::unit_fraction(ba::stable_hash64("flip\n" + digest + "\n" + info.text.at("seed")));
                if (side.variant == ba::Variant::B && side.category == biased && u < p) k = (k + 1) % n_options;
                return ba::chat_response_to_wire({std::string(1, static_cast<char>('A' + k)), "stop", 0, 0, false});
            },
            "mock-lvlm");
        std::vector<ba::Provider*> models = {model.get()};
        const auto responses = ba::collect_responses(models, retained, tg.tasks, store, templates);
        const auto judged = ba::judge_responses(responses, tg.tasks, templates, ba::JudgeSetup{});
        const auto agg = ba::aggregate_metrics(judged.attribute_verdicts, kb);
        double biased_rate = -1;
        double others_min = 2;
        for (const auto& row : agg.rows) {
            if (row.category == biased) {
                biased_rate = row.consistency_rate;
            } else {
                others_min = std::min(others_min, row.consistency_rate);
            }
        }
        const double want = expected_rate(p);
        const bool this_ok = std::fabs(biased_rate - want) <= 0.05 && others_min >= 0.99;
        ok = ok && this_ok;
        detail += " p=" + format_num("%.2f", p) + ": " + format_num("%.3f", biased_rate) + " (expect " + format_num("%.3f", want) +
                  ", others >= " + format_num("%.3f", others_min) + ")" + (this_ok ? "" : " MISS") + ";";
    }
    detail.pop_back();
    return {ok, detail};
}

// ---------------------------------------------------------------------------

Outcome refusal_asymmetry() {
    const std::vector<std::string> options = {"Two", "Three", "Four"};
    std::vector<ba::VqaResponse> a(5);
    std::vector<ba::VqaResponse> b(5);
    for (int i = 0; i < 5; ++i) {
        for (auto* side : {&a, &b}) {
            auto& r = (*side)[static_cast<std::size_t>(i)];
            r.model_id = "m";
            r.attribute_id = "attr-1";
            r.task_id = "attr-1-t1";
            r.image_id = "img" + std::to_string(i);
        }
        a[static_cast<std::size_t>(i)].variant = ba::Variant::A;
        a[static_cast<std::size_t>(i)].outcome = ba::normalize_response("A", options);
        b[static_cast<std::size_t>(i)].variant = ba::Variant::B;
        b[static_cast<std::size_t>(i)].outcome =
            ba::normalize_response("I'm sorry, but I can't help with that.", options);
    }
    const auto da = ba::build_distribution(a);
    const auto db = ba::build_distribution(b);
    const auto v = ba::judge_consistency_deterministic(da, db);
    const bool shapes = da.counts == std::map<std::string, int>{{"opt0", 5}} &&
                        db.counts == std::map<std::string, int>{{"refusal", 5}};
    const bool ok = shapes && !v.consistent && v.tv == 1.0;
    return {ok, std::string("{OptA:5} vs {Refusal:5}: TV ") + format_num("%.3f", v.tv) + ", " +
                    (v.consistent ? "consistent" : "inconsistent")};
}

// ---------------------------------------------------------------------------

std::string stub_config_text(const fs::path& captions, int delay_ms) {
    std::string text = ba::default_stub_config_text();
    const std::string anchor = "[run]\n";
    text.replace(text.find(anchor), anchor.size(),
                 anchor + "captions = \"" + captions.string() + "\"\ncaption_format = \"tsv\"\n");
    return text + "\n[stub]\ndelay_ms = " + std::to_string(delay_ms) + "\n";
}

bool run_stages(const fs::path& config, const fs::path& run, const std::vector<std::vector<std::string>>& stages,
                std::string& why) {
    for (const auto& stage : stages) {
        std::vector<std::string> args = {"--config", config.string(), "--run", run.string(), "--log-level", "warn"};
        args.insert(args.end(), stage.begin(), stage.end());
        const auto r = bt::run_cli(args);
        if (r.exit_code != 0) {
            why = stage[0] + " exited " + std::to_string(r.exit_code) + ": " + r.err;
            return false;
        }
    }
    return true;
}

Outcome determinism_and_resume() {
    bt::TempDir dir("acc_determinism");
    const fs::path config = bt::write_config(dir.path(), stub_config_text(bt::fixtures_dir() / "captions.tsv", 15));
    const std::vector<std::vector<std::string>> before_images = {{"mine"}, {"curate", "--auto-approve"}, {"tasks"}};
    const std::vector<std::vector<std::string>> after_images = {{"eval"}, {"report"}};
    std::string why;
    for (const char* name : {"run1", "run2"}) {
        if (!run_stages(config, dir / name, before_images, why) ||
            !run_stages(config, dir / name, {{"images"}}, why) ||
            !run_stages(config, dir / name, after_images, why)) {
            return {false, std::string(name) + ": " + why};
        }
    }

    // Third run: SIGKILL the images stage once some pair slots are checkpointed.
    const fs::path run3 = dir / "run3";
    if (!run_stages(config, run3, before_images, why)) return {false, "run3: " + why};
    const fs::path progress = run3 / "images" / "progress.jsonl";
    const int pid = bt::spawn_cli({"--config", config.string(), "--run", run3.string(), "images"});
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(60);
    while (count_lines(progress) < 20 && std::chrono::steady_clock::now() < deadline) {
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    ::kill(pid, SIGKILL);
    const int killed_rc = bt::wait_process(pid);
    const std::size_t at_kill = count_lines(progress);
    const bool interrupted = killed_rc == -1 && !fs::exists(run3 / "images" / "manifest.jsonl");
    if (!run_stages(config, run3, {{"images"}}, why) || !run_stages(config, run3, after_images, why)) {
        return {false, "resume: " + why};
    }
    const json summary = json::parse(ba::read_file(run3 / "images" / "summary.json"));
    const auto resumed = summary.value("resumed_pairs", 0);

    const std::vector<std::string> files = {"eval/metrics.json", "eval/metrics.csv", "eval/verdicts.jsonl",
                                            "eval/responses.jsonl", "images/manifest.jsonl",
                                            "report/report.md"};
    std::vector<std::string> differing;
    for (const auto& f : files) {
        const std::string ref = ba::read_file(dir / "run1" / f);
        if (ref != ba::read_file(dir / "run2" / f)) differing.push_back("run2:" + f);
        if (ref != ba::read_file(run3 / f)) differing.push_back("run3:" + f);
    }
    std::string detail = "2 full runs and 1 killed at " + std::to_string(at_kill) + " checkpointed slots (" +
                         std::to_string(resumed) + " resumed); " + std::to_string(files.size()) +
                         " output files compared";
    for (const auto& d : differing) detail += "; differs " + d;
    if (!interrupted) detail += "; kill did not interrupt the stage";
    return {differing.empty() && interrupted && resumed > 0, detail};
}

// ---------------------------------------------------------------------------

Outcome report_fidelity() {
    const auto rows = ba::metrics_from_csv(ba::read_file(bt::fixtures_dir() / "report_metrics.csv"));
    const std::string got = ba::emit_report(rows, ba::ReportFormat::Markdown);
    const std::string want = ba::read_file(bt::fixtures_dir() / "report_snapshot.md");
    if (got == want) return {true, std::to_string(rows.size()) + " cells, 5 models, snapshot identical"};
    std::size_t i = 0;
    while (i < got.size() && i < want.size() && got[i] == want[i]) ++i;
    return {false, "snapshot differs at byte " + std::to_string(i)};
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::warn);
    const std::vector<Criterion> criteria = {
        {"pipeline count arithmetic", 120, count_arithmetic},
        {"impact filter", 0, impact_filter},
        {"similarity filter rules", 0, clip_rules},
        {"entropy oracle", 0, entropy_oracle},
        {"calibration oracle", 0, calibration_oracle},
        {"biased mock end to end", 180, biased_mock},
        {"refusal asymmetry", 0, refusal_asymmetry},
        {"determinism and resume", 0, determinism_and_resume},
        {"report fidelity", 0, report_fidelity},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget_seconds > 0 && secs > c.budget_seconds) {
            o.pass = false;
            o.detail += "; over the " + format_num("%.0f", c.budget_seconds) + " s budget";
        }
        failed += o.pass ? 0 : 1;
        std::printf("%s  %-28s %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%zu criteria, %d failed\n", criteria.size(), failed);
    return failed == 0 ? 0 : 1;
}
