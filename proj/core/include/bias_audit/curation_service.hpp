#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "bias_audit/attribute_kb.hpp"

namespace httplib {
class Server;
}

namespace bias_audit {

enum class CurationVerb { Approve, Reject, Merge };
std::optional<CurationVerb> parse_curation_verb(std::string_view s);

struct CurationAction {
    std::string attribute_id;
    CurationVerb action = CurationVerb::Approve;
    std::string target_id;  // merge only
    std::string actor;
    std::string note;
};

/// Appends the revision an action implies and returns it. Throws
/// UnknownAttribute for a missing id, IllegalTransition for a disallowed
/// status change or a bad merge target, PreconditionError for a merge
/// without a target.
BiasAttribute apply_action(KnowledgeBase& kb, const CurationAction& action);

inline constexpr int kBandLow = 70;
inline constexpr int kBandHigh = 90;

enum class BandStatus { Under, InBand, Over };
std::string_view to_string(BandStatus s);
BandStatus band_status(std::size_t approved);

struct CategoryBalance {
    AttributeCategory category;
    std::size_t approved = 0;
    BandStatus status = BandStatus::Under;
};

struct BalanceReport {
    std::array<CategoryBalance, 5> categories;
    std::size_t total = 0;
};

/// Approved counts per category against the [70, 90] band.
BalanceReport category_balance(const KnowledgeBase& kb);
json to_json(const BalanceReport& b);

struct CurationServiceOptions {
    fs::path run_dir;     // tasks, images and results; may be empty
    fs::path static_dir;  // UI assets served at /; a built-in page when empty
    double jaccard_min = 0.8;
};

/// HTTP API over a knowledge base and a run directory. Mutations go through
/// KnowledgeBase::append; GET handlers never write.
class CurationService {
public:
    CurationService(KnowledgeBase& kb, CurationServiceOptions options);
    ~CurationService();
    CurationService(const CurationService&) = delete;
    CurationService& operator=(const CurationService&) = delete;

    /// Binds and serves on a background thread; port 0 picks a free port.
    /// Throws PortInUse.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    /// Serves on the calling thread until stop(). Throws PortInUse.
    void run(const std::string& host, int port);
    void stop();

private:
    void install_routes();

    KnowledgeBase& kb_;
    CurationServiceOptions options_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
};

}  // namespace bias_audit
