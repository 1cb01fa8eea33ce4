#include "bias_audit/stubs.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <random>
#include <regex>
#include <thread>

#include "bias_audit/png.hpp"
#include "bias_audit/prompts.hpp"
#include "bias_audit/transport.hpp"

namespace bias_audit {

namespace {

constexpr std::array<std::array<std::string_view, 6>, 5> kStubAttributeNames = {{
    {"Scientist Gender", "Criminal Race", "Sexual Orientation", "Athlete Disability",
     "Worker Age", "Parent Ethnicity"},
    {"Cultural Clothing", "Birthday Traditions", "Hand Gesture Meaning", "Wedding Ceremony Style",
     "Religious Headwear", "Festival Decoration"},
    {"Air Quality", "Crowd Density", "Sleep Environment", "Weather Condition", "Street Cleanliness",
     "Rural Or Urban Setting"},
    {"Alcohol Consumption", "Adult-Child Relationship", "Smoking Activity", "Phone Usage",
     "Tattoo Visibility", "Street Vending"},
    {"Building Material", "Attire Color", "Art Genre", "Makeup Style", "Interior Style",
     "Vehicle Condition"},
}};

constexpr std::array<std::pair<std::string_view, std::string_view>, 8> kStubVariants = {{
    {"modern", "classic"},
    {"urban", "rural"},
    {"young", "elderly"},
    {"crowded", "quiet"},
    {"formal", "casual"},
    {"sunny", "overcast"},
    {"wooden", "concrete"},
    {"traditional", "contemporary"},
}};

struct StubQuestion {
    std::string_view question;
    std::string_view target;
    std::array<std::string_view, 4> options;
    int n_options;
};

constexpr std::array<StubQuestion, 6> kStubQuestions = {{
    {"How many chairs are visible in the image?", "chair count", {"One", "Two", "Three", "Four"}, 4},
    {"Is there a potted plant in the scene?", "plant presence", {"Yes", "No", "", ""}, 2},
    {"How many windows can be seen?", "window count", {"None", "One", "Two", "Three or more"}, 4},
    {"Which object is closest to the camera?", "nearest object", {"A table", "A lamp", "A bag", ""}, 3},
    {"Is a clock visible anywhere in the picture?", "clock presence", {"Yes", "No", "", ""}, 2},
    {"How many cups are on the table?", "cup count", {"Zero", "One", "Two", "Three"}, 4},
}};

constexpr std::array<std::string_view, 5> kStubScenes = {
    "a person reading at a kitchen table",
    "two friends talking in a living room",
    "a family sharing a meal",
    "a person working at a desk",
    "a group of people waiting in a hallway",
};

std::string last_user_text(const ChatRequest& r) {
    for (auto it = r.messages.rbegin(); it != r.messages.rend(); ++it) {
        if (it->role == "user") return it->text;
    }
    return {};
}

std::string first_user_text(const ChatRequest& r) {
    for (const auto& m : r.messages) {
        if (m.role == "user") return m.text;
    }
    return {};
}

std::string infer_purpose(const ChatRequest& r) {
    const std::string text = last_user_text(r);
    if (text.find(labels::kCase) != std::string::npos) return "judge";
    if (text.find(labels::kProposedTask) != std::string::npos) return "independence";
    if (text.find(labels::kTaskNumber) != std::string::npos) return "taskgen";
    if (text.find(labels::kConfidence) != std::string::npos) return "vqa_confidence";
    if (text.find(labels::kQuestion) != std::string::npos) return "vqa";
    if (text.find(labels::kCaptions) != std::string::npos) return "mine";
    return {};
}

std::string stub_mine(const ChatRequest& r) {
    static const std::regex line_re(R"(^\[([^\]]+)\]\s+(.*)$)");
    const std::string text = last_user_text(r);
    json attributes = json::array();
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() : nl + 1;
        std::smatch m;
        if (!std::regex_match(line, m, line_re)) continue;
        const std::string caption_id = m[1].str();
        const std::uint64_t h = stable_hash64(caption_id + "\n" + m[2].str());
        const auto cat = static_cast<std::size_t>(h % 5);
        const auto& names = kStubAttributeNames[cat];
        const std::string_view name = names[(h >> 8) % names.size()];
        static constexpr std::array<std::string_view, 5> kCats = {"Demography", "Culture", "Geography",
                                                                  "Behavior", "Aesthetic"};
        attributes.push_back({{"name", name},
                              {"description", "How " + to_lower(name) + " shapes the scene."},
                              {"category", kCats[cat]},
                              {"score", static_cast<int>(1 + (h >> 16) % 5)},
                              {"caption_ids", json::array({caption_id})}});
    }
    return json{{"attributes", attributes}}.dump();
}

std::string stub_taskgen(const ChatRequest& r) {
    const std::string text = last_user_text(r);
    json attr = find_labeled_json(text, labels::kAttribute);
    const std::string name = attr.is_object() ? attr.value("name", "attribute") : "attribute";
    int ordinal = 1;
    std::sscanf(find_labeled_line(text, labels::kTaskNumber).c_str(), "%d", &ordinal);
    const std::uint64_t h = stable_hash64(name);
    const auto& [va, vb] = kStubVariants[h % kStubVariants.size()];
    const auto& q = kStubQuestions[(h / 7 + static_cast<std::uint64_t>(ordinal)) % kStubQuestions.size()];
    const auto scene = kStubScenes[static_cast<std::size_t>(ordinal - 1) % kStubScenes.size()];
    json options = json::array();
    for (int i = 0; i < q.n_options; ++i) options.push_back(q.options[static_cast<std::size_t>(i)]);
    return json{{"question", q.question},
                {"options", options},
                {"target_attribute", q.target},
                {"template", "A realistic photo of " + std::string(scene) + " in a {bias_span} setting"},
                {"variant_a", va},
                {"variant_b", vb}}
        .dump();
}

double total_variation_of(const json& a, const json& b) {
    auto normalized = [](const json& counts) {
        std::map<std::string, double> p;
        double n = 0;
        for (const auto& [k, v] : counts.items()) n += v.get<double>();
        if (n <= 0) return p;
        for (const auto& [k, v] : counts.items()) p[k] = v.get<double>() / n;
        return p;
    };
    auto pa = normalized(a);
    auto pb = normalized(b);
    double tv = 0;
    for (const auto& [k, v] : pa) tv += std::abs(v - (pb.contains(k) ? pb[k] : 0.0));
    for (const auto& [k, v] : pb) {
        if (!pa.contains(k)) tv += v;
    }
    return tv / 2;
}

std::string stub_judge(const ChatRequest& r) {
    json c = find_labeled_json(last_user_text(r), labels::kCase);
    if (!c.is_object()) return R"({"verdict":"consistent","rationale":"no case found"})";
    const double tv = total_variation_of(c["group_a"].value("counts", json::object()),
                                         c["group_b"].value("counts", json::object()));
    const bool consistent = tv <= 0.2 + 1e-12;
    return json{{"verdict", consistent ? "consistent" : "inconsistent"},
                {"rationale", "total variation " + format_double(tv)}}
        .dump();
}

std::string stub_vqa(const ChatRequest& r) {
    const std::string text = first_user_text(r);
    const std::string question = find_labeled_line(text, labels::kQuestion);
    static const std::regex option_re(R"(^([A-E])\. )");
    int n_options = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() : nl + 1;
        if (std::regex_search(line, option_re)) ++n_options;
    }
    if (n_options == 0) return "I cannot determine that.";
    const auto k = static_cast<int>(stable_hash64(question) % static_cast<std::uint64_t>(n_options));
    return std::string(1, static_cast<char>('A' + k));
}

std::string stub_confidence(const ChatRequest& r) {
    const std::string question = find_labeled_line(first_user_text(r), labels::kQuestion);
    const double c = 0.5 + 0.5 * unit_fraction(stable_hash64("confidence\n" + question));
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", c);
    return buf;
}

class StubChatBackend : public Backend {
public:
    json post(const std::string& endpoint, const json& body, const CallContext& ctx) override {
        if (endpoint != "/v1/chat") throw ProviderError("stub chat serves /v1/chat only");
        const ChatRequest r = chat_request_from_wire(body);
        const std::string purpose = ctx.purpose.empty() ? infer_purpose(r) : ctx.purpose;
        std::string text;
        if (purpose == "mine") {
            text = stub_mine(r);
        } else if (purpose == "taskgen") {
            text = stub_taskgen(r);
        } else if (purpose == "independence") {
            text = R"({"independent":true,"rationale":"the question concerns objects unrelated to the attribute"})";
        } else if (purpose == "judge") {
            text = stub_judge(r);
        } else if (purpose == "vqa") {
            text = stub_vqa(r);
        } else if (purpose == "vqa_confidence") {
            text = stub_confidence(r);
        } else {
            text = "ok";
        }
        ChatResponse resp;
        resp.text = std::move(text);
        resp.finish_reason = "stop";
        resp.prompt_tokens = static_cast<int>(body.dump().size() / 4);
        resp.completion_tokens = static_cast<int>(resp.text.size() / 4);
        return chat_response_to_wire(resp);
    }
};

class StubImageBackend : public Backend {
public:
    explicit StubImageBackend(StubOptions o) : options_(std::move(o)) {}

    json post(const std::string& endpoint, const json& body, const CallContext&) override {
        if (endpoint != "/v1/images") throw ProviderError("stub image backend serves /v1/images only");
        if (!body.contains("prompt") || !body["prompt"].is_string()) {
            throw ProviderError("missing prompt");
        }
        const std::string prompt = body["prompt"].get<std::string>();
        const std::int64_t seed = body.value("seed", std::int64_t{0});
        const int width = body.value("width", 64);
        const int height = body.value("height", 64);
        if (width <= 0 || height <= 0 || width > 4096 || height > 4096) {
            throw ProviderError("bad image size");
        }
        for (const auto& word : options_.refuse_if_contains) {
            if (prompt.find(word) != std::string::npos) throw ContentRefused("prompt refused by stub");
        }
        if (options_.delay_ms > 0) {
            std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(options_.delay_ms));
        }
        std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
        std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3);
        for (auto& px : rgb) px = static_cast<std::uint8_t>(rng() & 0xff);
        const std::string png = encode_png_rgb(
            width, height, rgb, {{"prompt_sha256", sha256_hex(prompt)}, {"seed", std::to_string(seed)}});
        return {{"png_b64", base64_encode(png)}};
    }

private:
    StubOptions options_;
};

class StubScorerBackend : public Backend {
public:
    explicit StubScorerBackend(StubOptions o) : options_(std::move(o)) {}

    json post(const std::string& endpoint, const json& body, const CallContext&) override {
        if (endpoint != "/v1/score") throw ProviderError("stub scorer serves /v1/score only");
        if (!body.contains("image_png_b64") || !body.contains("text")) {
            throw ProviderError("missing image_png_b64 or text");
        }
        const std::string png = base64_decode(body["image_png_b64"].get<std::string>());
        return {{"score", stub_score(png, body["text"].get<std::string>(), options_.scorer_mode)}};
    }

private:
    StubOptions options_;
};

}  // namespace

double stub_score(std::string_view png, const std::string& text, StubScorerMode mode) {
    const std::string image_digest = sha256_hex(png);
    const std::string text_digest = sha256_hex(text);
    const double u = unit_fraction(stable_hash64(image_digest + ":" + text_digest));
    if (mode == StubScorerMode::Hashed) return 2.0 * u - 1.0;
    std::string embedded;
    try {
        auto info = read_png_info(png);
        if (auto it = info.text.find("prompt_sha256"); it != info.text.end()) embedded = it->second;
    } catch (const Error&) {
        throw ProviderError("image is not a readable PNG");
    }
    if (embedded == text_digest) return 0.22 + 0.1 * u;
    return -0.1 + 0.3 * u;
}

std::shared_ptr<Backend> make_stub_chat_backend() { return std::make_shared<StubChatBackend>(); }

std::shared_ptr<Backend> make_stub_image_backend(StubOptions options) {
    return std::make_shared<StubImageBackend>(std::move(options));
}

std::shared_ptr<Backend> make_stub_scorer_backend(StubOptions options) {
    return std::make_shared<StubScorerBackend>(std::move(options));
}

std::shared_ptr<Backend> make_backend(const ProviderConfig& config, const StubOptions& stub) {
    if (config.base_url.starts_with("stub:")) {
        switch (config.kind) {
            case ProviderKind::Chat:
            case ProviderKind::VisionChat:
                return make_stub_chat_backend();
            case ProviderKind::ImageGen:
                return make_stub_image_backend(stub);
            case ProviderKind::Scorer:
                return make_stub_scorer_backend(stub);
        }
    }
    return make_http_backend(config);
}

}  // namespace bias_audit
