#pragma once

#include <memory>
#include <string>
#include <vector>

#include "bias_audit/providers.hpp"

namespace bias_audit {

enum class StubScorerMode {
    /// Matching prompt scores in [0.22, 0.32), mismatched in [-0.1, 0.2): every pair is kept.
    Aligned,
    /// Uniform in [-1, 1) from (image digest, text digest) alone.
    Hashed,
};

struct StubOptions {
    double delay_ms = 0.0;  // per image generation, to make interruption testable
    std::vector<std::string> refuse_if_contains;  // image prompts refused with ContentRefused
    StubScorerMode scorer_mode = StubScorerMode::Aligned;
};

/// Deterministic stand-in for every chat role the pipeline uses (mining, task
/// generation, independence rubric, judging, VQA answers and confidences).
/// The role comes from CallContext::purpose, or is inferred from the prompt's
/// label lines when the call arrives over HTTP.
std::shared_ptr<Backend> make_stub_chat_backend();

/// Seeded RGB noise PNGs with the prompt digest and seed in tEXt chunks.
/// Same (prompt, seed, size) gives identical bytes.
std::shared_ptr<Backend> make_stub_image_backend(StubOptions options = {});

/// Deterministic image-text scores; see StubScorerMode.
std::shared_ptr<Backend> make_stub_scorer_backend(StubOptions options = {});

/// Stub backends for base_url "stub:" (kind picks which), HTTP otherwise.
std::shared_ptr<Backend> make_backend(const ProviderConfig& config, const StubOptions& stub = {});

/// The pure scoring function behind the stub scorer.
double stub_score(std::string_view png, const std::string& text, StubScorerMode mode);

}  // namespace bias_audit
