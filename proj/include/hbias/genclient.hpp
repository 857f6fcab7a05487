#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "hbias/core.hpp"
#include "hbias/http.hpp"

namespace hbias {

enum class Backend { Live, Simulated };
enum class RecordStatus { Ok, Refused, Degenerate, Failed };

std::string_view to_string(Backend b);
std::string_view to_string(RecordStatus s);
Backend parse_backend(std::string_view s);
RecordStatus parse_status(std::string_view s);

struct GenerationRequest {
  Stimulus stimulus;
  Knob knob = Knob::Temperature;
  double setting = 0.0;
  int replicate_index = 0;
  std::string system_prompt;
  std::string user_prompt;
  int max_tokens = 150;
  std::optional<std::uint64_t> seed;

  // The non-swept knob always sits at its default.
  double temperature() const { return knob == Knob::Temperature ? setting : kDefaultTemperature; }
  double top_p() const { return knob == Knob::TopP ? setting : kDefaultTopP; }

  GenerationKey key() const {
    return {stimulus.set_id, stimulus.race, stimulus.gender, knob, setting, replicate_index};
  }
};

GenerationRequest make_request(const StudyPlan& plan, const PlanEntry& entry,
                               std::optional<std::uint64_t> seed);

struct GenerationRecord {
  GenerationRequest request;
  std::string story_text;
  Backend backend = Backend::Simulated;
  std::string model_id;
  std::string created_at;  // ISO-8601 UTC
  RecordStatus status = RecordStatus::Ok;
  std::string error;       // set for Failed records

  GenerationKey key() const { return request.key(); }
};

using KeySet = std::unordered_set<GenerationKey, GenerationKeyHash>;

/// Output screening. Texts that are empty or longer than
/// `max_word_factor * target_words` words are Degenerate.
struct FilterPolicy {
  int target_words = 50;
  double max_word_factor = 3.0;
};

std::size_t count_words(std::string_view text);
RecordStatus classify_story(std::string_view text, const FilterPolicy& policy);

// ---------------------------------------------------------------- simulator

/// Piecewise-linear function of the hyperparameter setting, constant beyond
/// the outermost points.
struct SettingCurve {
  std::vector<std::pair<double, double>> points;  // (setting, value), sorted by setting
  double at(double setting) const;
};

struct GroupCurve {
  Race race;
  Gender gender;
  std::optional<Knob> knob;  // nullopt applies to both knobs
  SettingCurve curve;
};

/// Per-group lookup table; knob-specific entries win over knob-agnostic ones.
class GroupTable {
 public:
  GroupTable() = default;
  explicit GroupTable(std::vector<GroupCurve> entries) : entries_(std::move(entries)) {}
  void add(GroupCurve c) { entries_.push_back(std::move(c)); }
  bool empty() const { return entries_.empty(); }
  const std::vector<GroupCurve>& entries() const { return entries_; }

  /// Throws ConfigError("unknown group ...") when no entry matches.
  double lookup(Race r, Gender g, Knob k, double setting) const;

  static GroupTable constant(double value);

 private:
  std::vector<GroupCurve> entries_;
};

struct SimulatorConfig {
  GroupTable homogeneity = GroupTable::constant(0.5);
  int min_words = 40;
  int max_words = 60;
};

/// Deterministic stand-in for the chat model. Each word slot keeps the
/// group's canonical word with probability h = homogeneity(group, knob,
/// setting) and otherwise draws from the full lexicon, so lower h widens the
/// effective vocabulary. h = 1 yields one text per group and setting.
std::string simulate_story(const GenerationRequest& request, const SimulatorConfig& config);

std::size_t simulator_lexicon_size();

// ----------------------------------------------------------------- backends

struct GenerationOutcome {
  RecordStatus status = RecordStatus::Ok;
  std::string text;
  std::string error;
};

class StoryBackend {
 public:
  virtual ~StoryBackend() = default;
  virtual Backend kind() const = 0;
  virtual std::string model_id() const = 0;
  /// Transport failures come back as Failed outcomes; credential rejection
  /// throws AuthenticationError.
  virtual GenerationOutcome generate(const GenerationRequest& request) = 0;
};

class SimulatedBackend final : public StoryBackend {
 public:
  explicit SimulatedBackend(SimulatorConfig config) : config_(std::move(config)) {}
  Backend kind() const override { return Backend::Simulated; }
  std::string model_id() const override { return "simulator-v1"; }
  GenerationOutcome generate(const GenerationRequest& request) override;

 private:
  SimulatorConfig config_;
};

struct LiveChatConfig {
  std::string endpoint = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4o-mini";
  std::string api_key_env = "OPENAI_API_KEY";
  RetryPolicy retry;
};

/// Request body in the chat-completion wire format.
std::string build_chat_body(const GenerationRequest& request, const std::string& model);

/// Extracts the story from a chat-completion response body.
GenerationOutcome parse_chat_response(const std::string& body);

class LiveChatBackend final : public StoryBackend {
 public:
  LiveChatBackend(LiveChatConfig config, std::shared_ptr<HttpTransport> transport, std::string api_key,
                  Sleeper sleep = real_sleeper());
  Backend kind() const override { return Backend::Live; }
  std::string model_id() const override { return config_.model; }
  GenerationOutcome generate(const GenerationRequest& request) override;

 private:
  LiveChatConfig config_;
  std::shared_ptr<HttpTransport> transport_;
  std::string api_key_;
  Sleeper sleep_;
};

// -------------------------------------------------------------------- batch

using Clock = std::function<std::string()>;
std::string utc_now_iso8601();

struct BatchOptions {
  std::optional<std::uint64_t> seed;
  int max_in_flight = 8;
  FilterPolicy filter;
  Clock clock;  // defaults: epoch for simulated runs, wall clock for live
};

struct BatchSummary {
  std::size_t planned = 0;
  std::size_t skipped = 0;
  std::size_t emitted = 0;
  std::size_t ok = 0;
  std::size_t refused = 0;
  std::size_t degenerate = 0;
  std::size_t failed = 0;
};

using RecordSink = std::function<void(const GenerationRecord&)>;

/// Generates every planned story whose key is not in `existing`. Simulated
/// runs emit in plan order; live runs keep up to `max_in_flight` requests
/// outstanding and emit in completion order. Sink calls are serialized.
BatchSummary generate_batch(const StudyPlan& plan, StoryBackend& backend, const BatchOptions& options,
                            const KeySet& existing, const RecordSink& sink);

}  // namespace hbias
