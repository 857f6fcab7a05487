#include "hbias/genclient.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <chrono>
#include <ctime>
#include <mutex>
#include <random>
#include <thread>

#include "json.hpp"

#include "hbias/hashing.hpp"

namespace hbias {

using nlohmann::json;

std::string_view to_string(Backend b) { return b == Backend::Live ? "live" : "sim"; }

std::string_view to_string(RecordStatus s) {
  switch (s) {
    case RecordStatus::Ok: return "ok";
    case RecordStatus::Refused: return "refused";
    case RecordStatus::Degenerate: return "degenerate";
    case RecordStatus::Failed: return "failed";
  }
  return "failed";
}

Backend parse_backend(std::string_view s) {
  if (s == "live") return Backend::Live;
  if (s == "sim" || s == "simulated") return Backend::Simulated;
  throw ConfigError("unknown backend '" + std::string(s) + "'");
}

RecordStatus parse_status(std::string_view s) {
  if (s == "ok") return RecordStatus::Ok;
  if (s == "refused") return RecordStatus::Refused;
  if (s == "degenerate") return RecordStatus::Degenerate;
  if (s == "failed") return RecordStatus::Failed;
  throw ConfigError("unknown record status '" + std::string(s) + "'");
}

GenerationRequest make_request(const StudyPlan& plan, const PlanEntry& entry,
                               std::optional<std::uint64_t> seed) {
  GenerationRequest r;
  r.stimulus = plan.stimulus(entry);
  r.knob = plan.sweep().knob;
  r.setting = entry.setting;
  r.replicate_index = entry.replicate;
  r.system_prompt = plan.design().system_prompt;
  r.user_prompt = plan.design().user_prompt;
  r.max_tokens = plan.design().max_tokens;
  r.seed = seed;
  return r;
}

std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    const bool space = std::isspace(c) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

RecordStatus classify_story(std::string_view text, const FilterPolicy& policy) {
  const auto words = count_words(text);
  if (words == 0) return RecordStatus::Degenerate;
  if (static_cast<double>(words) > policy.max_word_factor * policy.target_words) return RecordStatus::Degenerate;
  return RecordStatus::Ok;
}

// ---------------------------------------------------------------- simulator

double SettingCurve::at(double setting) const {
  if (points.empty()) throw ConfigError("empty setting curve");
  if (setting <= points.front().first) return points.front().second;
  if (setting >= points.back().first) return points.back().second;
  for (std::size_t i = 1; i < points.size(); ++i) {
    const auto& [x1, y1] = points[i];
    if (setting <= x1) {
      const auto& [x0, y0] = points[i - 1];
      const double t = (setting - x0) / (x1 - x0);
      return y0 + t * (y1 - y0);
    }
  }
  return points.back().second;
}

double GroupTable::lookup(Race r, Gender g, Knob k, double setting) const {
  const GroupCurve* generic = nullptr;
  for (const auto& e : entries_) {
    if (e.race != r || e.gender != g) continue;
    if (e.knob == k) return e.curve.at(setting);
    if (!e.knob && generic == nullptr) generic = &e;
  }
  if (generic != nullptr) return generic->curve.at(setting);
  throw ConfigError("unknown group in table: " + std::string(to_string(r)) + " " +
                    std::string(to_string(g)) + " (" + std::string(to_string(k)) + ")");
}

GroupTable GroupTable::constant(double value) {
  GroupTable t;
  for (Race r : {Race::Black, Race::White})
    for (Gender g : {Gender::Man, Gender::Woman}) t.add({r, g, std::nullopt, {{{0.0, value}}}});
  return t;
}

namespace {

constexpr std::array<std::string_view, 240> kLexicon = {
    "she",       "he",        "walked",    "through",   "the",       "city",      "morning",   "light",
    "quiet",     "smile",     "dream",     "family",    "music",     "garden",    "window",    "river",
    "book",      "letter",    "kitchen",   "street",    "friend",    "teacher",   "doctor",    "artist",
    "engineer",  "nurse",     "student",   "father",    "mother",    "brother",   "sister",    "neighbor",
    "coffee",    "rain",      "summer",    "winter",    "autumn",    "spring",    "ocean",     "mountain",
    "village",   "market",    "library",   "office",    "school",    "church",    "park",      "bridge",
    "train",     "bus",       "bicycle",   "car",       "road",      "journey",   "home",      "memory",
    "laughter",  "courage",   "hope",      "kindness",  "strength",  "wisdom",    "patience",  "passion",
    "painting",  "guitar",    "piano",     "song",      "dance",     "story",     "poem",      "photograph",
    "camera",    "notebook",  "pencil",    "canvas",    "sketch",    "recipe",    "bread",     "tea",
    "sunset",    "sunrise",   "evening",   "night",     "stars",     "moon",      "breeze",    "storm",
    "forest",    "meadow",    "field",     "harvest",   "flower",    "tree",      "leaf",      "stone",
    "career",    "project",   "meeting",   "team",      "community", "festival",  "holiday",   "birthday",
    "wedding",   "reunion",   "promise",   "secret",    "question",  "answer",    "challenge", "victory",
    "lesson",    "chance",    "moment",    "future",    "past",      "present",   "heritage",  "tradition",
    "culture",   "language",  "voice",     "heart",     "mind",      "spirit",    "soul",      "eyes",
    "hands",     "shoulders", "gentle",    "bright",    "warm",      "calm",      "curious",   "bold",
    "shy",       "proud",     "tired",     "eager",     "thoughtful", "determined", "creative", "resilient",
    "joyful",    "serene",    "vibrant",   "humble",    "brave",     "loyal",     "honest",    "wise",
    "old",       "young",     "new",       "ancient",   "modern",    "simple",    "complex",   "small",
    "large",     "distant",   "nearby",    "hidden",    "open",      "empty",     "crowded",   "busy",
    "worked",    "studied",   "painted",   "cooked",    "sang",      "danced",    "wrote",     "read",
    "built",     "fixed",     "helped",    "taught",    "learned",   "smiled",    "laughed",   "cried",
    "remembered", "imagined", "discovered", "explored", "traveled",  "returned",  "waited",    "listened",
    "watched",   "noticed",   "carried",   "shared",    "gave",      "found",     "lost",      "kept",
    "every",     "each",      "always",    "never",     "often",     "sometimes", "today",     "tomorrow",
    "yesterday", "slowly",    "quickly",   "softly",    "together",  "alone",     "again",     "finally",
    "with",      "without",   "beneath",   "above",     "across",    "beyond",    "under",     "toward",
    "and",       "but",       "while",     "because",   "although",  "after",     "before",    "since",
    "a",         "an",        "her",       "his",       "their",     "its",       "of",        "in",
};

std::uint64_t group_seed(std::uint64_t seed, Race r, Gender g) {
  return mix_seed(seed, fnv1a64(std::string(to_string(r)) + "/" + std::string(to_string(g))));
}

}  // namespace

std::size_t simulator_lexicon_size() { return kLexicon.size(); }

std::string simulate_story(const GenerationRequest& request, const SimulatorConfig& config) {
  if (!request.seed) throw ConfigError("simulator seed missing");
  const double h = config.homogeneity.lookup(request.stimulus.race, request.stimulus.gender, request.knob,
                                             request.setting);
  if (!(h > 0.0 && h <= 1.0)) throw ConfigError("homogeneity must lie in (0, 1]");

  const std::uint64_t seed = *request.seed;
  const std::uint64_t gseed = group_seed(seed, request.stimulus.race, request.stimulus.gender);
  const int span = config.max_words - config.min_words + 1;
  if (config.min_words <= 0 || span <= 0) throw ConfigError("invalid simulator word range");
  const std::size_t vocab = kLexicon.size();

  auto canonical_word = [&](int slot) {
    return static_cast<std::size_t>(splitmix64(gseed + static_cast<std::uint64_t>(slot)) % vocab);
  };

  std::mt19937_64 rng(mix_seed(seed, fnv1a64(request.key().to_string())));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int canonical_len = config.min_words + static_cast<int>(splitmix64(gseed ^ 0x6c656eULL) % span);
  const int len = unit(rng) < h ? canonical_len : config.min_words + static_cast<int>(rng() % span);

  std::vector<std::size_t> words(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) {
    words[i] = unit(rng) < h ? canonical_word(i) : static_cast<std::size_t>(rng() % vocab);
  }
  if (h < 1.0) {
    // Replicate-specific marker so replicates never collapse onto one text.
    const int slot = request.replicate_index % len;
    const std::size_t offset = 1 + static_cast<std::size_t>(request.replicate_index / len) % (vocab - 1);
    words[slot] = (canonical_word(slot) + offset) % vocab;
  }

  std::string text;
  text.reserve(static_cast<std::size_t>(len) * 8);
  bool capitalize = true;
  for (int i = 0; i < len; ++i) {
    std::string w(kLexicon[words[i]]);
    if (capitalize) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
    capitalize = false;
    if (i > 0) text += ' ';
    text += w;
    if ((i + 1) % 10 == 0 || i + 1 == len) {
      text += '.';
      capitalize = true;
    }
  }
  return text;
}

GenerationOutcome SimulatedBackend::generate(const GenerationRequest& request) {
  return {RecordStatus::Ok, simulate_story(request, config_), {}};
}

// --------------------------------------------------------------------- live

std::string build_chat_body(const GenerationRequest& request, const std::string& model) {
  json body;
  body["model"] = model;
  body["messages"] = json::array({
      {{"role", "system"}, {"content", request.system_prompt}},
      {{"role", "user"},
       {"content", json::array({
                       {{"type", "text"}, {"text", request.user_prompt}},
                       {{"type", "image_url"}, {"image_url", {{"url", request.stimulus.stimulus_ref}}}},
                   })}},
  });
  body["temperature"] = request.temperature();
  body["top_p"] = request.top_p();
  body["max_tokens"] = request.max_tokens;
  return body.dump();
}

GenerationOutcome parse_chat_response(const std::string& body) {
  GenerationOutcome out;
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    return {RecordStatus::Failed, {}, std::string("malformed response: ") + e.what()};
  }
  if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
    return {RecordStatus::Failed, {}, "response has no choices"};
  }
  const auto& choice = j["choices"][0];
  const auto& msg = choice.value("message", json::object());
  if (msg.contains("refusal") && msg["refusal"].is_string() && !msg["refusal"].get<std::string>().empty()) {
    return {RecordStatus::Refused, {}, msg["refusal"].get<std::string>()};
  }
  if (choice.value("finish_reason", std::string()) == "content_filter") {
    return {RecordStatus::Refused, {}, "content_filter"};
  }
  if (msg.contains("content") && msg["content"].is_string()) out.text = msg["content"].get<std::string>();
  return out;
}

LiveChatBackend::LiveChatBackend(LiveChatConfig config, std::shared_ptr<HttpTransport> transport,
                                 std::string api_key, Sleeper sleep)
    : config_(std::move(config)),
      transport_(std::move(transport)),
      api_key_(std::move(api_key)),
      sleep_(std::move(sleep)) {}

GenerationOutcome LiveChatBackend::generate(const GenerationRequest& request) {
  const HttpHeaders headers{{"Authorization", "Bearer " + api_key_}};
  const auto result = post_with_retry(*transport_, config_.path, build_chat_body(request, config_.model), headers,
                                      config_.retry, sleep_);
  const auto& r = result.response;
  if (r.status != 200) {
    std::string why = r.status == 0 ? r.error : "HTTP " + std::to_string(r.status);
    return {RecordStatus::Failed, {}, why + " after " + std::to_string(result.attempts) + " attempt(s)"};
  }
  return parse_chat_response(r.body);
}

// -------------------------------------------------------------------- batch

std::string utc_now_iso8601() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

BatchSummary generate_batch(const StudyPlan& plan, StoryBackend& backend, const BatchOptions& options,
                            const KeySet& existing, const RecordSink& sink) {
  const bool simulated = backend.kind() == Backend::Simulated;
  if (simulated && !options.seed) throw ConfigError("simulator seed missing");

  Clock clock = options.clock;
  if (!clock) {
    clock = simulated ? Clock([] { return std::string("1970-01-01T00:00:00Z"); }) : Clock(utc_now_iso8601);
  }

  BatchSummary summary;
  summary.planned = plan.size();
  std::vector<const PlanEntry*> todo;
  todo.reserve(plan.size());
  for (const auto& e : plan.entries()) {
    if (existing.count(plan.key(e)) != 0) {
      ++summary.skipped;
      continue;
    }
    todo.push_back(&e);
  }

  std::mutex emit_mu;
  KeySet emitted_ok;  // guards against a second Ok record for one key
  auto emit = [&](GenerationRecord rec) {
    std::lock_guard lock(emit_mu);
    if (rec.status == RecordStatus::Ok && !emitted_ok.insert(rec.key()).second) return;
    sink(rec);
    ++summary.emitted;
    switch (rec.status) {
      case RecordStatus::Ok: ++summary.ok; break;
      case RecordStatus::Refused: ++summary.refused; break;
      case RecordStatus::Degenerate: ++summary.degenerate; break;
      case RecordStatus::Failed: ++summary.failed; break;
    }
  };

  auto run_one = [&](const PlanEntry& e) {
    GenerationRecord rec;
    rec.request = make_request(plan, e, options.seed);
    rec.backend = backend.kind();
    rec.model_id = backend.model_id();
    auto outcome = backend.generate(rec.request);
    rec.created_at = clock();
    rec.story_text = std::move(outcome.text);
    rec.error = std::move(outcome.error);
    rec.status = outcome.status == RecordStatus::Ok ? classify_story(rec.story_text, options.filter)
                                                    : outcome.status;
    emit(std::move(rec));
  };

  if (simulated || options.max_in_flight <= 1) {
    for (const auto* e : todo) run_one(*e);
    return summary;
  }

  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr failure;
  std::mutex failure_mu;
  const auto workers = static_cast<std::size_t>(std::min<std::size_t>(options.max_in_flight, todo.size()));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (!abort.load()) {
        const std::size_t i = next.fetch_add(1);
        if (i >= todo.size()) break;
        try {
          run_one(*todo[i]);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
          abort = true;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return summary;
}

}  // namespace hbias
