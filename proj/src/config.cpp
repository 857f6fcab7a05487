#include "hbias/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace hbias {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [k, v] : obj.items()) {
    if (allowed.count(k) == 0) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

SettingCurve parse_curve(const json& j, const std::string& where) {
  SettingCurve c;
  if (j.contains("value")) {
    c.points.emplace_back(0.0, j["value"].get<double>());
  } else if (j.contains("points")) {
    for (const auto& p : j["points"]) {
      if (!p.is_array() || p.size() != 2) throw ConfigError(where + ": points must be [setting, value] pairs");
      c.points.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
  }
  if (c.points.empty()) throw ConfigError(where + ": needs 'value' or 'points'");
  for (std::size_t i = 1; i < c.points.size(); ++i)
    if (!(c.points[i].first > c.points[i - 1].first)) throw ConfigError(where + ": points must be sorted by setting");
  return c;
}

GroupTable parse_group_table(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw ConfigError(where + " must be a list");
  GroupTable t;
  for (const auto& e : arr) {
    reject_unknown(e, {"race", "gender", "knob", "value", "points"}, where);
    GroupCurve g{parse_race(e.at("race").get<std::string>()), parse_gender(e.at("gender").get<std::string>()),
                 std::nullopt, parse_curve(e, where)};
    if (e.contains("knob")) g.knob = parse_knob(e["knob"].get<std::string>());
    t.add(std::move(g));
  }
  return t;
}

}  // namespace

StudyConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j, {"design", "sweep", "seed", "generation", "simulator", "embedding", "threads"}, "config");

  StudyConfig c;
  try {
    if (j.contains("design")) {
      const auto& d = j["design"];
      reject_unknown(d, {"sets_per_gender", "stimuli", "stories_per_stimulus", "system_prompt", "user_prompt",
                         "max_tokens"},
                     "design");
      const int stories = d.value("stories_per_stimulus", 50);
      c.design = default_design(d.value("sets_per_gender", 15), stories);
      if (d.contains("stimuli")) {
        c.design.stimuli.clear();
        for (const auto& s : d["stimuli"]) {
          reject_unknown(s, {"set_id", "race", "gender", "ref"}, "design.stimuli");
          c.design.stimuli.push_back({s.at("set_id").get<int>(), parse_race(s.at("race").get<std::string>()),
                                      parse_gender(s.at("gender").get<std::string>()),
                                      s.value("ref", std::string())});
        }
      }
      c.design.system_prompt = d.value("system_prompt", c.design.system_prompt);
      c.design.user_prompt = d.value("user_prompt", c.design.user_prompt);
      c.design.max_tokens = d.value("max_tokens", c.design.max_tokens);
    }
    if (j.contains("sweep")) {
      const auto& s = j["sweep"];
      reject_unknown(s, {"knob", "values", "fixed_other"}, "sweep");
      const Knob knob = parse_knob(s.value("knob", std::string("temperature")));
      c.sweep = knob == Knob::Temperature ? SweepSpec::temperature_default() : SweepSpec::top_p_default();
      if (s.contains("values")) c.sweep.values = s["values"].get<std::vector<double>>();
      c.sweep.fixed_other = s.value("fixed_other", c.sweep.fixed_other);
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    c.threads = j.value("threads", 0U);
    if (j.contains("generation")) {
      const auto& g = j["generation"];
      reject_unknown(g, {"backend", "model", "endpoint", "path", "api_key_env", "max_in_flight", "max_attempts",
                         "initial_backoff_ms", "max_backoff_ms", "target_words", "max_word_factor"},
                     "generation");
      c.generation.backend = parse_backend(g.value("backend", std::string("sim")));
      auto& live = c.generation.live;
      live.model = g.value("model", live.model);
      live.endpoint = g.value("endpoint", live.endpoint);
      live.path = g.value("path", live.path);
      live.api_key_env = g.value("api_key_env", live.api_key_env);
      live.retry.max_attempts = g.value("max_attempts", live.retry.max_attempts);
      live.retry.initial_backoff = std::chrono::milliseconds(g.value("initial_backoff_ms", 500));
      live.retry.max_backoff = std::chrono::milliseconds(g.value("max_backoff_ms", 30000));
      c.generation.max_in_flight = g.value("max_in_flight", c.generation.max_in_flight);
      c.generation.filter.target_words = g.value("target_words", c.generation.filter.target_words);
      c.generation.filter.max_word_factor = g.value("max_word_factor", c.generation.filter.max_word_factor);
    }
    if (j.contains("simulator")) {
      const auto& s = j["simulator"];
      reject_unknown(s, {"homogeneity", "min_words", "max_words"}, "simulator");
      if (s.contains("homogeneity")) c.simulator.homogeneity = parse_group_table(s["homogeneity"], "simulator.homogeneity");
      c.simulator.min_words = s.value("min_words", c.simulator.min_words);
      c.simulator.max_words = s.value("max_words", c.simulator.max_words);
    }
    if (j.contains("embedding")) {
      const auto& e = j["embedding"];
      reject_unknown(e, {"provider", "dimension", "batch_size", "max_in_flight", "model", "endpoint", "path",
                         "api_key_env", "gaussian"},
                     "embedding");
      const auto provider = e.value("provider", std::string("hash"));
      if (provider == "hash") c.embedding.provider = EmbedProviderKind::Hash;
      else if (provider == "gaussian") c.embedding.provider = EmbedProviderKind::Gaussian;
      else if (provider == "remote") c.embedding.provider = EmbedProviderKind::Remote;
      else throw ConfigError("unknown embedding provider '" + provider + "'");
      const std::size_t default_dim = c.embedding.provider == EmbedProviderKind::Remote ? 768 : 64;
      c.embedding.dimension = e.value("dimension", default_dim);
      c.embedding.batch_size = e.value("batch_size", c.embedding.batch_size);
      c.embedding.max_in_flight = e.value("max_in_flight", c.embedding.max_in_flight);
      auto& r = c.embedding.remote;
      r.model = e.value("model", r.model);
      r.endpoint = e.value("endpoint", r.endpoint);
      r.path = e.value("path", r.path);
      r.api_key_env = e.value("api_key_env", r.api_key_env);
      r.dimension = c.embedding.dimension;
      r.batch_size = c.embedding.batch_size;
      c.embedding.gaussian.dimension = c.embedding.dimension;
      if (e.contains("gaussian")) {
        const auto& g = e["gaussian"];
        reject_unknown(g, {"mean_norm", "set_jitter", "sigma"}, "embedding.gaussian");
        c.embedding.gaussian.mean_norm = g.value("mean_norm", 1.0);
        c.embedding.gaussian.set_jitter = g.value("set_jitter", 0.0);
        if (g.contains("sigma")) c.embedding.gaussian.sigma = parse_group_table(g["sigma"], "embedding.gaussian.sigma");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.generation.max_in_flight < 1) throw ConfigError("generation.max_in_flight must be >= 1");
  if (c.embedding.dimension == 0) throw ConfigError("embedding.dimension must be positive");
  return c;
}

StudyConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::unique_ptr<EmbeddingProvider> make_embedding_provider(const StudyConfig& config) {
  const std::uint64_t seed = config.seed.value_or(0);
  switch (config.embedding.provider) {
    case EmbedProviderKind::Hash:
      return std::make_unique<HashEmbedder>(config.embedding.dimension, seed);
    case EmbedProviderKind::Gaussian:
      return std::make_unique<GaussianGroupEmbedder>(config.embedding.gaussian, seed);
    case EmbedProviderKind::Remote: {
      const auto& r = config.embedding.remote;
      return std::make_unique<RemoteEmbedder>(r, make_http_transport(r.endpoint), credential_from_env(r.api_key_env));
    }
  }
  throw ConfigError("unknown embedding provider");
}

std::unique_ptr<StoryBackend> make_story_backend(const StudyConfig& config) {
  if (config.generation.backend == Backend::Simulated) return std::make_unique<SimulatedBackend>(config.simulator);
  const auto& live = config.generation.live;
  return std::make_unique<LiveChatBackend>(live, make_http_transport(live.endpoint),
                                           credential_from_env(live.api_key_env));
}

}  // namespace hbias
