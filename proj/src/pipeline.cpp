#include "hbias/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "hbias/simengine.hpp"
#include "hbias/store.hpp"

namespace hbias {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Generate: return "generate";
    case Stage::Embed: return "embed";
    case Stage::Observe: return "observe";
    case Stage::Fit: return "fit";
    case Stage::Report: return "report";
  }
  return "?";
}

std::vector<Stage> parse_stages(std::string_view s) {
  if (s == "all") return {Stage::Generate, Stage::Embed, Stage::Observe, Stage::Fit, Stage::Report};
  for (Stage st : {Stage::Generate, Stage::Embed, Stage::Observe, Stage::Fit, Stage::Report})
    if (s == to_string(st)) return {st};
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

// ----------------------------------------------------------------- hashing

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += kHex[md[i] >> 4];
      out += kHex[md[i] & 15];
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Sha256 h;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

// --------------------------------------------------------------- pipeline

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << bytes;
    if (!out) throw std::runtime_error("write to " + p.string() + " failed");
  }
  fs::rename(tmp, p);
}

/// Write only when the bytes differ, so reruns leave files untouched.
void write_if_changed(const fs::path& p, const std::string& bytes) {
  std::error_code ec;
  if (fs::exists(p, ec)) {
    if (read_file(p) == bytes) return;
  }
  write_file(p, bytes);
}

std::vector<GenerationRecord> ok_records_sorted(std::vector<GenerationRecord> records) {
  std::erase_if(records, [](const GenerationRecord& r) { return r.status != RecordStatus::Ok; });
  std::sort(records.begin(), records.end(),
            [](const GenerationRecord& a, const GenerationRecord& b) { return a.key() < b.key(); });
  return records;
}

class Runner {
 public:
  explicit Runner(const PipelineOptions& options) : opt_(options) {
    const std::string bytes = [&] {
      try {
        return read_file(options.config_path);
      } catch (const std::exception&) {
        throw ConfigError("cannot read config " + options.config_path.string());
      }
    }();
    config_ = parse_config(bytes);
    if (options.seed) config_.seed = options.seed;
    if (options.backend) config_.generation.backend = *options.backend;
    config_sha_ = sha256_hex(bytes);
    run_key_ = sha256_hex(bytes + "|seed=" + (config_.seed ? std::to_string(*config_.seed) : "none") +
                          "|backend=" + std::string(to_string(config_.generation.backend)));
    plan_.emplace(validate_design(config_.design, config_.sweep));

    fs::create_directories(options.out_dir);
    if (fs::exists(path(artifacts::kManifest))) {
      try {
        manifest_ = json::parse(read_file(path(artifacts::kManifest)));
      } catch (const json::exception&) {
        manifest_ = json::object();
      }
    }
    if (!manifest_.is_object()) manifest_ = json::object();
  }

  std::vector<StageOutcome> run() {
    std::vector<StageOutcome> out;
    for (Stage s : opt_.stages) {
      StageOutcome o{s, false, {}};
      switch (s) {
        case Stage::Generate: generate(o); break;
        case Stage::Embed: embed(o); break;
        case Stage::Observe: observe(o); break;
        case Stage::Fit: fit(o); break;
        case Stage::Report: report(o); break;
      }
      log() << "[" << to_string(s) << "] " << (o.skipped ? "up to date" : "done") << (o.detail.empty() ? "" : ": ")
            << o.detail << "\n";
      out.push_back(std::move(o));
    }
    save_manifest();
    return out;
  }

 private:
  fs::path path(const char* name) const { return opt_.out_dir / name; }

  std::ostream& log() {
    static std::ostringstream sink;
    if (opt_.log != nullptr) return *opt_.log;
    sink.str({});
    return sink;
  }

  void require(const char* artifact, const char* what, Stage producer) const {
    if (!fs::exists(path(artifact))) {
      throw DependencyMissing(std::string(what) + " not found; run stage '" + std::string(to_string(producer)) + "'");
    }
  }

  bool up_to_date(Stage s, const std::string& input_sha, std::initializer_list<const char*> outputs) const {
    for (const char* o : outputs)
      if (!fs::exists(path(o))) return false;
    const auto key = std::string(to_string(s));
    if (!manifest_.contains("stages") || !manifest_["stages"].contains(key)) return false;
    const auto& e = manifest_["stages"][key];
    return e.value("run_key", std::string()) == run_key_ && e.value("input_sha256", std::string()) == input_sha;
  }

  void mark(Stage s, const std::string& input_sha, json extra = json::object()) {
    extra["run_key"] = run_key_;
    extra["input_sha256"] = input_sha;
    extra["completed_at"] = utc_now_iso8601();
    manifest_["stages"][std::string(to_string(s))] = std::move(extra);
    save_manifest();
  }

  void save_manifest() {
    manifest_["config_path"] = opt_.config_path.string();
    manifest_["config_sha256"] = config_sha_;
    manifest_["seed"] = config_.seed ? json(*config_.seed) : json(nullptr);
    manifest_["backend"] = to_string(config_.generation.backend);
    manifest_["knob"] = to_string(config_.sweep.knob);
    fs::create_directories(opt_.out_dir);
    write_file(path(artifacts::kManifest), manifest_.dump(2) + "\n");
  }

  void generate(StageOutcome& o) {
    auto backend = make_story_backend(config_);
    const fs::path corpus = path(artifacts::kCorpus);
    const KeySet existing = existing_keys(corpus);
    BatchOptions bo;
    bo.seed = config_.seed;
    bo.max_in_flight = config_.generation.max_in_flight;
    bo.filter = config_.generation.filter;
    if (backend->kind() == Backend::Simulated && !bo.seed) throw ConfigError("simulator seed missing");

    if (existing.size() >= plan_->size() && fs::exists(corpus)) {
      bool all = true;
      for (const auto& e : plan_->entries())
        if (existing.count(plan_->key(e)) == 0) all = false;
      if (all) {
        o.skipped = true;
        o.detail = std::to_string(existing.size()) + " records present";
        return;
      }
    }
    CorpusWriter writer(corpus);
    const auto summary = generate_batch(*plan_, *backend, bo, existing, [&](const GenerationRecord& r) { writer.append(r); });
    writer.flush();
    o.detail = std::to_string(summary.emitted) + " new records (" + std::to_string(summary.skipped) + " already present, " +
               std::to_string(summary.degenerate) + " degenerate, " + std::to_string(summary.refused) + " refused, " +
               std::to_string(summary.failed) + " failed)";
    mark(Stage::Generate, "", {{"planned", summary.planned},
                               {"emitted", summary.emitted},
                               {"skipped", summary.skipped},
                               {"ok", summary.ok},
                               {"degenerate", summary.degenerate},
                               {"refused", summary.refused},
                               {"failed", summary.failed}});
  }

  void embed(StageOutcome& o) {
    require(artifacts::kCorpus, "corpus", Stage::Generate);
    const std::string input = sha256_file(path(artifacts::kCorpus));
    if (up_to_date(Stage::Embed, input, {artifacts::kEmbeddings})) {
      o.skipped = true;
      return;
    }
    auto load = load_corpus(path(artifacts::kCorpus));
    for (const auto& w : load.warnings) log() << "warning: " << w << "\n";
    const auto records = ok_records_sorted(std::move(load.records));
    if (records.empty()) throw std::runtime_error("corpus has no usable records");
    auto provider = make_embedding_provider(config_);
    EmbedOptions eo;
    eo.batch_size = config_.embedding.batch_size;
    eo.max_in_flight = config_.embedding.provider == EmbedProviderKind::Remote ? config_.embedding.max_in_flight : 1;
    const auto table = embed_to_table(records, *provider, eo);
    write_embeddings(path(artifacts::kEmbeddings), table);
    o.detail = std::to_string(table.size()) + " vectors, dimension " + std::to_string(table.dimension) + " (" +
               provider->name() + ")";
    mark(Stage::Embed, input, {{"provider", provider->name()}, {"vectors", table.size()}, {"dimension", table.dimension}});
  }

  void observe(StageOutcome& o) {
    require(artifacts::kCorpus, "corpus", Stage::Generate);
    require(artifacts::kEmbeddings, "embeddings", Stage::Embed);
    const std::string input = sha256_file(path(artifacts::kEmbeddings));
    if (up_to_date(Stage::Observe, input, {artifacts::kObservations})) {
      o.skipped = true;
      return;
    }
    const auto load = load_corpus(path(artifacts::kCorpus));
    std::map<Condition, std::array<std::uint64_t, 4>> counts;
    KeySet ok_keys;
    for (const auto& r : load.records) {
      ++counts[r.key().condition()][static_cast<std::size_t>(r.status)];
      if (r.status == RecordStatus::Ok) ok_keys.insert(r.key());
    }
    const auto table = read_embeddings(path(artifacts::kEmbeddings));
    KeySet emb_keys(table.keys.begin(), table.keys.end());
    if (emb_keys != ok_keys) throw DependencyMissing("embeddings are stale for the corpus; run stage 'embed'");

    const ConditionIndex index(table, *plan_);
    const auto stats = stratum_stats(index, config_.threads);
    const fs::path tmp = path(artifacts::kObservations).string() + ".tmp";
    std::uint64_t rows = 0;
    {
      ObservationWriter writer(tmp);
      build_observations(index, stats, [&](const SimilarityObservation& obs) { writer.write(obs); });
      writer.close();
      rows = writer.rows();
    }
    if (rows != index.total_pairs()) throw std::logic_error("pair-count identity violated");
    fs::rename(tmp, path(artifacts::kObservations));

    json filter = json::array();
    for (const auto& [c, n] : counts) {
      filter.push_back({{"race", to_string(c.race)},
                        {"gender", to_string(c.gender)},
                        {"knob", to_string(c.knob)},
                        {"setting", c.setting},
                        {"ok", n[0]},
                        {"refused", n[1]},
                        {"degenerate", n[2]},
                        {"failed", n[3]}});
    }
    manifest_["filter_counts"] = filter;
    o.detail = std::to_string(rows) + " observations across " + std::to_string(index.groups().size()) + " conditions";
    mark(Stage::Observe, input, {{"rows", rows}, {"conditions", index.groups().size()}});
  }

  void fit(StageOutcome& o) {
    require(artifacts::kObservations, "observations", Stage::Observe);
    const std::string input = sha256_file(path(artifacts::kObservations));
    if (up_to_date(Stage::Fit, input, {artifacts::kResults})) {
      o.skipped = true;
      return;
    }
    SuiteAccumulator suite(config_.sweep.knob, config_.sweep.values);
    FigureAccumulator figure;
    const auto rows = read_observations(path(artifacts::kObservations), [&](const SimilarityObservation& obs) {
      suite.add(obs);
      figure.add(obs);
    });
    ResultsBundle bundle;
    bundle.suite = suite.finish();
    bundle.cells = figure.finish(config_.sweep.knob, config_.sweep.values);
    write_file(path(artifacts::kResults), serialize_results(bundle));
    o.detail = std::to_string(bundle.suite.per_setting.size() + bundle.suite.pooled.size()) + " fits over " +
               std::to_string(rows) + " observations";
    mark(Stage::Fit, input, {{"fits", bundle.suite.per_setting.size() + bundle.suite.pooled.size()}});
  }

  void report(StageOutcome& o) {
    require(artifacts::kResults, "results", Stage::Fit);
    const std::string input = sha256_file(path(artifacts::kResults));
    if (up_to_date(Stage::Report, input, {artifacts::kReport, artifacts::kFigureData})) {
      o.skipped = true;
      return;
    }
    const auto bundle = parse_results(read_file(path(artifacts::kResults)));
    const fs::path dir = opt_.out_dir / artifacts::kTables;
    fs::create_directories(dir);
    std::string combined = "# Homogeneity bias audit\n\n";
    for (const auto& t : render_tables(bundle.suite)) {
      write_if_changed(dir / (t.name + ".md"), t.markdown);
      write_if_changed(dir / (t.name + ".csv"), t.csv);
      combined += t.markdown + "\n";
    }
    write_if_changed(path(artifacts::kFigureData), figure_data_csv(bundle.cells));
    write_if_changed(path(artifacts::kReport), combined);
    o.detail = "tables in " + dir.string();
    mark(Stage::Report, input);
  }

  PipelineOptions opt_;
  StudyConfig config_;
  std::string config_sha_;
  std::string run_key_;
  std::optional<StudyPlan> plan_;
  json manifest_ = json::object();
};

}  // namespace

std::vector<StageOutcome> run_pipeline(const PipelineOptions& options) {
  if (options.stages.empty()) throw ConfigError("no stages requested");
  return Runner(options).run();
}

InMemoryRun run_in_memory(const StudyConfig& config, bool fit_pooled) {
  const StudyPlan plan = validate_design(config.design, config.sweep);
  InMemoryRun run;
  auto backend = make_story_backend(config);
  BatchOptions bo;
  bo.seed = config.seed;
  bo.max_in_flight = config.generation.max_in_flight;
  bo.filter = config.generation.filter;
  generate_batch(plan, *backend, bo, {}, [&](const GenerationRecord& r) { run.corpus.push_back(r); });

  const auto records = ok_records_sorted(run.corpus);
  auto provider = make_embedding_provider(config);
  run.embeddings = embed_to_table(records, *provider, {config.embedding.batch_size, 1});

  const ConditionIndex index(run.embeddings, plan);
  run.observations.reserve(index.total_pairs());
  build_observations(index, [&](const SimilarityObservation& o) { run.observations.push_back(o); }, config.threads);

  SuiteAccumulator suite(config.sweep.knob, config.sweep.values);
  for (const auto& o : run.observations) suite.add(o);
  if (fit_pooled) {
    run.suite = suite.finish();
  } else {
    run.suite.knob = config.sweep.knob;
    run.suite.settings = config.sweep.values;
    run.suite.per_setting = suite.fit_per_setting();
  }
  return run;
}

}  // namespace hbias
