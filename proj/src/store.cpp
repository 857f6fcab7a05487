#include "hbias/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <bit>
#include <charconv>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "hbias/simengine.hpp"

namespace hbias {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "embedding sidecar I/O assumes a little-endian host");

std::string format_double(double v) { return format_setting(v); }

// ------------------------------------------------------------------- corpus

std::string serialize_record(const GenerationRecord& rec) {
  const auto& q = rec.request;
  json j;
  j["set_id"] = q.stimulus.set_id;
  j["race"] = to_string(q.stimulus.race);
  j["gender"] = to_string(q.stimulus.gender);
  j["stimulus_ref"] = q.stimulus.stimulus_ref;
  j["knob"] = to_string(q.knob);
  j["setting"] = q.setting;
  j["replicate"] = q.replicate_index;
  j["temperature"] = q.temperature();
  j["top_p"] = q.top_p();
  j["max_tokens"] = q.max_tokens;
  j["system_prompt"] = q.system_prompt;
  j["user_prompt"] = q.user_prompt;
  if (q.seed) j["seed"] = *q.seed;
  j["backend"] = to_string(rec.backend);
  j["model_id"] = rec.model_id;
  j["created_at"] = rec.created_at;
  j["status"] = to_string(rec.status);
  j["story_text"] = rec.story_text;
  if (!rec.error.empty()) j["error"] = rec.error;
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

GenerationRecord deserialize_record(const std::string& line) {
  const json j = json::parse(line);
  GenerationRecord rec;
  auto& q = rec.request;
  q.stimulus.set_id = j.at("set_id").get<int>();
  q.stimulus.race = parse_race(j.at("race").get<std::string>());
  q.stimulus.gender = parse_gender(j.at("gender").get<std::string>());
  q.stimulus.stimulus_ref = j.value("stimulus_ref", std::string());
  q.knob = parse_knob(j.at("knob").get<std::string>());
  q.setting = j.at("setting").get<double>();
  q.replicate_index = j.at("replicate").get<int>();
  q.max_tokens = j.value("max_tokens", 150);
  q.system_prompt = j.value("system_prompt", std::string());
  q.user_prompt = j.value("user_prompt", std::string());
  if (j.contains("seed")) q.seed = j["seed"].get<std::uint64_t>();
  rec.backend = parse_backend(j.at("backend").get<std::string>());
  rec.model_id = j.value("model_id", std::string());
  rec.created_at = j.value("created_at", std::string());
  rec.status = parse_status(j.at("status").get<std::string>());
  rec.story_text = j.at("story_text").get<std::string>();
  rec.error = j.value("error", std::string());
  return rec;
}

namespace {

std::string corpus_header() {
  return json{{"kind", "hbias-corpus"}, {"schema_version", kCorpusSchemaVersion}}.dump() + "\n";
}

void check_header(const std::string& line, const fs::path& path) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception&) {
    throw std::runtime_error("corpus " + path.string() + " has no valid header line");
  }
  if (j.value("kind", std::string()) != "hbias-corpus")
    throw std::runtime_error("corpus " + path.string() + " has no valid header line");
  const int v = j.value("schema_version", -1);
  if (v != kCorpusSchemaVersion) {
    throw std::runtime_error("corpus " + path.string() + " schema_version mismatch: file has " +
                             std::to_string(v) + ", expected " + std::to_string(kCorpusSchemaVersion));
  }
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

CorpusWriter::CorpusWriter(const fs::path& path) : path_(path) {
  std::error_code ec;
  const bool fresh = !fs::exists(path, ec) || fs::file_size(path, ec) == 0;
  if (!fresh) {
    const std::string existing = slurp(path);
    check_header(existing.substr(0, existing.find('\n')), path);
    fd_ = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
    if (fd_ < 0) throw std::runtime_error("cannot open " + path.string() + ": " + std::strerror(errno));
    // A torn trailing record is closed off so the next append starts clean.
    if (existing.back() != '\n') write_all("\n");
    return;
  }
  fd_ = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw std::runtime_error("cannot open " + path.string() + ": " + std::strerror(errno));
  write_all(corpus_header());
}

CorpusWriter::~CorpusWriter() {
  if (fd_ >= 0) ::close(fd_);
}

void CorpusWriter::write_all(const std::string& bytes) {
  const char* p = bytes.data();
  std::size_t left = bytes.size();
  while (left > 0) {
    const ssize_t n = ::write(fd_, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error("write to " + path_.string() + " failed: " + std::strerror(errno));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
}

void CorpusWriter::append(const GenerationRecord& rec) {
  const std::string line = serialize_record(rec) + "\n";
  std::lock_guard lock(mu_);
  write_all(line);
}

void CorpusWriter::flush() {
  std::lock_guard lock(mu_);
  ::fsync(fd_);
}

CorpusLoad load_corpus(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("corpus not found: " + path.string());
  const std::string data = slurp(path);
  CorpusLoad out;
  if (data.empty()) throw std::runtime_error("corpus " + path.string() + " has no valid header line");

  std::map<GenerationKey, std::size_t> index;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < data.size()) {
    const std::size_t nl = data.find('\n', pos);
    const bool torn = nl == std::string::npos;
    const std::string line = data.substr(pos, torn ? std::string::npos : nl - pos);
    pos = torn ? data.size() : nl + 1;
    ++line_no;
    if (line_no == 1) {
      check_header(line, path);
      continue;
    }
    if (line.empty()) continue;
    if (torn) {
      out.warnings.push_back("line " + std::to_string(line_no) + ": truncated trailing record skipped");
      continue;
    }
    GenerationRecord rec;
    try {
      rec = deserialize_record(line);
    } catch (const std::exception& e) {
      out.warnings.push_back("line " + std::to_string(line_no) + ": corrupt record skipped (" + e.what() + ")");
      continue;
    }
    const auto key = rec.key();
    auto it = index.find(key);
    if (it == index.end()) {
      index.emplace(key, out.records.size());
      out.records.push_back(std::move(rec));
      continue;
    }
    auto& prev = out.records[it->second];
    if (prev.status == RecordStatus::Failed) {
      prev = std::move(rec);
    } else if (rec.status != RecordStatus::Failed) {
      throw std::runtime_error("duplicate key in corpus " + path.string() + ": " + key.to_string());
    }
  }
  return out;
}

KeySet existing_keys(const fs::path& path) {
  KeySet keys;
  if (!fs::exists(path)) return keys;
  for (const auto& r : load_corpus(path).records)
    if (r.status != RecordStatus::Failed) keys.insert(r.key());
  return keys;
}

// --------------------------------------------------------------- embeddings

namespace {

GenerationKey parse_key(const std::string& s) {
  GenerationKey k;
  std::istringstream in(s);
  std::string field;
  int seen = 0;
  while (std::getline(in, field, '|')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw std::runtime_error("malformed key: " + s);
    const std::string name = field.substr(0, eq);
    const std::string val = field.substr(eq + 1);
    if (name == "set") k.set_id = std::stoi(val);
    else if (name == "race") k.race = parse_race(val);
    else if (name == "gender") k.gender = parse_gender(val);
    else if (name == "knob") k.knob = parse_knob(val);
    else if (name == "setting") k.setting = std::stod(val);
    else if (name == "rep") k.replicate = std::stoi(val);
    else throw std::runtime_error("malformed key: " + s);
    ++seen;
  }
  if (seen != 6) throw std::runtime_error("malformed key: " + s);
  return k;
}

}  // namespace

void write_embeddings(const fs::path& path, const EmbeddingTable& table) {
  if (table.values.size() != table.keys.size() * table.dimension)
    throw std::invalid_argument("embedding table size does not match keys x dimension");
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << "hbias-embeddings 1\n"
        << "dim " << table.dimension << "\n"
        << "count " << table.keys.size() << "\n";
    for (const auto& k : table.keys) out << k.to_string() << "\n";
    out << "end\n";
    out.write(reinterpret_cast<const char*>(table.values.data()),
              static_cast<std::streamsize>(table.values.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write to " + tmp.string() + " failed");
  }
  fs::rename(tmp, path);
}

EmbeddingTable read_embeddings(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  auto expect_line = [&](std::string_view prefix) {
    if (!std::getline(in, line) || line.rfind(prefix, 0) != 0)
      throw std::runtime_error("malformed embedding header in " + path.string());
    return line.substr(prefix.size());
  };
  if (expect_line("hbias-embeddings ") != "1")
    throw std::runtime_error("unsupported embedding sidecar version in " + path.string());
  EmbeddingTable t;
  t.dimension = std::stoull(expect_line("dim "));
  const std::size_t count = std::stoull(expect_line("count "));
  t.keys.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("truncated embedding header in " + path.string());
    t.keys.push_back(parse_key(line));
  }
  expect_line("end");
  t.values.resize(count * t.dimension);
  in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != t.values.size() * sizeof(float))
    throw std::runtime_error("truncated embedding payload in " + path.string());
  return t;
}

// ------------------------------------------------------------- observations

ObservationWriter::ObservationWriter(const fs::path& path) {
  file_ = std::fopen(path.c_str(), "wb");
  if (file_ == nullptr) throw std::runtime_error("cannot write " + path.string() + ": " + std::strerror(errno));
  buffer_.reserve(1 << 20);
  buffer_ += kObservationHeader;
  buffer_ += '\n';
}

ObservationWriter::~ObservationWriter() {
  try {
    close();
  } catch (...) {
  }
}

void ObservationWriter::drain() {
  if (!buffer_.empty() && std::fwrite(buffer_.data(), 1, buffer_.size(), file_) != buffer_.size())
    throw std::runtime_error("observation write failed");
  buffer_.clear();
}

void ObservationWriter::write(const SimilarityObservation& o) {
  char num[32];
  auto put = [&](double v) {
    auto r = std::to_chars(num, num + sizeof num, v);
    buffer_.append(num, r.ptr);
  };
  put(o.cosine_raw);
  buffer_ += ',';
  put(o.cosine_std);
  buffer_ += ',';
  buffer_ += to_string(o.race);
  buffer_ += ',';
  buffer_ += to_string(o.gender);
  buffer_ += ',';
  auto r = std::to_chars(num, num + sizeof num, o.pair_id.lo);
  buffer_.append(num, r.ptr);
  buffer_ += '-';
  r = std::to_chars(num, num + sizeof num, o.pair_id.hi);
  buffer_.append(num, r.ptr);
  buffer_ += ',';
  buffer_ += to_string(o.knob);
  buffer_ += ',';
  put(o.setting);
  buffer_ += '\n';
  ++rows_;
  if (buffer_.size() > (1 << 20)) drain();
}

void ObservationWriter::close() {
  if (file_ == nullptr) return;
  drain();
  const bool bad = std::fclose(file_) != 0;
  file_ = nullptr;
  if (bad) throw std::runtime_error("observation file close failed");
}

namespace {

template <class T>
const char* parse_num(const char* p, const char* end, T& out) {
  auto r = std::from_chars(p, end, out);
  if (r.ec != std::errc()) throw std::runtime_error("malformed number in observation row");
  return r.ptr;
}

void parse_observation(const char* p, const char* end, SimilarityObservation& o) {
  auto field_end = [&](const char* q) {
    while (q < end && *q != ',') ++q;
    return q;
  };
  auto expect_comma = [&](const char* q) {
    if (q >= end || *q != ',') throw std::runtime_error("malformed observation row");
    return q + 1;
  };
  p = expect_comma(parse_num(p, end, o.cosine_raw));
  p = expect_comma(parse_num(p, end, o.cosine_std));
  const char* q = field_end(p);
  o.race = parse_race(std::string_view(p, static_cast<std::size_t>(q - p)));
  p = expect_comma(q);
  q = field_end(p);
  o.gender = parse_gender(std::string_view(p, static_cast<std::size_t>(q - p)));
  p = expect_comma(q);
  p = parse_num(p, end, o.pair_id.lo);
  if (p >= end || *p != '-') throw std::runtime_error("malformed pair_id");
  p = expect_comma(parse_num(p + 1, end, o.pair_id.hi));
  q = field_end(p);
  o.knob = parse_knob(std::string_view(p, static_cast<std::size_t>(q - p)));
  p = expect_comma(q);
  parse_num(p, end, o.setting);
}

}  // namespace

std::uint64_t read_observations(const fs::path& path, const std::function<void(const SimilarityObservation&)>& visit) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (f == nullptr) throw std::runtime_error("cannot read " + path.string());
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> guard(f, &std::fclose);

  std::vector<char> buf(1 << 22);
  std::string carry;
  std::uint64_t rows = 0;
  bool header = true;
  SimilarityObservation o;

  auto handle = [&](const char* b, const char* e) {
    if (e > b && e[-1] == '\r') --e;
    if (header) {
      if (std::string_view(b, static_cast<std::size_t>(e - b)) != kObservationHeader)
        throw std::runtime_error("unexpected observation header in " + path.string());
      header = false;
      return;
    }
    if (b == e) return;
    parse_observation(b, e, o);
    ++rows;
    visit(o);
  };

  for (;;) {
    const std::size_t n = std::fread(buf.data(), 1, buf.size(), f);
    if (n == 0) break;
    const char* p = buf.data();
    const char* end = p + n;
    while (p < end) {
      const char* nl = static_cast<const char*>(std::memchr(p, '\n', static_cast<std::size_t>(end - p)));
      if (nl == nullptr) {
        carry.append(p, end);
        break;
      }
      if (!carry.empty()) {
        carry.append(p, nl);
        handle(carry.data(), carry.data() + carry.size());
        carry.clear();
      } else {
        handle(p, nl);
      }
      p = nl + 1;
    }
  }
  if (!carry.empty()) handle(carry.data(), carry.data() + carry.size());
  if (header) throw std::runtime_error("empty observation file " + path.string());
  return rows;
}

}  // namespace hbias
