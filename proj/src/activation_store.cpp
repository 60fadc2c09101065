#include "simlab/activation_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "simlab/error.hpp"

namespace simlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::size_t kFixedHeaderBytes = 4 + 4 + 8 + 8 + 4 + 4;

void check_problem_id(const std::string& id) {
  if (id.empty()) throw ValidationError("empty problem id");
  for (unsigned char c : id) {
    if (c == '\n' || c == '\r' || c == '\0') {
      throw ValidationError("problem id contains a control character: " + id);
    }
  }
}

bool valid_utf8_text(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80) {
      if (c < 0x20 || c == 0x7f) return false;
      extra = 0;
    } else if ((c & 0xE0) == 0xC0 && c >= 0xC2) {
      extra = 1;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
    } else if ((c & 0xF8) == 0xF0 && c <= 0xF4) {
      extra = 3;
    } else {
      return false;
    }
    if (i + extra >= s.size() && extra > 0) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
    }
    i += extra + 1;
  }
  return true;
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::span<const std::uint8_t> take(std::size_t count, const char* what) {
    need(count, what);
    auto out = bytes_.subspan(pos_, count);
    pos_ += count;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t count, const char* what) const {
    if (remaining() < count) {
      throw FormatError(std::string("truncated file: not enough bytes for ") + what);
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// ActivationSet

ActivationSet::ActivationSet(std::string model_id, std::uint32_t layer_index,
                             std::vector<std::string> problem_ids, RowMatrixF matrix) {
  if (model_id.empty()) throw ValidationError("empty model id");
  if (!valid_utf8_text(model_id)) throw ValidationError("model id is not printable UTF-8");
  if (matrix.rows() < 1 || matrix.cols() < 1) {
    throw ValidationError("activation matrix must have n >= 1 and d >= 1");
  }
  if (static_cast<Eigen::Index>(problem_ids.size()) != matrix.rows()) {
    throw ValidationError("problem id count " + std::to_string(problem_ids.size()) +
                          " does not match row count " + std::to_string(matrix.rows()));
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : problem_ids) {
    check_problem_id(id);
    if (!seen.insert(id).second) throw ValidationError("duplicate problem id: " + id);
  }
  for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
    for (Eigen::Index c = 0; c < matrix.cols(); ++c) {
      if (!std::isfinite(matrix(r, c))) {
        throw ValidationError("non-finite entry at (" + std::to_string(r) + "," +
                              std::to_string(c) + ")");
      }
    }
  }
  data_ = std::make_shared<const Payload>(
      Payload{std::move(model_id), layer_index, std::move(problem_ids), std::move(matrix)});
}

std::span<const float> ActivationSet::row(std::size_t i) const {
  if (i >= rows()) throw PreconditionError("row index out of range");
  return {data_->matrix.data() + i * cols(), cols()};
}

ActivationSet ActivationSet::select(std::span<const std::string> ids) const {
  std::unordered_map<std::string_view, Eigen::Index> pos;
  pos.reserve(rows());
  for (std::size_t i = 0; i < rows(); ++i) pos.emplace(data_->problem_ids[i], i);
  RowMatrixF out(static_cast<Eigen::Index>(ids.size()), data_->matrix.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = pos.find(ids[i]);
    if (it == pos.end()) {
      throw PreconditionError("problem " + ids[i] + " not present in " + model_id() +
                              " layer " + std::to_string(layer_index()));
    }
    out.row(static_cast<Eigen::Index>(i)) = data_->matrix.row(it->second);
  }
  return ActivationSet(model_id(), layer_index(), {ids.begin(), ids.end()}, std::move(out));
}

ActivationSet ActivationSet::with_matrix(RowMatrixF matrix) const {
  if (matrix.rows() != data_->matrix.rows()) {
    throw PreconditionError("replacement matrix changes the row count");
  }
  return ActivationSet(model_id(), layer_index(), data_->problem_ids, std::move(matrix));
}

bool ActivationSet::operator==(const ActivationSet& other) const {
  if (model_id() != other.model_id() || layer_index() != other.layer_index()) return false;
  if (!std::ranges::equal(problem_ids(), other.problem_ids())) return false;
  if (matrix().rows() != other.matrix().rows() || matrix().cols() != other.matrix().cols()) {
    return false;
  }
  // Bitwise comparison so that -0.0f and 0.0f are distinguished.
  const auto n = static_cast<std::size_t>(matrix().size());
  for (std::size_t i = 0; i < n; ++i) {
    if (std::bit_cast<std::uint32_t>(matrix().data()[i]) !=
        std::bit_cast<std::uint32_t>(other.matrix().data()[i])) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Binary format

std::vector<std::uint8_t> encode_activation_set(const ActivationSet& set) {
  const auto& m = set.matrix();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (!std::isfinite(m(r, c))) {
        throw ValidationError("non-finite entry at (" + std::to_string(r) + "," +
                              std::to_string(c) + ")");
      }
    }
  }
  std::vector<std::uint8_t> out;
  std::size_t id_bytes = 0;
  for (const auto& id : set.problem_ids()) id_bytes += id.size() + 1;
  out.reserve(kFixedHeaderBytes + set.model_id().size() + 4 * m.size() + id_bytes);

  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint64_t>(out, set.rows());
  put_le<std::uint64_t>(out, set.cols());
  put_le<std::uint32_t>(out, set.layer_index());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(set.model_id().size()));
  out.insert(out.end(), set.model_id().begin(), set.model_id().end());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(m.data()[i]));
  }
  for (const auto& id : set.problem_ids()) {
    out.insert(out.end(), id.begin(), id.end());
    out.push_back('\n');
  }
  return out;
}

void write_activation_file(const ActivationSet& set, const fs::path& path) {
  const auto bytes = encode_activation_set(set);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

ActivationSet decode_activation_set(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  auto magic = in.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) {
    throw FormatError("bad magic: not an activation file");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kFormatVersion) {
    throw FormatError("unsupported format version " + std::to_string(version));
  }
  const auto n = in.get<std::uint64_t>("row count");
  const auto d = in.get<std::uint64_t>("column count");
  const auto layer = in.get<std::uint32_t>("layer index");
  const auto id_len = in.get<std::uint32_t>("model id length");
  auto id_bytes = in.take(id_len, "model id");
  std::string model_id(id_bytes.begin(), id_bytes.end());
  if (!valid_utf8_text(model_id) || model_id.empty()) {
    throw FormatError("model id is empty or not printable UTF-8");
  }
  if (n == 0 || d == 0) throw FormatError("declared shape has a zero dimension");

  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  if (d > kMax / n || n * d > kMax / 4) {
    throw FormatError("declared shape overflows: n*d too large");
  }
  const std::uint64_t payload = n * d * 4;
  // Every id needs at least two bytes (one character plus the newline).
  if (payload > in.remaining() || n > (in.remaining() - payload) / 2) {
    throw FormatError("truncated payload: declared " + std::to_string(n) + "x" +
                      std::to_string(d) + " exceeds file size");
  }
  auto raw = in.take(static_cast<std::size_t>(payload), "payload");
  RowMatrixF matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < static_cast<std::size_t>(n * d); ++i) {
    std::uint32_t u = 0;
    for (std::size_t b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(raw[4 * i + b]) << (8 * b);
    const float v = std::bit_cast<float>(u);
    if (!std::isfinite(v)) {
      throw FormatError("non-finite entry at (" + std::to_string(i / d) + "," +
                        std::to_string(i % d) + ")");
    }
    matrix.data()[i] = v;
  }

  auto tail = in.take(in.remaining(), "problem ids");
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(n));
  std::size_t start = 0;
  for (std::size_t i = 0; i < tail.size(); ++i) {
    if (tail[i] == '\n') {
      ids.emplace_back(tail.begin() + static_cast<std::ptrdiff_t>(start),
                       tail.begin() + static_cast<std::ptrdiff_t>(i));
      start = i + 1;
    }
  }
  if (start != tail.size()) throw FormatError("problem id block is not newline-terminated");
  if (ids.size() != n) {
    throw FormatError("truncated or corrupt id block: expected " + std::to_string(n) +
                      " problem ids, found " + std::to_string(ids.size()));
  }
  for (const auto& id : ids) {
    if (id.empty() || !valid_utf8_text(id)) {
      throw FormatError("problem id block contains an empty or non-printable id");
    }
  }
  try {
    return ActivationSet(std::move(model_id), layer, std::move(ids), std::move(matrix));
  } catch (const ValidationError& e) {
    throw FormatError(std::string("invalid contents: ") + e.what());
  }
}

ActivationSet read_activation_file(const fs::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return decode_activation_set(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Manifests

const ProblemRecord* RunManifest::find(std::string_view problem_id) const {
  for (const auto& r : records) {
    if (r.problem_id == problem_id) return &r;
  }
  return nullptr;
}

void validate_manifest(const RunManifest& m) {
  if (m.model_id.empty()) throw ValidationError("manifest has an empty model_id");
  if (m.num_layers < 1) {
    throw ValidationError("manifest " + m.model_id + ": num_layers must be >= 1");
  }
  std::unordered_set<std::string> seen;
  for (const auto& r : m.records) {
    check_problem_id(r.problem_id);
    if (!seen.insert(r.problem_id).second) {
      throw ValidationError("manifest " + m.model_id + ": problem " + r.problem_id +
                            " listed more than once");
    }
    if (r.mean_attention_entropy &&
        (!std::isfinite(*r.mean_attention_entropy) || *r.mean_attention_entropy < 0.0)) {
      throw ValidationError("manifest " + m.model_id + ": invalid entropy for " + r.problem_id);
    }
  }
}

std::string manifest_to_json(const RunManifest& m) {
  json records = json::array();
  for (const auto& r : m.records) {
    json rec = {{"problem_id", r.problem_id},
                {"answer", r.answer},
                {"correct", r.correct},
                {"domain", r.domain}};
    rec["mean_attention_entropy"] =
        r.mean_attention_entropy ? json(*r.mean_attention_entropy) : json(nullptr);
    records.push_back(std::move(rec));
  }
  json j = {{"model_id", m.model_id},
            {"family", m.family},
            {"num_layers", m.num_layers},
            {"records", std::move(records)}};
  return j.dump(2) + "\n";
}

RunManifest manifest_from_json(std::string_view text) {
  RunManifest m;
  try {
    const auto j = json::parse(text);
    m.model_id = j.at("model_id").get<std::string>();
    m.family = j.at("family").get<std::string>();
    m.num_layers = j.at("num_layers").get<int>();
    for (const auto& rec : j.at("records")) {
      ProblemRecord r;
      r.problem_id = rec.at("problem_id").get<std::string>();
      r.answer = rec.at("answer").get<std::string>();
      r.correct = rec.at("correct").get<bool>();
      r.domain = rec.value("domain", std::string{});
      if (rec.contains("mean_attention_entropy") && !rec["mean_attention_entropy"].is_null()) {
        r.mean_attention_entropy = rec["mean_attention_entropy"].get<double>();
      }
      m.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  validate_manifest(m);
  return m;
}

RunManifest load_manifest(const fs::path& path) {
  try {
    return manifest_from_json(read_text(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_manifest(const RunManifest& manifest, const fs::path& path) {
  validate_manifest(manifest);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << manifest_to_json(manifest);
}

// ---------------------------------------------------------------------------
// Cohort

const RunManifest& Cohort::manifest(const std::string& model_id) const {
  auto it = manifests_.find(model_id);
  if (it == manifests_.end()) throw PreconditionError("model not in cohort: " + model_id);
  return it->second;
}

bool Cohort::has_layer(const std::string& model_id, std::uint32_t layer) const {
  return sets_.contains({model_id, layer});
}

const ActivationSet& Cohort::activations(const std::string& model_id, std::uint32_t layer) const {
  auto it = sets_.find({model_id, layer});
  if (it == sets_.end()) {
    throw PreconditionError("no activations for " + model_id + " layer " + std::to_string(layer));
  }
  return it->second;
}

std::vector<std::uint32_t> Cohort::layers(const std::string& model_id) const {
  std::vector<std::uint32_t> out;
  for (auto it = sets_.lower_bound({model_id, 0});
       it != sets_.end() && it->first.first == model_id; ++it) {
    out.push_back(it->first.second);
  }
  return out;
}

std::vector<bool> Cohort::correctness(const std::string& model_id) const {
  const auto& m = manifest(model_id);
  std::unordered_map<std::string_view, bool> flag;
  for (const auto& r : m.records) flag.emplace(r.problem_id, r.correct);
  std::vector<bool> out;
  out.reserve(problem_ids().size());
  for (const auto& id : problem_ids()) out.push_back(flag.at(id));
  return out;
}

std::vector<Eigen::Index> Cohort::rows_of(std::span<const std::string> ids) const {
  std::vector<Eigen::Index> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = row_of_.find(id);
    if (it == row_of_.end()) throw PreconditionError("problem not shared by cohort: " + id);
    out.push_back(it->second);
  }
  return out;
}

Cohort build_cohort(std::vector<RunManifest> manifests, std::vector<ActivationSet> sets) {
  if (manifests.size() < 2) throw PreconditionError("a cohort needs at least 2 models");
  Cohort cohort;
  for (auto& m : manifests) {
    validate_manifest(m);
    const auto id = m.model_id;
    if (!cohort.manifests_.emplace(id, std::move(m)).second) {
      throw ValidationError("duplicate manifest for model " + id);
    }
  }

  std::set<std::string> shared;
  bool first = true;
  for (const auto& [id, m] : cohort.manifests_) {
    std::set<std::string> ids;
    for (const auto& r : m.records) ids.insert(r.problem_id);
    if (first) {
      shared = std::move(ids);
      first = false;
    } else {
      std::set<std::string> next;
      std::ranges::set_intersection(shared, ids, std::inserter(next, next.end()));
      shared = std::move(next);
    }
  }
  if (shared.empty()) throw ValidationError("models share no problems (empty intersection)");

  auto& index = cohort.index_;
  index.shared_problem_ids.assign(shared.begin(), shared.end());
  for (const auto& [id, m] : cohort.manifests_) {
    index.model_ids.push_back(id);
    index.num_layers[id] = m.num_layers;
  }
  for (std::size_t i = 0; i < index.shared_problem_ids.size(); ++i) {
    cohort.row_of_.emplace(index.shared_problem_ids[i], static_cast<Eigen::Index>(i));
  }

  for (auto& set : sets) {
    auto mit = cohort.manifests_.find(set.model_id());
    if (mit == cohort.manifests_.end()) {
      throw ValidationError("activation set for unknown model " + set.model_id());
    }
    if (static_cast<int>(set.layer_index()) >= mit->second.num_layers) {
      throw ValidationError("layer " + std::to_string(set.layer_index()) + " of " +
                            set.model_id() + " exceeds num_layers");
    }
    for (const auto& pid : set.problem_ids()) {
      if (!mit->second.find(pid)) {
        throw ValidationError("problem " + pid + " of " + set.model_id() +
                              " is missing from its manifest");
      }
    }
    auto key = std::make_pair(set.model_id(), set.layer_index());
    if (cohort.sets_.contains(key)) {
      throw ValidationError("duplicate activation set for " + key.first + " layer " +
                            std::to_string(key.second));
    }
    cohort.sets_.emplace(std::move(key), set.select(index.shared_problem_ids));
  }
  return cohort;
}

// ---------------------------------------------------------------------------
// Run directories

std::string layer_file_name(std::uint32_t layer) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer_%04u.rsa", layer);
  return buf;
}

void write_run(const fs::path& dir, const RunManifest& manifest,
               std::span<const ActivationSet> sets) {
  fs::create_directories(dir);
  save_manifest(manifest, dir / "manifest.json");
  for (const auto& s : sets) {
    if (s.model_id() != manifest.model_id) {
      throw ValidationError("set model " + s.model_id() + " does not match manifest " +
                            manifest.model_id);
    }
    write_activation_file(s, dir / layer_file_name(s.layer_index()));
  }
}

namespace {

std::vector<fs::path> run_dirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (fs::exists(dir / "manifest.json")) {
    out.push_back(dir);
    return out;
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) {
      out.push_back(entry.path());
    }
  }
  std::ranges::sort(out);
  return out;
}

std::vector<fs::path> layer_files(const fs::path& run) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(run)) {
    if (entry.is_regular_file() && entry.path().extension() == ".rsa") out.push_back(entry.path());
  }
  std::ranges::sort(out);
  return out;
}

std::optional<std::uint32_t> layer_from_name(const fs::path& p) {
  const auto stem = p.stem().string();
  if (stem.rfind("layer_", 0) != 0) return std::nullopt;
  const auto digits = stem.substr(6);
  if (digits.empty() || !std::ranges::all_of(digits, [](char c) { return c >= '0' && c <= '9'; })) {
    return std::nullopt;
  }
  return static_cast<std::uint32_t>(std::stoul(digits));
}

}  // namespace

Cohort load_cohort(const fs::path& dir, const std::optional<std::vector<std::uint32_t>>& layers) {
  if (!fs::is_directory(dir)) throw Error("cohort directory not found: " + dir.string());
  std::vector<RunManifest> manifests;
  std::vector<ActivationSet> sets;
  for (const auto& run : run_dirs(dir)) {
    manifests.push_back(load_manifest(run / "manifest.json"));
    for (const auto& file : layer_files(run)) {
      const auto layer = layer_from_name(file);
      if (layers && layer && std::ranges::find(*layers, *layer) == layers->end()) continue;
      sets.push_back(read_activation_file(file));
    }
  }
  return build_cohort(std::move(manifests), std::move(sets));
}

std::vector<std::string> validate_path(const fs::path& path) {
  std::vector<std::string> issues;
  auto check_file = [&](const fs::path& file, const RunManifest* manifest) {
    try {
      const auto set = read_activation_file(file);
      const auto layer = layer_from_name(file);
      if (layer && *layer != set.layer_index()) {
        issues.push_back(file.string() + ": header layer " + std::to_string(set.layer_index()) +
                         " does not match file name");
      }
      if (manifest) {
        if (set.model_id() != manifest->model_id) {
          issues.push_back(file.string() + ": model id '" + set.model_id() +
                           "' does not match manifest '" + manifest->model_id + "'");
        }
        if (static_cast<int>(set.layer_index()) >= manifest->num_layers) {
          issues.push_back(file.string() + ": layer index exceeds manifest num_layers");
        }
        for (const auto& pid : set.problem_ids()) {
          if (!manifest->find(pid)) {
            issues.push_back(file.string() + ": problem " + pid + " missing from manifest");
            break;
          }
        }
      }
    } catch (const Error& e) {
      issues.push_back(e.what());
    }
  };

  if (fs::is_regular_file(path)) {
    check_file(path, nullptr);
    return issues;
  }
  if (!fs::is_directory(path)) {
    issues.push_back("path not found: " + path.string());
    return issues;
  }
  const auto runs = run_dirs(path);
  if (runs.empty()) issues.push_back(path.string() + ": no manifest.json found");
  std::vector<RunManifest> manifests;
  for (const auto& run : runs) {
    RunManifest manifest;
    try {
      manifest = load_manifest(run / "manifest.json");
    } catch (const Error& e) {
      issues.push_back(e.what());
      continue;
    }
    const auto files = layer_files(run);
    if (files.empty()) issues.push_back(run.string() + ": no layer files");
    for (const auto& f : files) check_file(f, &manifest);
    manifests.push_back(std::move(manifest));
  }
  if (manifests.size() >= 2 && issues.empty()) {
    try {
      std::vector<ActivationSet> none;
      build_cohort(manifests, std::move(none));
    } catch (const Error& e) {
      issues.push_back(e.what());
    }
  }
  return issues;
}

}  // namespace simlab
