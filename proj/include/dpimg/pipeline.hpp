#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dpimg/dpmech.hpp"
#include "dpimg/error.hpp"
#include "dpimg/imageio.hpp"
#include "dpimg/pca.hpp"
#include "dpimg/random.hpp"

namespace dpimg {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr const char* kManifestName = "manifest.txt";

struct BatchRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const BatchRange&) const = default;
};

// Contiguous batches in dataset order. A tail shorter than 2 is merged into
// the previous batch.
inline std::vector<BatchRange> SplitBatches(std::size_t n, std::size_t batch_size) {
  Require(batch_size >= 2, "split_batches: batch_size must be at least 2");
  Require(n >= 2, "split_batches: database has " + std::to_string(n) + " images, need 2");
  std::vector<BatchRange> out;
  for (std::size_t begin = 0; begin < n; begin += batch_size)
    out.push_back({begin, std::min(n, begin + batch_size)});
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].end = n;
    out.pop_back();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest.

struct DatasetFingerprint {
  std::string hash;  // "fnv1a64:<16 hex digits>"
  Shape shape;
  std::size_t n = 0;
  std::string preprocessing = "none";

  bool operator==(const DatasetFingerprint&) const = default;
};

struct BatchRecord {
  std::size_t index = 0;
  BatchRange range;
  std::size_t rank = 0;
  std::uint64_t draws = 0;
  double mse = 0.0;
  NoiseProfile profile;

  bool operator==(const BatchRecord&) const = default;
};

struct RunManifest {
  PrivacyParams params;
  DatasetFingerprint dataset;
  std::vector<BatchRecord> batches;
  std::string tool_version = kToolVersion;
  std::string started;
  std::string finished;
};

inline std::string FingerprintHash(const ImageDatabase& db) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint8_t byte) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  };
  auto mix_u64 = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) mix(static_cast<std::uint8_t>(v >> (8 * b)));
  };
  const Shape shape = db.shape();
  mix_u64(shape.width);
  mix_u64(shape.height);
  mix_u64(shape.channels);
  mix_u64(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    for (std::uint8_t p : db.images[i].pixels) mix(p);
    mix_u64(static_cast<std::uint64_t>(db.labels[i]));
  }
  for (const auto& name : db.class_names) {
    for (char c : name) mix(static_cast<std::uint8_t>(c));
    mix(0);
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "fnv1a64:%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Shortest %g form that parses back to the same double.
inline std::string FormatDouble(double v) {
  char buf[40];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string UtcTimestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Line-oriented text; sections in fixed order, keys in fixed order.
inline std::string FormatManifest(const RunManifest& m) {
  std::ostringstream out;
  out << "# dpimg run manifest\n";
  out << "[run]\n";
  out << "tool_version=" << m.tool_version << "\n";
  out << "started=" << m.started << "\n";
  out << "finished=" << m.finished << "\n";
  out << "[params]\n";
  out << "epsilon=" << FormatDouble(m.params.epsilon) << "\n";
  out << "d=" << m.params.d << "\n";
  out << "lambda_inv=" << FormatDouble(m.params.lambda_inv) << "\n";
  out << "seed=" << m.params.seed << "\n";
  out << "batch_size=" << m.params.batch_size << "\n";
  out << "[dataset]\n";
  out << "fingerprint=" << m.dataset.hash << "\n";
  out << "width=" << m.dataset.shape.width << "\n";
  out << "height=" << m.dataset.shape.height << "\n";
  out << "channels=" << m.dataset.shape.channels << "\n";
  out << "n=" << m.dataset.n << "\n";
  out << "preprocessing=" << m.dataset.preprocessing << "\n";
  for (const auto& b : m.batches) {
    out << "[batch " << b.index << "]\n";
    out << "begin=" << b.range.begin << "\n";
    out << "end=" << b.range.end << "\n";
    out << "rank=" << b.rank << "\n";
    out << "draws=" << b.draws << "\n";
    out << "mse=" << FormatDouble(b.mse) << "\n";
    out << "[noise " << b.index << "]\n";
    out << "attribute,sensitivity,scale\n";
    for (std::size_t l = 0; l < b.profile.scales.size(); ++l) {
      out << l << "," << FormatDouble(b.profile.sensitivities[l]) << ","
          << FormatDouble(b.profile.scales[l]) << "\n";
    }
  }
  return out.str();
}

namespace detail {

inline std::size_t ParseSize(const std::string& v, const std::string& what) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used == v.size()) return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
  }
  Fail(ErrorCode::kFormat, "manifest: bad integer for " + what + ": '" + v + "'");
}

inline double ParseReal(const std::string& v, const std::string& what) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  Fail(ErrorCode::kFormat, "manifest: bad number for " + what + ": '" + v + "'");
}

}  // namespace detail

inline RunManifest ParseManifest(const std::string& text) {
  RunManifest m;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  BatchRecord* batch = nullptr;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = "manifest line " + std::to_string(lineno);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') Fail(ErrorCode::kFormat, where + ": unterminated section");
      section = line.substr(1, line.size() - 2);
      if (section.rfind("batch ", 0) == 0) {
        const std::size_t index = detail::ParseSize(section.substr(6), where);
        if (index != m.batches.size())
          Fail(ErrorCode::kFormat, where + ": batch sections out of order");
        m.batches.push_back({});
        m.batches.back().index = index;
        batch = &m.batches.back();
        section = "batch";
      } else if (section.rfind("noise ", 0) == 0) {
        const std::size_t index = detail::ParseSize(section.substr(6), where);
        if (batch == nullptr || batch->index != index)
          Fail(ErrorCode::kFormat, where + ": noise section without matching batch");
        section = "noise";
      }
      continue;
    }
    if (section == "noise") {
      if (line == "attribute,sensitivity,scale") continue;
      std::istringstream cols(line);
      std::string a, sens, scale;
      if (!std::getline(cols, a, ',') || !std::getline(cols, sens, ',') ||
          !std::getline(cols, scale))
        Fail(ErrorCode::kFormat, where + ": expected attribute,sensitivity,scale");
      if (detail::ParseSize(a, where) != batch->profile.scales.size())
        Fail(ErrorCode::kFormat, where + ": attribute index out of sequence");
      batch->profile.sensitivities.push_back(detail::ParseReal(sens, where));
      batch->profile.scales.push_back(detail::ParseReal(scale, where));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) Fail(ErrorCode::kFormat, where + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (section == "run") {
      if (key == "tool_version") m.tool_version = value;
      else if (key == "started") m.started = value;
      else if (key == "finished") m.finished = value;
    } else if (section == "params") {
      if (key == "epsilon") m.params.epsilon = detail::ParseReal(value, key);
      else if (key == "d") m.params.d = detail::ParseSize(value, key);
      else if (key == "lambda_inv") m.params.lambda_inv = detail::ParseReal(value, key);
      else if (key == "seed") m.params.seed = detail::ParseSize(value, key);
      else if (key == "batch_size") m.params.batch_size = detail::ParseSize(value, key);
    } else if (section == "dataset") {
      if (key == "fingerprint") m.dataset.hash = value;
      else if (key == "width") m.dataset.shape.width = detail::ParseSize(value, key);
      else if (key == "height") m.dataset.shape.height = detail::ParseSize(value, key);
      else if (key == "channels") m.dataset.shape.channels = detail::ParseSize(value, key);
      else if (key == "n") m.dataset.n = detail::ParseSize(value, key);
      else if (key == "preprocessing") m.dataset.preprocessing = value;
    } else if (section == "batch") {
      if (key == "begin") batch->range.begin = detail::ParseSize(value, key);
      else if (key == "end") batch->range.end = detail::ParseSize(value, key);
      else if (key == "rank") batch->rank = detail::ParseSize(value, key);
      else if (key == "draws") batch->draws = detail::ParseSize(value, key);
      else if (key == "mse") batch->mse = detail::ParseReal(value, key);
    } else {
      Fail(ErrorCode::kFormat, where + ": key outside any section");
    }
  }
  return m;
}

inline RunManifest LoadManifest(const std::filesystem::path& path) {
  const auto bytes = ReadFileBytes(path);
  return ParseManifest(std::string(bytes.begin(), bytes.end()));
}

// ---------------------------------------------------------------------------
// Plain-text key=value configuration.

inline std::map<std::string, std::string> ParseKeyValueFile(const std::filesystem::path& path) {
  const auto bytes = ReadFileBytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = Trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      Fail(ErrorCode::kFormat, path.string() + ":" + std::to_string(lineno) +
                                   ": expected key=value");
    out[Trim(line.substr(0, eq))] = Trim(line.substr(eq + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running the pipeline.

enum class Stage { kFit, kReduce, kPrivatize, kInverse, kQuantize, kWrite };

inline const char* StageName(Stage stage) {
  switch (stage) {
    case Stage::kFit: return "fit";
    case Stage::kReduce: return "reduce";
    case Stage::kPrivatize: return "privatize";
    case Stage::kInverse: return "inverse";
    case Stage::kQuantize: return "quantize";
    case Stage::kWrite: return "write";
  }
  return "?";
}

struct PipelineOptions {
  unsigned threads = 1;
  FitOptions fit;
  InversePath inverse_path = InversePath::kAuto;
  std::string preprocessing = "none";
  // Called on entry to each stage; tests throw from here to inject failures.
  std::function<void(std::size_t batch, Stage stage)> on_stage;
  // Progress line per finished batch.
  std::function<void(const BatchRecord&)> on_batch;
};

struct PrivatizedBatch {
  std::size_t index = 0;
  ReducedBatch reduced_noised;
  std::vector<Image> reconstructed;
  NoiseProfile profile;
};

struct PipelineRun {
  RunManifest manifest;
  std::vector<PrivatizedBatch> batches;

  // Reconstructed images in dataset order with the source labels.
  ImageDatabase Output(const ImageDatabase& source) const {
    ImageDatabase out;
    out.class_names = source.class_names;
    out.labels = source.labels;
    for (const auto& b : batches)
      out.images.insert(out.images.end(), b.reconstructed.begin(), b.reconstructed.end());
    return out;
  }
};

namespace detail {

// Runs fn(i) for i in [0, count) on up to `threads` workers. Rethrows the
// failure with the lowest index, so the reported error does not depend on
// scheduling.
template <typename Fn>
void ParallelFor(std::size_t count, unsigned threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::thread> workers;
    const unsigned n_workers = static_cast<unsigned>(std::min<std::size_t>(threads, count));
    for (unsigned w = 0; w < n_workers; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < count && !failed; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
          }
        }
      });
    }
    for (auto& t : workers) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline double MeanSquaredError(const Image& a, const Image& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double diff = double(a.pixels[i]) - double(b.pixels[i]);
    sum += diff * diff;
  }
  return sum / static_cast<double>(a.pixels.size());
}

}  // namespace detail

// Fits one PCA model per batch. Sweeps fit once and reuse across cells.
inline std::vector<PcaModel> FitBatches(const ImageDatabase& db,
                                        const std::vector<BatchRange>& ranges,
                                        const FitOptions& options = {}, unsigned threads = 1) {
  std::vector<PcaModel> models(ranges.size());
  detail::ParallelFor(ranges.size(), threads, [&](std::size_t b) {
    try {
      models[b] = Fit(FlattenRange(db, ranges[b].begin, ranges[b].end), options);
    } catch (const Error& e) {
      throw Error(e.code(), "batch " + std::to_string(b) + " stage fit: " + e.what());
    }
  });
  return models;
}

// Fit -> reduce -> privatize -> inverse -> quantize for every batch, in memory.
// `fits`, when given, supplies one precomputed model per batch.
inline PipelineRun PrivatizeInMemory(const ImageDatabase& db, const PrivacyParams& params,
                                     const PipelineOptions& options = {},
                                     const std::vector<PcaModel>* fits = nullptr) {
  params.Validate();
  db.Validate();
  const auto ranges = SplitBatches(db.size(), params.batch_size);
  Require(fits == nullptr || fits->size() == ranges.size(),
          "privatize: precomputed fits do not match the batch split");
  const Shape shape = db.shape();

  PipelineRun run;
  run.manifest.params = params;
  run.manifest.dataset = {FingerprintHash(db), shape, db.size(), options.preprocessing};
  run.manifest.batches.resize(ranges.size());
  run.batches.resize(ranges.size());

  detail::ParallelFor(ranges.size(), options.threads, [&](std::size_t b) {
    Stage stage = Stage::kFit;
    auto enter = [&](Stage next) {
      stage = next;
      if (options.on_stage) options.on_stage(b, stage);
    };
    try {
      const BatchRange range = ranges[b];
      enter(Stage::kFit);
      const Matrix rows = FlattenRange(db, range.begin, range.end);
      PcaModel local;
      const PcaModel& model = fits ? (*fits)[b] : (local = Fit(rows, options.fit));

      enter(Stage::kReduce);
      if (params.d > model.rank()) {
        Fail(ErrorCode::kInvalidArgument,
             "d=" + std::to_string(params.d) + " exceeds the batch's retained rank " +
                 std::to_string(model.rank()));
      }
      const ReducedBatch reduced = Reduce(model, rows, params.d);

      enter(Stage::kPrivatize);
      RandomStream rng(params.seed, b);
      PrivatizeResult priv = Privatize(reduced, params, rng);

      enter(Stage::kInverse);
      const Matrix recon = Inverse(model, priv.noised, params.lambda_inv, options.inverse_path);

      enter(Stage::kQuantize);
      PrivatizedBatch& out = run.batches[b];
      out.index = b;
      double mse = 0.0;
      for (std::size_t i = 0; i < range.size(); ++i) {
        out.reconstructed.push_back(Unflatten(recon.row(i), shape));
        mse += detail::MeanSquaredError(out.reconstructed.back(), db.images[range.begin + i]);
      }
      BatchRecord& record = run.manifest.batches[b];
      record.index = b;
      record.range = range;
      record.rank = model.rank();
      record.draws = priv.draws;
      record.mse = mse / static_cast<double>(range.size());
      record.profile = priv.profile;
      out.profile = std::move(priv.profile);
      out.reduced_noised = std::move(priv.noised);
      if (record.draws != range.size() * params.d)
        Fail(ErrorCode::kInvalidArgument, "draw count audit failed");
      if (options.on_batch) options.on_batch(record);
    } catch (const Error& e) {
      throw Error(e.code(), "batch " + std::to_string(b) + " stage " + StageName(stage) + ": " +
                                e.what());
    }
  });
  return run;
}

inline std::string SafeName(const std::string& s) {
  std::string out;
  for (char c : s)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  return out;
}

// "<zero-padded index>_<label><ext>", at least 6 digits.
inline std::string OutputImageName(std::size_t index, std::size_t n, const std::string& label,
                                   std::size_t channels) {
  std::size_t digits = std::to_string(n == 0 ? 0 : n - 1).size();
  digits = std::max<std::size_t>(digits, 6);
  std::string idx = std::to_string(index);
  idx.insert(0, digits - idx.size(), '0');
  return idx + "_" + SafeName(label) + PnmExtension(channels);
}

// Runs the pipeline and publishes images plus manifest.txt into `out_dir`.
//
// Everything is written to a sibling staging directory first and swapped in at
// the end, so `out_dir` only ever holds nothing or a complete run. An existing
// non-empty `out_dir` must itself be a previous run (contain a manifest).
inline RunManifest PrivatizeDatabase(const ImageDatabase& db, const PrivacyParams& params,
                                     const std::filesystem::path& out_dir,
                                     const PipelineOptions& options = {}) {
  namespace fs = std::filesystem;
  const fs::path target = fs::absolute(out_dir).lexically_normal();
  const fs::path final_dir = target.filename().empty() ? target.parent_path() : target;
  if (fs::exists(final_dir) && !fs::is_empty(final_dir) &&
      !fs::exists(final_dir / kManifestName)) {
    Fail(ErrorCode::kIo, "refusing to replace " + final_dir.string() +
                             ": not empty and not a previous run");
  }
  const fs::path staging = final_dir.string() + ".staging";
  const fs::path retired = final_dir.string() + ".previous";
  std::error_code ec;
  fs::remove_all(staging, ec);

  const std::string started = UtcTimestamp();
  try {
    PipelineRun run = PrivatizeInMemory(db, params, options);
    fs::create_directories(staging);
    for (const auto& batch : run.batches) {
      if (options.on_stage) options.on_stage(batch.index, Stage::kWrite);
      const BatchRange range = run.manifest.batches[batch.index].range;
      for (std::size_t i = 0; i < batch.reconstructed.size(); ++i) {
        const std::size_t index = range.begin + i;
        const auto& label = db.class_names[db.labels[index]];
        SavePnm(batch.reconstructed[i],
                staging / OutputImageName(index, db.size(), label, db.shape().channels));
      }
    }
    run.manifest.started = started;
    run.manifest.finished = UtcTimestamp();
    const std::string text = FormatManifest(run.manifest);
    WriteFileBytes(staging / (std::string(kManifestName) + ".tmp"),
                   std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    fs::rename(staging / (std::string(kManifestName) + ".tmp"), staging / kManifestName);

    fs::remove_all(retired, ec);
    if (fs::exists(final_dir)) fs::rename(final_dir, retired);
    fs::rename(staging, final_dir);
    fs::remove_all(retired, ec);
    return run.manifest;
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(staging, ec);
    Fail(ErrorCode::kIo, e.what());
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
}

}  // namespace dpimg
