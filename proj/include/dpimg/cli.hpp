#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dpimg/error.hpp"
#include "dpimg/evalharness.hpp"
#include "dpimg/imageio.hpp"
#include "dpimg/pipeline.hpp"

namespace dpimg::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitNumerical = 3,
};

struct KeySpec {
  const char* key;
  const char* default_value;  // empty: no default
  const char* help;
};

// Every configuration key. Flags are the keys with '_' spelled '-'.
inline const std::vector<KeySpec>& Keys() {
  static const std::vector<KeySpec> keys = {
      {"epsilon", "", "privacy budget (required by privatize)"},
      {"d", "", "retained PCA dimension (required by privatize)"},
      {"lambda_inv", "1e-06", "regulator added to the PCA inverse"},
      {"seed", "0", "master RNG seed"},
      {"batch_size", "100", "images per privatization batch"},
      {"idx_images", "", "IDX image file of the dataset to privatize"},
      {"idx_labels", "", "IDX label file matching --idx-images"},
      {"image_dir", "", "directory of P5/P6 images (alternative to IDX)"},
      {"manifest", "", "filename,label list for --image-dir"},
      {"out", "", "output directory"},
      {"epsilons", "1,2,5,10,20,50,100", "comma list of epsilons (sweep, montage)"},
      {"ds", "10,20,50,100", "comma list of d values (sweep, montage)"},
      {"montage_rows", "2", "rows of the multi-image montage"},
      {"montage_cols", "5", "columns of the multi-image montage"},
      {"train_idx_images", "", "IDX training images for the sweep classifier"},
      {"train_idx_labels", "", "IDX training labels for the sweep classifier"},
      {"train_image_dir", "", "training image directory for the sweep classifier"},
      {"train_manifest", "", "filename,label list for --train-image-dir"},
      {"resize", "", "nearest-neighbour resize WxH applied on directory load"},
      {"index", "0", "dataset index of the image shown in the epsilon x d montage"},
      {"epochs", "300", "classifier training epochs"},
      {"learning_rate", "0.5", "classifier learning rate"},
      {"threads", "1", "worker threads (output does not depend on it)"},
  };
  return keys;
}

inline std::string FlagName(const std::string& key) {
  std::string flag = key;
  std::replace(flag.begin(), flag.end(), '_', '-');
  return "--" + flag;
}

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Merged settings: defaults < config file < flags.
struct CliConfig {
  std::string subcommand;
  std::map<std::string, std::string> values;
  std::vector<std::string> positional;
  std::string usage;  // help text of the selected subcommand

  bool has(const std::string& key) const {
    auto it = values.find(key);
    return it != values.end() && !it->second.empty();
  }
  const std::string& get(const std::string& key) const {
    static const std::string empty;
    auto it = values.find(key);
    return it == values.end() ? empty : it->second;
  }
  std::string require(const std::string& key) const {
    if (!has(key)) throw UsageError("missing required " + FlagName(key));
    return get(key);
  }

  double real(const std::string& key) const {
    const std::string v = require(key);
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw UsageError("bad number for " + FlagName(key) + ": '" + v + "'");
  }
  std::uint64_t integer(const std::string& key) const {
    const std::string v = require(key);
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] != '-') {
        const unsigned long long x = std::stoull(v, &used);
        if (used == v.size()) return x;
      }
    } catch (const std::exception&) {
    }
    throw UsageError("bad integer for " + FlagName(key) + ": '" + v + "'");
  }
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    std::stringstream in(require(key));
    std::string item;
    while (std::getline(in, item, ',')) {
      item = Trim(item);
      try {
        std::size_t used = 0;
        out.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw UsageError("bad list entry for " + FlagName(key) + ": '" + item + "'");
      }
    }
    if (out.empty()) throw UsageError("empty list for " + FlagName(key));
    return out;
  }
  std::vector<std::size_t> integers(const std::string& key) const {
    std::vector<std::size_t> out;
    for (double v : reals(key)) {
      if (v < 1 || v != std::floor(v))
        throw UsageError("bad list entry for " + FlagName(key) + ": " + FormatDouble(v));
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }
};

struct ParseOutcome {
  std::optional<CliConfig> config;
  int exit_code = kExitOk;  // meaningful when config is empty (help / parse error)
};

inline const char* kSubcommands[] = {"privatize", "sweep", "montage", "inspect"};

inline ParseOutcome ParseArgs(const std::vector<std::string>& args, std::ostream& out,
                              std::ostream& err) {
  CLI::App app{"Differentially private image databases: PCA reduction, Laplace noise, "
               "regularized PCA inverse.",
               "dpimg"};
  app.require_subcommand(1);
  std::map<std::string, std::string> flags;
  std::map<std::string, std::string> scratch;
  std::string config_path;
  std::vector<std::string> positional;

  for (const char* name : kSubcommands) {
    CLI::App* sub = nullptr;
    if (std::string(name) == "privatize")
      sub = app.add_subcommand(name, "privatize a dataset into --out (images + manifest.txt)");
    else if (std::string(name) == "sweep")
      sub = app.add_subcommand(name, "accuracy/distortion over the epsilon x d grid "
                                     "(sweep.csv, sweep.svg)");
    else if (std::string(name) == "montage")
      sub = app.add_subcommand(name, "image grids over epsilon x d and per-cell batches");
    else
      sub = app.add_subcommand(name, "summarize a run manifest (file or run directory)");
    sub->add_option("--config", config_path, "key=value configuration file; flags win");
    if (std::string(name) == "inspect") {
      sub->add_option("path", positional, "manifest.txt or run directory")->required();
      continue;
    }
    for (const auto& spec : Keys()) {
      auto* opt = sub->add_option(FlagName(spec.key), scratch[spec.key], spec.help);
      if (*spec.default_value) opt->default_str(spec.default_value);
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return {std::nullopt, app.exit(e, out, err)};
  } catch (const CLI::CallForAllHelp& e) {
    return {std::nullopt, app.exit(e, out, err)};
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return {std::nullopt, kExitUsage};
  }

  CliConfig config;
  for (auto* sub : app.get_subcommands()) {
    config.subcommand = sub->get_name();
    config.usage = sub->help();
    for (const auto& spec : Keys()) {
      if (sub->get_option_no_throw(FlagName(spec.key)) &&
          sub->count(FlagName(spec.key)) > 0)
        flags[spec.key] = scratch[spec.key];
    }
  }
  config.positional = positional;

  for (const auto& spec : Keys())
    if (*spec.default_value) config.values[spec.key] = spec.default_value;
  if (!config_path.empty()) {
    std::map<std::string, std::string> file;
    try {
      file = ParseKeyValueFile(config_path);
    } catch (const Error& e) {
      err << "dpimg: " << e.what() << "\n";
      return {std::nullopt, kExitUsage};
    }
    for (const auto& [key, value] : file) {
      const bool known = std::any_of(Keys().begin(), Keys().end(),
                                     [&](const KeySpec& s) { return key == s.key; });
      if (!known) {
        err << "dpimg: unknown key '" << key << "' in " << config_path << "\n";
        return {std::nullopt, kExitUsage};
      }
      config.values[key] = value;
    }
  }
  for (const auto& [key, value] : flags) config.values[key] = value;
  return {config, kExitOk};
}

// ---------------------------------------------------------------------------
// Subcommands.

namespace detail {

struct LoadedDataset {
  ImageDatabase db;
  std::string preprocessing = "none";
};

inline std::optional<std::pair<std::size_t, std::size_t>> ParseResize(const CliConfig& c) {
  if (!c.has("resize")) return std::nullopt;
  const std::string v = c.get("resize");
  const auto x = v.find('x');
  try {
    if (x != std::string::npos) {
      const std::size_t w = std::stoul(v.substr(0, x));
      const std::size_t h = std::stoul(v.substr(x + 1));
      if (w > 0 && h > 0) return std::make_pair(w, h);
    }
  } catch (const std::exception&) {
  }
  throw UsageError("bad --resize '" + v + "', expected WxH");
}

inline LoadedDataset LoadDataset(const CliConfig& c, const std::string& prefix) {
  LoadedDataset out;
  if (c.has(prefix + "idx_images") || c.has(prefix + "idx_labels")) {
    out.db = LoadIdx(c.require(prefix + "idx_images"), c.require(prefix + "idx_labels"));
  } else if (c.has(prefix + "image_dir")) {
    ImageDirOptions options;
    options.resize = ParseResize(c);
    out.db = LoadImageDir(c.get(prefix + "image_dir"), c.require(prefix + "manifest"), options);
    if (options.resize) {
      out.preprocessing = "resize-nearest " + std::to_string(options.resize->first) + "x" +
                          std::to_string(options.resize->second);
    }
  } else {
    throw UsageError("no dataset: give " + FlagName(prefix + "idx_images") + "/" +
                     FlagName(prefix + "idx_labels") + " or " +
                     FlagName(prefix + "image_dir") + "/" + FlagName(prefix + "manifest"));
  }
  return out;
}

inline PrivacyParams ParamsFrom(const CliConfig& c, bool need_point) {
  PrivacyParams p;
  if (need_point) {
    p.epsilon = c.real("epsilon");
    p.d = c.integer("d");
  }
  p.lambda_inv = c.real("lambda_inv");
  p.seed = c.integer("seed");
  p.batch_size = c.integer("batch_size");
  return p;
}

inline unsigned Threads(const CliConfig& c) {
  return static_cast<unsigned>(std::max<std::uint64_t>(1, c.integer("threads")));
}

inline void WriteText(const std::filesystem::path& path, const std::string& text) {
  WriteFileBytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline int RunPrivatize(const CliConfig& c, std::ostream& out) {
  const PrivacyParams params = ParamsFrom(c, true);
  const std::string out_dir = c.require("out");
  const LoadedDataset data = LoadDataset(c, "");
  PipelineOptions options;
  options.threads = Threads(c);
  options.preprocessing = data.preprocessing;
  options.on_batch = [&out](const BatchRecord& r) {
    // Batches may finish out of order when threads > 1; the manifest is ordered.
    out << "batch " << r.index << " [" << r.range.begin << "," << r.range.end << ") rank "
        << r.rank << " mse " << FormatDouble(r.mse) << "\n";
  };
  std::mutex log_mutex;
  if (options.threads > 1) {
    auto inner = options.on_batch;
    options.on_batch = [inner, &log_mutex](const BatchRecord& r) {
      std::lock_guard lock(log_mutex);
      inner(r);
    };
  }
  const RunManifest manifest = PrivatizeDatabase(data.db, params, out_dir, options);
  out << "wrote " << manifest.dataset.n << " images and " << kManifestName << " to "
      << out_dir << "\n";
  return kExitOk;
}

inline int RunSweep(const CliConfig& c, std::ostream& out) {
  SweepOptions options;
  const PrivacyParams params = ParamsFrom(c, false);
  options.epsilons = c.reals("epsilons");
  options.ds = c.integers("ds");
  options.lambda_inv = params.lambda_inv;
  options.batch_size = params.batch_size;
  options.seed = params.seed;
  options.threads = Threads(c);
  options.train.epochs = static_cast<int>(c.integer("epochs"));
  options.train.learning_rate = c.real("learning_rate");
  options.train.seed = params.seed;
  options.train.threads = options.threads;
  const std::filesystem::path out_dir = c.require("out");
  const LoadedDataset test = LoadDataset(c, "");
  const LoadedDataset train = LoadDataset(c, "train_");

  const LinearClassifier clf = TrainClassifier(train.db, options.train);
  out << "classifier: train accuracy " << FormatDouble(clf.train_accuracy) << ", final loss "
      << FormatDouble(clf.final_loss) << "\n";
  const SweepResult result = Sweep(train.db, test.db, options, &clf);
  std::filesystem::create_directories(out_dir);
  WriteText(out_dir / "sweep.csv", FormatSweepCsv(result));
  WriteText(out_dir / "sweep.svg", FormatSweepSvg(result));
  std::size_t failed = 0;
  for (const auto& r : result.grid) {
    if (!r.ok) {
      ++failed;
      out << "cell epsilon=" << FormatDouble(r.epsilon) << " d=" << r.d
          << " failed: " << r.error << "\n";
    }
  }
  out << "vanilla accuracy " << FormatDouble(result.vanilla_accuracy) << "; "
      << result.grid.size() - failed << "/" << result.grid.size() << " cells ok; wrote "
      << (out_dir / "sweep.csv").string() << "\n";
  return kExitOk;
}

inline std::string CellTag(double epsilon, std::size_t d) {
  return "e" + FormatDouble(epsilon) + "_d" + std::to_string(d);
}

inline int RunMontage(const CliConfig& c, std::ostream& out) {
  const PrivacyParams base = ParamsFrom(c, false);
  const auto epsilons = c.reals("epsilons");
  const auto ds = c.integers("ds");
  const std::size_t rows = c.integer("montage_rows");
  const std::size_t cols = c.integer("montage_cols");
  const std::size_t index = c.integer("index");
  const std::filesystem::path out_dir = c.require("out");
  const LoadedDataset data = LoadDataset(c, "");
  const ImageDatabase& db = data.db;
  if (index >= db.size())
    throw UsageError("--index " + std::to_string(index) + " outside dataset of " +
                     std::to_string(db.size()));
  if (rows * cols == 0) throw UsageError("montage grid must be at least 1x1");

  const auto ranges = SplitBatches(db.size(), base.batch_size);
  const auto fits = FitBatches(db, ranges, {}, Threads(c));
  PipelineOptions options;
  options.threads = Threads(c);
  std::filesystem::create_directories(out_dir);

  const std::size_t shown = std::min(rows * cols, db.size());
  std::vector<Image> originals(db.images.begin(), db.images.begin() + shown);
  const char* ext = PnmExtension(db.shape().channels);
  SavePnm(Montage(originals, rows, cols), out_dir / (std::string("original_batch") + ext));

  std::vector<Image> single;  // rows: d, columns: epsilon
  for (std::size_t d : ds) {
    for (double eps : epsilons) {
      PrivacyParams p = base;
      p.epsilon = eps;
      p.d = d;
      p.seed = DeriveSeed(base.seed, eps, d);
      const ImageDatabase priv = PrivatizeInMemory(db, p, options, &fits).Output(db);
      single.push_back(priv.images[index]);
      std::vector<Image> batch(priv.images.begin(), priv.images.begin() + shown);
      SavePnm(Montage(batch, rows, cols), out_dir / ("batch_" + CellTag(eps, d) + ext));
    }
  }
  SavePnm(Montage(single, ds.size(), epsilons.size()),
          out_dir / ("single_" + std::to_string(index) + ext));
  out << "montage of image " << index << " over " << ds.size() << " d x " << epsilons.size()
      << " epsilon written to " << out_dir.string() << "\n";
  return kExitOk;
}

inline int RunInspect(const CliConfig& c, std::ostream& out) {
  std::filesystem::path path = c.positional.at(0);
  if (std::filesystem::is_directory(path)) path /= kManifestName;
  const RunManifest m = LoadManifest(path);
  std::size_t covered = 0;
  std::uint64_t draws = 0;
  double mse = 0.0;
  std::size_t min_rank = SIZE_MAX, max_rank = 0;
  for (const auto& b : m.batches) {
    if (b.range.begin != covered || b.range.end <= b.range.begin)
      Fail(ErrorCode::kFormat, path.string() + ": batch " + std::to_string(b.index) +
                                   " does not continue the partition");
    if (b.profile.scales.size() != m.params.d)
      Fail(ErrorCode::kFormat, path.string() + ": batch " + std::to_string(b.index) +
                                   " noise profile has " +
                                   std::to_string(b.profile.scales.size()) +
                                   " attributes, d=" + std::to_string(m.params.d));
    covered = b.range.end;
    draws += b.draws;
    mse += b.mse * static_cast<double>(b.range.size());
    min_rank = std::min(min_rank, b.rank);
    max_rank = std::max(max_rank, b.rank);
  }
  if (covered != m.dataset.n)
    Fail(ErrorCode::kFormat, path.string() + ": batches cover " + std::to_string(covered) +
                                 " of " + std::to_string(m.dataset.n) + " images");
  out << "manifest      " << path.string() << "\n";
  out << "tool version  " << m.tool_version << "\n";
  out << "run           " << m.started << " .. " << m.finished << "\n";
  out << "epsilon       " << FormatDouble(m.params.epsilon) << "\n";
  out << "d             " << m.params.d << "\n";
  out << "lambda_inv    " << FormatDouble(m.params.lambda_inv) << "\n";
  out << "seed          " << m.params.seed << "\n";
  out << "batch size    " << m.params.batch_size << "\n";
  out << "dataset       " << m.dataset.hash << " " << ToString(m.dataset.shape) << " n="
      << m.dataset.n << " (" << m.dataset.preprocessing << ")\n";
  out << "batches       " << m.batches.size() << ", rank " << min_rank << ".." << max_rank
      << ", noise draws " << draws << "\n";
  out << "mean mse      " << FormatDouble(m.dataset.n ? mse / double(m.dataset.n) : 0.0) << "\n";
  for (const auto& b : m.batches) {
    double mean_scale = 0.0;
    for (double s : b.profile.scales) mean_scale += s;
    if (!b.profile.scales.empty()) mean_scale /= double(b.profile.scales.size());
    out << "  batch " << b.index << " [" << b.range.begin << "," << b.range.end << ") rank "
        << b.rank << " mse " << FormatDouble(b.mse) << " mean laplace scale "
        << FormatDouble(mean_scale) << "\n";
  }
  return kExitOk;
}

}  // namespace detail

// Entry point: exit 0 ok, 1 usage, 2 data/format, 3 numerical.
inline int Run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  const ParseOutcome parsed = ParseArgs(args, out, err);
  if (!parsed.config) return parsed.exit_code;
  const CliConfig& config = *parsed.config;
  try {
    if (config.subcommand == "privatize") return detail::RunPrivatize(config, out);
    if (config.subcommand == "sweep") return detail::RunSweep(config, out);
    if (config.subcommand == "montage") return detail::RunMontage(config, out);
    return detail::RunInspect(config, out);
  } catch (const UsageError& e) {
    err << "dpimg " << config.subcommand << ": " << e.what() << "\n\n" << config.usage;
    return kExitUsage;
  } catch (const Error& e) {
    err << "dpimg " << config.subcommand << ": " << ErrorCodeName(e.code()) << ": " << e.what()
        << "\n";
    return IsNumerical(e.code()) ? kExitNumerical : kExitData;
  } catch (const std::exception& e) {
    err << "dpimg " << config.subcommand << ": " << e.what() << "\n";
    return kExitData;
  }
}

inline int Run(int argc, char** argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  return Run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace dpimg::cli
