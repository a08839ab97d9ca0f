#pragma once

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dpimg/error.hpp"
#include "dpimg/imageio.hpp"
#include "dpimg/pipeline.hpp"
#include "dpimg/random.hpp"

namespace dpimg {

// Multinomial logistic regression over pixel intensities scaled to [0, 1].
struct LinearClassifier {
  Matrix weights;  // classes x (s + 1); last column is the bias
  std::vector<std::string> class_names;
  int epochs = 0;
  double learning_rate = 0.0;
  double final_loss = 0.0;
  double train_accuracy = 0.0;

  std::size_t classes() const { return weights.rows(); }
  std::size_t inputs() const { return weights.cols() == 0 ? 0 : weights.cols() - 1; }
};

struct TrainOptions {
  int epochs = 300;
  double learning_rate = 0.5;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

namespace detail {

// Gradients are accumulated over this many fixed chunks and summed in chunk
// order, so the result does not depend on the thread count.
inline constexpr std::size_t kGradientChunks = 16;

inline void Softmax(std::vector<double>& z) {
  const double top = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) sum += (v = std::exp(v - top));
  for (double& v : z) v /= sum;
}

inline void Logits(const Matrix& w, std::span<const double> x, std::vector<double>& out) {
  const std::size_t s = x.size();
  for (std::size_t c = 0; c < w.rows(); ++c) {
    auto wc = w.row(c);
    out[c] = std::inner_product(x.begin(), x.end(), wc.begin(), wc[s]);
  }
}

inline Matrix ScaledInputs(const ImageDatabase& db) {
  Matrix x = FlattenRange(db, 0, db.size());
  for (double& v : x.data()) v /= 255.0;
  return x;
}

inline std::size_t ArgMax(const std::vector<double>& z) {
  // First maximum wins: ties go to the lowest class index.
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

}  // namespace detail

inline std::size_t Predict(const LinearClassifier& clf, std::span<const double> scaled) {
  std::vector<double> z(clf.classes());
  detail::Logits(clf.weights, scaled, z);
  return detail::ArgMax(z);
}

inline double Evaluate(const LinearClassifier& clf, const ImageDatabase& test) {
  Require(test.size() > 0, "evaluate: empty test set");
  Require(test.shape().size() == clf.inputs(),
          "evaluate: images have " + std::to_string(test.shape().size()) +
              " attributes, classifier expects " + std::to_string(clf.inputs()));
  const Matrix x = detail::ScaledInputs(test);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i)
    correct += Predict(clf, x.row(i)) == static_cast<std::size_t>(test.labels[i]);
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// Full-batch gradient descent on the mean cross-entropy. Weights start from a
// seeded uniform(-0.01, 0.01) draw.
inline LinearClassifier TrainClassifier(const ImageDatabase& train, const TrainOptions& options = {}) {
  train.Validate();
  Require(train.size() > 0, "train_classifier: empty training set");
  const std::set<int> present(train.labels.begin(), train.labels.end());
  Require(present.size() >= 2, "train_classifier: need at least 2 classes, got " +
                                   std::to_string(present.size()));
  Require(options.epochs >= 1 && options.learning_rate > 0.0,
          "train_classifier: epochs and learning rate must be positive");

  const std::size_t k = train.class_names.size();
  const std::size_t s = train.shape().size();
  const std::size_t n = train.size();
  const Matrix x = detail::ScaledInputs(train);

  LinearClassifier clf;
  clf.class_names = train.class_names;
  clf.epochs = options.epochs;
  clf.learning_rate = options.learning_rate;
  clf.weights = Matrix(k, s + 1);
  RandomStream rng(options.seed, 0);
  for (double& w : clf.weights.data()) w = 0.02 * (rng.NextOpenUnit() - 0.5);

  const std::size_t chunks = std::min(detail::kGradientChunks, n);
  std::vector<Matrix> partial(chunks, Matrix(k, s + 1));
  std::vector<double> partial_loss(chunks);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    detail::ParallelFor(chunks, options.threads, [&](std::size_t chunk) {
      Matrix& g = partial[chunk];
      std::fill(g.data().begin(), g.data().end(), 0.0);
      double loss = 0.0;
      std::vector<double> p(k);
      for (std::size_t i = chunk * n / chunks; i < (chunk + 1) * n / chunks; ++i) {
        auto xi = x.row(i);
        detail::Logits(clf.weights, xi, p);
        detail::Softmax(p);
        const auto label = static_cast<std::size_t>(train.labels[i]);
        loss -= std::log(std::max(p[label], 1e-300));
        p[label] -= 1.0;
        for (std::size_t c = 0; c < k; ++c) {
          const double gc = p[c];
          auto row = g.row(c);
          for (std::size_t j = 0; j < s; ++j) row[j] += gc * xi[j];
          row[s] += gc;
        }
      }
      partial_loss[chunk] = loss;
    });
    const double step = options.learning_rate / static_cast<double>(n);
    double loss = 0.0;
    for (std::size_t chunk = 0; chunk < chunks; ++chunk) {
      auto& w = clf.weights.data();
      const auto& g = partial[chunk].data();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= step * g[j];
      loss += partial_loss[chunk];
    }
    clf.final_loss = loss / static_cast<double>(n);
  }
  Require(AllFinite(clf.weights), "train_classifier: weights diverged");
  clf.train_accuracy = Evaluate(clf, train);
  return clf;
}

// ---------------------------------------------------------------------------
// Distortion.

struct Distortion {
  double mse = 0.0;
  double psnr = 0.0;  // +inf when mse == 0
};

inline double Psnr(double mse) {
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

inline std::vector<Distortion> MeasureDistortion(const ImageDatabase& original,
                                                 const ImageDatabase& privatized) {
  Require(original.size() == privatized.size(),
          "distortion: " + std::to_string(original.size()) + " vs " +
              std::to_string(privatized.size()) + " images");
  std::vector<Distortion> out(original.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    Require(original.images[i].shape() == privatized.images[i].shape(),
            "distortion: shape mismatch at image " + std::to_string(i));
    out[i].mse = detail::MeanSquaredError(original.images[i], privatized.images[i]);
    out[i].psnr = Psnr(out[i].mse);
  }
  return out;
}

inline Distortion MeanDistortion(const std::vector<Distortion>& per_image) {
  Distortion mean;
  for (const auto& d : per_image) {
    mean.mse += d.mse;
    mean.psnr += d.psnr;
  }
  if (!per_image.empty()) {
    mean.mse /= static_cast<double>(per_image.size());
    mean.psnr /= static_cast<double>(per_image.size());
  }
  return mean;
}

// ---------------------------------------------------------------------------
// Montage: row-major tiling with 1-pixel white separators between tiles.

inline Image Montage(const std::vector<Image>& images, std::size_t rows, std::size_t cols) {
  Require(!images.empty(), "montage: no images");
  Require(rows >= 1 && cols >= 1, "montage: grid must be at least 1x1");
  Require(images.size() <= rows * cols,
          "montage: " + std::to_string(images.size()) + " images do not fit a " +
              std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  const Shape tile = images.front().shape();
  for (std::size_t i = 0; i < images.size(); ++i)
    Require(images[i].shape() == tile, "montage: image " + std::to_string(i) + " has shape " +
                                           ToString(images[i].shape()) + ", expected " +
                                           ToString(tile));
  Image out(cols * tile.width + (cols - 1), rows * tile.height + (rows - 1), tile.channels);
  std::fill(out.pixels.begin(), out.pixels.end(), std::uint8_t{255});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t ox = (i % cols) * (tile.width + 1);
    const std::size_t oy = (i / cols) * (tile.height + 1);
    for (std::size_t c = 0; c < tile.channels; ++c)
      for (std::size_t y = 0; y < tile.height; ++y)
        for (std::size_t x = 0; x < tile.width; ++x)
          out.at(ox + x, oy + y, c) = images[i].at(x, y, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics.

inline std::vector<double> AverageRanks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = rank;
    i = j + 1;
  }
  return ranks;
}

inline double PearsonCorrelation(const std::vector<double>& a, const std::vector<double>& b) {
  Require(a.size() == b.size() && a.size() >= 2, "correlation: need two equal-length series");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

inline double SpearmanCorrelation(const std::vector<double>& a, const std::vector<double>& b) {
  return PearsonCorrelation(AverageRanks(a), AverageRanks(b));
}

// ---------------------------------------------------------------------------
// Sweep over (epsilon, d).

struct SweepRecord {
  double epsilon = 0.0;
  std::size_t d = 0;
  double accuracy_private = 0.0;
  double accuracy_vanilla = 0.0;
  double mse_mean = 0.0;
  double psnr_mean = 0.0;
  bool ok = false;
  std::string error;
};

struct SweepResult {
  std::vector<SweepRecord> grid;  // epsilon-major, d-minor
  std::string dataset_id;
  std::string classifier_id;
  std::uint64_t seed = 0;
  double vanilla_accuracy = 0.0;

  const SweepRecord* Find(double epsilon, std::size_t d) const {
    for (const auto& r : grid)
      if (r.epsilon == epsilon && r.d == d) return &r;
    return nullptr;
  }
};

struct SweepOptions {
  std::vector<double> epsilons = {1, 2, 5, 10, 20, 50, 100};
  std::vector<std::size_t> ds = {10, 20, 50, 100};
  double lambda_inv = 1e-6;
  std::size_t batch_size = 100;
  std::uint64_t seed = 0;  // master seed; each cell derives its own
  unsigned threads = 1;
  TrainOptions train;
  PipelineOptions pipeline;
};

inline std::string ClassifierId(const LinearClassifier& clf) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double w : clf.weights.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(w);
    for (int b = 0; b < 8; ++b) {
      h ^= static_cast<std::uint8_t>(bits >> (8 * b));
      h *= 0x100000001b3ULL;
    }
  }
  char buf[48];
  std::snprintf(buf, sizeof buf, "linear-%zux%zu-%016llx", clf.classes(), clf.inputs(),
                static_cast<unsigned long long>(h));
  return buf;
}

// Privatizes `test` once per cell and scores it with one classifier. The
// classifier is trained on `train` unless supplied. PCA fits are shared by
// all cells, and every cell draws from its own derived seed.
inline SweepResult Sweep(const ImageDatabase& train, const ImageDatabase& test,
                         const SweepOptions& options, const LinearClassifier* trained = nullptr) {
  Require(!options.epsilons.empty() && !options.ds.empty(), "sweep: empty epsilon or d list");
  LinearClassifier local;
  const LinearClassifier& clf = trained ? *trained : (local = TrainClassifier(train, options.train));

  SweepResult result;
  result.dataset_id = FingerprintHash(test);
  result.classifier_id = ClassifierId(clf);
  result.seed = options.seed;
  result.vanilla_accuracy = Evaluate(clf, test);

  const auto ranges = SplitBatches(test.size(), options.batch_size);
  std::vector<PcaModel> fits;
  std::string fit_error;
  try {
    fits = FitBatches(test, ranges, options.pipeline.fit, options.threads);
  } catch (const Error& e) {
    fit_error = e.what();
  }

  for (double eps : options.epsilons)
    for (std::size_t d : options.ds) {
      SweepRecord rec;
      rec.epsilon = eps;
      rec.d = d;
      result.grid.push_back(rec);
    }

  PipelineOptions pipeline = options.pipeline;
  pipeline.threads = 1;
  pipeline.on_batch = nullptr;
  detail::ParallelFor(result.grid.size(), options.threads, [&](std::size_t cell) {
    SweepRecord& rec = result.grid[cell];
    rec.accuracy_vanilla = result.vanilla_accuracy;
    if (!fit_error.empty()) {
      rec.error = fit_error;
      return;
    }
    try {
      PrivacyParams params;
      params.epsilon = rec.epsilon;
      params.d = rec.d;
      params.lambda_inv = options.lambda_inv;
      params.batch_size = options.batch_size;
      params.seed = DeriveSeed(options.seed, rec.epsilon, rec.d);
      const PipelineRun run = PrivatizeInMemory(test, params, pipeline, &fits);
      const ImageDatabase privatized = run.Output(test);
      rec.accuracy_private = Evaluate(clf, privatized);
      const Distortion mean = MeanDistortion(MeasureDistortion(test, privatized));
      rec.mse_mean = mean.mse;
      rec.psnr_mean = mean.psnr;
      rec.ok = true;
    } catch (const Error& e) {
      rec.error = e.what();
    }
  });
  return result;
}

inline constexpr const char* kSweepCsvHeader =
    "epsilon,d,accuracy_private,accuracy_vanilla,mse_mean,psnr_mean,status";

inline std::string FormatSweepCsv(const SweepResult& result) {
  std::ostringstream out;
  out << kSweepCsvHeader << "\n";
  for (const auto& r : result.grid) {
    out << FormatDouble(r.epsilon) << "," << r.d << ",";
    if (r.ok) {
      out << FormatDouble(r.accuracy_private) << "," << FormatDouble(r.accuracy_vanilla) << ","
          << FormatDouble(r.mse_mean) << "," << FormatDouble(r.psnr_mean) << ",ok\n";
    } else {
      out << ",," << ",,failed\n";
    }
  }
  return out.str();
}

// Accuracy against epsilon (log axis), one polyline per d, and a dashed
// horizontal line at the vanilla accuracy.
inline std::string FormatSweepSvg(const SweepResult& result) {
  constexpr double kWidth = 640, kHeight = 420, kLeft = 60, kRight = 130, kTop = 30,
                   kBottom = 50;
  std::vector<double> eps;
  std::vector<std::size_t> ds;
  for (const auto& r : result.grid) {
    if (std::find(eps.begin(), eps.end(), r.epsilon) == eps.end()) eps.push_back(r.epsilon);
    if (std::find(ds.begin(), ds.end(), r.d) == ds.end()) ds.push_back(r.d);
  }
  std::sort(eps.begin(), eps.end());
  const double lo = std::log10(eps.front());
  const double hi = eps.size() > 1 ? std::log10(eps.back()) : lo + 1.0;
  auto px = [&](double e) {
    return kLeft + (std::log10(e) - lo) / (hi - lo) * (kWidth - kLeft - kRight);
  };
  auto py = [&](double acc) { return kTop + (1.0 - acc) * (kHeight - kTop - kBottom); };
  static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << kLeft << "\" y1=\"" << py(0) << "\" x2=\"" << kWidth - kRight
      << "\" y2=\"" << py(0) << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << kLeft << "\" y1=\"" << py(0) << "\" x2=\"" << kLeft << "\" y2=\""
      << py(1) << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 10; t += 2) {
    out << "<text x=\"" << kLeft - 8 << "\" y=\"" << py(t / 10.0) + 4
        << "\" text-anchor=\"end\">" << t / 10.0 << "</text>\n";
  }
  for (double e : eps) {
    out << "<text x=\"" << px(e) << "\" y=\"" << py(0) + 18 << "\" text-anchor=\"middle\">"
        << e << "</text>\n";
  }
  out << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 10
      << "\" text-anchor=\"middle\">privacy budget epsilon</text>\n";
  out << "<text x=\"15\" y=\"" << kHeight / 2 << "\" transform=\"rotate(-90 15 "
      << kHeight / 2 << ")\" text-anchor=\"middle\">test accuracy</text>\n";
  out << "<line x1=\"" << kLeft << "\" y1=\"" << py(result.vanilla_accuracy) << "\" x2=\""
      << kWidth - kRight << "\" y2=\"" << py(result.vanilla_accuracy)
      << "\" stroke=\"black\" stroke-dasharray=\"6 4\"/>\n";
  out << "<text x=\"" << kWidth - kRight + 6 << "\" y=\"" << py(result.vanilla_accuracy) + 4
      << "\">vanilla</text>\n";
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const char* color = kColors[k % std::size(kColors)];
    std::ostringstream points;
    for (double e : eps) {
      const SweepRecord* r = result.Find(e, ds[k]);
      if (r && r->ok) points << px(e) << "," << py(r->accuracy_private) << " ";
    }
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\""
        << points.str() << "\"/>\n";
    out << "<text x=\"" << kWidth - kRight + 6 << "\" y=\"" << kTop + 16 * (k + 1)
        << "\" fill=\"" << color << "\">d=" << ds[k] << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace dpimg
