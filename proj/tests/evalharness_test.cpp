#include "dpimg/evalharness.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"

namespace dpimg {
namespace {

ImageDatabase Mnist(const std::string& prefix, std::size_t n) {
  ImageDatabase db = LoadIdx(testing::DataDir() + "/" + prefix + "-images-idx3-ubyte",
                             testing::DataDir() + "/" + prefix + "-labels-idx1-ubyte");
  db.images.resize(n);
  db.labels.resize(n);
  return db;
}

// Class k lights up pixel k of a 4x4 image on a faint random background.
ImageDatabase Blobs(std::size_t n, std::size_t classes, std::mt19937_64& gen) {
  std::uniform_int_distribution<int> background(0, 40);
  ImageDatabase db;
  for (std::size_t k = 0; k < classes; ++k) db.class_names.push_back("c" + std::to_string(k));
  for (std::size_t i = 0; i < n; ++i) {
    Image img(4, 4, 1);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(background(gen));
    img.pixels[i % classes] = 255;
    db.images.push_back(img);
    db.labels.push_back(static_cast<int>(i % classes));
  }
  return db;
}

ImageDatabase RandomLabels(std::size_t n, std::mt19937_64& gen) {
  ImageDatabase db = testing::RandomDatabase(n, 4, 4, 1, 10, gen);
  std::uniform_int_distribution<int> label(0, 9);
  for (int& l : db.labels) l = label(gen);
  return db;
}

TEST(ClassifierTest, SeparableBlobsAreLearnedPerfectly) {
  std::mt19937_64 gen(1);
  const ImageDatabase train = Blobs(200, 5, gen), test = Blobs(100, 5, gen);
  const LinearClassifier clf = TrainClassifier(train);
  EXPECT_EQ(clf.train_accuracy, 1.0);
  EXPECT_EQ(Evaluate(clf, test), 1.0);
  EXPECT_EQ(clf.epochs, 300);
  EXPECT_EQ(clf.learning_rate, 0.5);
}

TEST(ClassifierTest, RandomLabelsGiveChanceAccuracy) {
  std::mt19937_64 gen(2);
  const ImageDatabase train = RandomLabels(500, gen), test = RandomLabels(1000, gen);
  EXPECT_NEAR(Evaluate(TrainClassifier(train), test), 0.10, 0.03);
}

TEST(ClassifierTest, SingleClassIsRejected) {
  std::mt19937_64 gen(3);
  ImageDatabase db = testing::RandomDatabase(10, 3, 3, 1, 1, gen);
  EXPECT_THROW(TrainClassifier(db), Error);
}

TEST(ClassifierTest, DeterministicAndThreadIndependent) {
  std::mt19937_64 gen(4);
  const ImageDatabase train = Blobs(90, 3, gen);
  TrainOptions opts;
  opts.epochs = 40;
  opts.seed = 9;
  const LinearClassifier a = TrainClassifier(train, opts);
  const LinearClassifier b = TrainClassifier(train, opts);
  opts.threads = 3;
  const LinearClassifier c = TrainClassifier(train, opts);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.weights, c.weights);
  opts.seed = 10;
  EXPECT_NE(TrainClassifier(train, opts).weights, a.weights);
}

TEST(EvaluateTest, CleanBeatsHeavilyCorruptedInputs) {
  const ImageDatabase train = Mnist("train", 500), test = Mnist("t10k", 200);
  TrainOptions opts;
  opts.epochs = 100;
  const LinearClassifier clf = TrainClassifier(train, opts);
  ImageDatabase noisy = test;
  std::mt19937_64 gen(5);
  for (auto& img : noisy.images) img = testing::RandomImage(28, 28, 1, gen);
  const double clean = Evaluate(clf, test);
  EXPECT_GT(clean, 0.7);
  EXPECT_GT(clean, Evaluate(clf, noisy) + 0.3);
}

TEST(EvaluateTest, EmptyAndMismatchedSetsAreRejected) {
  std::mt19937_64 gen(6);
  const LinearClassifier clf = TrainClassifier(Blobs(20, 2, gen), TrainOptions{5});
  ImageDatabase empty;
  empty.class_names = {"c0", "c1"};
  EXPECT_THROW(Evaluate(clf, empty), Error);
  EXPECT_THROW(Evaluate(clf, testing::RandomDatabase(4, 5, 5, 1, 2, gen)), Error);
}

TEST(EvaluateTest, ConstantInputsGetOnePrediction) {
  std::mt19937_64 gen(7);
  const LinearClassifier clf = TrainClassifier(Blobs(60, 2, gen), TrainOptions{20});
  ImageDatabase same;
  same.class_names = {"c0", "c1"};
  for (int i = 0; i < 10; ++i) {
    same.images.push_back(Image(4, 4, 1));
    same.labels.push_back(0);
  }
  const double acc = Evaluate(clf, same);
  EXPECT_TRUE(acc == 0.0 || acc == 1.0);
}

TEST(DistortionTest, Examples) {
  ImageDatabase a, b;
  a.class_names = b.class_names = {"x"};
  a.images = {Image(2, 2, 1)};
  b.images = {Image(2, 2, 1)};
  a.labels = b.labels = {0};
  auto same = MeasureDistortion(a, a);
  EXPECT_EQ(same[0].mse, 0.0);
  EXPECT_TRUE(std::isinf(same[0].psnr));

  std::fill(b.images[0].pixels.begin(), b.images[0].pixels.end(), std::uint8_t{255});
  const auto far = MeasureDistortion(a, b);
  EXPECT_EQ(far[0].mse, 65025.0);
  EXPECT_EQ(far[0].psnr, 0.0);
}

TEST(DistortionTest, SymmetricAndNonNegative) {
  std::mt19937_64 gen(8);
  const ImageDatabase a = testing::RandomDatabase(20, 6, 6, 3, 2, gen);
  const ImageDatabase b = testing::RandomDatabase(20, 6, 6, 3, 2, gen);
  const auto ab = MeasureDistortion(a, b), ba = MeasureDistortion(b, a);
  for (std::size_t i = 0; i < ab.size(); ++i) {
    EXPECT_EQ(ab[i].mse, ba[i].mse);
    EXPECT_GE(ab[i].mse, 0.0);
  }
  EXPECT_NEAR(Psnr(1.0), 20.0 * std::log10(255.0), 1e-12);
}

TEST(MontageTest, LayoutWithSeparators) {
  Image a(2, 2, 1), b(2, 2, 1);
  std::fill(a.pixels.begin(), a.pixels.end(), std::uint8_t{10});
  std::fill(b.pixels.begin(), b.pixels.end(), std::uint8_t{20});
  const Image m = Montage({a, b, a}, 2, 2);
  EXPECT_EQ(m.width, 5u);
  EXPECT_EQ(m.height, 5u);
  EXPECT_EQ(m.at(0, 0), 10);
  EXPECT_EQ(m.at(2, 0), 255);  // vertical separator
  EXPECT_EQ(m.at(3, 1), 20);
  EXPECT_EQ(m.at(0, 2), 255);  // horizontal separator
  EXPECT_EQ(m.at(1, 4), 10);
  EXPECT_EQ(m.at(4, 4), 255);  // empty cell stays white
}

TEST(MontageTest, DeterministicAndValidated) {
  std::mt19937_64 gen(9);
  std::vector<Image> tiles;
  for (int i = 0; i < 6; ++i) tiles.push_back(testing::RandomImage(3, 4, 3, gen));
  EXPECT_EQ(EncodePnm(Montage(tiles, 2, 3)), EncodePnm(Montage(tiles, 2, 3)));
  EXPECT_THROW(Montage(tiles, 1, 3), Error);
  tiles.push_back(testing::RandomImage(4, 4, 3, gen));
  EXPECT_THROW(Montage(tiles, 3, 3), Error);
}

TEST(StatisticsTest, RanksAndCorrelations) {
  EXPECT_EQ(AverageRanks({10, 30, 20, 20}), (std::vector<double>{1, 4, 2.5, 2.5}));
  EXPECT_DOUBLE_EQ(SpearmanCorrelation({1, 2, 3, 4}, {1, 4, 9, 16}), 1.0);
  EXPECT_DOUBLE_EQ(SpearmanCorrelation({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_NEAR(PearsonCorrelation({1, 2, 3}, {2, 4, 6}), 1.0, 1e-15);
}

class SweepTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_ = new ImageDatabase(Mnist("train", 400));
    test_ = new ImageDatabase(Mnist("t10k", 200));
    TrainOptions opts;
    opts.epochs = 60;
    clf_ = new LinearClassifier(TrainClassifier(*train_, opts));
  }
  static void TearDownTestSuite() {
    delete train_;
    delete test_;
    delete clf_;
  }
  static SweepOptions Options() {
    SweepOptions o;
    o.epsilons = {1, 100};
    o.ds = {5, 20};
    o.seed = 77;
    return o;
  }
  static ImageDatabase* train_;
  static ImageDatabase* test_;
  static LinearClassifier* clf_;
};
ImageDatabase* SweepTest::train_ = nullptr;
ImageDatabase* SweepTest::test_ = nullptr;
LinearClassifier* SweepTest::clf_ = nullptr;

TEST_F(SweepTest, SingleCellMatchesDirectPipelineRun) {
  SweepOptions o = Options();
  o.epsilons = {10};
  o.ds = {20};
  const SweepResult r = Sweep(*train_, *test_, o, clf_);
  ASSERT_EQ(r.grid.size(), 1u);
  ASSERT_TRUE(r.grid[0].ok) << r.grid[0].error;

  PrivacyParams params;
  params.epsilon = 10;
  params.d = 20;
  params.seed = DeriveSeed(77, 10, 20);
  const ImageDatabase out = PrivatizeInMemory(*test_, params).Output(*test_);
  EXPECT_EQ(r.grid[0].accuracy_private, Evaluate(*clf_, out));
  EXPECT_EQ(r.grid[0].mse_mean, MeanDistortion(MeasureDistortion(*test_, out)).mse);
}

TEST_F(SweepTest, CellsAreIndependentOfGridAndThreads) {
  const SweepResult full = Sweep(*train_, *test_, Options(), clf_);
  SweepOptions o = Options();
  o.epsilons = {100};
  o.ds = {20};
  const SweepResult one = Sweep(*train_, *test_, o, clf_);
  EXPECT_EQ(one.grid[0].accuracy_private, full.Find(100, 20)->accuracy_private);
  EXPECT_EQ(one.grid[0].mse_mean, full.Find(100, 20)->mse_mean);

  o = Options();
  o.threads = 3;
  EXPECT_EQ(FormatSweepCsv(Sweep(*train_, *test_, o, clf_)), FormatSweepCsv(full));
}

TEST_F(SweepTest, VanillaColumnConstantAndCsvShape) {
  const SweepResult r = Sweep(*train_, *test_, Options(), clf_);
  EXPECT_EQ(r.vanilla_accuracy, Evaluate(*clf_, *test_));
  for (const auto& rec : r.grid) {
    EXPECT_TRUE(rec.ok) << rec.error;
    EXPECT_EQ(rec.accuracy_vanilla, r.vanilla_accuracy);
  }
  const std::string csv = FormatSweepCsv(r);
  EXPECT_EQ(csv.rfind(std::string(kSweepCsvHeader) + "\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_LT(r.Find(1, 20)->accuracy_private, r.Find(100, 20)->accuracy_private);
  EXPECT_LT(r.Find(1, 20)->psnr_mean, r.Find(100, 20)->psnr_mean);
}

TEST_F(SweepTest, FailedCellIsRecordedAndSweepContinues) {
  SweepOptions o = Options();
  o.ds = {5, 150};  // 150 exceeds the rank of a 100-image batch
  const SweepResult r = Sweep(*train_, *test_, o, clf_);
  ASSERT_EQ(r.grid.size(), 4u);
  EXPECT_TRUE(r.Find(1, 5)->ok);
  EXPECT_FALSE(r.Find(1, 150)->ok);
  EXPECT_NE(r.Find(1, 150)->error.find("rank"), std::string::npos);
  EXPECT_NE(FormatSweepCsv(r).find("1,150,,,,,failed\n"), std::string::npos);
  const std::string svg = FormatSweepSvg(r);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
}

}  // namespace
}  // namespace dpimg
