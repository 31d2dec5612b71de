#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "capi/error.hpp"
#include "capi/probes.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace capi;
using capi::test::random_matrix;

namespace {

// Brute force: full sort by (distance, index), count votes, break vote ties
// by the closest member and then the lower label.
std::vector<int> knn_oracle(const Matrix& bank, const std::vector<int>& labels, const Matrix& queries, int k,
                            Distance distance) {
  std::vector<int> out;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    std::vector<std::pair<double, Eigen::Index>> d;
    for (Eigen::Index i = 0; i < bank.rows(); ++i) {
      double v = 0;
      if (distance == Distance::l2) {
        for (Eigen::Index j = 0; j < bank.cols(); ++j) v += (bank(i, j) - queries(q, j)) * (bank(i, j) - queries(q, j));
      } else {
        double dot = 0, na = 0, nb = 0;
        for (Eigen::Index j = 0; j < bank.cols(); ++j) {
          dot += bank(i, j) * queries(q, j);
          na += bank(i, j) * bank(i, j);
          nb += queries(q, j) * queries(q, j);
        }
        v = 1 - dot / (std::sqrt(na) * std::sqrt(nb));
      }
      d.emplace_back(v, i);
    }
    std::sort(d.begin(), d.end());
    std::map<int, std::pair<int, double>> votes;
    for (int j = 0; j < k; ++j) {
      auto& [count, nearest] = votes.try_emplace(labels[static_cast<std::size_t>(d[j].second)], 0, d[j].first)
                                   .first->second;
      ++count;
      nearest = std::min(nearest, d[j].first);
    }
    int best = -1, best_count = -1;
    double best_near = 0;
    for (const auto& [label, v] : votes) {
      if (v.first > best_count || (v.first == best_count && v.second < best_near)) {
        best = label;
        best_count = v.first;
        best_near = v.second;
      }
    }
    out.push_back(best);
  }
  return out;
}

// Gaussian blobs around random class means.
struct Blobs {
  Matrix x;
  std::vector<int> y;
};

Blobs make_blobs(int n, int d, int classes, double spread, Rng& rng, const Matrix& means) {
  Blobs b;
  b.x.resize(n, d);
  for (int i = 0; i < n; ++i) {
    const int c = i % classes;
    b.y.push_back(c);
    for (int j = 0; j < d; ++j) b.x(i, j) = means(c, j) + spread * rng.normal();
  }
  return b;
}

// Same value and gradient as the logistic-regression objective, written
// directly from the definition.
double logreg_objective(const LogReg& m, const Matrix& x, const std::vector<int>& y, double c) {
  double loss = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<double> z;
    for (Eigen::Index k = 0; k < m.weights.rows(); ++k) z.push_back(m.weights.row(k).dot(x.row(i)) + m.bias(k));
    double lse = 0;
    const double mx = *std::max_element(z.begin(), z.end());
    for (double v : z) lse += std::exp(v - mx);
    loss += mx + std::log(lse) - z[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])];
  }
  const auto n = static_cast<double>(x.rows());
  return loss / n + m.weights.squaredNorm() / (2 * c * n);
}

FeatureBank toy_bank(int images, int per_image, int d, int classes, Rng& rng) {
  FeatureBank b;
  b.n_classes = classes;
  b.lattice = {1, per_image};
  b.features = random_matrix(images * per_image, d, rng);
  for (int i = 0; i < images; ++i) {
    for (int j = 0; j < per_image; ++j) {
      b.labels.push_back(i % classes);
      b.split.push_back(i % 5 == 4 ? Split::test : Split::train);
      b.image.push_back(i);
      b.position.push_back(j);
    }
  }
  return b;
}

}  // namespace

TEST_CASE("attentive probe parameter count") {
  CHECK(attentive_parameter_count(64, 4) == 8640);
  CHECK(attentive_parameter_count(256, 10) == 134400);
  CHECK(attentive_parameter_count(1024, 1000) == 3124224);
  Rng rng(1);
  CHECK(init_attentive_probe(64, 4, 64, rng).parameter_count() == 8640);
  CHECK(init_attentive_probe(256, 10, 64, rng).parameter_count() == 134400);
  CHECK(init_attentive_probe(256, 10, 64, rng).heads == 4);
  CHECK_THROWS_AS(init_attentive_probe(48, 4, 64, rng), SpecError);
  CHECK(init_attentive_probe(48, 4, 16, rng).heads == 3);
}

TEST_CASE("attentive probe gradient matches finite differences") {
  Rng rng(3);
  AttentiveProbe p = init_attentive_probe(8, 3, 4, rng);
  // Nonzero biases and a larger query so every path carries signal.
  p.bk = random_matrix(1, 8, rng, 0.3);
  p.bv = random_matrix(1, 8, rng, 0.3);
  p.query = random_matrix(1, 8, rng);
  const std::vector<Matrix> tokens{random_matrix(5, 8, rng), random_matrix(3, 8, rng), random_matrix(7, 8, rng)};
  const std::vector<int> labels{0, 2, 1};
  const AttentiveLoss l = attentive_loss(p, tokens, labels);
  std::vector<const Matrix*> analytic;
  visit(l.grad, "", [&](const std::string&, const Matrix& m, ParamGroup) { analytic.push_back(&m); });
  test::GradCheck acc;
  std::size_t i = 0;
  visit(p, "", [&](const std::string& name, Matrix& m, ParamGroup) {
    const Matrix& a = *analytic[i++];
    // A shared key shift leaves every softmax unchanged.
    if (name == "bk") {
      CHECK(a.cwiseAbs().maxCoeff() <= 1e-15);
      return;
    }
    test::grad_check(acc, name, m, a, [&] { return attentive_loss(p, tokens, labels).loss; });
  });
  INFO(acc.worst);
  CHECK(acc.entries == attentive_parameter_count(8, 3) - 8);
  CHECK(acc.max_rel_error <= 1e-5);
}

TEST_CASE("attentive probe learns a separable token task") {
  // The class is carried by one token per image at a random position; the
  // rest is noise, so a mean-pooled linear model struggles while attention
  // can find the signal token.
  const int d = 16, classes = 4;
  Rng rng(11);
  const Matrix signal = random_matrix(classes, d, rng, 3.0);
  const auto make = [&](int n, std::vector<Matrix>& xs, std::vector<int>& ys) {
    for (int i = 0; i < n; ++i) {
      Matrix t = random_matrix(9, d, rng, 0.5);
      const int c = i % classes;
      t.row(rng.uniform_int(0, 8)) += signal.row(c);
      xs.push_back(t);
      ys.push_back(c);
    }
  };
  std::vector<Matrix> train_x, test_x;
  std::vector<int> train_y, test_y;
  make(400, train_x, train_y);
  make(200, test_x, test_y);
  AttentiveTrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 5e-4;
  cfg.epochs = 30;
  cfg.batch_size = 32;
  cfg.head_width = 8;
  cfg.seed = 5;
  const AttentiveProbe p = train_attentive_probe(train_x, train_y, classes, cfg);
  std::vector<int> pred;
  for (const Matrix& x : test_x) {
    Eigen::Index arg;
    attentive_logits(p, x).row(0).maxCoeff(&arg);
    pred.push_back(static_cast<int>(arg));
  }
  CHECK(accuracy(pred, test_y) >= 0.99);
  // Same seed, same probe.
  const AttentiveProbe q = train_attentive_probe(train_x, train_y, classes, cfg);
  CHECK(q.classifier == p.classifier);
}

TEST_CASE("k-NN agrees with a brute-force oracle") {
  Rng rng(21);
  const Matrix bank = random_matrix(500, 6, rng);
  std::vector<int> labels;
  for (int i = 0; i < 500; ++i) labels.push_back(rng.uniform_int(0, 4));
  const Matrix queries = random_matrix(60, 6, rng);
  for (Distance dist : {Distance::l2, Distance::cosine}) {
    for (int k : {1, 3, 10, 30}) {
      CAPTURE(k);
      CHECK(knn_predict(bank, labels, queries, k, dist) == knn_oracle(bank, labels, queries, k, dist));
    }
  }
}

TEST_CASE("k-NN tie rules") {
  Matrix bank(4, 1);
  bank << 1.0, -2.0, 3.0, -4.0;
  const std::vector<int> labels{3, 1, 3, 1};
  Matrix q(1, 1);
  q << 0.0;
  // k = 2: one vote each; label 3 owns the nearest member.
  CHECK(knn_predict(bank, labels, q, 2, Distance::l2) == std::vector<int>{3});
  // k = 4: two votes each; nearest member decides again.
  CHECK(knn_predict(bank, labels, q, 4, Distance::l2) == std::vector<int>{3});
  // Equidistant members of different labels: the lower label wins.
  Matrix sym(2, 1);
  sym << 1.0, -1.0;
  CHECK(knn_predict(sym, std::vector<int>{5, 2}, q, 2, Distance::l2) == std::vector<int>{2});
  // Equal distance rows: lower index is the nearer neighbour.
  CHECK(knn_predict(sym, std::vector<int>{5, 2}, q, 1, Distance::l2) == std::vector<int>{5});

  CHECK_THROWS_AS(knn_predict(bank, labels, q, 5, Distance::l2), SpecError);
  CHECK_THROWS_AS(knn_predict(bank, labels, q, 0, Distance::l2), SpecError);
  Matrix zero = Matrix::Zero(1, 1);
  CHECK_THROWS_AS(knn_predict(bank, labels, zero, 1, Distance::cosine), NumericError);
  CHECK_THROWS_AS(knn_predict(bank, std::vector<int>{1}, q, 1, Distance::l2), ShapeError);
}

TEST_CASE("standardization") {
  Rng rng(2);
  Matrix x = random_matrix(50, 4, rng, 3.0);
  x.col(1).array() += 10.0;
  x.col(3).setConstant(7.0);
  const Standardizer s = Standardizer::fit(x);
  const Matrix z = s.apply(x);
  for (int j = 0; j < 3; ++j) {
    CHECK(std::abs(z.col(j).mean()) <= 1e-12);
    CHECK(std::sqrt(z.col(j).squaredNorm() / 50.0) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(s.scale(3) == Standardizer::kStdFloor);
  // Already standardized data passes through.
  const Matrix zz = Standardizer::fit(z.leftCols(3)).apply(z.leftCols(3));
  CHECK((zz - z.leftCols(3)).cwiseAbs().maxCoeff() <= 1e-6);
  // Held-out rows use the training statistics, checked by a two-pass oracle.
  const Matrix held = random_matrix(7, 4, rng);
  const Matrix hz = s.apply(held);
  for (int j = 0; j < 3; ++j) {
    double mean = 0;
    for (int i = 0; i < 50; ++i) mean += x(i, j);
    mean /= 50;
    double var = 0;
    for (int i = 0; i < 50; ++i) var += (x(i, j) - mean) * (x(i, j) - mean);
    const double sd = std::sqrt(var / 50);
    for (int i = 0; i < 7; ++i) CHECK(hz(i, j) == doctest::Approx((held(i, j) - mean) / sd).epsilon(1e-12));
  }
  CHECK(z.col(3).cwiseAbs().maxCoeff() == 0.0);
  CHECK(z.allFinite());
  CHECK_THROWS_AS(s.apply(Matrix::Zero(2, 3)), ShapeError);
}

TEST_CASE("logistic regression") {
  Rng rng(4);
  const Matrix means = random_matrix(3, 5, rng, 4.0);
  const Blobs train = make_blobs(300, 5, 3, 1.0, rng, means);
  const Blobs test = make_blobs(150, 5, 3, 1.0, rng, means);

  SUBCASE("fits blobs and reaches a stationary point") {
    const double c = 1.0;
    const LogReg m = fit_logreg(train.x, train.y, 3, c, 500);
    CHECK(m.converged);
    CHECK(accuracy(logreg_predict(m, test.x), test.y) >= 0.95);
    // Central differences on the independently written objective.
    LogReg probe = m;
    double worst = 0;
    for (Eigen::Index i = 0; i < probe.weights.size(); ++i) {
      const double saved = probe.weights.data()[i];
      probe.weights.data()[i] = saved + 1e-5;
      const double up = logreg_objective(probe, train.x, train.y, c);
      probe.weights.data()[i] = saved - 1e-5;
      const double down = logreg_objective(probe, train.x, train.y, c);
      probe.weights.data()[i] = saved;
      worst = std::max(worst, std::abs(up - down) / 2e-5);
    }
    CHECK(worst <= 1e-5);
    const Matrix p = logreg_probabilities(m, test.x);
    CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
  }

  SUBCASE("strong regularization pulls probabilities to uniform") {
    const LogReg m = fit_logreg(train.x, train.y, 3, 1e-6, 500);
    const Matrix p = logreg_probabilities(m, test.x);
    double true_mass = 0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) true_mass += p(i, test.y[static_cast<std::size_t>(i)]);
    true_mass /= static_cast<double>(p.rows());
    CHECK(std::abs(true_mass - 1.0 / 3.0) <= 0.05 / 3.0);
    CHECK(m.weights.norm() <= 1e-3);
  }

  SUBCASE("two separated blobs in the plane") {
    Matrix m2(2, 2);
    m2 << -3, 0, 3, 0;
    const Blobs a = make_blobs(200, 2, 2, 0.7, rng, m2);
    const Blobs b = make_blobs(200, 2, 2, 0.7, rng, m2);
    const LogReg m = fit_logreg(a.x, a.y, 2, 1e5, 500);
    CHECK(accuracy(logreg_predict(m, b.x), b.y) >= 0.99);
  }

  SUBCASE("input errors") {
    const std::vector<int> single(300, 1);
    CHECK_THROWS_AS(fit_logreg(train.x, single, 3, 1.0, 100), SpecError);
    CHECK_THROWS_AS(fit_logreg(train.x, train.y, 3, 0.0, 100), SpecError);
    CHECK_THROWS_AS(fit_logreg(train.x.topRows(10), train.y, 3, 1.0, 100), ShapeError);
  }

  SUBCASE("C grid is log-spaced") {
    ProbeSettings s;
    const auto grid = logreg_c_grid(s);
    REQUIRE(grid.size() == 8);
    CHECK(grid.front() == doctest::Approx(1e-6));
    CHECK(grid.back() == doctest::Approx(1e5));
    for (std::size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] / grid[i - 1] == doctest::Approx(grid[1] / grid[0]));
  }
}

TEST_CASE("scores") {
  const std::vector<int> truth{0, 0, 1, 1, 2};
  const std::vector<int> pred{0, 1, 1, 1, 0};
  CHECK(accuracy(pred, truth) == doctest::Approx(0.6));
  // class 0: tp 1, fp 1, fn 1 -> 1/3; class 1: tp 2, fp 1 -> 2/3; class 2: fn 1 -> 0.
  CHECK(mean_iou(pred, truth, 4) == doctest::Approx((1.0 / 3 + 2.0 / 3 + 0.0) / 3));
  CHECK(mean_iou(truth, truth, 3) == 1.0);
  CHECK_THROWS_AS(accuracy(pred, std::vector<int>{0}), ShapeError);
}

TEST_CASE("grid selection and reports") {
  std::vector<ProbeRecord> grid(4);
  grid[0].val_score = 0.5;
  grid[1].val_score = 0.8;
  grid[2].val_score = 0.8;
  grid[3].val_score = 0.7;
  CHECK(select_best(grid) == 1);
  CHECK_THROWS_AS(select_best({}), SpecError);

  ProbeReport r;
  r.probe = "knn";
  r.grid = grid;
  r.grid[1].params = {{"k", "3"}};
  r.selected = 1;
  r.test_score = 0.75;
  std::istringstream in(report_to_jsonl(r));
  std::string line;
  int lines = 0;
  nlohmann::json last;
  while (std::getline(in, line)) {
    last = nlohmann::json::parse(line);
    ++lines;
  }
  CHECK(lines == 5);
  CHECK(last["selected"] == 1);
  CHECK(last["params"]["k"] == "3");
  CHECK(last["test_accuracy"] == 0.75);
}

TEST_CASE("feature banks") {
  Rng rng(8);
  const FeatureBank bank = toy_bank(20, 3, 4, 2, rng);
  SUBCASE("archive round trip") {
    const FeatureBank back = bank_from_archive(Archive::from_bytes(bank_to_archive(bank).to_bytes()));
    CHECK(back.features == bank.features);
    CHECK(back.labels == bank.labels);
    CHECK(back.split == bank.split);
    CHECK(back.image == bank.image);
    CHECK(back.position == bank.position);
    CHECK(back.lattice == bank.lattice);
    CHECK(back.n_classes == 2);
  }
  SUBCASE("validation split keeps images whole") {
    const FeatureBank s = with_validation_split(bank, 0.25, 3);
    std::set<int> val_images, train_images;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.split[i] == Split::val) val_images.insert(s.image[i]);
      if (s.split[i] == Split::train) train_images.insert(s.image[i]);
    }
    CHECK(val_images.size() == 4);  // 16 training images
    for (int v : val_images) CHECK(train_images.count(v) == 0);
    CHECK(s.rows(Split::test) == bank.rows(Split::test));
    CHECK(with_validation_split(bank, 0.25, 3).split == s.split);
  }
  SUBCASE("validation") {
    FeatureBank bad = bank;
    bad.labels.pop_back();
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = bank;
    bad.labels[0] = 2;
    CHECK_THROWS_AS(bad.validate(), SpecError);
  }
}

TEST_CASE("probe drivers select on validation and score on test") {
  Rng rng(9);
  const Matrix means = random_matrix(2, 4, rng, 3.0);
  FeatureBank bank;
  bank.n_classes = 2;
  bank.lattice = {1, 1};
  const Blobs blobs = make_blobs(200, 4, 2, 1.0, rng, means);
  bank.features = blobs.x;
  bank.labels = blobs.y;
  for (int i = 0; i < 200; ++i) {
    bank.split.push_back(i < 150 ? Split::train : Split::test);
    bank.image.push_back(i);
    bank.position.push_back(-1);
  }
  bank = with_validation_split(bank, 0.2, 1);
  ProbeSettings settings;
  settings.logreg_c_count = 3;
  settings.logreg_c_min = 1e-2;
  settings.logreg_c_max = 1e2;
  const ProbeReport knn = knn_probe(bank, settings, Score::accuracy);
  CHECK(knn.grid.size() == 8);
  CHECK(knn.selected == select_best(knn.grid));
  CHECK(knn.test_score >= 0.9);
  const ProbeReport again = knn_probe(bank, settings, Score::accuracy);
  CHECK(again.selected == knn.selected);
  CHECK(report_to_jsonl(again) == report_to_jsonl(knn));
  const ProbeReport lr = logreg_probe(bank, settings, Score::miou);
  CHECK(lr.grid.size() == 3);
  CHECK(lr.test_score >= 0.8);
  FeatureBank no_val = bank;
  for (auto& s : no_val.split)
    if (s == Split::val) s = Split::train;
  CHECK_THROWS_AS(knn_probe(no_val, settings, Score::accuracy), SpecError);
}

TEST_CASE("pooled features") {
  PretrainConfig config = test::tiny_pretrain_config();
  Rng rng(5);
  const EncoderParams enc = init_encoder(config.network, rng);
  const PredictorParams pred = init_predictor(config.network, rng);
  const Image img = test::random_image(16, rng);

  const Matrix patches = patch_features(img, enc, config.network);
  CHECK(patches.rows() == 16);
  CHECK(patches.cols() == config.network.enc_dim);
  const Vector avg = average_pooling(img, enc, config.network);
  CHECK((avg.transpose() - patches.colwise().mean()).cwiseAbs().maxCoeff() <= 1e-15);

  AttentionCounter counter;
  const Vector pooled = predictor_pooling(img, enc, pred, config.network, &counter);
  CHECK(counter.calls == 1);
  CHECK(pooled.size() == config.network.pred_dim);
  CHECK(pooled.allFinite());
  CHECK(predictor_pooling(img, enc, pred, config.network) == pooled);
  const Image other = test::random_image(16, rng);
  CHECK(predictor_pooling(other, enc, pred, config.network) != pooled);

  CHECK(parse_feature_kind("average_pooling") == FeatureKind::average_pooling);
  CHECK_THROWS_AS(parse_feature_kind("cls"), SpecError);
}

TEST_CASE("PCA feature maps") {
  Rng rng(6);
  const LatticeShape lattice{4, 5};
  std::vector<Matrix> feats{random_matrix(20, 8, rng), random_matrix(20, 8, rng)};
  feats[1].col(2).array() *= 5.0;

  SUBCASE("joint fit") {
    const PcaMaps maps = pca_feature_maps(feats, lattice, false);
    REQUIRE(maps.maps.size() == 2);
    REQUIRE(maps.components.size() == 1);
    const Matrix& c = maps.components[0];
    CHECK((c * c.transpose() - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(maps.variances[0][0] >= maps.variances[0][1]);
    CHECK(maps.variances[0][1] >= maps.variances[0][2]);
    float lo = 1, hi = 0;
    for (const Image& m : maps.maps) {
      CHECK(m.height == 4);
      CHECK(m.width == 5);
      for (float v : m.pixels) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    CHECK(lo == 0.0f);
    CHECK(hi == 1.0f);
  }

  SUBCASE("per image") {
    const PcaMaps maps = pca_feature_maps(feats, lattice, true);
    CHECK(maps.components.size() == 2);
    for (const Image& m : maps.maps) {
      for (int ch = 0; ch < 3; ++ch) {
        float lo = 1, hi = 0;
        for (int y = 0; y < 4; ++y)
          for (int x = 0; x < 5; ++x) {
            lo = std::min(lo, m.at(y, x, ch));
            hi = std::max(hi, m.at(y, x, ch));
          }
        CHECK(lo == 0.0f);
        CHECK(hi == 1.0f);
      }
    }
  }

  SUBCASE("rank one features") {
    Matrix f(20, 8);
    const Matrix dir = random_matrix(1, 8, rng);
    for (int i = 0; i < 20; ++i) f.row(i) = (i - 7.0) * dir;
    const PcaMaps maps = pca_feature_maps(std::vector<Matrix>{f}, lattice, true);
    CHECK(maps.components[0].rows() == 1);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) {
        CHECK(maps.maps[0].at(y, x, 1) == 0.5f);
        CHECK(maps.maps[0].at(y, x, 2) == 0.5f);
      }
    const PcaMaps constant = pca_feature_maps(std::vector<Matrix>{Matrix::Ones(20, 8)}, lattice, true);
    CHECK(constant.components[0].rows() == 0);
    for (float v : constant.maps[0].pixels) CHECK(v == 0.5f);
  }

  SUBCASE("sign convention and determinism") {
    const PcaMaps a = pca_feature_maps(feats, lattice, false);
    const PcaMaps b = pca_feature_maps(feats, lattice, false);
    CHECK(a.maps == b.maps);
    for (Eigen::Index r = 0; r < a.components[0].rows(); ++r) {
      Eigen::Index arg;
      a.components[0].row(r).cwiseAbs().maxCoeff(&arg);
      CHECK(a.components[0](r, arg) > 0);
    }
  }

  CHECK_THROWS_AS(pca_feature_maps(std::vector<Matrix>{Matrix::Ones(19, 8)}, lattice, true), ShapeError);
}
