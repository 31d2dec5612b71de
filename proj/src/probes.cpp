#include "capi/probes.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <deque>
#include <iostream>
#include <map>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "capi/error.hpp"
#include "capi/optim.hpp"
#include "capi/trainer.hpp"
#include "json.hpp"

namespace capi {

// ---------------------------------------------------------------------------
// Feature banks

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

void FeatureBank::validate() const {
  const auto n = static_cast<std::size_t>(features.rows());
  if (labels.size() != n || split.size() != n || image.size() != n || position.size() != n) {
    throw ShapeError("feature bank: features, labels, splits and provenance disagree in count");
  }
  if (!features.allFinite()) throw NumericError("feature bank contains non-finite entries");
  if (n_classes < 1) throw SpecError("feature bank: n_classes must be positive");
  for (int l : labels)
    if (l < 0 || l >= n_classes) throw SpecError("feature bank: label out of range");
}

std::vector<std::size_t> FeatureBank::rows(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (split[i] == s) out.push_back(i);
  return out;
}

Matrix FeatureBank::features_of(Split s) const {
  const auto idx = rows(s);
  Matrix out(static_cast<Eigen::Index>(idx.size()), features.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

std::vector<int> FeatureBank::labels_of(Split s) const {
  std::vector<int> out;
  for (std::size_t i : rows(s)) out.push_back(labels[i]);
  return out;
}

namespace {

template <typename T>
std::vector<std::int64_t> widen(const std::vector<T>& v) {
  std::vector<std::int64_t> out;
  out.reserve(v.size());
  for (const T& x : v) out.push_back(static_cast<std::int64_t>(x));
  return out;
}

std::vector<int> narrow(const std::vector<std::int64_t>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

Archive bank_to_archive(const FeatureBank& bank) {
  bank.validate();
  Archive a;
  a.put("features", bank.features);
  a.put("labels", widen(bank.labels));
  a.put("split", widen(bank.split));
  a.put("image", widen(bank.image));
  a.put("position", widen(bank.position));
  a.put("meta.lattice", std::vector<std::int64_t>{bank.lattice.rows, bank.lattice.cols});
  a.put("meta.n_classes", std::vector<std::int64_t>{bank.n_classes});
  return a;
}

FeatureBank bank_from_archive(const Archive& a) {
  FeatureBank b;
  b.features = a.matrix("features");
  b.labels = narrow(a.ints("labels"));
  for (std::int64_t s : a.ints("split")) {
    if (s < 0 || s > 2) throw SpecError("feature bank: invalid split tag");
    b.split.push_back(static_cast<Split>(s));
  }
  b.image = narrow(a.ints("image"));
  b.position = narrow(a.ints("position"));
  const auto& lattice = a.ints("meta.lattice");
  if (lattice.size() != 2) throw SpecError("feature bank: malformed lattice");
  b.lattice = {static_cast<int>(lattice[0]), static_cast<int>(lattice[1])};
  b.n_classes = static_cast<int>(a.scalar_int("meta.n_classes"));
  b.validate();
  return b;
}

FeatureBank with_validation_split(FeatureBank bank, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0 && fraction < 1)) throw SpecError("validation fraction must lie in [0, 1)");
  std::vector<int> images;
  for (std::size_t i = 0; i < bank.size(); ++i)
    if (bank.split[i] == Split::train) images.push_back(bank.image[i]);
  std::sort(images.begin(), images.end());
  images.erase(std::unique(images.begin(), images.end()), images.end());
  Rng rng = Rng::derive(seed, "probe_split");
  rng.shuffle(std::span(images));
  const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(images.size())));
  std::vector<int> val(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::sort(val.begin(), val.end());
  for (std::size_t i = 0; i < bank.size(); ++i) {
    if (bank.split[i] == Split::train && std::binary_search(val.begin(), val.end(), bank.image[i])) {
      bank.split[i] = Split::val;
    }
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Feature extraction

namespace {

TokenSet full_image_tokens(const Image& image, const EncoderParams& encoder, const NetworkConfig& config) {
  return patchify(image, encoder.patch_embed, config.patch_size);
}

}  // namespace

Matrix patch_features(const Image& image, const EncoderParams& encoder, const NetworkConfig& config) {
  const TokenSet tokens = full_image_tokens(image, encoder, config);
  return encode(tokens, encoder, config, Mode::eval).tokens.vectors.topRows(tokens.size());
}

Vector average_pooling(const Image& image, const EncoderParams& encoder, const NetworkConfig& config) {
  return patch_features(image, encoder, config).colwise().mean().transpose();
}

Vector predictor_pooling(const Image& image, const EncoderParams& encoder, const PredictorParams& predictor,
                         const NetworkConfig& config, AttentionCounter* counter) {
  const TokenSet tokens = full_image_tokens(image, encoder, config);
  const EncoderOutput out = encode(tokens, encoder, config, Mode::eval);
  TokenSet context;
  context.vectors = out.tokens.vectors.topRows(tokens.size());
  context.coords = tokens.coords;
  context.roles = tokens.roles;
  context.lattice = tokens.lattice;
  std::vector<Coord> queries;
  for (const auto& c : tokens.coords) queries.push_back(*c);
  const Matrix first = predictor_first_attention(queries, context, predictor, config, counter);
  return first.colwise().mean().transpose();
}

FeatureKind parse_feature_kind(std::string_view name) {
  if (name == "patch") return FeatureKind::patch;
  if (name == "average_pooling") return FeatureKind::average_pooling;
  if (name == "predictor_pooling") return FeatureKind::predictor_pooling;
  throw SpecError("unknown feature kind '" + std::string(name) + "'");
}

LabeledImages labeled_synthetic(const SyntheticSpec& spec, std::size_t count, std::uint64_t seed,
                                std::uint64_t first_index) {
  LabeledImages out;
  for (auto& sample : generate_synthetic_batch(spec, count, seed, first_index)) {
    out.images.push_back(normalize_channels(sample.image));
    out.patch_labels.push_back(std::move(sample.patch_labels));
    out.image_labels.push_back(sample.image_label);
  }
  return out;
}

LabeledImages labeled_image_folder(const std::filesystem::path& dir, int resolution,
                                   std::vector<std::string>* classes) {
  std::vector<std::pair<std::string, Image>> decoded;
  for (const auto& f : list_image_folder(dir)) {
    const auto rel = std::filesystem::relative(f, dir);
    if (std::distance(rel.begin(), rel.end()) < 2) {
      throw SpecError("image " + f.string() + " is not inside a class directory");
    }
    try {
      const Image img = read_image(f);
      const int resize_to = static_cast<int>(std::lround(resolution * 256.0 / 224.0));
      decoded.emplace_back(rel.begin()->string(), normalize_channels(resize_center_crop(img, resize_to, resolution)));
    } catch (const IoError& e) {
      std::cerr << "warning: " << e.what() << "; skipping\n";
    }
  }
  if (decoded.empty()) throw IoError("no decodable images in '" + dir.string() + "'");
  std::vector<std::string> names;
  for (const auto& d : decoded) names.push_back(d.first);
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  LabeledImages out;
  for (auto& [owner, img] : decoded) {
    out.images.push_back(std::move(img));
    out.image_labels.push_back(static_cast<int>(std::lower_bound(names.begin(), names.end(), owner) - names.begin()));
  }
  if (classes) *classes = names;
  return out;
}

FeatureBank build_bank(const LabeledImages& train, const LabeledImages& test, const EncoderParams& encoder,
                       const PredictorParams& predictor, const NetworkConfig& config, FeatureKind kind,
                       int n_classes) {
  FeatureBank bank;
  bank.n_classes = n_classes;
  std::vector<RowVector> rows;
  int image_id = 0;
  const auto add = [&](const LabeledImages& set, Split split) {
    if (set.image_labels.size() != set.images.size()) throw ShapeError("build_bank: one image label per image");
    for (std::size_t i = 0; i < set.images.size(); ++i, ++image_id) {
      const Image& img = set.images[i];
      if (kind == FeatureKind::patch) {
        const Matrix f = patch_features(img, encoder, config);
        const int side_r = img.height / config.patch_size;
        const int side_c = img.width / config.patch_size;
        bank.lattice = {side_r, side_c};
        const bool dense = !set.patch_labels.empty();
        if (dense && set.patch_labels[i].size() != static_cast<std::size_t>(f.rows())) {
          throw ShapeError("build_bank: patch labels do not match the lattice");
        }
        for (Eigen::Index j = 0; j < f.rows(); ++j) {
          rows.push_back(f.row(j));
          bank.labels.push_back(dense ? set.patch_labels[i][static_cast<std::size_t>(j)] : set.image_labels[i]);
          bank.split.push_back(split);
          bank.image.push_back(image_id);
          bank.position.push_back(static_cast<int>(j));
        }
      } else {
        const Vector v = kind == FeatureKind::average_pooling ? average_pooling(img, encoder, config)
                                                              : predictor_pooling(img, encoder, predictor, config);
        rows.push_back(v.transpose());
        bank.labels.push_back(set.image_labels[i]);
        bank.split.push_back(split);
        bank.image.push_back(image_id);
        bank.position.push_back(-1);
      }
    }
  };
  add(train, Split::train);
  add(test, Split::test);
  if (rows.empty()) throw SpecError("build_bank: no images");
  bank.features.resize(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) bank.features.row(static_cast<Eigen::Index>(i)) = rows[i];
  bank.validate();
  return bank;
}

// ---------------------------------------------------------------------------
// Standardization

Standardizer Standardizer::fit(const Matrix& train) {
  if (train.rows() == 0) throw ShapeError("standardize: empty training split");
  Standardizer s;
  s.mean = train.colwise().mean();
  const Matrix centered = train.rowwise() - s.mean;
  s.scale = (centered.colwise().squaredNorm() / static_cast<double>(train.rows())).cwiseSqrt();
  s.scale = s.scale.cwiseMax(kStdFloor);
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  if (x.cols() != mean.cols()) throw ShapeError("standardize: width mismatch");
  return (x.rowwise() - mean).array().rowwise() / scale.array();
}

// ---------------------------------------------------------------------------
// Scores and reports

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("accuracy: size mismatch");
  if (truth.empty()) throw ShapeError("accuracy: no items");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double mean_iou(std::span<const int> predicted, std::span<const int> truth, int n_classes) {
  if (predicted.size() != truth.size()) throw ShapeError("mean_iou: size mismatch");
  if (truth.empty()) throw ShapeError("mean_iou: no items");
  std::vector<std::size_t> tp(static_cast<std::size_t>(n_classes)), fp(tp), fn(tp);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i]);
    const auto t = static_cast<std::size_t>(truth[i]);
    if (p >= tp.size() || t >= tp.size()) throw SpecError("mean_iou: label out of range");
    if (p == t) {
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  double sum = 0;
  int present = 0;
  for (std::size_t c = 0; c < tp.size(); ++c) {
    const std::size_t u = tp[c] + fp[c] + fn[c];
    if (u == 0) continue;
    sum += static_cast<double>(tp[c]) / static_cast<double>(u);
    ++present;
  }
  return sum / present;
}

std::string_view to_string(Score score) { return score == Score::accuracy ? "accuracy" : "miou"; }

std::size_t select_best(const std::vector<ProbeRecord>& grid) {
  if (grid.empty()) throw SpecError("empty hyperparameter grid");
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (grid[i].val_score > grid[best].val_score) best = i;
  return best;
}

std::string report_to_jsonl(const ProbeReport& report) {
  std::ostringstream os;
  for (std::size_t i = 0; i < report.grid.size(); ++i) {
    nlohmann::ordered_json j;
    j["probe"] = report.probe;
    j["index"] = i;
    for (const auto& [k, v] : report.grid[i].params) j["params"][k] = v;
    j["val_" + std::string(to_string(report.score))] = report.grid[i].val_score;
    j["converged"] = report.grid[i].converged;
    os << j.dump() << '\n';
  }
  nlohmann::ordered_json s;
  s["probe"] = report.probe;
  s["selected"] = report.selected;
  for (const auto& [k, v] : report.grid.at(report.selected).params) s["params"][k] = v;
  s["test_" + std::string(to_string(report.score))] = report.test_score;
  os << s.dump() << '\n';
  return os.str();
}

namespace {

double score_of(Score score, std::span<const int> predicted, std::span<const int> truth, int n_classes) {
  return score == Score::accuracy ? accuracy(predicted, truth) : mean_iou(predicted, truth, n_classes);
}

std::string format_param(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

void require_splits(const FeatureBank& bank) {
  bank.validate();
  if (bank.rows(Split::train).empty()) throw SpecError("probe: empty training split");
  if (bank.rows(Split::val).empty()) throw SpecError("probe: empty validation split");
  if (bank.rows(Split::test).empty()) throw SpecError("probe: empty test split");
}

}  // namespace

// ---------------------------------------------------------------------------
// k-nearest neighbours

std::string_view to_string(Distance distance) { return distance == Distance::l2 ? "l2" : "cosine"; }

std::vector<int> knn_predict(const Matrix& bank, std::span<const int> labels, const Matrix& queries, int k,
                             Distance distance) {
  if (bank.rows() == 0) throw ShapeError("knn: empty bank");
  if (static_cast<std::size_t>(bank.rows()) != labels.size()) throw ShapeError("knn: label count mismatch");
  if (k < 1 || k > bank.rows()) throw SpecError("knn: k must lie in [1, bank size]");
  if (queries.cols() != bank.cols()) throw ShapeError("knn: width mismatch");

  Vector bank_norms;
  if (distance == Distance::cosine) {
    bank_norms = bank.rowwise().norm();
    if ((bank_norms.array() == 0).any()) throw NumericError("knn: zero-norm bank row under cosine distance");
  }
  const int max_label = *std::max_element(labels.begin(), labels.end());
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(queries.rows()));
  std::vector<std::pair<double, Eigen::Index>> order(static_cast<std::size_t>(bank.rows()));
  std::vector<int> votes(static_cast<std::size_t>(max_label) + 1);
  std::vector<double> nearest(votes.size());
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    Vector d;
    if (distance == Distance::l2) {
      d = (bank.rowwise() - queries.row(q)).rowwise().squaredNorm();
    } else {
      const double qn = queries.row(q).norm();
      if (qn == 0) throw NumericError("knn: zero-norm query under cosine distance");
      d = (1.0 - ((bank * queries.row(q).transpose()).array() / (bank_norms.array() * qn))).matrix();
    }
    for (Eigen::Index i = 0; i < bank.rows(); ++i) order[static_cast<std::size_t>(i)] = {d(i), i};
    std::partial_sort(order.begin(), order.begin() + k, order.end());
    std::fill(votes.begin(), votes.end(), 0);
    std::fill(nearest.begin(), nearest.end(), std::numeric_limits<double>::infinity());
    for (int j = 0; j < k; ++j) {
      const auto label = static_cast<std::size_t>(labels[static_cast<std::size_t>(order[static_cast<std::size_t>(j)].second)]);
      ++votes[label];
      nearest[label] = std::min(nearest[label], order[static_cast<std::size_t>(j)].first);
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < votes.size(); ++c) {
      if (votes[c] > votes[best] || (votes[c] == votes[best] && nearest[c] < nearest[best])) best = c;
    }
    out.push_back(static_cast<int>(best));
  }
  return out;
}

ProbeReport knn_probe(const FeatureBank& bank, const ProbeSettings& settings, Score score) {
  require_splits(bank);
  const Standardizer s = Standardizer::fit(bank.features_of(Split::train));
  const Matrix train = s.apply(bank.features_of(Split::train));
  const Matrix val = s.apply(bank.features_of(Split::val));
  const std::vector<int> train_y = bank.labels_of(Split::train);
  const std::vector<int> val_y = bank.labels_of(Split::val);

  ProbeReport report;
  report.probe = "knn";
  report.score = score;
  std::vector<std::pair<int, Distance>> points;
  for (int k : settings.knn_k)
    for (Distance d : {Distance::l2, Distance::cosine}) points.emplace_back(k, d);
  for (const auto& [k, d] : points) {
    ProbeRecord r;
    r.params = {{"k", std::to_string(k)}, {"distance", std::string(to_string(d))}};
    const int kk = std::min<int>(k, static_cast<int>(train.rows()));
    r.val_score = score_of(score, knn_predict(train, train_y, val, kk, d), val_y, bank.n_classes);
    report.grid.push_back(r);
  }
  report.selected = select_best(report.grid);
  const auto [k, d] = points[report.selected];
  const int kk = std::min<int>(k, static_cast<int>(train.rows()));
  report.test_score = score_of(score, knn_predict(train, train_y, s.apply(bank.features_of(Split::test)), kk, d),
                               bank.labels_of(Split::test), bank.n_classes);
  return report;
}

// ---------------------------------------------------------------------------
// Logistic regression

namespace {

struct LogRegObjective {
  const Matrix& x;
  std::span<const int> y;
  int classes;
  double c;

  // Parameters packed as [W row-major (classes x dim), b (classes)].
  double operator()(const Vector& theta, Vector& grad) const {
    const Eigen::Index d = x.cols();
    const Eigen::Index n = x.rows();
    const Eigen::Map<const Matrix> w(theta.data(), classes, d);
    const Eigen::Map<const RowVector> b(theta.data() + classes * d, classes);
    Matrix logits = x * w.transpose();
    logits.rowwise() += b;
    double loss = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto row = logits.row(i);
      const double mx = row.maxCoeff();
      row.array() -= mx;
      const double lse = std::log(row.array().exp().sum());
      loss -= row(y[static_cast<std::size_t>(i)]) - lse;
      row = (row.array() - lse).exp().matrix();
      row(y[static_cast<std::size_t>(i)]) -= 1.0;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    const double reg = 1.0 / (c * static_cast<double>(n));
    grad.resize(theta.size());
    Eigen::Map<Matrix> gw(grad.data(), classes, d);
    Eigen::Map<RowVector> gb(grad.data() + classes * d, classes);
    gw = inv_n * logits.transpose() * x + reg * w;
    gb = inv_n * logits.colwise().sum();
    return loss * inv_n + 0.5 * reg * w.squaredNorm();
  }
};

}  // namespace

LogReg fit_logreg(const Matrix& x, std::span<const int> y, int n_classes, double c, int max_iter, double tol) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) throw ShapeError("logreg: label count mismatch");
  if (x.rows() == 0) throw ShapeError("logreg: no training rows");
  if (!(c > 0)) throw SpecError("logreg: C must be positive");
  if (n_classes < 2) throw SpecError("logreg: at least two classes are required");
  std::vector<int> seen(static_cast<std::size_t>(n_classes), 0);
  for (int l : y) {
    if (l < 0 || l >= n_classes) throw SpecError("logreg: label out of range");
    seen[static_cast<std::size_t>(l)] = 1;
  }
  if (std::accumulate(seen.begin(), seen.end(), 0) < 2) {
    throw SpecError("logreg: training labels contain a single class");
  }

  const LogRegObjective f{x, y, n_classes, c};
  const Eigen::Index dim = n_classes * x.cols() + n_classes;
  Vector theta = Vector::Zero(dim), grad, new_grad;
  double value = f(theta, grad);
  constexpr int kHistory = 10;
  std::deque<std::pair<Vector, Vector>> history;  // (s, y)

  LogReg out;
  int it = 0;
  for (; it < max_iter; ++it) {
    if (grad.cwiseAbs().maxCoeff() < tol) break;
    // Two-loop recursion.
    Vector q = grad;
    std::vector<double> alpha(history.size());
    for (std::size_t i = history.size(); i-- > 0;) {
      const auto& [s, yv] = history[i];
      alpha[i] = s.dot(q) / yv.dot(s);
      q -= alpha[i] * yv;
    }
    if (!history.empty()) {
      const auto& [s, yv] = history.back();
      q *= s.dot(yv) / yv.squaredNorm();
    } else {
      q /= std::max(1.0, grad.norm());
    }
    for (std::size_t i = 0; i < history.size(); ++i) {
      const auto& [s, yv] = history[i];
      const double beta = yv.dot(q) / yv.dot(s);
      q += (alpha[i] - beta) * s;
    }
    Vector dir = -q;
    double slope = grad.dot(dir);
    if (!(slope < 0)) {
      history.clear();
      dir = -grad / std::max(1.0, grad.norm());
      slope = grad.dot(dir);
    }
    // Backtracking Armijo line search.
    double step = 1.0;
    Vector next;
    double next_value = 0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      next = theta + step * dir;
      next_value = f(next, new_grad);
      if (std::isfinite(next_value) && next_value <= value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    Vector s = next - theta;
    Vector yv = new_grad - grad;
    if (s.dot(yv) > 1e-12 * s.norm() * yv.norm()) {
      history.emplace_back(std::move(s), std::move(yv));
      if (history.size() > kHistory) history.pop_front();
    }
    theta = std::move(next);
    grad = new_grad;
    value = next_value;
  }
  out.grad_norm = grad.cwiseAbs().maxCoeff();
  out.converged = out.grad_norm < tol;
  out.iterations = it;
  out.weights = Eigen::Map<const Matrix>(theta.data(), n_classes, x.cols());
  out.bias = Eigen::Map<const RowVector>(theta.data() + n_classes * x.cols(), n_classes);
  return out;
}

Matrix logreg_probabilities(const LogReg& model, const Matrix& x) {
  Matrix logits = x * model.weights.transpose();
  logits.rowwise() += model.bias;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return logits;
}

std::vector<int> logreg_predict(const LogReg& model, const Matrix& x) {
  const Matrix p = logreg_probabilities(model, x);
  std::vector<int> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::Index arg;
    p.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

std::vector<double> logreg_c_grid(const ProbeSettings& s) {
  if (s.logreg_c_count < 1 || !(s.logreg_c_min > 0) || s.logreg_c_max < s.logreg_c_min) {
    throw SpecError("invalid logistic-regression C grid");
  }
  std::vector<double> out;
  const double lo = std::log10(s.logreg_c_min), hi = std::log10(s.logreg_c_max);
  for (int i = 0; i < s.logreg_c_count; ++i) {
    const double t = s.logreg_c_count == 1 ? 0.0 : static_cast<double>(i) / (s.logreg_c_count - 1);
    out.push_back(std::pow(10.0, lo + t * (hi - lo)));
  }
  return out;
}

ProbeReport logreg_probe(const FeatureBank& bank, const ProbeSettings& settings, Score score) {
  require_splits(bank);
  const Standardizer s = Standardizer::fit(bank.features_of(Split::train));
  const Matrix train = s.apply(bank.features_of(Split::train));
  const Matrix val = s.apply(bank.features_of(Split::val));
  const std::vector<int> train_y = bank.labels_of(Split::train);
  const std::vector<int> val_y = bank.labels_of(Split::val);

  ProbeReport report;
  report.probe = "logreg";
  report.score = score;
  std::vector<LogReg> models;
  for (double c : logreg_c_grid(settings)) {
    LogReg m = fit_logreg(train, train_y, bank.n_classes, c, settings.logreg_max_iter);
    ProbeRecord r;
    r.params = {{"C", format_param(c)}};
    r.val_score = score_of(score, logreg_predict(m, val), val_y, bank.n_classes);
    r.converged = m.converged;
    report.grid.push_back(r);
    models.push_back(std::move(m));
  }
  report.selected = select_best(report.grid);
  report.test_score = score_of(score, logreg_predict(models[report.selected], s.apply(bank.features_of(Split::test))),
                               bank.labels_of(Split::test), bank.n_classes);
  return report;
}

// ---------------------------------------------------------------------------
// Attentive probe

std::size_t attentive_parameter_count(int d, int c) {
  const auto dd = static_cast<std::size_t>(d);
  return 2 * dd * dd + (3 + static_cast<std::size_t>(c)) * dd;
}

std::size_t AttentiveProbe::parameter_count() const {
  std::size_t n = 0;
  visit(*this, "", [&](const std::string&, const Matrix& m, ParamGroup) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

AttentiveProbe init_attentive_probe(int d, int c, int head_width, Rng& rng) {
  if (d < 1 || c < 2) throw SpecError("attentive probe: need d >= 1 and at least two classes");
  if (head_width < 1 || d % head_width != 0) {
    throw SpecError("attentive probe: width " + std::to_string(d) + " is not a multiple of head width " +
                    std::to_string(head_width));
  }
  AttentiveProbe p;
  p.heads = d / head_width;
  p.query.resize(1, d);
  for (Eigen::Index i = 0; i < d; ++i) p.query(0, i) = 0.02 * rng.normal();
  p.wk = xavier_uniform(d, d, rng);
  p.bk = Matrix::Zero(1, d);
  p.wv = xavier_uniform(d, d, rng);
  p.bv = Matrix::Zero(1, d);
  p.classifier = xavier_uniform(c, d, rng);
  return p;
}

namespace {

struct AttentiveForward {
  Matrix k, v;
  Matrix attn;  // heads x n
  Matrix pooled;
  Matrix logits;
};

AttentiveForward attentive_forward(const AttentiveProbe& p, const Matrix& tokens) {
  const Eigen::Index d = p.query.cols();
  if (tokens.cols() != d) throw ShapeError("attentive probe: token width mismatch");
  if (tokens.rows() == 0) throw ShapeError("attentive probe: no tokens");
  const int w = static_cast<int>(d) / p.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(w));
  AttentiveForward f;
  f.k = tokens * p.wk.transpose();
  f.k.rowwise() += p.bk.row(0);
  f.v = tokens * p.wv.transpose();
  f.v.rowwise() += p.bv.row(0);
  f.attn.resize(p.heads, tokens.rows());
  f.pooled.resize(1, d);
  for (int h = 0; h < p.heads; ++h) {
    RowVector s = scale * (f.k.middleCols(h * w, w) * p.query.middleCols(h * w, w).transpose()).transpose();
    s.array() -= s.maxCoeff();
    s = s.array().exp().matrix();
    s /= s.sum();
    f.attn.row(h) = s;
    f.pooled.middleCols(h * w, w) = s * f.v.middleCols(h * w, w);
  }
  f.logits = f.pooled * p.classifier.transpose();
  return f;
}

AttentiveProbe zeros_probe(const AttentiveProbe& p) {
  AttentiveProbe g = p;
  visit(g, "", [](const std::string&, Matrix& m, ParamGroup) { m.setZero(); });
  return g;
}

}  // namespace

Matrix attentive_logits(const AttentiveProbe& probe, const Matrix& tokens) {
  return attentive_forward(probe, tokens).logits;
}

AttentiveLoss attentive_loss(const AttentiveProbe& p, std::span<const Matrix> tokens, std::span<const int> labels) {
  if (tokens.size() != labels.size() || tokens.empty()) throw ShapeError("attentive probe: batch mismatch");
  const Eigen::Index d = p.query.cols();
  const int w = static_cast<int>(d) / p.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(w));
  const double inv_b = 1.0 / static_cast<double>(tokens.size());
  AttentiveLoss out;
  out.grad = zeros_probe(p);
  AttentiveProbe& g = out.grad;
  for (std::size_t b = 0; b < tokens.size(); ++b) {
    const Matrix& x = tokens[b];
    const AttentiveForward f = attentive_forward(p, x);
    RowVector z = f.logits.row(0);
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    const int y = labels[b];
    if (y < 0 || y >= p.classifier.rows()) throw SpecError("attentive probe: label out of range");
    out.loss += (lse - z(y)) * inv_b;
    RowVector dz = (z.array() - lse).exp().matrix();
    dz(y) -= 1.0;
    dz *= inv_b;
    g.classifier += dz.transpose() * f.pooled;
    const RowVector dpooled = dz * p.classifier;
    Matrix dk = Matrix::Zero(x.rows(), d), dv = Matrix::Zero(x.rows(), d);
    for (int h = 0; h < p.heads; ++h) {
      const RowVector a = f.attn.row(h);
      const RowVector dout = dpooled.middleCols(h * w, w);
      dv.middleCols(h * w, w) = a.transpose() * dout;
      const Vector da = f.v.middleCols(h * w, w) * dout.transpose();
      const Vector ds = a.transpose().cwiseProduct(da - Vector::Constant(da.size(), a.dot(da.transpose())));
      dk.middleCols(h * w, w) = scale * ds * p.query.middleCols(h * w, w);
      g.query.middleCols(h * w, w) += scale * ds.transpose() * f.k.middleCols(h * w, w);
    }
    g.wk += dk.transpose() * x;
    g.bk += dk.colwise().sum();
    g.wv += dv.transpose() * x;
    g.bv += dv.colwise().sum();
  }
  return out;
}

AttentiveProbe train_attentive_probe(std::span<const Matrix> tokens, std::span<const int> labels, int n_classes,
                                     const AttentiveTrainConfig& config) {
  if (tokens.empty() || tokens.size() != labels.size()) throw ShapeError("attentive probe: no training data");
  if (config.epochs < 1 || config.batch_size < 1) throw SpecError("attentive probe: epochs and batch size must be positive");
  Rng init = Rng::derive(config.seed, "attentive_init");
  AttentiveProbe p = init_attentive_probe(static_cast<int>(tokens[0].cols()), n_classes, config.head_width, init);
  AdamWConfig opt_cfg;
  opt_cfg.beta2 = 0.999;
  opt_cfg.weight_decay = config.weight_decay;
  AdamW opt(opt_cfg);

  const std::size_t n = tokens.size();
  const auto per_epoch = static_cast<std::int64_t>((n + static_cast<std::size_t>(config.batch_size) - 1) /
                                                   static_cast<std::size_t>(config.batch_size));
  Schedule sched;
  sched.total_steps = per_epoch * config.epochs;
  sched.warmup_fraction = config.warmup_fraction;
  sched.cosine_truncation = 0.0;
  sched.peak_lr = config.lr;

  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = Rng::derive(config.seed, "attentive_shuffle", {static_cast<std::uint64_t>(epoch)});
    shuffle.shuffle(std::span(order));
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
      std::vector<Matrix> xb;
      std::vector<int> yb;
      for (std::size_t i = start; i < end; ++i) {
        xb.push_back(tokens[order[i]]);
        yb.push_back(labels[order[i]]);
      }
      const AttentiveLoss l = attentive_loss(p, xb, yb);
      std::vector<const Matrix*> grads;
      visit(l.grad, "", [&](const std::string&, const Matrix& m, ParamGroup) { grads.push_back(&m); });
      std::vector<ParamSlot> slots;
      std::size_t i = 0;
      visit(p, "", [&](const std::string& name, Matrix& m, ParamGroup) {
        const bool decayed = name == "wk" || name == "wv" || name == "classifier";
        slots.push_back({name, &m, grads[i++], 1.0, decayed ? 1.0 : 0.0});
      });
      ++step;
      opt.step(slots, lr_at(step, sched));
    }
  }
  return p;
}

ProbeReport attentive_probe(const FeatureBank& bank, const ProbeSettings& settings, std::uint64_t seed) {
  require_splits(bank);
  // Group patch rows into per-image token matrices.
  struct Group {
    std::vector<Matrix> tokens;
    std::vector<int> labels;
  };
  const auto group = [&](Split s) {
    Group g;
    std::vector<int> order;
    std::map<int, std::vector<std::size_t>> by_image;
    for (std::size_t i : bank.rows(s)) by_image[bank.image[i]].push_back(i);
    for (const auto& [img, rows] : by_image) {
      Matrix t(static_cast<Eigen::Index>(rows.size()), bank.features.cols());
      for (std::size_t j = 0; j < rows.size(); ++j) t.row(static_cast<Eigen::Index>(j)) = bank.features.row(static_cast<Eigen::Index>(rows[j]));
      g.tokens.push_back(std::move(t));
      g.labels.push_back(bank.labels[rows.front()]);
    }
    return g;
  };
  const Group train = group(Split::train), val = group(Split::val), test = group(Split::test);
  const auto predict = [](const AttentiveProbe& p, const std::vector<Matrix>& xs) {
    std::vector<int> out;
    for (const Matrix& x : xs) {
      Eigen::Index arg;
      attentive_logits(p, x).row(0).maxCoeff(&arg);
      out.push_back(static_cast<int>(arg));
    }
    return out;
  };

  ProbeReport report;
  report.probe = "attentive";
  report.score = Score::accuracy;
  std::vector<AttentiveProbe> probes;
  for (double lr : settings.attn_lrs) {
    for (double wd : settings.attn_wds) {
      AttentiveTrainConfig cfg;
      cfg.lr = lr;
      cfg.weight_decay = wd;
      cfg.epochs = settings.attn_epochs;
      cfg.batch_size = settings.attn_batch_size;
      cfg.head_width = settings.attn_head_width;
      cfg.seed = seed;
      AttentiveProbe p = train_attentive_probe(train.tokens, train.labels, bank.n_classes, cfg);
      ProbeRecord r;
      r.params = {{"lr", format_param(lr)}, {"weight_decay", format_param(wd)}};
      r.val_score = accuracy(predict(p, val.tokens), val.labels);
      report.grid.push_back(r);
      probes.push_back(std::move(p));
    }
  }
  report.selected = select_best(report.grid);
  report.test_score = accuracy(predict(probes[report.selected], test.tokens), test.labels);
  return report;
}

// ---------------------------------------------------------------------------
// PCA feature maps

namespace {

struct PcaFit {
  RowVector mean;
  Matrix components;  // k x d
  std::vector<double> variances;
};

PcaFit fit_pca(const Matrix& x) {
  PcaFit fit;
  fit.mean = x.colwise().mean();
  const Matrix centered = x.rowwise() - fit.mean;
  const Matrix cov = centered.transpose() * centered / static_cast<double>(std::max<Eigen::Index>(1, x.rows() - 1));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  const Vector values = eig.eigenvalues();
  const Matrix vectors = eig.eigenvectors();
  const double top = std::max(values.maxCoeff(), 0.0);
  const double tol = std::max(top, 1e-300) * 1e-10 * static_cast<double>(x.cols());
  std::vector<RowVector> rows;
  for (Eigen::Index i = values.size() - 1; i >= 0 && rows.size() < 3; --i) {
    if (!(values(i) > tol)) break;
    RowVector v = vectors.col(i).transpose();
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    rows.push_back(v);
    fit.variances.push_back(values(i));
  }
  fit.components.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) fit.components.row(static_cast<Eigen::Index>(i)) = rows[i];
  return fit;
}

// Channels [0, k) hold projections; min-max rescale each over `proj`.
Matrix rescale_channels(const Matrix& proj) {
  Matrix out = Matrix::Constant(proj.rows(), 3, 0.5);
  for (Eigen::Index ch = 0; ch < proj.cols(); ++ch) {
    const double lo = proj.col(ch).minCoeff(), hi = proj.col(ch).maxCoeff();
    if (hi > lo) out.col(ch) = ((proj.col(ch).array() - lo) / (hi - lo)).matrix();
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

Image to_map(const Matrix& rgb, LatticeShape lattice) {
  Image img(lattice.rows, lattice.cols);
  for (int r = 0; r < lattice.rows; ++r)
    for (int c = 0; c < lattice.cols; ++c)
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = static_cast<float>(rgb(r * lattice.cols + c, ch));
  return img;
}

}  // namespace

PcaMaps pca_feature_maps(std::span<const Matrix> features, LatticeShape lattice, bool per_image) {
  lattice.validate();
  if (features.empty()) throw ShapeError("pca: no images");
  Eigen::Index total = 0;
  for (const Matrix& f : features) {
    if (f.rows() != lattice.count()) throw ShapeError("pca: feature rows do not match the lattice");
    if (f.cols() != features[0].cols()) throw ShapeError("pca: feature widths differ");
    total += f.rows();
  }
  if (total < 3) throw ShapeError("pca: at least three patch tokens are required");
  PcaMaps out;
  if (per_image) {
    for (const Matrix& f : features) {
      const PcaFit fit = fit_pca(f);
      const Matrix proj = (f.rowwise() - fit.mean) * fit.components.transpose();
      out.maps.push_back(to_map(rescale_channels(proj), lattice));
      out.components.push_back(fit.components);
      out.variances.push_back(fit.variances);
    }
    return out;
  }
  Matrix all(total, features[0].cols());
  Eigen::Index at = 0;
  for (const Matrix& f : features) {
    all.middleRows(at, f.rows()) = f;
    at += f.rows();
  }
  const PcaFit fit = fit_pca(all);
  const Matrix rgb = rescale_channels((all.rowwise() - fit.mean) * fit.components.transpose());
  for (std::size_t i = 0; i < features.size(); ++i) {
    out.maps.push_back(to_map(rgb.middleRows(static_cast<Eigen::Index>(i) * lattice.count(), lattice.count()), lattice));
  }
  out.components.push_back(fit.components);
  out.variances.push_back(fit.variances);
  return out;
}

}  // namespace capi
