#include "cliplab/score_models.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cliplab/errors.hpp"

namespace cliplab {

namespace {

constexpr double kRankTolerance = 1e-10;
constexpr std::array<char, 8> kWeightsMagic = {'C', 'L', 'P', 'L', 'A', 'B', 'W', '1'};

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NonFiniteError(std::string(what) + " contains non-finite values");
}

void check_full_column_rank(const Matrix& m, const char* name) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& s = svd.singularValues();
  if (m.rows() < m.cols() || s.size() == 0 || s(s.size() - 1) < kRankTolerance) {
    throw RankDeficiencyError(std::string(name) + " is rank deficient (smallest singular value < 1e-10)");
  }
}

Vector unit(const Vector& v) {
  const double n = v.norm();
  if (n == 0.0 || !std::isfinite(n)) {
    throw DegenerateInputError("cosine similarity of a zero-norm embedding");
  }
  return v / n;
}

void normalize_rows(Matrix& m) {
  for (int i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n == 0.0 || !std::isfinite(n)) {
      throw DegenerateInputError("cosine similarity of a zero-norm embedding");
    }
    m.row(i) /= n;
  }
}

Matrix similarity_matrix(Matrix GX, Matrix Y, SimilarityKind kind) {
  if (GX.cols() != Y.cols()) {
    throw DimensionError("embedding dimension " + std::to_string(GX.cols()) +
                         " does not match text dimension " + std::to_string(Y.cols()));
  }
  switch (kind) {
    case SimilarityKind::inner:
      return GX * Y.transpose();
    case SimilarityKind::cosine:
      normalize_rows(GX);
      normalize_rows(Y);
      return GX * Y.transpose();
    case SimilarityKind::negative_l2: {
      Matrix S(GX.rows(), Y.rows());
      for (int j = 0; j < Y.rows(); ++j)
        for (int i = 0; i < GX.rows(); ++i) S(i, j) = -(GX.row(i) - Y.row(j)).norm();
      return S;
    }
  }
  return {};
}

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

}  // namespace

std::string to_string(SimilarityKind kind) {
  switch (kind) {
    case SimilarityKind::inner:
      return "inner";
    case SimilarityKind::cosine:
      return "cosine";
    case SimilarityKind::negative_l2:
      return "negative_l2";
  }
  return "unknown";
}

SimilarityKind similarity_from_string(const std::string& name) {
  if (name == "inner") return SimilarityKind::inner;
  if (name == "cosine") return SimilarityKind::cosine;
  if (name == "negative_l2") return SimilarityKind::negative_l2;
  throw UnsupportedSimilarityError("unknown similarity kind '" + name + "'");
}

double similarity(const Vector& g, const Vector& h, SimilarityKind kind) {
  if (g.size() != h.size()) {
    throw DimensionError("embedding dimension " + std::to_string(g.size()) +
                         " does not match text dimension " + std::to_string(h.size()));
  }
  switch (kind) {
    case SimilarityKind::inner:
      return g.dot(h);
    case SimilarityKind::cosine:
      return unit(g).dot(unit(h));
    case SimilarityKind::negative_l2:
      return -(g - h).norm();
  }
  return 0.0;
}

LinearScoreModel::LinearScoreModel(Matrix W, double tau, SimilarityKind kind)
    : W_(std::move(W)), tau_(tau), kind_(kind) {
  require_finite(W_, "weight matrix");
  set_tau(tau);
}

void LinearScoreModel::set_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw OutOfRangeError("temperature must be positive and finite");
  }
  tau_ = tau;
}

Vector LinearScoreModel::embed(const Vector& x) const {
  if (x.size() != W_.cols()) {
    throw DimensionError("image has dimension " + std::to_string(x.size()) + ", W expects " +
                         std::to_string(W_.cols()));
  }
  return W_ * x;
}

double LinearScoreModel::score(const Vector& x, const Vector& y) const {
  return similarity(embed(x), y, kind_);
}

Matrix LinearScoreModel::score_matrix(const Matrix& X, const Matrix& Y) const {
  if (X.cols() != W_.cols()) {
    throw DimensionError("images have dimension " + std::to_string(X.cols()) + ", W expects " +
                         std::to_string(W_.cols()));
  }
  return similarity_matrix(X * W_.transpose(), Y, kind_);
}

EmbeddingPairView embedding_view(const LinearScoreModel& model, const Vector& x, const Vector& y) {
  EmbeddingPairView view{model.embed(x), y};
  if (view.g_of_x.size() != view.h_of_y.size()) {
    throw DimensionError("embedding and text dimensions differ");
  }
  if (model.similarity_kind() == SimilarityKind::cosine) {
    view.g_of_x = unit(view.g_of_x);
    view.h_of_y = unit(view.h_of_y);
  }
  return view;
}

Matrix shared_projection(const GenerativeModel& model) {
  Matrix P = Matrix::Zero(model.K1() + model.K3(), model.K1() + model.K2());
  P.topLeftCorner(model.K1(), model.K1()).setIdentity();
  return P;
}

Matrix completeness_weights(const GenerativeModel& model) {
  const Matrix& G = model.G();
  const Matrix& H = model.H();
  check_full_column_rank(G, "image dictionary G");
  check_full_column_rank(H, "text dictionary H");

  // (G^T G)^{-1} G^T and H (H^T H)^{-1} are the pseudo-inverse and its
  // transpose; a column-pivoted QR solve avoids forming either inverse.
  Eigen::ColPivHouseholderQR<Matrix> g_qr(G);
  Eigen::ColPivHouseholderQR<Matrix> h_qr(H);
  const Matrix g_pinv = g_qr.solve(Matrix::Identity(G.rows(), G.rows()));   // (K1+K2) x d1
  const Matrix h_pinv = h_qr.solve(Matrix::Identity(H.rows(), H.rows()));   // (K1+K3) x d2
  return h_pinv.transpose() * shared_projection(model) * g_pinv;
}

BayesSquareEncoder::BayesSquareEncoder(const GenerativeModel& model)
    : g_qr_(model.G()),
      H_(model.H()),
      latent_vectors_(model.latent().vectors),
      k1_(model.K1()) {
  check_full_column_rank(model.G(), "image dictionary G");
  zeta_means_.reserve(static_cast<std::size_t>(model.K()));
  for (int k = 0; k < model.K(); ++k) zeta_means_.push_back(model.zeta_sampler().conditional_mean(k));
}

Vector BayesSquareEncoder::operator()(const Vector& x) const {
  if (x.size() != g_qr_.rows()) throw DimensionError("image dimension mismatch in encoder");
  const Vector coords = g_qr_.solve(x);
  const Vector z = coords.head(k1_);
  // The noiseless model makes z one of the dictionary columns; the nearest
  // column picks which conditional mean applies.
  Eigen::Index k = 0;
  (latent_vectors_.transpose() * z).maxCoeff(&k);
  Vector code(H_.cols());
  code.head(k1_) = z;
  code.tail(H_.cols() - k1_) = zeta_means_[static_cast<std::size_t>(k)];
  return H_ * code;
}

Scorer::Scorer(const LinearScoreModel& model)
    : embedding_([W = model.W()](const Vector& x) -> Vector {
        if (x.size() != W.cols()) throw DimensionError("image dimension mismatch");
        return W * x;
      }),
      kind_(model.similarity_kind()) {}

Scorer::Scorer(Embedding embedding, SimilarityKind kind)
    : embedding_(std::move(embedding)), kind_(kind) {}

Scorer Scorer::from_function(ScoreFn fn) {
  Scorer s;
  s.fn_ = std::move(fn);
  return s;
}

Scorer Scorer::bayes(const GenerativeModel& model, SimilarityKind kind) {
  return Scorer([enc = BayesSquareEncoder(model)](const Vector& x) { return enc(x); }, kind);
}

double Scorer::score(const Vector& x, const Vector& y) const {
  if (fn_) return fn_(x, y);
  return similarity(embedding_(x), y, kind_);
}

Vector Scorer::scores_against(const Vector& x, const std::vector<Vector>& texts) const {
  Vector out(static_cast<Eigen::Index>(texts.size()));
  if (fn_) {
    for (std::size_t k = 0; k < texts.size(); ++k) out(static_cast<Eigen::Index>(k)) = fn_(x, texts[k]);
    return out;
  }
  Vector g = embedding_(x);
  if (kind_ == SimilarityKind::cosine) g = unit(g);
  for (std::size_t k = 0; k < texts.size(); ++k) {
    const auto idx = static_cast<Eigen::Index>(k);
    switch (kind_) {
      case SimilarityKind::inner:
        out(idx) = g.dot(texts[k]);
        break;
      case SimilarityKind::cosine:
        out(idx) = g.dot(unit(texts[k]));
        break;
      case SimilarityKind::negative_l2:
        out(idx) = -(g - texts[k]).norm();
        break;
    }
  }
  return out;
}

Matrix Scorer::score_matrix(const Matrix& X, const Matrix& Y) const {
  if (fn_) {
    Matrix S(X.rows(), Y.rows());
    for (int j = 0; j < Y.rows(); ++j)
      for (int i = 0; i < X.rows(); ++i) S(i, j) = fn_(X.row(i).transpose(), Y.row(j).transpose());
    return S;
  }
  if (X.rows() == 0) return Matrix(0, Y.rows());
  const Vector first = embedding_(X.row(0).transpose());
  Matrix GX(X.rows(), first.size());
  GX.row(0) = first.transpose();
  for (int i = 1; i < X.rows(); ++i) GX.row(i) = embedding_(X.row(i).transpose()).transpose();
  return similarity_matrix(std::move(GX), Y, kind_);
}

void write_weights_binary(const std::string& path, const Matrix& W) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kWeightsMagic.data(), kWeightsMagic.size());
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(W.rows()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(W.cols()));
  for (int i = 0; i < W.rows(); ++i)
    for (int j = 0; j < W.cols(); ++j) write_le<double>(out, W(i, j));
  if (!out) throw IoError("failed writing '" + path + "'");
}

Matrix read_weights_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kWeightsMagic) throw IoError("'" + path + "' is not a weight file");
  const auto rows = read_le<std::uint32_t>(in);
  const auto cols = read_le<std::uint32_t>(in);
  if (!in) throw IoError("truncated header in '" + path + "'");
  Matrix W(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i)
    for (std::uint32_t j = 0; j < cols; ++j) W(i, j) = read_le<double>(in);
  if (!in) throw IoError("truncated payload in '" + path + "'");
  return W;
}

void write_weights_csv(const std::string& path, const Matrix& W) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << std::setprecision(17);
  for (int i = 0; i < W.rows(); ++i) {
    for (int j = 0; j < W.cols(); ++j) out << (j ? "," : "") << W(i, j);
    out << '\n';
  }
}

Matrix read_weights_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError("bad number '" + cell + "' in '" + path + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw IoError("ragged rows in '" + path + "'");
    }
    rows.push_back(std::move(row));
  }
  Matrix W(static_cast<Eigen::Index>(rows.size()),
           rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return W;
}

}  // namespace cliplab
