#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "deprl/rng.hpp"

namespace deprl {

using Index = Eigen::Index;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMajorMatrix>;
using ConstMatrixView = Eigen::Map<const RowMajorMatrix>;
using VectorView = Eigen::Map<Eigen::VectorXd>;
using ConstVectorView = Eigen::Map<const Eigen::VectorXd>;

enum class RepresentationKind { kLinear, kOneHiddenTanh };
enum class LossKind { kSquared, kCrossEntropy };

std::string to_string(RepresentationKind kind);
std::string to_string(LossKind kind);

// Architecture of phi and theta. hidden_dim is ignored for kLinear.
struct ModelShape {
  RepresentationKind kind = RepresentationKind::kLinear;
  Index input_dim = 1;    // d
  Index feature_dim = 1;  // z
  Index hidden_dim = 0;   // h
  Index output_dim = 1;   // c

  void validate() const;
  bool operator==(const ModelShape&) const = default;
};

// Shared representation phi. Parameters live in one flat buffer, row-major
// per block, in the order
//   linear:     B (z x d)
//   nonlinear:  W1 (h x d), b1 (h), W2 (z x h), b2 (z)
// so consensus averaging and checkpointing work on the flat vector.
class Representation {
 public:
  Representation() = default;
  static Representation zeros(RepresentationKind kind, Index input_dim, Index feature_dim,
                              Index hidden_dim = 0);
  static Representation from_flat(RepresentationKind kind, Index input_dim, Index feature_dim,
                                  Index hidden_dim, Eigen::VectorXd flat);
  // Uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer.
  static Representation random_init(RepresentationKind kind, Index input_dim, Index feature_dim,
                                    Index hidden_dim, Rng& rng);

  RepresentationKind kind() const noexcept { return kind_; }
  Index input_dim() const noexcept { return d_; }
  Index feature_dim() const noexcept { return z_; }
  Index hidden_dim() const noexcept { return h_; }
  Index parameter_count() const noexcept { return flat_.size(); }

  const Eigen::VectorXd& flat() const noexcept { return flat_; }
  Eigen::VectorXd& flat() noexcept { return flat_; }

  // kLinear only.
  ConstMatrixView linear() const;
  MatrixView linear();
  // kOneHiddenTanh only.
  ConstMatrixView w1() const;
  MatrixView w1();
  ConstVectorView b1() const;
  VectorView b1();
  ConstMatrixView w2() const;
  MatrixView w2();
  ConstVectorView b2() const;
  VectorView b2();

  bool same_shape(const Representation& other) const noexcept {
    return kind_ == other.kind_ && d_ == other.d_ && z_ == other.z_ && h_ == other.h_;
  }
  bool operator==(const Representation& other) const {
    return same_shape(other) && flat_ == other.flat_;
  }

 private:
  Representation(RepresentationKind kind, Index d, Index z, Index h, Eigen::VectorXd flat);
  void require(RepresentationKind kind) const;

  RepresentationKind kind_ = RepresentationKind::kLinear;
  Index d_ = 0;
  Index z_ = 0;
  Index h_ = 0;
  Eigen::VectorXd flat_;
};

// Worker-private head theta: weights A (c x z) then bias (c), row-major.
class Head {
 public:
  Head() = default;
  static Head zeros(Index output_dim, Index feature_dim);
  static Head from_flat(Index output_dim, Index feature_dim, Eigen::VectorXd flat);
  // Uniform on [-1/sqrt(z), 1/sqrt(z)].
  static Head random_init(Index output_dim, Index feature_dim, Rng& rng);

  Index output_dim() const noexcept { return c_; }
  Index feature_dim() const noexcept { return z_; }
  Index parameter_count() const noexcept { return flat_.size(); }

  const Eigen::VectorXd& flat() const noexcept { return flat_; }
  Eigen::VectorXd& flat() noexcept { return flat_; }

  ConstMatrixView weights() const;
  MatrixView weights();
  ConstVectorView bias() const;
  VectorView bias();

  bool same_shape(const Head& other) const noexcept { return c_ == other.c_ && z_ == other.z_; }
  bool operator==(const Head& other) const { return same_shape(other) && flat_ == other.flat_; }

 private:
  Head(Index c, Index z, Eigen::VectorXd flat);

  Index c_ = 0;
  Index z_ = 0;
  Eigen::VectorXd flat_;
};

// A set of examples. Regression sets carry `targets` (m x c, c >= 1);
// classification sets carry `labels` and leave `targets` with zero columns.
struct Examples {
  Eigen::MatrixXd inputs;   // m x d
  Eigen::MatrixXd targets;  // m x c
  std::vector<int> labels;  // m

  Index size() const noexcept { return inputs.rows(); }
  Index input_dim() const noexcept { return inputs.cols(); }
  bool is_classification() const noexcept { return targets.cols() == 0; }
  Examples subset(std::span<const std::ptrdiff_t> rows) const;

  bool operator==(const Examples& other) const {
    return inputs.rows() == other.inputs.rows() && inputs.cols() == other.inputs.cols() &&
           inputs == other.inputs && targets.rows() == other.targets.rows() &&
           targets.cols() == other.targets.cols() && targets == other.targets &&
           labels == other.labels;
  }
};

// phi(x): z-vector of features.
Eigen::VectorXd features(const Representation& phi, const Eigen::VectorXd& x);
// theta(phi(x)): c-vector of predictions or logits.
Eigen::VectorXd forward(const Representation& phi, const Head& theta, const Eigen::VectorXd& x);
// Row-wise forward over an m x d input matrix; returns m x c.
Eigen::MatrixXd forward_batch(const Representation& phi, const Head& theta,
                              const Eigen::MatrixXd& inputs);

// Mean per-example loss over a nonempty batch.
//   kSquared:      0.5 * ||pred - y||^2
//   kCrossEntropy: -log softmax(logits)[label], max-subtracted
double loss(const Representation& phi, const Head& theta, const Examples& batch, LossKind kind);

struct Gradients {
  double loss = 0.0;
  Representation phi;
  Head theta;
};

// Loss plus exact partial gradients in one forward/backward pass.
Gradients loss_and_gradients(const Representation& phi, const Head& theta, const Examples& batch,
                             LossKind kind);

Head grad_theta(const Representation& phi, const Head& theta, const Examples& batch, LossKind kind);
Representation grad_phi(const Representation& phi, const Head& theta, const Examples& batch,
                        LossKind kind);

// Predicted class per row: argmax of logits, lowest index on ties.
std::vector<int> predict_labels(const Representation& phi, const Head& theta,
                                const Eigen::MatrixXd& inputs);

}  // namespace deprl
