#include "deprl/model.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "deprl/errors.hpp"

namespace deprl {

namespace {

Index representation_size(RepresentationKind kind, Index d, Index z, Index h) {
  if (kind == RepresentationKind::kLinear) return z * d;
  return h * d + h + z * h + z;
}

void check_dims(RepresentationKind kind, Index d, Index z, Index h) {
  if (d < 1 || z < 1) {
    throw InvalidArgument("representation dims must be positive (d=" + std::to_string(d) +
                          ", z=" + std::to_string(z) + ")");
  }
  if (z > d) {
    throw InvalidArgument("feature dim z=" + std::to_string(z) + " exceeds input dim d=" +
                          std::to_string(d));
  }
  if (kind == RepresentationKind::kOneHiddenTanh && h < 1) {
    throw InvalidArgument("nonlinear representation needs hidden_dim >= 1");
  }
}

void fill_uniform(double* data, Index count, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Index i = 0; i < count; ++i) data[i] = u(rng);
}

struct ForwardCache {
  Eigen::MatrixXd activations;  // m x h, nonlinear only
  Eigen::MatrixXd features;     // m x z
  Eigen::MatrixXd outputs;      // m x c
};

void check_pair(const Representation& phi, const Head& theta) {
  if (phi.feature_dim() != theta.feature_dim()) {
    throw InvalidArgument("head expects feature dim " + std::to_string(theta.feature_dim()) +
                          " but representation produces " + std::to_string(phi.feature_dim()));
  }
}

ForwardCache run_forward(const Representation& phi, const Head& theta, const Eigen::MatrixXd& x) {
  check_pair(phi, theta);
  if (x.cols() != phi.input_dim()) {
    throw InvalidArgument("input has " + std::to_string(x.cols()) + " columns, representation expects " +
                          std::to_string(phi.input_dim()));
  }
  ForwardCache cache;
  if (phi.kind() == RepresentationKind::kLinear) {
    cache.features = x * phi.linear().transpose();
  } else {
    Eigen::MatrixXd pre = x * phi.w1().transpose();
    pre.rowwise() += phi.b1().transpose();
    cache.activations = pre.array().tanh().matrix();
    cache.features = cache.activations * phi.w2().transpose();
    cache.features.rowwise() += phi.b2().transpose();
  }
  cache.outputs = cache.features * theta.weights().transpose();
  cache.outputs.rowwise() += theta.bias().transpose();
  return cache;
}

// Returns the mean loss and writes dLoss/dOutputs (already divided by m).
double output_loss_and_grad(const Eigen::MatrixXd& outputs, const Examples& batch, LossKind kind,
                            Eigen::MatrixXd* grad) {
  const Index m = outputs.rows();
  const Index c = outputs.cols();
  if (m < 1) throw InvalidArgument("batch must be nonempty");
  const double inv_m = 1.0 / static_cast<double>(m);
  double total = 0.0;

  if (kind == LossKind::kSquared) {
    if (batch.is_classification() || batch.targets.rows() != m || batch.targets.cols() != c) {
      throw InvalidArgument("squared loss needs an m x " + std::to_string(c) + " real target matrix");
    }
    const Eigen::MatrixXd residual = outputs - batch.targets;
    for (Index r = 0; r < m; ++r) total += 0.5 * residual.row(r).squaredNorm();
    if (grad) *grad = residual * inv_m;
    return total * inv_m;
  }

  if (static_cast<Index>(batch.labels.size()) != m) {
    throw InvalidArgument("cross-entropy loss needs one class label per example");
  }
  if (grad) grad->resize(m, c);
  for (Index r = 0; r < m; ++r) {
    const int label = batch.labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= c) {
      throw InvalidArgument("label " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")");
    }
    const double shift = outputs.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (outputs.row(r).array() - shift).exp().matrix();
    const double z = e.sum();
    total += std::log(z) + shift - outputs(r, label);
    if (grad) {
      grad->row(r) = e / z;
      (*grad)(r, label) -= 1.0;
    }
  }
  if (grad) *grad *= inv_m;
  return total * inv_m;
}

}  // namespace

std::string to_string(RepresentationKind kind) {
  return kind == RepresentationKind::kLinear ? "linear" : "nonlinear";
}

std::string to_string(LossKind kind) {
  return kind == LossKind::kSquared ? "squared" : "cross_entropy";
}

void ModelShape::validate() const {
  check_dims(kind, input_dim, feature_dim, hidden_dim);
  if (output_dim < 1) throw InvalidArgument("output dim must be positive");
}

Representation::Representation(RepresentationKind kind, Index d, Index z, Index h, Eigen::VectorXd flat)
    : kind_(kind), d_(d), z_(z), h_(kind == RepresentationKind::kLinear ? 0 : h), flat_(std::move(flat)) {}

Representation Representation::zeros(RepresentationKind kind, Index input_dim, Index feature_dim,
                                      Index hidden_dim) {
  check_dims(kind, input_dim, feature_dim, hidden_dim);
  return Representation(kind, input_dim, feature_dim, hidden_dim,
                        Eigen::VectorXd::Zero(representation_size(kind, input_dim, feature_dim, hidden_dim)));
}

Representation Representation::from_flat(RepresentationKind kind, Index input_dim, Index feature_dim,
                                         Index hidden_dim, Eigen::VectorXd flat) {
  check_dims(kind, input_dim, feature_dim, hidden_dim);
  const Index expected = representation_size(kind, input_dim, feature_dim, hidden_dim);
  if (flat.size() != expected) {
    throw InvalidArgument("representation needs " + std::to_string(expected) + " parameters, got " +
                          std::to_string(flat.size()));
  }
  return Representation(kind, input_dim, feature_dim, hidden_dim, std::move(flat));
}

Representation Representation::random_init(RepresentationKind kind, Index input_dim, Index feature_dim,
                                            Index hidden_dim, Rng& rng) {
  Representation r = zeros(kind, input_dim, feature_dim, hidden_dim);
  const double first = 1.0 / std::sqrt(static_cast<double>(input_dim));
  if (kind == RepresentationKind::kLinear) {
    fill_uniform(r.flat_.data(), r.flat_.size(), first, rng);
  } else {
    const Index layer1 = hidden_dim * input_dim + hidden_dim;
    fill_uniform(r.flat_.data(), layer1, first, rng);
    fill_uniform(r.flat_.data() + layer1, r.flat_.size() - layer1,
                 1.0 / std::sqrt(static_cast<double>(hidden_dim)), rng);
  }
  return r;
}

void Representation::require(RepresentationKind kind) const {
  if (kind_ != kind) {
    throw InvalidArgument("accessor requires a " + to_string(kind) + " representation, have " +
                          to_string(kind_));
  }
}

ConstMatrixView Representation::linear() const {
  require(RepresentationKind::kLinear);
  return ConstMatrixView(flat_.data(), z_, d_);
}
MatrixView Representation::linear() {
  require(RepresentationKind::kLinear);
  return MatrixView(flat_.data(), z_, d_);
}
ConstMatrixView Representation::w1() const {
  require(RepresentationKind::kOneHiddenTanh);
  return ConstMatrixView(flat_.data(), h_, d_);
}
MatrixView Representation::w1() {
  require(RepresentationKind::kOneHiddenTanh);
  return MatrixView(flat_.data(), h_, d_);
}
ConstVectorView Representation::b1() const {
  require(RepresentationKind::kOneHiddenTanh);
  return ConstVectorView(flat_.data() + h_ * d_, h_);
}
VectorView Representation::b1() {
  require(RepresentationKind::kOneHiddenTanh);
  return VectorView(flat_.data() + h_ * d_, h_);
}
ConstMatrixView Representation::w2() const {
  require(RepresentationKind::kOneHiddenTanh);
  return ConstMatrixView(flat_.data() + h_ * d_ + h_, z_, h_);
}
MatrixView Representation::w2() {
  require(RepresentationKind::kOneHiddenTanh);
  return MatrixView(flat_.data() + h_ * d_ + h_, z_, h_);
}
ConstVectorView Representation::b2() const {
  require(RepresentationKind::kOneHiddenTanh);
  return ConstVectorView(flat_.data() + h_ * d_ + h_ + z_ * h_, z_);
}
VectorView Representation::b2() {
  require(RepresentationKind::kOneHiddenTanh);
  return VectorView(flat_.data() + h_ * d_ + h_ + z_ * h_, z_);
}

Head::Head(Index c, Index z, Eigen::VectorXd flat) : c_(c), z_(z), flat_(std::move(flat)) {}

Head Head::zeros(Index output_dim, Index feature_dim) {
  if (output_dim < 1 || feature_dim < 1) throw InvalidArgument("head dims must be positive");
  return Head(output_dim, feature_dim, Eigen::VectorXd::Zero(output_dim * feature_dim + output_dim));
}

Head Head::from_flat(Index output_dim, Index feature_dim, Eigen::VectorXd flat) {
  if (output_dim < 1 || feature_dim < 1) throw InvalidArgument("head dims must be positive");
  const Index expected = output_dim * feature_dim + output_dim;
  if (flat.size() != expected) {
    throw InvalidArgument("head needs " + std::to_string(expected) + " parameters, got " +
                          std::to_string(flat.size()));
  }
  return Head(output_dim, feature_dim, std::move(flat));
}

Head Head::random_init(Index output_dim, Index feature_dim, Rng& rng) {
  Head h = zeros(output_dim, feature_dim);
  fill_uniform(h.flat_.data(), h.flat_.size(), 1.0 / std::sqrt(static_cast<double>(feature_dim)), rng);
  return h;
}

ConstMatrixView Head::weights() const { return ConstMatrixView(flat_.data(), c_, z_); }
MatrixView Head::weights() { return MatrixView(flat_.data(), c_, z_); }
ConstVectorView Head::bias() const { return ConstVectorView(flat_.data() + c_ * z_, c_); }
VectorView Head::bias() { return VectorView(flat_.data() + c_ * z_, c_); }

Examples Examples::subset(std::span<const std::ptrdiff_t> rows) const {
  Examples out;
  const auto m = static_cast<Index>(rows.size());
  out.inputs.resize(m, inputs.cols());
  if (is_classification()) {
    out.labels.reserve(rows.size());
  } else {
    out.targets.resize(m, targets.cols());
  }
  for (Index r = 0; r < m; ++r) {
    const auto src = rows[static_cast<std::size_t>(r)];
    out.inputs.row(r) = inputs.row(src);
    if (is_classification()) {
      out.labels.push_back(labels[static_cast<std::size_t>(src)]);
    } else {
      out.targets.row(r) = targets.row(src);
    }
  }
  return out;
}

Eigen::VectorXd features(const Representation& phi, const Eigen::VectorXd& x) {
  if (x.size() != phi.input_dim()) {
    throw InvalidArgument("input has " + std::to_string(x.size()) + " entries, representation expects " +
                          std::to_string(phi.input_dim()));
  }
  if (phi.kind() == RepresentationKind::kLinear) return phi.linear() * x;
  const Eigen::VectorXd act = (phi.w1() * x + phi.b1()).array().tanh().matrix();
  return phi.w2() * act + phi.b2();
}

Eigen::VectorXd forward(const Representation& phi, const Head& theta, const Eigen::VectorXd& x) {
  check_pair(phi, theta);
  return theta.weights() * features(phi, x) + theta.bias();
}

Eigen::MatrixXd forward_batch(const Representation& phi, const Head& theta, const Eigen::MatrixXd& inputs) {
  return run_forward(phi, theta, inputs).outputs;
}

double loss(const Representation& phi, const Head& theta, const Examples& batch, LossKind kind) {
  const ForwardCache cache = run_forward(phi, theta, batch.inputs);
  return output_loss_and_grad(cache.outputs, batch, kind, nullptr);
}

Gradients loss_and_gradients(const Representation& phi, const Head& theta, const Examples& batch,
                             LossKind kind) {
  const ForwardCache cache = run_forward(phi, theta, batch.inputs);
  Eigen::MatrixXd d_out;
  Gradients g;
  g.loss = output_loss_and_grad(cache.outputs, batch, kind, &d_out);

  g.theta = Head::zeros(theta.output_dim(), theta.feature_dim());
  g.theta.weights() = d_out.transpose() * cache.features;
  g.theta.bias() = d_out.colwise().sum().transpose();

  const Eigen::MatrixXd d_features = d_out * theta.weights();
  g.phi = Representation::zeros(phi.kind(), phi.input_dim(), phi.feature_dim(), phi.hidden_dim());
  if (phi.kind() == RepresentationKind::kLinear) {
    g.phi.linear() = d_features.transpose() * batch.inputs;
  } else {
    g.phi.w2() = d_features.transpose() * cache.activations;
    g.phi.b2() = d_features.colwise().sum().transpose();
    const Eigen::MatrixXd d_pre =
        ((d_features * phi.w2()).array() * (1.0 - cache.activations.array().square())).matrix();
    g.phi.w1() = d_pre.transpose() * batch.inputs;
    g.phi.b1() = d_pre.colwise().sum().transpose();
  }
  return g;
}

Head grad_theta(const Representation& phi, const Head& theta, const Examples& batch, LossKind kind) {
  return loss_and_gradients(phi, theta, batch, kind).theta;
}

Representation grad_phi(const Representation& phi, const Head& theta, const Examples& batch, LossKind kind) {
  return loss_and_gradients(phi, theta, batch, kind).phi;
}

std::vector<int> predict_labels(const Representation& phi, const Head& theta, const Eigen::MatrixXd& inputs) {
  const Eigen::MatrixXd out = forward_batch(phi, theta, inputs);
  std::vector<int> labels(static_cast<std::size_t>(out.rows()));
  for (Index r = 0; r < out.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < out.cols(); ++c) {
      if (out(r, c) > out(r, best)) best = c;
    }
    labels[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return labels;
}

}  // namespace deprl
