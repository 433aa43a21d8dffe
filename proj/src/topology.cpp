#include "deprl/topology.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <string>

#include "deprl/errors.hpp"
#include "deprl/rng.hpp"

namespace deprl {

Graph::Graph(std::size_t n_workers, const std::vector<std::pair<std::size_t, std::size_t>>& edges)
    : n_(n_workers), adjacency_(n_workers * n_workers, 0) {
  if (n_workers == 0) throw InvalidArgument("graph needs at least one worker");
  for (std::size_t i = 0; i < n_; ++i) adjacency_[i * n_ + i] = 1;
  for (const auto& [i, j] : edges) {
    if (i >= n_ || j >= n_) {
      throw InvalidArgument("edge (" + std::to_string(i) + ", " + std::to_string(j) +
                            ") out of range for " + std::to_string(n_) + " workers");
    }
    adjacency_[i * n_ + j] = 1;
    adjacency_[j * n_ + i] = 1;
  }
}

std::vector<std::size_t> Graph::neighbors(std::size_t i) const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < n_; ++j) {
    if (adjacent(i, j)) out.push_back(j);
  }
  return out;
}

std::size_t Graph::degree(std::size_t i) const {
  std::size_t d = 0;
  for (std::size_t j = 0; j < n_; ++j) {
    if (j != i && adjacent(i, j)) ++d;
  }
  return d;
}

std::vector<std::pair<std::size_t, std::size_t>> Graph::edges() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = i + 1; j < n_; ++j) {
      if (adjacent(i, j)) out.emplace_back(i, j);
    }
  }
  return out;
}

std::size_t Graph::reachable_from(std::size_t start) const {
  std::vector<bool> seen(n_, false);
  std::queue<std::size_t> frontier;
  frontier.push(start);
  seen[start] = true;
  std::size_t count = 0;
  while (!frontier.empty()) {
    const std::size_t u = frontier.front();
    frontier.pop();
    ++count;
    for (std::size_t v = 0; v < n_; ++v) {
      if (!seen[v] && adjacent(u, v)) {
        seen[v] = true;
        frontier.push(v);
      }
    }
  }
  return count;
}

Graph build_ring(std::size_t n) {
  if (n < 2) throw InvalidArgument("ring needs n >= 2, got " + std::to_string(n));
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t i = 0; i < n; ++i) edges.emplace_back(i, (i + 1) % n);
  return Graph(n, edges);
}

Graph build_complete(std::size_t n) {
  if (n < 2) throw InvalidArgument("complete graph needs n >= 2, got " + std::to_string(n));
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) edges.emplace_back(i, j);
  }
  return Graph(n, edges);
}

Graph build_random_connected(std::size_t n, double edge_prob, std::uint64_t seed, int max_redraws) {
  if (n < 2) throw InvalidArgument("random graph needs n >= 2, got " + std::to_string(n));
  if (!(edge_prob > 0.0 && edge_prob <= 1.0)) {
    throw InvalidArgument("edge_prob must lie in (0, 1], got " + std::to_string(edge_prob));
  }
  for (int attempt = 0; attempt < max_redraws; ++attempt) {
    Rng rng = substream(seed, 0, static_cast<std::uint64_t>(attempt), Phase::kTopology);
    std::bernoulli_distribution coin(edge_prob);
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (coin(rng)) edges.emplace_back(i, j);
      }
    }
    Graph g(n, edges);
    if (g.is_connected()) return g;
  }
  throw ConstructionFailure("no connected graph after " + std::to_string(max_redraws) +
                            " redraws (n=" + std::to_string(n) +
                            ", edge_prob=" + std::to_string(edge_prob) + ")");
}

ConsensusMatrix::ConsensusMatrix(Eigen::MatrixXd weights) : weights_(std::move(weights)) {
  if (weights_.rows() != weights_.cols() || weights_.rows() == 0) {
    throw InvalidArgument("consensus matrix must be square and nonempty");
  }
}

ConsensusMatrix metropolis_weights(const Graph& g) {
  const std::size_t n = g.size();
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (!g.adjacent(i, j)) continue;
      const double v = 1.0 / (1.0 + static_cast<double>(std::max(g.degree(i), g.degree(j))));
      w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      w(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
    }
  }
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    double off = 0.0;
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      if (j != i) off += w(i, j);
    }
    w(i, i) = 1.0 - off;
  }
  return ConsensusMatrix(std::move(w));
}

bool verify_doubly_stochastic(const Eigen::MatrixXd& p, double tol) {
  if (p.rows() != p.cols()) return false;
  if ((p.array() < -tol).any()) return false;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    if (std::abs(p.row(i).sum() - 1.0) > tol) return false;
    if (std::abs(p.col(i).sum() - 1.0) > tol) return false;
  }
  return true;
}

MixingParams mixing_params(const ConsensusMatrix& p_mat) {
  const auto& w = p_mat.weights();
  double p = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double v = w.data()[i];
    if (v > 0.0) p = std::min(p, v);
  }
  if (!std::isfinite(p)) throw InvalidArgument("consensus matrix has no positive entry");
  const double n = static_cast<double>(p_mat.size());
  const double p_pow_n = std::pow(p, n);
  const double gap = 1.0 - p_pow_n;
  if (!(gap > 0.0)) {
    throw InvalidArgument("mixing constants undefined: smallest positive weight p=" +
                          std::to_string(p) + " gives 1 - p^N = 0 (no information exchange)");
  }
  MixingParams out;
  out.p = p;
  out.q = std::pow(gap, 1.0 / n);
  out.big_c = 2.0 * (1.0 + 1.0 / p_pow_n) / gap;
  return out;
}

}  // namespace deprl
