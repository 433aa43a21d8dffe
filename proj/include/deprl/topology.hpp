#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace deprl {

// Undirected communication graph. Every node is adjacent to itself, so
// neighbors(i) is the closed neighborhood used by the consensus step.
class Graph {
 public:
  // Builds from undirected edges (i, j), i != j. Self-loops are implicit.
  Graph(std::size_t n_workers, const std::vector<std::pair<std::size_t, std::size_t>>& edges);

  std::size_t size() const noexcept { return n_; }
  bool adjacent(std::size_t i, std::size_t j) const { return adjacency_[i * n_ + j] != 0; }
  // Closed neighborhood in ascending order.
  std::vector<std::size_t> neighbors(std::size_t i) const;
  // Number of neighbors excluding self.
  std::size_t degree(std::size_t i) const;
  // Each undirected edge once, as (i, j) with i < j, lexicographic order.
  std::vector<std::pair<std::size_t, std::size_t>> edges() const;
  // Nodes reached by breadth-first traversal from `start`.
  std::size_t reachable_from(std::size_t start) const;
  bool is_connected() const { return reachable_from(0) == n_; }

  bool operator==(const Graph&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint8_t> adjacency_;
};

Graph build_ring(std::size_t n);
Graph build_complete(std::size_t n);

inline constexpr int kDefaultMaxGraphRedraws = 10'000;

// Erdos-Renyi draws, one substream per attempt, until a connected graph
// appears. Throws ConstructionFailure after `max_redraws` attempts.
Graph build_random_connected(std::size_t n, double edge_prob, std::uint64_t seed,
                             int max_redraws = kDefaultMaxGraphRedraws);

// Doubly stochastic weights supported on a graph.
class ConsensusMatrix {
 public:
  explicit ConsensusMatrix(Eigen::MatrixXd weights);

  std::size_t size() const noexcept { return static_cast<std::size_t>(weights_.rows()); }
  double operator()(std::size_t i, std::size_t j) const {
    return weights_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  const Eigen::MatrixXd& weights() const noexcept { return weights_; }

 private:
  Eigen::MatrixXd weights_;
};

// Metropolis-Hastings weights: P(i,j) = 1 / (1 + max(deg_i, deg_j)) on
// edges, the remainder on the diagonal. Symmetric, hence doubly stochastic.
ConsensusMatrix metropolis_weights(const Graph& g);

bool verify_doubly_stochastic(const Eigen::MatrixXd& p, double tol);
inline bool verify_doubly_stochastic(const ConsensusMatrix& p, double tol) {
  return verify_doubly_stochastic(p.weights(), tol);
}

struct MixingParams {
  double p = 0.0;      // smallest strictly positive weight
  double q = 0.0;      // (1 - p^N)^(1/N)
  double big_c = 0.0;  // 2 (1 + p^-N) / (1 - p^N)
};

// Throws InvalidArgument when no entry is positive or when 1 - p^N == 0
// (e.g. the identity), where the constants are undefined.
MixingParams mixing_params(const ConsensusMatrix& p_mat);

}  // namespace deprl
