#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "deprl/model.hpp"

namespace deprl {

struct Shard {
  std::size_t worker_id = 0;
  Examples train;
  Examples test;
  // Per-class example counts over train and test; empty for regression.
  std::vector<std::size_t> class_histogram;

  bool operator==(const Shard&) const = default;
};

enum class TargetKind { kRegression, kClassification };

struct PlantedTaskOptions {
  std::size_t n_workers = 8;
  Index input_dim = 20;    // d
  Index feature_dim = 3;   // z
  Index samples_per_worker = 100;
  double noise_std = 0.0;
  double heterogeneity = 0.5;  // in [0, 1]
  std::uint64_t seed = 1;
  TargetKind target = TargetKind::kRegression;
  Index output_dim = 1;  // regression outputs, or number of classes

  bool operator==(const PlantedTaskOptions&) const = default;
};

// Synthetic multi-worker task with a planted linear representation.
// Worker i's targets are theta_i* phi* x (+ noise); for classification the
// label is the argmax of that noisy score vector.
struct PlantedTask {
  Representation truth_phi;  // linear, orthonormal rows
  std::vector<Head> truth_heads;
  double noise_std = 0.0;
  std::vector<Shard> shards;
};

PlantedTask generate_planted(const PlantedTaskOptions& options);

// Label-skew partition: for each class draw worker proportions from
// Dir(pi, ..., pi), allocate by largest remainder, repair empty workers,
// then split every worker 80/20 train/test stratified by class.
std::vector<Shard> dirichlet_partition(const Examples& examples, int n_classes, std::size_t n_workers,
                                       double pi, std::uint64_t seed);

// Text shard file; layout documented in docs/file_formats.md.
void save_shards(const std::vector<Shard>& shards, const std::string& path);
std::vector<Shard> load_shards(const std::string& path);

}  // namespace deprl
