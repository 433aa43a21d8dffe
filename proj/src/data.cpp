#include "deprl/data.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "deprl/errors.hpp"
#include "deprl/numfmt.hpp"
#include "deprl/rng.hpp"

namespace deprl {

namespace {

// Substream tags inside Phase::kData, keyed by the "worker" slot.
constexpr std::uint64_t kTagRepresentation = 1ull << 40;
constexpr std::uint64_t kTagSharedHead = (1ull << 40) + 1;

Eigen::MatrixXd gaussian(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  // Fill row by row so the draw order does not depend on storage order.
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = n(rng);
  }
  return m;
}

std::vector<std::size_t> histogram(const std::vector<int>& labels, int n_classes) {
  std::vector<std::size_t> h(static_cast<std::size_t>(n_classes), 0);
  for (int l : labels) ++h[static_cast<std::size_t>(l)];
  return h;
}

}  // namespace

PlantedTask generate_planted(const PlantedTaskOptions& o) {
  if (o.feature_dim > o.input_dim) {
    throw InvalidArgument("planted task needs z <= d (z=" + std::to_string(o.feature_dim) +
                          ", d=" + std::to_string(o.input_dim) + ")");
  }
  if (o.feature_dim < 1 || o.n_workers < 1 || o.output_dim < 1) {
    throw InvalidArgument("planted task dims and worker count must be positive");
  }
  if (o.samples_per_worker < 2) throw InvalidArgument("planted task needs samples_per_worker >= 2");
  if (!(o.heterogeneity >= 0.0 && o.heterogeneity <= 1.0)) {
    throw InvalidArgument("heterogeneity must lie in [0, 1]");
  }
  if (!(o.noise_std >= 0.0)) throw InvalidArgument("noise_std must be non-negative");
  if (o.target == TargetKind::kClassification && o.output_dim < 2) {
    throw InvalidArgument("classification needs at least 2 classes");
  }

  const Index d = o.input_dim;
  const Index z = o.feature_dim;
  const Index c = o.output_dim;
  PlantedTask task;
  task.noise_std = o.noise_std;

  {
    Rng rng = substream(o.seed, kTagRepresentation, 0, Phase::kData);
    const Eigen::MatrixXd g = gaussian(d, z, rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, z);
    task.truth_phi = Representation::zeros(RepresentationKind::kLinear, d, z);
    task.truth_phi.linear() = q.transpose();
  }

  Eigen::MatrixXd shared_head;
  {
    Rng rng = substream(o.seed, kTagSharedHead, 0, Phase::kData);
    shared_head = gaussian(c, z, rng);
  }

  const Index n_test = std::max<Index>(1, o.samples_per_worker / 5);
  const Index n_train = o.samples_per_worker - n_test;
  std::normal_distribution<double> normal(0.0, 1.0);

  for (std::size_t w = 0; w < o.n_workers; ++w) {
    Rng rng = substream(o.seed, w, 0, Phase::kData);
    const Eigen::MatrixXd own = gaussian(c, z, rng);
    Head head = Head::zeros(c, z);
    head.weights() = (1.0 - o.heterogeneity) * shared_head + o.heterogeneity * own;

    const Eigen::MatrixXd x = gaussian(o.samples_per_worker, d, rng);
    Eigen::MatrixXd y = forward_batch(task.truth_phi, head, x);
    if (o.noise_std > 0.0) y += o.noise_std * gaussian(y.rows(), y.cols(), rng);

    Shard shard;
    shard.worker_id = w;
    shard.train.inputs = x.topRows(n_train);
    shard.test.inputs = x.bottomRows(n_test);
    if (o.target == TargetKind::kRegression) {
      shard.train.targets = y.topRows(n_train);
      shard.test.targets = y.bottomRows(n_test);
    } else {
      std::vector<int> labels(static_cast<std::size_t>(y.rows()));
      for (Index r = 0; r < y.rows(); ++r) {
        Index best = 0;
        for (Index k = 1; k < c; ++k) {
          if (y(r, k) > y(r, best)) best = k;
        }
        labels[static_cast<std::size_t>(r)] = static_cast<int>(best);
      }
      shard.class_histogram = histogram(labels, static_cast<int>(c));
      shard.train.labels.assign(labels.begin(), labels.begin() + n_train);
      shard.test.labels.assign(labels.begin() + n_train, labels.end());
    }
    task.truth_heads.push_back(std::move(head));
    task.shards.push_back(std::move(shard));
  }
  return task;
}

std::vector<Shard> dirichlet_partition(const Examples& examples, int n_classes, std::size_t n_workers,
                                       double pi, std::uint64_t seed) {
  if (!examples.is_classification()) throw InvalidArgument("dirichlet_partition needs labeled examples");
  if (n_workers < 2) throw InvalidArgument("dirichlet_partition needs n_workers >= 2");
  if (!(pi > 0.0)) throw InvalidArgument("Dirichlet concentration must be positive");
  if (n_classes < 1) throw InvalidArgument("n_classes must be positive");
  if (static_cast<std::size_t>(examples.size()) < n_workers) {
    throw InvalidArgument("fewer examples (" + std::to_string(examples.size()) + ") than workers (" +
                          std::to_string(n_workers) + ")");
  }

  std::vector<std::vector<std::ptrdiff_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t r = 0; r < examples.labels.size(); ++r) {
    const int l = examples.labels[r];
    if (l < 0 || l >= n_classes) throw InvalidArgument("label " + std::to_string(l) + " out of range");
    by_class[static_cast<std::size_t>(l)].push_back(static_cast<std::ptrdiff_t>(r));
  }
  for (int k = 0; k < n_classes; ++k) {
    if (by_class[static_cast<std::size_t>(k)].empty()) {
      throw InvalidArgument("class " + std::to_string(k) + " has no examples");
    }
  }

  // owned[w][k] = example rows of class k given to worker w.
  std::vector<std::vector<std::vector<std::ptrdiff_t>>> owned(
      n_workers, std::vector<std::vector<std::ptrdiff_t>>(static_cast<std::size_t>(n_classes)));

  for (int k = 0; k < n_classes; ++k) {
    auto rows = by_class[static_cast<std::size_t>(k)];
    Rng rng = substream(seed, static_cast<std::uint64_t>(k), 0, Phase::kPartition);
    std::shuffle(rows.begin(), rows.end(), rng);

    std::gamma_distribution<double> gamma(pi, 1.0);
    std::vector<double> share(n_workers);
    for (auto& s : share) s = gamma(rng);
    double total = std::accumulate(share.begin(), share.end(), 0.0);
    if (!(total > 0.0)) {
      // Every gamma draw underflowed (tiny pi): the whole class goes to one worker.
      std::fill(share.begin(), share.end(), 0.0);
      share[std::uniform_int_distribution<std::size_t>(0, n_workers - 1)(rng)] = 1.0;
      total = 1.0;
    }

    // Largest remainder; ties go to the lower worker index.
    const auto count = static_cast<double>(rows.size());
    std::vector<std::size_t> alloc(n_workers);
    std::vector<std::pair<double, std::size_t>> remainders(n_workers);
    std::size_t assigned = 0;
    for (std::size_t w = 0; w < n_workers; ++w) {
      const double exact = count * share[w] / total;
      alloc[w] = static_cast<std::size_t>(std::floor(exact));
      assigned += alloc[w];
      remainders[w] = {exact - std::floor(exact), w};
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < rows.size(); ++i, ++assigned) ++alloc[remainders[i % n_workers].second];

    std::size_t cursor = 0;
    for (std::size_t w = 0; w < n_workers; ++w) {
      auto& dst = owned[w][static_cast<std::size_t>(k)];
      dst.assign(rows.begin() + static_cast<std::ptrdiff_t>(cursor),
                 rows.begin() + static_cast<std::ptrdiff_t>(cursor + alloc[w]));
      cursor += alloc[w];
    }
  }

  auto total_of = [&](std::size_t w) {
    std::size_t t = 0;
    for (const auto& v : owned[w]) t += v.size();
    return t;
  };
  // Repair empty workers by taking one example from the largest shard.
  for (std::size_t w = 0; w < n_workers; ++w) {
    if (total_of(w) > 0) continue;
    std::size_t donor = 0;
    for (std::size_t v = 1; v < n_workers; ++v) {
      if (total_of(v) > total_of(donor)) donor = v;
    }
    for (auto& cls : owned[donor]) {
      if (cls.empty()) continue;
      const auto row = cls.back();
      cls.pop_back();
      owned[w][static_cast<std::size_t>(examples.labels[static_cast<std::size_t>(row)])].push_back(row);
      break;
    }
  }

  std::vector<Shard> shards(n_workers);
  for (std::size_t w = 0; w < n_workers; ++w) {
    std::vector<std::ptrdiff_t> train_rows;
    std::vector<std::ptrdiff_t> test_rows;
    for (const auto& cls : owned[w]) {
      const std::size_t n_test = cls.size() / 5;
      train_rows.insert(train_rows.end(), cls.begin(), cls.end() - static_cast<std::ptrdiff_t>(n_test));
      test_rows.insert(test_rows.end(), cls.end() - static_cast<std::ptrdiff_t>(n_test), cls.end());
    }
    // Small shards: still keep one test example when there are two or more.
    if (test_rows.empty() && train_rows.size() >= 2) {
      test_rows.push_back(train_rows.back());
      train_rows.pop_back();
    }
    Shard& s = shards[w];
    s.worker_id = w;
    s.train = examples.subset(train_rows);
    s.test = examples.subset(test_rows);
    s.class_histogram.assign(static_cast<std::size_t>(n_classes), 0);
    for (std::size_t k = 0; k < owned[w].size(); ++k) s.class_histogram[k] = owned[w][k].size();
  }
  return shards;
}

// ---------------------------------------------------------------------------
// Shard file I/O

namespace {

constexpr const char* kShardMagic = "DEPRL-SHARDS";
constexpr int kShardVersion = 1;

void write_rows(std::ostream& out, const Examples& ex) {
  for (Index r = 0; r < ex.size(); ++r) {
    if (ex.is_classification()) {
      out << ex.labels[static_cast<std::size_t>(r)];
    } else {
      for (Index k = 0; k < ex.targets.cols(); ++k) {
        if (k) out << ' ';
        out << format_double(ex.targets(r, k));
      }
    }
    for (Index k = 0; k < ex.inputs.cols(); ++k) out << ' ' << format_double(ex.inputs(r, k));
    out << '\n';
  }
}

class LineReader {
 public:
  LineReader(std::istream& in, const std::string& path) : in_(in), path_(path) {}

  std::vector<std::string> tokens(const char* what) {
    std::string line;
    if (!std::getline(in_, line)) fail(std::string("unexpected end of file, expected ") + what);
    ++line_no_;
    std::istringstream ss(line);
    std::vector<std::string> out;
    for (std::string t; ss >> t;) out.push_back(t);
    return out;
  }

  [[noreturn]] void fail(const std::string& detail) const {
    throw MalformedFile(path_, "line " + std::to_string(line_no_ + 1) + ": " + detail);
  }

  long long integer(const std::string& token) const {
    auto v = parse_int(token);
    if (!v || *v < 0) fail("expected a non-negative integer, got '" + token + "'");
    return *v;
  }

  double real(const std::string& token) const {
    auto v = parse_double(token);
    if (!v) fail("expected a real number, got '" + token + "'");
    return *v;
  }

  void expect(const std::vector<std::string>& toks, std::size_t index, const std::string& word) const {
    if (toks.size() <= index || toks[index] != word) fail("expected '" + word + "'");
  }

 private:
  std::istream& in_;
  std::string path_;
  long line_no_ = 0;
};

Examples read_rows(LineReader& lr, long long count, Index d, Index c, bool classification) {
  Examples ex;
  ex.inputs.resize(count, d);
  if (!classification) ex.targets.resize(count, c);
  const std::size_t lead = classification ? 1 : static_cast<std::size_t>(c);
  for (long long r = 0; r < count; ++r) {
    const auto toks = lr.tokens("an example row");
    if (toks.size() != lead + static_cast<std::size_t>(d)) {
      lr.fail("example row has " + std::to_string(toks.size()) + " fields, expected " +
              std::to_string(lead + static_cast<std::size_t>(d)));
    }
    if (classification) {
      const long long label = lr.integer(toks[0]);
      if (label >= c) lr.fail("label " + toks[0] + " out of range");
      ex.labels.push_back(static_cast<int>(label));
    } else {
      for (Index k = 0; k < c; ++k) ex.targets(r, k) = lr.real(toks[static_cast<std::size_t>(k)]);
    }
    for (Index k = 0; k < d; ++k) ex.inputs(r, k) = lr.real(toks[lead + static_cast<std::size_t>(k)]);
  }
  return ex;
}

}  // namespace

void save_shards(const std::vector<Shard>& shards, const std::string& path) {
  if (shards.empty()) throw InvalidArgument("no shards to save");
  const bool classification = shards.front().train.is_classification();
  const Index d = shards.front().train.input_dim();
  Index c = 0;
  if (classification) {
    c = static_cast<Index>(shards.front().class_histogram.size());
  } else {
    c = shards.front().train.targets.cols();
  }
  for (const auto& s : shards) {
    if (s.train.is_classification() != classification || s.train.input_dim() != d ||
        (s.test.size() > 0 && s.test.input_dim() != d)) {
      throw InvalidArgument("shards disagree on task layout");
    }
  }

  std::ostringstream out;
  out << kShardMagic << ' ' << kShardVersion << '\n';
  out << "task " << (classification ? "classification" : "regression") << '\n';
  out << "n_workers " << shards.size() << " d " << d << " c " << c << '\n';
  out << "counts";
  for (const auto& s : shards) out << ' ' << s.train.size() << ' ' << s.test.size();
  out << '\n';
  for (const auto& s : shards) {
    out << "worker " << s.worker_id << '\n';
    if (classification) {
      out << "histogram";
      for (auto h : s.class_histogram) out << ' ' << h;
      out << '\n';
    }
    out << "train\n";
    write_rows(out, s.train);
    out << "test\n";
    write_rows(out, s.test);
  }
  out << "end\n";

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError(path, "cannot open for writing");
  file << out.str();
  file.flush();
  if (!file) throw IoError(path, "write failed");
}

std::vector<Shard> load_shards(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError(path, "cannot open for reading");
  LineReader lr(file, path);

  auto header = lr.tokens("header");
  lr.expect(header, 0, kShardMagic);
  if (header.size() != 2 || lr.integer(header[1]) != kShardVersion) lr.fail("unsupported version");

  auto task = lr.tokens("task line");
  lr.expect(task, 0, "task");
  if (task.size() != 2 || (task[1] != "classification" && task[1] != "regression")) {
    lr.fail("task must be classification or regression");
  }
  const bool classification = task[1] == "classification";

  auto dims = lr.tokens("dimension line");
  if (dims.size() != 6) lr.fail("dimension line needs 'n_workers N d D c C'");
  lr.expect(dims, 0, "n_workers");
  lr.expect(dims, 2, "d");
  lr.expect(dims, 4, "c");
  const auto n = static_cast<std::size_t>(lr.integer(dims[1]));
  const auto d = static_cast<Index>(lr.integer(dims[3]));
  const auto c = static_cast<Index>(lr.integer(dims[5]));
  if (n == 0 || d == 0 || c == 0) lr.fail("zero dimension");

  auto counts = lr.tokens("counts line");
  lr.expect(counts, 0, "counts");
  if (counts.size() != 1 + 2 * n) lr.fail("counts line needs two entries per worker");

  std::vector<Shard> shards;
  shards.reserve(n);
  for (std::size_t w = 0; w < n; ++w) {
    Shard s;
    auto head = lr.tokens("worker line");
    lr.expect(head, 0, "worker");
    if (head.size() != 2) lr.fail("worker line needs an id");
    s.worker_id = static_cast<std::size_t>(lr.integer(head[1]));
    if (classification) {
      auto hist = lr.tokens("histogram line");
      lr.expect(hist, 0, "histogram");
      if (hist.size() != 1 + static_cast<std::size_t>(c)) lr.fail("histogram needs c entries");
      for (std::size_t k = 1; k < hist.size(); ++k) {
        s.class_histogram.push_back(static_cast<std::size_t>(lr.integer(hist[k])));
      }
    }
    lr.expect(lr.tokens("train marker"), 0, "train");
    s.train = read_rows(lr, lr.integer(counts[1 + 2 * w]), d, c, classification);
    lr.expect(lr.tokens("test marker"), 0, "test");
    s.test = read_rows(lr, lr.integer(counts[2 + 2 * w]), d, c, classification);
    shards.push_back(std::move(s));
  }
  lr.expect(lr.tokens("end marker"), 0, "end");
  return shards;
}

}  // namespace deprl
