#include "deprl/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "deprl/errors.hpp"
#include "deprl/numfmt.hpp"

namespace deprl {

namespace {

constexpr const char* kMagic = "DEPRL-CHECKPOINT";
constexpr int kVersion = 1;

void write_vector(std::ostream& out, const char* tag, const Eigen::VectorXd& v) {
  out << tag;
  for (Index i = 0; i < v.size(); ++i) out << ' ' << format_double(v[i]);
  out << '\n';
}

struct Tokens {
  std::istream& in;
  const std::string& path;
  long line = 0;

  std::vector<std::string> next() {
    std::string text;
    if (!std::getline(in, text)) throw MalformedFile(path, "unexpected end of file after line " + std::to_string(line));
    ++line;
    std::istringstream ss(text);
    std::vector<std::string> out;
    for (std::string t; ss >> t;) out.push_back(t);
    return out;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw MalformedFile(path, "line " + std::to_string(line) + ": " + what);
  }
  long long integer(const std::string& s) const {
    auto v = parse_int(s);
    if (!v) fail("bad integer '" + s + "'");
    return *v;
  }
  double real(const std::string& s) const {
    auto v = parse_double(s);
    if (!v) fail("bad real '" + s + "'");
    return *v;
  }
  Eigen::VectorXd vector(const std::vector<std::string>& toks, const char* tag, Index expected) const {
    if (toks.empty() || toks[0] != tag) fail(std::string("expected '") + tag + "'");
    if (static_cast<Index>(toks.size()) != expected + 1) fail(std::string("wrong number of values for ") + tag);
    Eigen::VectorXd v(expected);
    for (Index i = 0; i < expected; ++i) v[i] = real(toks[static_cast<std::size_t>(i) + 1]);
    return v;
  }
};

}  // namespace

void save_checkpoint(const Checkpoint& cp, const std::string& path) {
  if (cp.states.empty()) throw InvalidArgument("checkpoint has no workers");
  const Representation& phi = cp.states.front().phi;
  const Head& head = cp.states.front().theta;
  std::ostringstream out;
  out << kMagic << ' ' << kVersion << '\n';
  out << "next_round " << cp.next_round << " records " << cp.records << " m_k_sum " << format_double(cp.m_k_sum)
      << '\n';
  out << "n_workers " << cp.states.size() << '\n';
  out << "representation " << to_string(phi.kind()) << ' ' << phi.input_dim() << ' ' << phi.feature_dim() << ' '
      << phi.hidden_dim() << '\n';
  out << "head " << head.output_dim() << ' ' << head.feature_dim() << '\n';
  for (const auto& w : cp.states) {
    if (!w.phi.same_shape(phi) || !w.theta.same_shape(head)) {
      throw InvalidArgument("checkpoint workers disagree on parameter shapes");
    }
    out << "worker " << w.worker_id << '\n';
    write_vector(out, "phi", w.phi.flat());
    write_vector(out, "theta", w.theta.flat());
  }
  out << "end\n";
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError(path, "cannot open for writing");
  file << out.str();
  file.flush();
  if (!file) throw IoError(path, "write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError(path, "cannot open for reading");
  Tokens t{file, path};

  auto toks = t.next();
  if (toks.size() != 2 || toks[0] != kMagic || t.integer(toks[1]) != kVersion) t.fail("not a version 1 checkpoint");
  Checkpoint cp;
  toks = t.next();
  if (toks.size() != 6 || toks[0] != "next_round" || toks[2] != "records" || toks[4] != "m_k_sum") {
    t.fail("expected 'next_round K records R m_k_sum S'");
  }
  cp.next_round = static_cast<long>(t.integer(toks[1]));
  cp.records = static_cast<std::size_t>(t.integer(toks[3]));
  cp.m_k_sum = t.real(toks[5]);

  toks = t.next();
  if (toks.size() != 2 || toks[0] != "n_workers") t.fail("expected 'n_workers N'");
  const auto n = static_cast<std::size_t>(t.integer(toks[1]));

  toks = t.next();
  if (toks.size() != 5 || toks[0] != "representation") t.fail("expected representation header");
  RepresentationKind kind;
  if (toks[1] == "linear") {
    kind = RepresentationKind::kLinear;
  } else if (toks[1] == "nonlinear") {
    kind = RepresentationKind::kOneHiddenTanh;
  } else {
    t.fail("unknown representation kind '" + toks[1] + "'");
  }
  const Index d = t.integer(toks[2]);
  const Index z = t.integer(toks[3]);
  const Index h = t.integer(toks[4]);

  toks = t.next();
  if (toks.size() != 3 || toks[0] != "head") t.fail("expected head header");
  const Index c = t.integer(toks[1]);
  const Index hz = t.integer(toks[2]);

  try {
    const Index phi_size = Representation::zeros(kind, d, z, h).parameter_count();
    const Index head_size = Head::zeros(c, hz).parameter_count();
    for (std::size_t i = 0; i < n; ++i) {
      toks = t.next();
      if (toks.size() != 2 || toks[0] != "worker") t.fail("expected 'worker ID'");
      WorkerState w;
      w.worker_id = static_cast<std::size_t>(t.integer(toks[1]));
      w.phi = Representation::from_flat(kind, d, z, h, t.vector(t.next(), "phi", phi_size));
      w.theta = Head::from_flat(c, hz, t.vector(t.next(), "theta", head_size));
      cp.states.push_back(std::move(w));
    }
  } catch (const InvalidArgument& e) {
    t.fail(e.what());
  }
  toks = t.next();
  if (toks.size() != 1 || toks[0] != "end") t.fail("expected 'end'");
  return cp;
}

}  // namespace deprl
