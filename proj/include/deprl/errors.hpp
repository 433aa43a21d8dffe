#pragma once

#include <stdexcept>
#include <string>

namespace deprl {

// Precondition or shape violation in a public call.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A randomized constructor gave up after its retry budget.
class ConstructionFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem failure. what() names the offending path.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& detail)
      : std::runtime_error(path + ": " + detail), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// A file was readable but its contents do not follow the expected layout.
class MalformedFile : public std::runtime_error {
 public:
  MalformedFile(const std::string& path, const std::string& detail)
      : std::runtime_error(path + ": malformed file: " + detail), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Training stopped because a worker produced a non-finite parameter.
class RunAborted : public std::runtime_error {
 public:
  RunAborted(std::size_t worker, long round, const std::string& detail)
      : std::runtime_error("run aborted at round " + std::to_string(round) + ", worker " +
                           std::to_string(worker) + ": " + detail),
        worker_(worker),
        round_(round) {}
  std::size_t worker() const noexcept { return worker_; }
  long round() const noexcept { return round_; }

 private:
  std::size_t worker_;
  long round_;
};

}  // namespace deprl
