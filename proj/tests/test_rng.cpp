#include <doctest.h>

#include <algorithm>
#include <set>

#include "deprl/numfmt.hpp"
#include "deprl/rng.hpp"

using namespace deprl;

TEST_CASE("derive_seed is a pure function of its four keys") {
  CHECK(derive_seed(1, 2, 3, 4) == derive_seed(1, 2, 3, 4));
  std::set<std::uint64_t> seen;
  for (std::uint64_t m : {1, 2}) {
    for (std::uint64_t w : {0, 1}) {
      for (std::uint64_t r : {0, 1}) {
        for (std::uint64_t p : {0, 1}) seen.insert(derive_seed(m, w, r, p));
      }
    }
  }
  CHECK(seen.size() == 16);
}

TEST_CASE("adding workers leaves existing substreams untouched") {
  // Worker 3's stream depends only on its own key, never on how many
  // streams were created before it.
  Rng a = substream(7, 3, 10, Phase::kRepresentationStep);
  for (int w = 0; w < 50; ++w) (void)substream(7, static_cast<std::uint64_t>(w), 10, Phase::kRepresentationStep)();
  Rng b = substream(7, 3, 10, Phase::kRepresentationStep);
  CHECK(a() == b());
}

TEST_CASE("sample_without_replacement returns sorted distinct indices") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto rows = sample_without_replacement(30, 12, rng);
    REQUIRE(rows.size() == 12);
    CHECK(std::is_sorted(rows.begin(), rows.end()));
    CHECK(std::adjacent_find(rows.begin(), rows.end()) == rows.end());
    CHECK(rows.front() >= 0);
    CHECK(rows.back() < 30);
  }
}

TEST_CASE("oversized sample returns the whole population in order") {
  Rng rng(5);
  const auto rows = sample_without_replacement(4, 10, rng);
  CHECK(rows == std::vector<std::ptrdiff_t>{0, 1, 2, 3});
}

TEST_CASE("number formatting round-trips exactly") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0}) {
    const auto back = parse_double(format_double(v));
    REQUIRE(back);
    CHECK(*back == v);
  }
  CHECK(format_double(0.5) == "0.5");
  CHECK_FALSE(parse_double("1.5x"));
  CHECK_FALSE(parse_int("12 "));
  CHECK(parse_int("-4") == -4);
}
