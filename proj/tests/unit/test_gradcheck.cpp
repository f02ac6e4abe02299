#include <doctest.h>

#include "geoseg/gradcheck.hpp"

using namespace geoseg;

TEST_CASE("finite-difference suite passes for every op and block") {
  const auto results = run_gradcheck_suite(0);
  CHECK(results.size() >= 30);
  for (const auto& r : results) {
    INFO(r.name << " rel " << r.max_rel_error << " skipped " << r.skipped);
    CHECK(r.passed());
  }
}
