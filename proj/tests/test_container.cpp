#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "petsynth/container.hpp"
#include "petsynth/errors.hpp"
#include "petsynth/rng.hpp"
#include "petsynth/util.hpp"

using namespace petsynth;

namespace {
fs::path temp_file(const char* name) {
  auto p = fs::temp_directory_path() / name;
  fs::remove(p);
  return p;
}
}  // namespace

TEST_CASE("container round trip preserves names, shapes and f32 values") {
  Container c;
  Rng rng(5);
  std::vector<double> vals(24);
  for (auto& v : vals) v = rng.normal();
  // Values survive a round trip exactly once cast to f32.
  for (auto& v : vals) v = static_cast<float>(v);
  c.put("layer/weight", {2, 3, 4}, vals);
  c.put_scalar("meta/version", 3.0);

  auto path = temp_file("petsynth_container_test.pst");
  c.save(path);
  auto c2 = Container::load(path);

  CHECK(c2.size() == 2);
  CHECK(c2.get("layer/weight").extents == std::vector<std::int64_t>{2, 3, 4});
  CHECK(c2.get("layer/weight").values == vals);
  CHECK(c2.get_scalar("meta/version") == 3.0);
  fs::remove(path);
}

TEST_CASE("save is byte-stable across repeated writes") {
  Container c;
  c.put("b", {2}, {1.0, 2.0});
  c.put("a", {1}, {3.0});
  auto p1 = temp_file("petsynth_c1.pst");
  auto p2 = temp_file("petsynth_c2.pst");
  c.save(p1);
  c.save(p2);
  CHECK(hash_file(p1) == hash_file(p2));
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("load rejects garbage") {
  auto path = temp_file("petsynth_garbage.pst");
  write_file_text(path, "this is not a container");
  CHECK_THROWS_AS(Container::load(path), IoError);
  fs::remove(path);
}

TEST_CASE("missing tensor name throws") {
  Container c;
  CHECK_THROWS_AS(c.get("nope"), IoError);
}
