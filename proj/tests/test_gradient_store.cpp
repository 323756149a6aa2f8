#include <doctest.h>

#include <algorithm>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "in2core/error.hpp"
#include "in2core/gradient_store.hpp"
#include "in2core/text.hpp"
#include "test_util.hpp"

using namespace in2core;
using testutil::ManifestBuilder;
using testutil::TempDir;

namespace {

GradientManifest sample_manifest() {
  ManifestBuilder b(Split::train, {2, 3});
  b.add("ex0", {{1.0f, -2.0f}, {0.5f, 0.0f, 3.25f}}, 0.7f, 5);
  b.add("ex1", {{0.0f, 0.125f}, {-1.0f, 2.0f, -0.5f}}, 1.2f, 9);
  b.add("ex2", {{4.0f, 4.0f}, {1e-7f, -3.5f, 2.75f}}, 0.1f, 2);
  return b.build();
}

ErrorCode code_of_read(const std::string& path) {
  try {
    read_manifest(path);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected read_manifest to throw");
  return ErrorCode::invalid_argument;
}

}  // namespace

TEST_CASE("manifest round trip is bit exact") {
  TempDir dir;
  const GradientManifest m = sample_manifest();
  const auto path = dir.sub("g.in2g");
  write_manifest(m, path);
  const GradientManifest back = read_manifest(path);
  CHECK(back == m);
  CHECK(back.split == Split::train);
  CHECK(back.model_tag == "test-model");
  CHECK(back.created_at == "1970-01-01T00:00:00Z");
}

TEST_CASE("sidecar carries metadata and is optional on read") {
  TempDir dir;
  GradientManifest m = sample_manifest();
  m.split = Split::validation;
  const auto path = dir.sub("g.in2g");
  write_manifest(m, path);

  const auto meta = nlohmann::json::parse(read_text_file(path + ".meta.json"));
  CHECK(meta["split"] == "validation");
  CHECK(meta["model_tag"] == "test-model");
  CHECK(meta["created_at"] == "1970-01-01T00:00:00Z");

  std::filesystem::remove(path + ".meta.json");
  const GradientManifest bare = read_manifest(path);
  CHECK(bare.examples == m.examples);
  CHECK(bare.layers == m.layers);
}

TEST_CASE("written size matches the declared layout") {
  TempDir dir;
  // one layer "layer0" of width 2, ids "a" and "b":
  //  header: 4 magic + 2 version + 2 layer count + (2 + 6 name + 4 dim) = 20
  //  example count: 8 -> payload starts at 28
  //  per example: 2 + 1 id + 4 loss + 4 tokens + 2*4 payload = 19
  ManifestBuilder b(Split::train, {2});
  b.add("a", {{1.0f, 2.0f}});
  b.add("b", {{3.0f, 4.0f}});
  const GradientManifest m = b.build();
  const auto path = dir.sub("g.in2g");
  const uint64_t bytes = write_manifest(m, path);
  CHECK(bytes == 28 + 19 + 19);
  CHECK(std::filesystem::file_size(path) == bytes);
  CHECK(manifest_overhead_bytes(m) == 28 + 2 * (2 + 1));
  // payload accounting: everything that is not structure is f32 gradient data
  const uint64_t payload = bytes - manifest_overhead_bytes(m) - m.size() * 8;
  CHECK(payload == m.size() * m.total_dim() * 4);
}

TEST_CASE("header corruption is reported as corrupt_header") {
  TempDir dir;
  const auto path = dir.sub("g.in2g");
  write_manifest(sample_manifest(), path);
  const std::string good = read_text_file(path);
  std::filesystem::remove(path + ".meta.json");

  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    write_text_file(path, bad);
    CHECK(code_of_read(path) == ErrorCode::corrupt_header);
  }
  SUBCASE("unsupported version") {
    std::string bad = good;
    bad[4] = 99;
    write_text_file(path, bad);
    CHECK(code_of_read(path) == ErrorCode::corrupt_header);
  }
  SUBCASE("file ends inside the magic") {
    write_text_file(path, good.substr(0, 3));
    CHECK(code_of_read(path) == ErrorCode::corrupt_header);
  }
  SUBCASE("file ends inside the layer table") {
    write_text_file(path, good.substr(0, 10));
    CHECK(code_of_read(path) == ErrorCode::corrupt_header);
  }
  SUBCASE("file ends before the example count") {
    // header is 4+2+2 + (2+6+4) + (2+6+4) = 32 bytes; count needs 8 more
    write_text_file(path, good.substr(0, 35));
    CHECK(code_of_read(path) == ErrorCode::corrupt_header);
  }
}

TEST_CASE("payload truncation and trailing bytes are distinguished") {
  TempDir dir;
  const auto path = dir.sub("g.in2g");
  const uint64_t bytes = write_manifest(sample_manifest(), path);
  const std::string good = read_text_file(path);
  std::filesystem::remove(path + ".meta.json");
  REQUIRE(good.size() == bytes);

  SUBCASE("cut inside the first example") {
    write_text_file(path, good.substr(0, 60));
    CHECK(code_of_read(path) == ErrorCode::truncated_payload);
  }
  SUBCASE("cut inside the last example") {
    write_text_file(path, good.substr(0, good.size() - 5));
    CHECK(code_of_read(path) == ErrorCode::truncated_payload);
  }
  SUBCASE("trailing bytes after the declared examples") {
    write_text_file(path, good + std::string("xyz"));
    CHECK(code_of_read(path) == ErrorCode::dimension_mismatch);
  }
}

TEST_CASE("validation rejects malformed manifests") {
  auto expect_invalid = [](const GradientManifest& m) {
    try {
      validate_manifest(m);
      FAIL("expected validation to throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::dimension_mismatch);
    }
  };

  GradientManifest base = sample_manifest();

  SUBCASE("duplicate example ids") {
    GradientManifest m = base;
    m.examples[1].example_id = m.examples[0].example_id;
    CHECK_THROWS_AS(validate_manifest(m), Error);
  }
  SUBCASE("wrong block count") {
    GradientManifest m = base;
    m.examples[0].per_layer.pop_back();
    expect_invalid(m);
  }
  SUBCASE("wrong block width") {
    GradientManifest m = base;
    m.examples[2].per_layer[1] = VecF::Zero(4);
    expect_invalid(m);
  }
  SUBCASE("non finite value") {
    GradientManifest m = base;
    m.examples[0].per_layer[0][0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(validate_manifest(m), Error);
  }
  SUBCASE("no layers") {
    GradientManifest m;
    m.split = Split::train;
    CHECK_THROWS_AS(validate_manifest(m), Error);
  }
  SUBCASE("non contiguous layer indices") {
    GradientManifest m = base;
    m.layers[1].layer_index = 5;
    CHECK_THROWS_AS(validate_manifest(m), Error);
  }
  SUBCASE("zero width layer") {
    GradientManifest m = base;
    m.layers[0].dim = 0;
    CHECK_THROWS_AS(validate_manifest(m), Error);
  }
}

TEST_CASE("write refuses an invalid manifest without touching the file") {
  TempDir dir;
  GradientManifest m = sample_manifest();
  m.examples[1].example_id = m.examples[0].example_id;
  const auto path = dir.sub("g.in2g");
  CHECK_THROWS_AS(write_manifest(m, path), Error);
  CHECK_FALSE(std::filesystem::exists(path));
}

TEST_CASE("restrict_layers keeps a prefix and composes") {
  const GradientManifest m = sample_manifest();

  const GradientManifest one = restrict_layers(m, 1);
  CHECK(one.layer_count() == 1);
  CHECK(one.total_dim() == 2);
  for (size_t i = 0; i < m.size(); ++i) {
    REQUIRE(one.examples[i].per_layer.size() == 1);
    CHECK(one.examples[i].per_layer[0] == m.examples[i].per_layer[0]);
    CHECK(one.examples[i].loss_value == m.examples[i].loss_value);
    CHECK(one.examples[i].token_count == m.examples[i].token_count);
  }

  // restricting to every layer is the identity
  CHECK(restrict_layers(m, 2) == m);
  // composition: first two then one equals one directly
  CHECK(restrict_layers(restrict_layers(m, 2), 1) == one);

  CHECK_THROWS_AS(restrict_layers(m, 0), Error);
  CHECK_THROWS_AS(restrict_layers(m, 3), Error);
}

TEST_CASE("mean gradient matches the hand computed average") {
  ManifestBuilder b(Split::train, {2});
  b.add("a", {{1.0f, 0.0f}}, 3.0f, 4);
  b.add("b", {{0.0f, 1.0f}}, 1.0f, 2);
  b.add("c", {{2.0f, 2.0f}}, 2.0f, 6);
  const GradientManifest m = b.build();

  const ExampleGradient g = mean_gradient(m);
  CHECK(g.example_id == "mean");
  CHECK(g.token_count == 1);
  REQUIRE(g.per_layer.size() == 1);
  CHECK(g.per_layer[0][0] == doctest::Approx(1.0));
  CHECK(g.per_layer[0][1] == doctest::Approx(1.0));
  CHECK(g.loss_value == doctest::Approx(2.0));
}

TEST_CASE("mean gradient of identical rows is exact") {
  // values like 0.1 do not round trip through averaging unless the
  // accumulator handles the trivial case exactly
  ManifestBuilder b(Split::train, {3});
  const std::vector<float> row = {0.1f, -7.3f, 1e-6f};
  for (int i = 0; i < 7; ++i) b.add("e" + std::to_string(i), {row});
  const ExampleGradient g = mean_gradient(b.build());
  for (int64_t i = 0; i < 3; ++i) CHECK(g.per_layer[0][i] == row[static_cast<size_t>(i)]);
}

TEST_CASE("mean gradient ignores example order") {
  ManifestBuilder fwd(Split::train, {2});
  fwd.add("a", {{0.3f, 1.7f}});
  fwd.add("b", {{-2.1f, 0.9f}});
  fwd.add("c", {{5.5f, -3.3f}});
  ManifestBuilder rev(Split::train, {2});
  rev.add("c", {{5.5f, -3.3f}});
  rev.add("b", {{-2.1f, 0.9f}});
  rev.add("a", {{0.3f, 1.7f}});

  const ExampleGradient g1 = mean_gradient(fwd.build());
  const ExampleGradient g2 = mean_gradient(rev.build());
  // accumulation follows ascending example id, so permuting storage order
  // cannot perturb even the last bit
  CHECK(g1.per_layer[0] == g2.per_layer[0]);
}

TEST_CASE("split names round trip") {
  for (Split s : {Split::train, Split::validation, Split::test, Split::train_mean})
    CHECK(split_from_string(to_string(s)) == s);
  CHECK(split_from_string("val") == Split::validation);
  CHECK(split_from_string("train-mean") == Split::train_mean);
  CHECK_THROWS_AS(split_from_string("nope"), Error);
}

TEST_CASE("concat_gradient flattens layer blocks in order") {
  ManifestBuilder b(Split::train, {2, 1});
  b.add("a", {{1.0f, 2.0f}, {3.0f}});
  const GradientManifest m = b.build();
  const VecD full = concat_gradient(m.examples[0]);
  REQUIRE(full.size() == 3);
  CHECK(full[0] == 1.0);
  CHECK(full[1] == 2.0);
  CHECK(full[2] == 3.0);
  const VecD first = concat_gradient(m.examples[0], 1);
  REQUIRE(first.size() == 2);
  CHECK(first[1] == 2.0);
}
