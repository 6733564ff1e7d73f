#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracle.hpp"
#include "qve/error.hpp"
#include "qve/model.hpp"
#include "qve/serialize.hpp"

using namespace qve;

namespace {

ErrorKind decode_error(std::span<const unsigned char> bytes) {
  try {
    decode_model(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("decode accepted malformed bytes");
  return ErrorKind::io;
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("round trip reproduces float32-rounded weights") {
  ModelWeights w = oracle::random_model(5, 2, 2, 8, 12, 11, 6, Activation::gelu);
  const auto bytes = encode_model(w);
  const ModelWeights back = decode_model(bytes);
  round_to_storage_precision(w);
  CHECK(back == w);
  CHECK(encode_model(back) == bytes);
}

TEST_CASE("file size is header plus four bytes per parameter") {
  const ModelWeights w = oracle::random_model(6);
  CHECK(encode_model(w).size() == header_size(w.config) + 4 * w.config.parameter_count());

  ModelConfig c;
  const ModelWeights big = initialize(c);
  CHECK(encode_model(big).size() == header_size(c) + 4 * c.parameter_count());
}

TEST_CASE("save and load through the filesystem") {
  const auto path = std::filesystem::temp_directory_path() / "qve_io_test.qve";
  ModelWeights w = oracle::random_model(8);
  save_model(w, path.string());
  const ModelWeights back = load_model(path.string());
  round_to_storage_precision(w);
  CHECK(back == w);
  std::filesystem::remove(path);
}

TEST_CASE("malformed files map to distinct error kinds") {
  const auto bytes = encode_model(oracle::random_model(7));

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(decode_error(bad_magic) == ErrorKind::version_mismatch);

  std::vector<unsigned char> cut(bytes.begin(), bytes.end() - 3);
  CHECK(decode_error(cut) == ErrorKind::truncated);
  std::vector<unsigned char> tiny(bytes.begin(), bytes.begin() + 6);
  CHECK(decode_error(tiny) == ErrorKind::truncated);

  // Swap the configured width in the header for one whose manifest differs.
  std::string text(bytes.begin(), bytes.end());
  const auto at = text.find("\"d_ffn\":12");
  REQUIRE(at != std::string::npos);
  text.replace(at, 10, "\"d_ffn\":16");
  const std::vector<unsigned char> reshaped(text.begin(), text.end());
  CHECK(decode_error(reshaped) == ErrorKind::shape_mismatch);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK(decode_error(trailing) == ErrorKind::shape_mismatch);
}

TEST_CASE("missing files are io errors") {
  try {
    load_model("/nonexistent/dir/model.qve");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
  }
}

TEST_CASE("config json rejects unknown keys") {
  Json j = config_to_json(ModelConfig{});
  CHECK(config_from_json(j) == ModelConfig{});
  j["surprise"] = 1;
  CHECK_THROWS_AS(config_from_json(j), Error);
}

}  // TEST_SUITE
