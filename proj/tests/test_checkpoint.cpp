/* Copyright 2026 The moerepl Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>

#include "moerepl/calibration.hpp"
#include "moerepl/checkpoint.hpp"
#include "moerepl/construction.hpp"
#include "moerepl/grouping.hpp"
#include "support.hpp"

using namespace moerepl;
using testing_support::tiny_hyper;

namespace {

MoEModel<float> compressed_model() {
  const auto m = init_model<float>(tiny_hyper(8, 12, 6, 2, 2), 7);
  const SyntheticTask task(TaskSpec{.input_dim = 5, .output_dim = 3});
  const auto set = make_calibration_set<float>(task, 256, 128);
  const auto calib = calibrate(m, set);
  const auto plan = uniform_select(calib.scores, 0.5, 4);
  const auto groups = dominant_group(m, &set, plan, calib.scores, 2);
  return assemble_compressed_model(m, plan, groups, calib.scores, AssembleOptions{2, true}).model;
}

CheckpointError::Kind load_error(const std::vector<unsigned char>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode succeeded";
  return CheckpointError::Kind::schema;
}

}  // namespace

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = encode_checkpoint(to_checkpoint(init_model<float>(tiny_hyper(), 1)));
  ASSERT_GT(bytes.size(), 16u);
  EXPECT_EQ(std::memcmp(bytes.data(), "MOERPLC1", 8), 0);
  std::uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i) mlen |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
  const auto manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  EXPECT_EQ(manifest.at("format_version"), 1);
  std::uint64_t end = 0;
  for (const auto& t : manifest.at("tensors")) {
    EXPECT_EQ(t.at("offset").get<std::uint64_t>(), end);
    end += t.at("length").get<std::uint64_t>();
  }
  EXPECT_EQ(16 + mlen + end, bytes.size());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = std::filesystem::temp_directory_path() / "moerepl_ckpt_roundtrip";
  std::filesystem::create_directories(dir);
  for (const auto& model : {init_model<float>(tiny_hyper(), 3), compressed_model()}) {
    save_checkpoint(to_checkpoint(model), dir / "a.ckpt");
    const auto back = from_checkpoint<float>(load_checkpoint(dir / "a.ckpt"));
    save_checkpoint(to_checkpoint(back), dir / "b.ckpt");
    EXPECT_EQ(read_file_bytes(dir / "a.ckpt"), read_file_bytes(dir / "b.ckpt"));
    const auto x = RandomSource(9).normal_matrix<float>(16, 5, 1.0);
    EXPECT_EQ(model_forward(back, x), model_forward(model, x));
    EXPECT_EQ(back.beta, model.beta);
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, DoubleModelRoundTrip) {
  const auto m = init_model<double>(tiny_hyper(), 4);
  const Checkpoint ck = to_checkpoint(m);
  const auto back = from_checkpoint<double>(decode_checkpoint(encode_checkpoint(ck)));
  visit_parameters(back, [&](const std::string& name, const Matrix<double>& w, ParamClass) {
    const TensorRecord* r = ck.find(name);
    ASSERT_NE(r, nullptr);
    EXPECT_EQ(r->dtype, "f64");
    EXPECT_EQ(detail::from_le_bytes<double>(*r), w);
  });
}

TEST(Checkpoint, TruncatedPayloadIsBoundsError) {
  auto bytes = encode_checkpoint(to_checkpoint(init_model<float>(tiny_hyper(), 1)));
  bytes.pop_back();
  EXPECT_EQ(load_error(bytes), CheckpointError::Kind::bounds);
  EXPECT_EQ(load_error({'M', 'O', 'E'}), CheckpointError::Kind::bounds);
  auto header = bytes;
  header.resize(20);
  EXPECT_EQ(load_error(header), CheckpointError::Kind::bounds);
}

TEST(Checkpoint, ForeignMagicIsVersionError) {
  auto bytes = encode_checkpoint(to_checkpoint(init_model<float>(tiny_hyper(), 1)));
  bytes[7] = '2';
  EXPECT_EQ(load_error(bytes), CheckpointError::Kind::version);
  std::vector<unsigned char> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n', 0, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(load_error(png), CheckpointError::Kind::version);
}

TEST(Checkpoint, WrongFormatVersionIsVersionError) {
  Checkpoint ck = to_checkpoint(init_model<float>(tiny_hyper(), 1));
  auto bytes = encode_checkpoint(ck);
  std::uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i) mlen |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
  std::string text(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  const auto pos = text.find("\"format_version\":1");
  ASSERT_NE(pos, std::string::npos);
  text[pos + 17] = '9';
  std::copy(text.begin(), text.end(), bytes.begin() + 16);
  EXPECT_EQ(load_error(bytes), CheckpointError::Kind::version);
}

TEST(Checkpoint, StructuralMismatchesAreSchemaErrors) {
  const Checkpoint ck = to_checkpoint(init_model<float>(tiny_hyper(), 1));
  EXPECT_THROW(from_checkpoint<double>(ck), CheckpointError);

  Checkpoint missing = ck;
  missing.tensors.pop_back();
  try {
    from_checkpoint<float>(missing);
    ADD_FAILURE();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::schema);
  }

  Checkpoint extra = ck;
  extra.tensors.push_back(TensorRecord{"stray", "f32", {1, 1}, {0, 0, 0, 0}});
  EXPECT_THROW(from_checkpoint<float>(extra), CheckpointError);

  Checkpoint bad_len = ck;
  bad_len.tensors[0].bytes.pop_back();
  EXPECT_THROW(encode_checkpoint(bad_len), CheckpointError);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), IoError);
}
