#include <gtest/gtest.h>

#include <cmath>

#include "cocomix/activation_dump.hpp"
#include "cocomix/error.hpp"
#include "tiny.hpp"

namespace cocomix {
namespace {

class ActivationDumpTest : public ::testing::Test {
 protected:
  ActivationDumpTest() : data_(testing::tiny_data()), teacher_(testing::tiny_model(3)) {}
  testing::TinyData data_;
  TransformerModel teacher_;
};

TEST_F(ActivationDumpTest, OneRowPerInputTokenMatchingThePrefix) {
  const std::vector<Window> w(data_.train.begin(), data_.train.begin() + 5);
  const ActivationDump dump = dump_activations(teacher_, w, 1);
  EXPECT_EQ(dump.data.rows, 5u * 8u);
  EXPECT_EQ(dump.data.cols, 16u);
  EXPECT_EQ(dump.teacher_hash, teacher_.content_hash());
  const auto in = w[3].inputs();
  const GraphTensor h = teacher_.forward_prefix(std::vector<int>(in.begin(), in.end()));
  for (std::size_t i = 0; i < 8 * 16; ++i) {
    EXPECT_EQ(dump.data.values[3 * 8 * 16 + i], h.values()[i]);
  }
}

TEST_F(ActivationDumpTest, LayerMustBeTheSplitLayer) {
  EXPECT_THROW(dump_activations(teacher_, data_.train, 2), ConfigError);
}

TEST_F(ActivationDumpTest, RoundTripIsExactInSinglePrecision) {
  const auto dir = testing::scratch_dir("acts_roundtrip");
  const ActivationDump dump = dump_activations(teacher_, data_.train, 1);
  write_activation_dump((dir / "a.actd").string(), dump);
  const ActivationDump back = read_activation_dump((dir / "a.actd").string(), teacher_.content_hash());
  ASSERT_EQ(back.data.rows, dump.data.rows);
  ASSERT_EQ(back.data.cols, dump.data.cols);
  EXPECT_EQ(back.layer, 1u);
  for (std::size_t i = 0; i < dump.data.values.size(); ++i) {
    EXPECT_EQ(back.data.values[i], static_cast<double>(static_cast<float>(dump.data.values[i])));
  }
}

TEST_F(ActivationDumpTest, WrongTeacherAndTruncationAreRejected) {
  const auto dir = testing::scratch_dir("acts_bad");
  const auto path = (dir / "a.actd").string();
  write_activation_dump(path, dump_activations(teacher_, data_.train, 1));
  const TransformerModel other(testing::tiny_model(4));
  EXPECT_THROW(read_activation_dump(path, other.content_hash()), FormatError);
  std::string bytes = testing::read_bytes(path);
  bytes.resize(bytes.size() - 3);
  testing::write_bytes(path, bytes);
  EXPECT_THROW(read_activation_dump(path), FormatError);
  testing::write_bytes(path, "XXXX" + bytes.substr(4));
  EXPECT_THROW(read_activation_dump(path), FormatError);
}

}  // namespace
}  // namespace cocomix
