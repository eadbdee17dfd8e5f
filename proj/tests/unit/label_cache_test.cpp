#include <gtest/gtest.h>

#include "cocomix/error.hpp"
#include "cocomix/label_cache.hpp"
#include "tiny.hpp"

namespace cocomix {
namespace {

class LabelCache : public ::testing::Test {
 protected:
  LabelCache()
      : data_(testing::tiny_data()),
        teacher_(testing::tiny_model(3)),
        sae_(16, 24, 4, 7),
        windows_(data_.train.begin(), data_.train.begin() + 12) {}

  LabelKey key(SelectMode mode) const {
    LabelKey k;
    k.teacher_hash = teacher_.content_hash();
    k.sae_hash = sae_.content_hash();
    k.slice_hash = windows_hash(windows_);
    k.mode = mode;
    k.n_concepts = 24;
    k.k_attr = 3;
    return k;
  }

  testing::TinyData data_;
  TransformerModel teacher_;
  SaeModel sae_;
  std::vector<Window> windows_;
};

TEST_F(LabelCache, RoundTripPreservesEverything) {
  const auto dir = testing::scratch_dir("labels_roundtrip");
  const auto path = (dir / "a.clbl").string();
  const LabelSet l = label_batch(teacher_, sae_, windows_, 3, SelectMode::kAttribution);
  write_label_cache(path, key(SelectMode::kAttribution), l);
  const LabelSet back = read_label_cache(path, key(SelectMode::kAttribution));
  EXPECT_EQ(back.indices, l.indices);
  EXPECT_EQ(back.scores, l.scores);
  EXPECT_EQ(back.n_concepts, 24);
  EXPECT_EQ(back.k_attr, 3);
  EXPECT_EQ(back.mode, SelectMode::kAttribution);
}

TEST_F(LabelCache, AnyKeyFieldMismatchIsRejected) {
  const auto dir = testing::scratch_dir("labels_key");
  const auto path = (dir / "a.clbl").string();
  const LabelKey good = key(SelectMode::kAttribution);
  write_label_cache(path, good, label_batch(teacher_, sae_, windows_, 3, SelectMode::kAttribution));
  auto expect_rejected = [&](auto edit) {
    LabelKey k = good;
    edit(k);
    EXPECT_THROW(read_label_cache(path, k), FormatError);
  };
  expect_rejected([](LabelKey& k) { k.teacher_hash[0] ^= 1; });
  expect_rejected([](LabelKey& k) { k.sae_hash[5] ^= 1; });
  expect_rejected([](LabelKey& k) { k.slice_hash[31] ^= 1; });
  expect_rejected([](LabelKey& k) { k.mode = SelectMode::kActivation; });
  expect_rejected([](LabelKey& k) { k.rank = RankBy::kAbsolute; });
  expect_rejected([](LabelKey& k) { k.n_concepts = 23; });
  expect_rejected([](LabelKey& k) { k.k_attr = 2; });
}

TEST_F(LabelCache, CorruptionIsFormatError) {
  const auto dir = testing::scratch_dir("labels_corrupt");
  const auto path = (dir / "a.clbl").string();
  write_label_cache(path, key(SelectMode::kAttribution),
                    label_batch(teacher_, sae_, windows_, 3, SelectMode::kAttribution));
  std::string bytes = testing::read_bytes(path);
  bytes[bytes.size() - 5] = static_cast<char>(bytes[bytes.size() - 5] ^ 0x10);
  testing::write_bytes(path, bytes);
  EXPECT_THROW(read_label_cache(path, key(SelectMode::kAttribution)), FormatError);
  bytes.resize(bytes.size() / 2);
  testing::write_bytes(path, bytes);
  EXPECT_THROW(read_label_cache(path, key(SelectMode::kAttribution)), FormatError);
}

TEST_F(LabelCache, ModesProduceDistinctPayloads) {
  const auto dir = testing::scratch_dir("labels_modes");
  const auto a = (dir / "attr.clbl").string(), b = (dir / "act.clbl").string();
  write_label_cache(a, key(SelectMode::kAttribution),
                    label_batch(teacher_, sae_, windows_, 3, SelectMode::kAttribution));
  write_label_cache(b, key(SelectMode::kActivation),
                    label_batch(teacher_, sae_, windows_, 3, SelectMode::kActivation));
  EXPECT_NE(label_cache_payload_hash(a), label_cache_payload_hash(b));
}

TEST_F(LabelCache, SecondRequestIsACacheHit) {
  const auto dir = testing::scratch_dir("labels_hit");
  const auto path = (dir / "a.clbl").string();
  bool hit = true;
  const LabelSet first =
      cached_label_batch(path, teacher_, sae_, windows_, 3, SelectMode::kAttribution, RankBy::kSigned, &hit);
  EXPECT_FALSE(hit);
  const LabelSet second =
      cached_label_batch(path, teacher_, sae_, windows_, 3, SelectMode::kAttribution, RankBy::kSigned, &hit);
  EXPECT_TRUE(hit);
  EXPECT_EQ(first.indices, second.indices);
  cached_label_batch(path, teacher_, sae_, windows_, 3, SelectMode::kActivation, RankBy::kSigned, &hit);
  EXPECT_FALSE(hit);
}

}  // namespace
}  // namespace cocomix
