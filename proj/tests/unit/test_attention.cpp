#include <cmath>

#include <gtest/gtest.h>

#include "gcalab/attention.hpp"
#include "gcalab/error.hpp"
#include "support/gradcheck.hpp"
#include "support/op_catalog.hpp"

using namespace gcalab;
using gcalab::testing::random_tensor;

namespace {

void set_identity(Tensor& w) {
  auto v = w.mutable_data();
  const std::size_t d = w.dim(0);
  std::fill(v.begin(), v.end(), 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
}

void set_zero(Tensor& t) {
  auto v = t.mutable_data();
  std::fill(v.begin(), v.end(), 0.0);
}

AttentionWeights identity_weights(ParameterStore& store, std::size_t d) {
  Rng rng(0);
  auto w = AttentionWeights::create(store, "attn", d, rng);
  for (Tensor* m : {&w.wq, &w.wk, &w.wv, &w.wo}) set_identity(*m);
  for (Tensor* b : {&w.bq, &w.bk, &w.bv, &w.bo}) set_zero(*b);
  return w;
}

// (x W + b) for a single row.
std::vector<double> project(std::span<const double> x, const Tensor& w, const Tensor& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<double> y(b.data().begin(), b.data().end());
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j) y[j] += x[i] * w.data()[i * out + j];
  return y;
}

}  // namespace

TEST(MultiHeadAttention, SingleKeyReturnsProjectedValue) {
  Rng rng(1);
  ParameterStore store;
  auto w = AttentionWeights::create(store, "attn", 8, rng);
  Tensor q = random_tensor({1, 3, 8}, rng, false), kv = random_tensor({1, 1, 8}, rng, false);
  Tensor out = multi_head_attention(w, 2, q, kv, kv, Mask::ones({1, 1}));
  const auto expected = project(project(kv.data(), w.wv, w.bv), w.wo, w.bo);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out.at({0, i, j}), expected[j], 1e-12);
}

TEST(MultiHeadAttention, DuplicatedKeysMatchSingleKey) {
  Rng rng(2);
  ParameterStore store;
  auto w = AttentionWeights::create(store, "attn", 8, rng);
  Tensor q = random_tensor({1, 2, 8}, rng, false), kv = random_tensor({1, 1, 8}, rng, false);
  std::vector<double> dup(kv.data().begin(), kv.data().end());
  dup.insert(dup.end(), kv.data().begin(), kv.data().end());
  dup.insert(dup.end(), kv.data().begin(), kv.data().end());
  Tensor kv3 = Tensor::from({1, 3, 8}, dup);
  Tensor a = multi_head_attention(w, 4, q, kv, kv, Mask::ones({1, 1}));
  Tensor b = multi_head_attention(w, 4, q, kv3, kv3, Mask::ones({1, 3}));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(MultiHeadAttention, HandEvaluatedIdentityProjections) {
  ParameterStore store;
  auto w = identity_weights(store, 4);
  Tensor q = Tensor::from({1, 2, 4}, {1, 0, 2, -1, 0.5, 1, 0, 2});
  Tensor k = Tensor::from({1, 2, 4}, {0, 1, 1, 0, 2, -1, 0, 1});
  Tensor v = Tensor::from({1, 2, 4}, {1, 2, 3, 4, -4, 3, -2, 1});
  Tensor out = multi_head_attention(w, 1, q, k, v, Mask::ones({1, 2}));
  for (std::size_t i = 0; i < 2; ++i) {
    double s[2];
    for (std::size_t j = 0; j < 2; ++j) {
      s[j] = 0;
      for (std::size_t c = 0; c < 4; ++c) s[j] += q.at({0, i, c}) * k.at({0, j, c});
      s[j] /= 2.0;  // sqrt(d / heads)
    }
    const double m = std::max(s[0], s[1]);
    const double e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
    for (std::size_t c = 0; c < 4; ++c) {
      const double expected = (e0 * v.at({0, 0, c}) + e1 * v.at({0, 1, c})) / (e0 + e1);
      EXPECT_NEAR(out.at({0, i, c}), expected, 1e-12);
    }
  }
}

TEST(MultiHeadAttention, AllMaskedKeysThrowUnlessZeroPolicy) {
  Rng rng(3);
  ParameterStore store;
  auto w = AttentionWeights::create(store, "attn", 4, rng);
  Tensor q = random_tensor({2, 2, 4}, rng, false), kv = random_tensor({2, 3, 4}, rng, false);
  const Mask m({2, 3}, {1, 0, 1, 0, 0, 0});
  EXPECT_THROW(multi_head_attention(w, 2, q, kv, kv, m), DegenerateSliceError);
  AttentionOptions opt;
  opt.empty_rows = EmptyRowPolicy::kZero;
  Tensor out = multi_head_attention(w, 2, q, kv, kv, m, opt);
  // Zero attention weights leave only the output bias.
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at({1, i, c}), w.bo.data()[c], 1e-15);
}

TEST(MultiHeadAttention, WeightsOverUnmaskedKeysSumToOne) {
  // With identity value/output maps and every value row equal to u, the
  // output is (sum of weights) * u.
  Rng rng(4);
  ParameterStore store;
  auto w = identity_weights(store, 6);
  Rng init(5);
  auto rq = AttentionWeights::create(store, "rand", 6, init);
  w.wq = rq.wq;
  w.wk = rq.wk;
  std::vector<double> u{0.3, -1.2, 2.0, 0.7, -0.4, 1.1};
  for (int t = 0; t < 20; ++t) {
    Tensor q = random_tensor({2, 3, 6}, rng, false, 3.0), k = random_tensor({2, 5, 6}, rng, false, 3.0);
    std::vector<double> vv;
    for (int i = 0; i < 10; ++i) vv.insert(vv.end(), u.begin(), u.end());
    Tensor v = Tensor::from({2, 5, 6}, vv);
    const Mask m = gcalab::testing::random_mask({2, 5}, rng);
    Tensor out = multi_head_attention(w, 3, q, k, v, m);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.data()[i], u[i % 6], 1e-12);
  }
}

TEST(MultiHeadAttention, CausalOutputIgnoresFuturePositions) {
  Rng rng(6);
  ParameterStore store;
  auto w = AttentionWeights::create(store, "attn", 8, rng);
  AttentionOptions opt;
  opt.causal = true;
  for (int t = 0; t < 10; ++t) {
    Tensor x = random_tensor({2, 6, 8}, rng, false);
    Tensor base = multi_head_attention(w, 2, x, x, x, Mask::ones({2, 6}), opt);
    const std::size_t cut = static_cast<std::size_t>(rng.uniform_int(0, 5));
    Tensor y = x.detach();
    auto yd = y.mutable_data();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = cut + 1; i < 6; ++i)
        for (std::size_t c = 0; c < 8; ++c) yd[(b * 6 + i) * 8 + c] += rng.normal();
    Tensor pert = multi_head_attention(w, 2, y, y, y, Mask::ones({2, 6}), opt);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i <= cut; ++i)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(base.at({b, i, c}), pert.at({b, i, c}));
  }
}

TEST(MultiHeadAttention, CrossAttentionIsQueryPermutationEquivariant) {
  Rng rng(7);
  ParameterStore store;
  auto w = AttentionWeights::create(store, "attn", 8, rng);
  Tensor q = random_tensor({1, 5, 8}, rng, false), kv = random_tensor({1, 4, 8}, rng, false);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> pq;
  for (auto p : perm)
    for (std::size_t c = 0; c < 8; ++c) pq.push_back(q.at({0, p, c}));
  Tensor a = multi_head_attention(w, 4, q, kv, kv, Mask::ones({1, 4}));
  Tensor b = multi_head_attention(w, 4, Tensor::from({1, 5, 8}, pq), kv, kv, Mask::ones({1, 4}));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(b.at({0, i, c}), a.at({0, perm[i], c}), 1e-12);
}

TEST(AttentionConfig, Validation) {
  AttentionConfig cfg;
  cfg.d = 32;
  for (std::size_t h : {1u, 2u, 4u, 8u}) {
    cfg.heads = h;
    EXPECT_NO_THROW(cfg.validate());
  }
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.heads = 4;
  cfg.dropout_p = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(SequenceBatch, PaddingMatchesMask) {
  auto s = SequenceBatch::from_ids(IndexTensor({2, 3}, {4, 5, 0, 7, 0, 0}), Domain::kA);
  EXPECT_EQ(s.mask.values, (std::vector<std::uint8_t>{1, 1, 0, 1, 0, 0}));
  EXPECT_NO_THROW(s.validate(3));
  EXPECT_THROW(s.validate(2), DimensionError);
  s.mask.values[2] = 1;
  EXPECT_THROW(s.validate(3), ContractError);
}

TEST(EncoderBlock, LengthOneKeepsShape) {
  Rng rng(8);
  ParameterStore store;
  AttentionConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  EncoderBlock block(store, "enc", cfg, rng);
  Tensor out = block.forward(random_tensor({3, 1, 8}, rng, false), Mask::ones({3, 1}), ForwardContext{});
  EXPECT_EQ(out.shape(), (Shape{3, 1, 8}));
}

TEST(EncoderBlock, PaddingRowsAreExactlyZero) {
  Rng rng(9);
  ParameterStore store;
  AttentionConfig cfg;
  cfg.d = 8;
  cfg.heads = 4;
  EncoderBlock block(store, "enc", cfg, rng);
  const Mask m({2, 4}, {1, 1, 0, 0, 1, 0, 0, 0});
  Rng drop(3);
  const ForwardContext train{true, 0.3, &drop};
  for (const auto& ctx : {ForwardContext{}, train}) {
    Tensor out = block.forward(random_tensor({2, 4, 8}, rng, false), m, ctx);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 4; ++i)
        if (!m.at(b, i))
          for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.at({b, i, c}), 0.0);
  }
}

TEST(EncoderBlock, ParameterCountFormula) {
  for (std::size_t d : {4u, 8u, 16u}) {
    for (std::size_t f : {0u, 3u, 20u}) {
      ParameterStore store;
      Rng rng(1);
      AttentionConfig cfg;
      cfg.d = d;
      cfg.heads = 2;
      cfg.ffn_hidden = f;
      EncoderBlock block(store, "enc", cfg, rng);
      EXPECT_EQ(store.count(), EncoderBlock::parameter_count(d, f));
    }
  }
}

TEST(PositionEmbedding, Examples) {
  Rng rng(10);
  Tensor x = random_tensor({2, 3, 4}, rng, false);
  const Mask m({2, 3}, {1, 1, 1, 1, 0, 0});
  x = mask_rows(x, m);
  Tensor same = add_position_embedding(x, m, Tensor::zeros({5, 4}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same.data()[i], x.data()[i]);

  Tensor table = random_tensor({5, 4}, rng);
  Tensor y = add_position_embedding(x, m, table);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(y.at({1, 1, c}), 0.0);
    EXPECT_EQ(y.at({1, 2, c}), 0.0);
  }
  EXPECT_THROW(add_position_embedding(x, m, Tensor::zeros({2, 4})), DimensionError);

  sum(y).backward();
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      const double g = table.grad()[r * 4 + c];
      // Row 0 is real in both sequences, rows 1-2 only in the first.
      EXPECT_EQ(g, r == 0 ? 2.0 : (r < 3 ? 1.0 : 0.0));
    }
}

TEST(Encoder, StackParameterCountAndDeterministicEval) {
  Rng rng(11);
  ParameterStore store;
  AttentionConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  Encoder enc(store, "enc", cfg, 3, rng);
  EXPECT_EQ(store.count(), Encoder::parameter_count(8, 3));
  Tensor x = random_tensor({2, 5, 8}, rng, false);
  const Mask m = gcalab::testing::random_mask({2, 5}, rng);
  Tensor a = enc.forward(x, m, ForwardContext{}), b = enc.forward(x, m, ForwardContext{});
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}
