#include <doctest.h>

#include "../support/oracles.hpp"
#include "helpers.hpp"
#include "hff/dcma.hpp"
#include "hff/entry_flow.hpp"
#include "hff/errors.hpp"

using namespace hff;
using testing::random_tensor;

namespace {

struct Entry {
  EntryConfig config;
  ParamStore<double> store;
  EntryParams<double> params;
  Entry(EntryConfig c, std::uint64_t seed) : config(std::move(c)) {
    Rng rng(seed);
    params = make_entry_params(config, store, rng);
  }
  EntryOutput<double> run(const Tensor<double>& image, const Tensor<double>& residual,
                          const Var<double>* forced = nullptr) const {
    return entry_forward(Var<double>(image), Var<double>(residual), params, config, SrmKernelBank{}, forced);
  }
};

}  // namespace

TEST_SUITE("entry_flow") {

TEST_CASE("pyramid shapes and intermediates") {
  EntryConfig config;
  config.widths = {4, 6, 8};
  Entry e(config, 1);
  Rng rng(1);
  const auto out = e.run(random_tensor({2, 3, 16, 16}, rng), random_tensor({2, 9, 16, 16}, rng, -2, 2));
  CHECK(out.features.shape() == Shape{2, 8, 2, 2});
  CHECK(out.hf_features.shape() == Shape{2, 8, 2, 2});
  CHECK(out.attention.shape() == Shape{2, 1, 16, 16});
  for (const char* name : {"entry.s1.rgb", "entry.s1.hf", "entry.s1.srm", "entry.s2.rgb_gated", "entry.rsa"})
    CHECK_MESSAGE(out.intermediates.contains(name), name);
  CHECK_FALSE(out.intermediates.contains("entry.s1.rgb_gated"));
}

TEST_CASE("residual-guided attention lies strictly inside (0,1)") {
  Entry e(EntryConfig{}, 2);
  Rng rng(2);
  const auto out = e.run(random_tensor({1, 3, 32, 32}, rng), random_tensor({1, 9, 32, 32}, rng, -2, 2));
  const auto& m = out.attention.value();
  for (Index i = 0; i < m.size(); ++i) REQUIRE((m[i] > 0.0 && m[i] < 1.0));
}

TEST_CASE("gating with an all-ones map equals the ungated pyramid") {
  EntryConfig gated;
  gated.widths = {4, 4};
  gated.rsa_scales = {1, 2};
  EntryConfig plain = gated;
  plain.rsa_scales = {};
  const Entry a(gated, 5), b(plain, 5);
  Rng rng(5);
  const auto image = random_tensor({1, 3, 8, 8}, rng);
  const auto residual = random_tensor({1, 9, 8, 8}, rng, -2, 2);
  const Var<double> ones(Tensor<double>({1, 1, 8, 8}, 1.0));
  const auto ga = a.run(image, residual, &ones);
  const auto gb = b.run(image, residual);
  CHECK(bit_equal(ga.features.value(), gb.features.value()));
  CHECK(bit_equal(ga.hf_features.value(), gb.hf_features.value()));
}

TEST_CASE("stream ablations drop the other stream") {
  Rng rng(3);
  const auto image = random_tensor({1, 3, 8, 8}, rng);
  const auto residual = random_tensor({1, 9, 8, 8}, rng, -2, 2);
  EntryConfig rgb_only;
  rgb_only.widths = {4, 4};
  rgb_only.streams = StreamMode::kRgbOnly;
  const Entry r(rgb_only, 3);
  const auto ro = entry_forward(Var<double>(image), Var<double>(), r.params, rgb_only, SrmKernelBank{});
  CHECK(ro.features.defined());
  CHECK_FALSE(ro.hf_features.defined());
  CHECK_FALSE(r.store.contains("entry.rsa.weight"));

  EntryConfig srm_only = rgb_only;
  srm_only.streams = StreamMode::kSrmOnly;
  const Entry s(srm_only, 3);
  const auto so = entry_forward(Var<double>(), Var<double>(residual), s.params, srm_only, SrmKernelBank{});
  CHECK_FALSE(so.features.defined());
  CHECK(so.hf_features.shape() == Shape{1, 4, 2, 2});
}

TEST_CASE("indivisible spatial extents are rejected") {
  EntryConfig config;
  config.widths = {4, 4, 4};
  Entry e(config, 1);
  CHECK_THROWS_AS(e.run(Tensor<double>({1, 3, 12, 12}), Tensor<double>({1, 9, 12, 12})), ContractError);
}

}  // TEST_SUITE

TEST_SUITE("dcma") {

namespace {

DcmaParams<double> dcma(ParamStore<double>& store, Index c, Index extent, Index r, std::uint64_t seed) {
  Rng rng(seed);
  return make_dcma_params("d", c, extent, r, store, rng);
}

}  // namespace

TEST_CASE("correlation matches explicit sums") {
  Rng rng(4);
  const auto k = random_tensor({2, 3, 2, 3}, rng);
  const auto kh = random_tensor({2, 3, 2, 3}, rng);
  const auto c = correlation(Var<double>(k), Var<double>(kh)).value();
  REQUIRE(c.shape() == Shape{2, 6, 6});
  for (Index b = 0; b < 2; ++b) {
    const auto want = oracle::correlation(k, kh, b);
    for (Index i = 0; i < 6; ++i)
      for (Index j = 0; j < 6; ++j)
        CHECK(c[(b * 6 + i) * 6 + j] == doctest::Approx(want[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
  }
}

TEST_CASE("attention columns sum to one") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ParamStore<double> store;
    auto p = dcma(store, 8, 3, 2, seed);
    Rng rng(seed);
    p.mix.mutable_value() = random_tensor({9, 9}, rng, -3, 3);
    const auto out = dcma_forward(Var<double>(random_tensor({2, 8, 3, 3}, rng)),
                                  Var<double>(random_tensor({2, 8, 3, 3}, rng)), p);
    for (const auto* a : {&out.attention.value(), &out.hf_attention.value()})
      for (Index b = 0; b < 2; ++b)
        for (Index j = 0; j < 9; ++j) {
          double total = 0;
          for (Index i = 0; i < 9; ++i) total += (*a)[(b * 9 + i) * 9 + j];
          CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        }
  }
}

TEST_CASE("zero value weights leave both streams bit-identical") {
  ParamStore<double> store;
  auto p = dcma(store, 4, 2, 2, 7);
  for (auto* v : {&p.value_weight, &p.value_bias, &p.hf_value_weight, &p.hf_value_bias})
    v->mutable_value().array().setZero();
  Rng rng(7);
  const auto rgb = random_tensor({3, 4, 2, 2}, rng), hf = random_tensor({3, 4, 2, 2}, rng);
  const auto out = dcma_forward(Var<double>(rgb), Var<double>(hf), p);
  CHECK(bit_equal(out.rgb.value(), rgb));
  CHECK(bit_equal(out.hf.value(), hf));
}

TEST_CASE("stream shapes are preserved") {
  for (Index c : {4, 8})
    for (Index extent : {1, 2, 4})
      for (Index r : {1, 2, 4}) {
        ParamStore<double> store;
        const auto p = dcma(store, c, extent, r, 3);
        Rng rng(3);
        const auto out = dcma_forward(Var<double>(random_tensor({2, c, extent, extent}, rng)),
                                      Var<double>(random_tensor({2, c, extent, extent}, rng)), p);
        CHECK(out.rgb.shape() == Shape{2, c, extent, extent});
        CHECK(out.hf.shape() == Shape{2, c, extent, extent});
        CHECK(out.attention.shape() == Shape{2, extent * extent, extent * extent});
      }
}

TEST_CASE("contracts") {
  ParamStore<double> store;
  CHECK_THROWS_AS(dcma(store, 6, 2, 4, 1), ContractError);
  const auto p = dcma(store, 4, 2, 2, 1);
  CHECK_THROWS_AS(dcma_forward(Var<double>(Tensor<double>({1, 4, 2, 2})), Var<double>(Tensor<double>({1, 4, 2, 1})), p),
                  ContractError);
  CHECK_THROWS_AS(dcma_forward(Var<double>(Tensor<double>({1, 4, 3, 3})), Var<double>(Tensor<double>({1, 4, 3, 3})), p),
                  ContractError);
}

}  // TEST_SUITE
