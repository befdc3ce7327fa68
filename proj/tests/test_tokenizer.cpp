#include <cmath>

#include "doctest.h"
#include "enma/tokenizer.hpp"

using namespace enma;
using vae::Block;
using vae::VaeConfig;

namespace {

VaeConfig tiny_config() {
  VaeConfig c;
  c.xi_sizes = {8};
  c.extents = {1.0};
  c.channels = 1;
  c.freqs = 2;
  c.max_freq = 4.0;
  c.heads = 2;
  c.head_dim = 2;
  c.slopes = {1.0, 2.0};
  c.h_comp = 4;
  c.kernel = 3;
  c.blocks = {Block::Residual, Block::CompressSpace};
  c.token_dim = 2;
  c.refine_depth = 1;
  return c;
}

Tensor<double> random_values(Index L, Index N, Index ch, RngStream& rng) {
  return Tensor<double>::randn({L, N, ch}, rng);
}

}  // namespace

TEST_CASE("positional encoding layout and values") {
  // 1-D, 12 frequencies: feature dimension = dims * 2 * 12
  Tensor<double> c = Tensor<double>::from({3, 1}, {0.0, 0.25, 1.0});
  Tensor<double> pe = vae::positional_encode(c, 12, 4.0, {1.0});
  CHECK(pe.dim(0) == 3);
  CHECK(pe.dim(1) == 24);
  // coord 0: all sines 0, all cosines 1
  for (Index j = 0; j < 12; ++j) {
    CHECK(pe.data()[2 * j] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(pe.data()[2 * j + 1] == doctest::Approx(1.0).epsilon(1e-12));
  }
  // coords 0 and extent differ by a full period of the lowest frequency (1)
  CHECK(pe.data()[2 * 24 + 0] == doctest::Approx(pe.data()[0]).epsilon(1e-9));
  CHECK(pe.data()[2 * 24 + 1] == doctest::Approx(pe.data()[1]).epsilon(1e-9));

  // 2-D feature dimension
  Tensor<double> c2 = Tensor<double>::from({2, 2}, {0.1, 0.2, 0.3, 0.4});
  Tensor<double> pe2 = vae::positional_encode(c2, 12, 4.0, {1.0, 1.0});
  CHECK(pe2.dim(1) == 48);
}

TEST_CASE("geometry bias closed forms") {
  Tensor<double> q = Tensor<double>::from({2, 1}, {0.3, 0.05});
  Tensor<double> k = Tensor<double>::from({2, 1}, {0.3, 0.95});
  auto b = vae::geometry_bias(q, k, {1.0, 2.0}, {1.0});
  REQUIRE(b.size() == 2);
  // coincident points: zero bias for every head
  CHECK(b[0].data()[0] == doctest::Approx(0.0));
  CHECK(b[1].data()[0] == doctest::Approx(0.0));
  // slope 2, distance 0.5 between 0.3 and wrapped 0.05 -> |0.25| actually:
  // q=0.3, k=0.95 -> wrapped distance 0.35, bias -0.7 at slope 2
  CHECK(b[1].data()[1] == doctest::Approx(-0.7).epsilon(1e-12));
  // wrapped distance 0.10 between 0.05 and 0.95, slope 1 -> -0.10
  CHECK(b[0].data()[3] == doctest::Approx(-0.10).epsilon(1e-12));
  // slope 2, 1-D distance 0.5: 0.05 vs 0.55
  Tensor<double> k2 = Tensor<double>::from({1, 1}, {0.55});
  auto b2 = vae::geometry_bias(Tensor<double>::from({1, 1}, {0.05}), k2, {2.0}, {1.0});
  CHECK(b2[0].data()[0] == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("interpolation is bit-exactly permutation invariant") {
  RngStream rng(11);
  ParamStore<double> store;
  auto model = vae::Vae<double>::create(store, tiny_config(), rng);
  const Index N = 10, L = 3;
  std::vector<double> cs;
  for (Index i = 0; i < N; ++i) cs.push_back(0.013 + 0.097 * static_cast<double>(i));
  Tensor<double> coords = Tensor<double>::from({N, 1}, cs);
  Tensor<double> values = random_values(L, N, 1, rng);

  Tensor<double> out1 = vae::interp_encode(model, coords, values);

  // reversed ordering of the input set
  std::vector<double> rc(static_cast<size_t>(N));
  std::vector<double> rv(static_cast<size_t>(L * N));
  for (Index i = 0; i < N; ++i) rc[static_cast<size_t>(i)] = cs[static_cast<size_t>(N - 1 - i)];
  for (Index l = 0; l < L; ++l)
    for (Index i = 0; i < N; ++i)
      rv[static_cast<size_t>(l * N + i)] = values.data()[l * N + (N - 1 - i)];
  Tensor<double> out2 = vae::interp_encode(model, Tensor<double>::from({N, 1}, rc),
                                           Tensor<double>::from({L, N, 1}, rv));
  REQUIRE(out1.shape() == out2.shape());
  for (Index i = 0; i < out1.size(); ++i) CHECK(out1.data()[i] == out2.data()[i]);
}

TEST_CASE("duplicating every input point leaves the interpolation unchanged") {
  RngStream rng(12);
  ParamStore<double> store;
  auto model = vae::Vae<double>::create(store, tiny_config(), rng);
  const Index N = 6, L = 2;
  std::vector<double> cs;
  for (Index i = 0; i < N; ++i) cs.push_back(0.04 + 0.15 * static_cast<double>(i));
  Tensor<double> coords = Tensor<double>::from({N, 1}, cs);
  Tensor<double> values = random_values(L, N, 1, rng);
  Tensor<double> base = vae::interp_encode(model, coords, values);

  std::vector<double> dc(cs);
  dc.insert(dc.end(), cs.begin(), cs.end());
  std::vector<double> dv(static_cast<size_t>(L * 2 * N));
  for (Index l = 0; l < L; ++l)
    for (Index i = 0; i < 2 * N; ++i)
      dv[static_cast<size_t>(l * 2 * N + i)] = values.data()[l * N + (i % N)];
  Tensor<double> dup = vae::interp_encode(model, Tensor<double>::from({2 * N, 1}, dc),
                                          Tensor<double>::from({L, 2 * N, 1}, dv));
  REQUIRE(base.shape() == dup.shape());
  for (Index i = 0; i < base.size(); ++i)
    CHECK(base.data()[i] == doctest::Approx(dup.data()[i]).epsilon(1e-6));
}

TEST_CASE("zero slopes reduce to the unbiased interpolator") {
  RngStream rng(13);
  VaeConfig cfg = tiny_config();
  cfg.slopes = {0.0, 0.0};
  ParamStore<double> store;
  auto biased = vae::Vae<double>::create(store, cfg, rng);
  VaeConfig cfg2 = cfg;
  cfg2.bias_enabled = false;
  auto unbiased = vae::Vae<double>::from_store(store, cfg2);

  RngStream drng(14);
  Tensor<double> coords = Tensor<double>::from({5, 1}, {0.11, 0.27, 0.52, 0.68, 0.9});
  Tensor<double> values = random_values(2, 5, 1, drng);
  Tensor<double> a = vae::interp_encode(biased, coords, values);
  Tensor<double> b = vae::interp_encode(unbiased, coords, values);
  for (Index i = 0; i < a.size(); ++i)
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-6));
}

TEST_CASE("latent steps ignore future physical frames bit-exactly") {
  RngStream rng(15);
  ParamStore<double> store;
  auto model = vae::Vae<double>::create(store, tiny_config(), rng);
  const Index N = 9, L = 4;
  std::vector<double> cs;
  for (Index i = 0; i < N; ++i) cs.push_back(0.02 + 0.107 * static_cast<double>(i));
  Tensor<double> coords = Tensor<double>::from({N, 1}, cs);
  Tensor<double> values = random_values(L, N, 1, rng);

  auto vo1 = vae::compress(model, vae::interp_encode(model, coords, values));

  std::vector<double> pv(values.data(), values.data() + values.size());
  for (Index i = 0; i < N; ++i) pv[static_cast<size_t>((L - 1) * N + i)] += 3.0;
  auto vo2 = vae::compress(
      model, vae::interp_encode(model, coords, Tensor<double>::from({L, N, 1}, pv)));

  // no temporal compression: latent step t corresponds to frame t
  const Index per_step = vo1.mean.size() / L;
  for (Index i = 0; i < (L - 1) * per_step; ++i) {
    CHECK(vo1.mean.data()[i] == vo2.mean.data()[i]);
    CHECK(vo1.logvar.data()[i] == vo2.logvar.data()[i]);
  }
  // the perturbed frame does change its own latent step
  double diff = 0;
  for (Index i = (L - 1) * per_step; i < L * per_step; ++i)
    diff = std::max(diff, std::abs(vo1.mean.data()[i] - vo2.mean.data()[i]));
  CHECK(diff > 0);
}

TEST_CASE("temporal compression maps future frames only to later latent steps") {
  RngStream rng(16);
  VaeConfig cfg = tiny_config();
  cfg.blocks = {Block::CompressTime};
  ParamStore<double> store;
  auto model = vae::Vae<double>::create(store, cfg, rng);
  const Index N = 8, L = 5;
  std::vector<double> cs;
  for (Index i = 0; i < N; ++i) cs.push_back(0.03 + 0.118 * static_cast<double>(i));
  Tensor<double> coords = Tensor<double>::from({N, 1}, cs);
  Tensor<double> values = random_values(L, N, 1, rng);

  auto vo1 = vae::compress(model, vae::interp_encode(model, coords, values));
  CHECK(vo1.mean.dim(0) == 3);  // (5-1)/2 + 1

  std::vector<double> pv(values.data(), values.data() + values.size());
  for (Index i = 0; i < N; ++i) pv[static_cast<size_t>(4 * N + i)] -= 2.5;
  auto vo2 = vae::compress(
      model, vae::interp_encode(model, coords, Tensor<double>::from({L, N, 1}, pv)));
  // latent step t covers physical frames <= 2t; frame 4 only reaches step 2
  const Index per_step = vo1.mean.size() / 3;
  for (Index i = 0; i < 2 * per_step; ++i) CHECK(vo1.mean.data()[i] == vo2.mean.data()[i]);
}

TEST_CASE("compression arithmetic at the reference 1-D configuration") {
  RngStream rng(17);
  VaeConfig cfg = vae::default_vae_config(1);
  CHECK(cfg.xi_count() == 128);
  CHECK(cfg.space_stride() == 8);  // three spatial halvings: 128 -> 16
  CHECK(cfg.latent_sites() == 16);
  ParamStore<double> store;
  auto model = vae::Vae<double>::create(store, cfg, rng);
  Tensor<double> field = Tensor<double>::randn({2, 128, cfg.model_dim()}, rng, 0.1);
  auto vo = vae::compress(model, field);
  CHECK(vo.mean.shape() == Shape{2, 16, 4});
  CHECK(vo.logvar.shape() == Shape{2, 16, 4});
}

TEST_CASE("a single input frame yields a single latent step") {
  RngStream rng(18);
  VaeConfig cfg = tiny_config();
  cfg.blocks = {Block::CompressTime, Block::Residual};
  ParamStore<double> store;
  auto model = vae::Vae<double>::create(store, cfg, rng);
  Tensor<double> field = Tensor<double>::randn({1, 8, cfg.model_dim()}, rng);
  auto vo = vae::compress(model, field);
  CHECK(vo.mean.dim(0) == 1);
}

TEST_CASE("VAE loss closed forms") {
  Tensor<double> r = Tensor<double>::from({2}, {1.0, -2.0});
  Tensor<double> t = Tensor<double>::from({2}, {1.0, -2.0});
  Tensor<double> m0 = Tensor<double>::zeros({1});
  Tensor<double> lv0 = Tensor<double>::zeros({1});
  CHECK(vae::vae_loss(r, t, m0, lv0).item() == doctest::Approx(0.0).epsilon(1e-15));

  // single latent entry, mean 1, logvar 0: KL = 0.5, contribution 5e-5
  Tensor<double> m1 = Tensor<double>::from({1}, {1.0});
  CHECK(vae::vae_loss(r, t, m1, lv0).item() == doctest::Approx(5e-5).epsilon(1e-10));

  // relative MSE term: pred = 2 * target gives 1 regardless of scale
  Tensor<double> r2 = Tensor<double>::from({2}, {2.0, -4.0});
  CHECK(vae::vae_loss(r2, t, m0, lv0).item() == doctest::Approx(1.0).epsilon(1e-12));

  // general KL formula 0.5 * sum(mu^2 + e^lv - 1 - lv)
  Tensor<double> mg = Tensor<double>::from({2}, {0.3, -1.2});
  Tensor<double> lg = Tensor<double>::from({2}, {0.4, -0.7});
  const double want = 0.5 * ((0.09 + std::exp(0.4) - 1 - 0.4) +
                             (1.44 + std::exp(-0.7) - 1 + 0.7));
  CHECK(vae::vae_loss(r, t, mg, lg, 1.0).item() == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("decoding supports arbitrary query grids with shared-point exactness") {
  RngStream rng(19);
  ParamStore<double> store;
  auto model = vae::Vae<double>::create(store, tiny_config(), rng);
  const Index L = 3;
  Tensor<double> z = Tensor<double>::randn({L, 4, 2}, rng);  // 8 sites / stride 2, token dim 2

  Tensor<double> qa = Tensor<double>::from({3, 1}, {0.07, 0.33, 0.61});
  Tensor<double> ya = vae::decompress_and_decode(model, z, L, qa);
  CHECK(ya.shape() == Shape{L, 3, 1});

  // super-resolution: denser query set, shared points reproduced exactly
  Tensor<double> qb =
      Tensor<double>::from({6, 1}, {0.07, 0.33, 0.61, 0.18, 0.44, 0.86});
  Tensor<double> yb = vae::decompress_and_decode(model, z, L, qb);
  CHECK(yb.shape() == Shape{L, 6, 1});
  for (Index l = 0; l < L; ++l)
    for (Index i = 0; i < 3; ++i)
      CHECK(ya.data()[l * 3 + i] == yb.data()[l * 6 + i]);

  // inconsistent latent shape for the stated frame count
  CHECK_THROWS(vae::decompress_and_decode(model, z, L + 1, qa));
}

TEST_CASE("full VAE objective passes gradient checks") {
  RngStream rng(20);
  ParamStore<double> store;
  auto model = vae::Vae<double>::create(store, tiny_config(), rng);
  // re-draw weights at O(1) scale so every path (including the zero-initialized
  // residual convs) carries gradients above finite-difference resolution
  RngStream prng(77);
  for (const auto& name : store.names()) {
    if (name == "xi.coords") continue;
    for (auto& v : store.slot(name).param.values()) v = 0.4 * prng.normal();
  }
  Tensor<double> coords = Tensor<double>::from({5, 1}, {0.03, 0.21, 0.46, 0.67, 0.91});
  RngStream drng(21);
  Tensor<double> values = random_values(2, 5, 1, drng);
  Tensor<double> x_out = Tensor<double>::from({4, 1}, {0.07, 0.33, 0.61, 0.89});
  Tensor<double> target = Tensor<double>::randn({2, 4, 1}, drng);
  Tensor<double> eps = Tensor<double>::randn({2, 4, 2}, drng);

  auto f = [&]() {
    auto vo = vae::compress(model, vae::interp_encode(model, coords, values));
    Tensor<double> zt = vae::sample_tokens(vo, eps);
    Tensor<double> recon = vae::decompress_and_decode(model, zt, 2, x_out);
    return vae::vae_loss(recon, target, vo.mean, vo.logvar, 1e-2);
  };
  CHECK(grad_check(store, f, 1e-4) < 1e-4);
}

TEST_CASE("training is seed-reproducible and keeps Xi inside the domain") {
  auto cfg = pde::default_config(pde::System::Advection);
  cfg.grid = pde::sim_grid(pde::System::Advection, {32});
  cfg.store_sizes = {32};
  cfg.nt = 4;
  Dataset data = pde::generate_dataset(pde::System::Advection, pde::Regime::InD, 4, 2, 99, cfg);

  VaeConfig vc = tiny_config();
  vc.xi_sizes = {16};
  vae::VaeTrainConfig tc;
  tc.steps = 3;
  tc.batch = 2;
  tc.lr.base = 1e-3;
  tc.lr.warmup_steps = 2;
  tc.lr.total_steps = 3;

  auto run = [&]() {
    RngStream mrng(7);
    ParamStore<double> store;
    auto model = vae::Vae<double>::create(store, vc, mrng);
    auto trace = vae::train_vae(data, store, model, tc, 123);
    auto& xc = store.get("xi.coords").values();
    for (double v : xc) {
      CHECK(v >= 0.0);
      CHECK(v <= vc.extents[0]);
    }
    return trace;
  };
  auto t1 = run();
  auto t2 = run();
  REQUIRE(t1.size() == 3);
  for (size_t i = 0; i < t1.size(); ++i) {
    CHECK(std::isfinite(t1[i]));
    CHECK(t1[i] == t2[i]);
  }
}
