// Command-line pipeline: data generation, two-stage training, probabilistic
// rollout, evaluation, and heatmap rendering. Every command is a pure function
// of (config, input files, seed) and reproduces its outputs byte-identically.
#include <filesystem>

#include <malloc.h>

#include "CLI11.hpp"
#include "enma/io.hpp"
#include "enma/metrics.hpp"
#include "enma/pde.hpp"

namespace fs = std::filesystem;
using namespace enma;
using Scalar = double;

namespace {

std::vector<Index> parse_index_list(const std::string& s) {
  std::istringstream in(s);
  std::vector<Index> out;
  Index v;
  while (in >> v) out.push_back(v);
  if (out.empty()) throw std::runtime_error("expected a list of integers: " + s);
  return out;
}

std::vector<double> parse_num_list(const std::string& s) {
  std::istringstream in(s);
  std::vector<double> out;
  double v;
  while (in >> v) out.push_back(v);
  if (out.empty()) throw std::runtime_error("expected a list of numbers: " + s);
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream out;
  out.precision(17);
  for (size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << v[i];
  return out.str();
}

std::string blocks_to_string(const std::vector<vae::Block>& blocks) {
  std::string out;
  for (size_t i = 0; i < blocks.size(); ++i) {
    if (i) out += ",";
    switch (blocks[i]) {
      case vae::Block::Residual: out += "res"; break;
      case vae::Block::CompressSpace: out += "cs"; break;
      case vae::Block::CompressTime: out += "ct"; break;
    }
  }
  return out;
}

std::vector<vae::Block> blocks_from_string(const std::string& s) {
  std::vector<vae::Block> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (tok == "res")
      out.push_back(vae::Block::Residual);
    else if (tok == "cs")
      out.push_back(vae::Block::CompressSpace);
    else if (tok == "ct")
      out.push_back(vae::Block::CompressTime);
    else
      throw std::runtime_error("unknown conv block kind: " + tok);
  }
  if (out.empty()) throw std::runtime_error("empty block list");
  return out;
}

// Tokenizer config from config keys, defaulting to the dataset's geometry.
vae::VaeConfig make_vae_config(const Config& c, const Dataset& data) {
  const Index dims = static_cast<Index>(data.spatial.size());
  vae::VaeConfig vc = vae::default_vae_config(dims);
  vc.xi_sizes = c.has("vae.xi") ? parse_index_list(c.str("vae.xi")) : data.spatial;
  vc.extents = c.has("vae.extent")
                   ? parse_num_list(c.str("vae.extent"))
                   : pde::sim_grid(pde::parse_system(data.system), data.spatial).extents;
  vc.channels = data.channels;
  vc.freqs = c.integer("vae.freqs", vc.freqs);
  vc.max_freq = c.num("vae.max_freq", vc.max_freq);
  vc.heads = c.integer("vae.heads", vc.heads);
  vc.head_dim = c.integer("vae.head_dim", vc.head_dim);
  vc.bias_enabled = c.flag("vae.bias", vc.bias_enabled);
  vc.h_comp = c.integer("vae.hidden", vc.h_comp);
  vc.kernel = c.integer("vae.kernel", vc.kernel);
  vc.token_dim = c.integer("vae.token_dim", vc.token_dim);
  vc.refine_depth = c.integer("vae.refine_depth", vc.refine_depth);
  if (c.has("vae.blocks")) vc.blocks = blocks_from_string(c.str("vae.blocks"));
  if (c.has("vae.slopes")) {
    vc.slopes = parse_num_list(c.str("vae.slopes"));
  } else {
    vc.slopes.clear();
    for (Index h = 0; h < vc.heads; ++h) vc.slopes.push_back(static_cast<double>(h + 1));
  }
  vc.validate();
  return vc;
}

// Exact echo so the config alone rebuilds the model from a checkpoint.
void echo_vae_config(Config& e, const vae::VaeConfig& vc) {
  e.set("vae.xi", join(vc.xi_sizes));
  e.set("vae.extent", join(vc.extents));
  e.set("vae.channels", std::to_string(vc.channels));
  e.set("vae.freqs", std::to_string(vc.freqs));
  e.set("vae.max_freq", join(std::vector<double>{vc.max_freq}));
  e.set("vae.heads", std::to_string(vc.heads));
  e.set("vae.head_dim", std::to_string(vc.head_dim));
  e.set("vae.slopes", join(vc.slopes));
  e.set("vae.bias", vc.bias_enabled ? "true" : "false");
  e.set("vae.hidden", std::to_string(vc.h_comp));
  e.set("vae.kernel", std::to_string(vc.kernel));
  e.set("vae.blocks", blocks_to_string(vc.blocks));
  e.set("vae.token_dim", std::to_string(vc.token_dim));
  e.set("vae.refine_depth", std::to_string(vc.refine_depth));
}

vae::VaeConfig vae_config_from_echo(const Config& c) {
  vae::VaeConfig vc;
  vc.xi_sizes = parse_index_list(c.str("vae.xi"));
  vc.extents = parse_num_list(c.str("vae.extent"));
  vc.channels = c.integer("vae.channels");
  vc.freqs = c.integer("vae.freqs");
  vc.max_freq = c.num("vae.max_freq");
  vc.heads = c.integer("vae.heads");
  vc.head_dim = c.integer("vae.head_dim");
  vc.slopes = parse_num_list(c.str("vae.slopes"));
  vc.bias_enabled = c.flag("vae.bias", true);
  vc.h_comp = c.integer("vae.hidden");
  vc.kernel = c.integer("vae.kernel");
  vc.blocks = blocks_from_string(c.str("vae.blocks"));
  vc.token_dim = c.integer("vae.token_dim");
  vc.refine_depth = c.integer("vae.refine_depth");
  vc.validate();
  return vc;
}

gen::GenConfig make_gen_config(const Config& c, const vae::VaeConfig& vc) {
  gen::GenConfig gc;
  gc.latent_sizes = vc.latent_sizes();
  gc.token_dim = vc.token_dim;
  gc.patch = c.integer("gen.patch", 1);
  gc.hidden = c.integer("gen.hidden", 64);
  gc.causal_depth = c.integer("gen.causal_depth", 2);
  gc.spatial_depth = c.integer("gen.spatial_depth", 2);
  gc.heads = c.integer("gen.heads", 4);
  gc.head_layers = c.integer("gen.head_layers", 3);
  gc.head_width = c.integer("gen.head_width", gc.hidden);
  gc.decode_steps = std::min<Index>(c.integer("gen.decode_steps", 6), gc.m_tokens());
  gc.fm_steps = c.integer("gen.fm_steps", 10);
  gc.mask_min = c.num("gen.mask_min", 0.75);
  gc.mask_max = c.num("gen.mask_max", 1.0);
  gc.validate();
  return gc;
}

void echo_gen_config(Config& e, const gen::GenConfig& gc) {
  e.set("gen.latent", join(gc.latent_sizes));
  e.set("gen.token_dim", std::to_string(gc.token_dim));
  e.set("gen.patch", std::to_string(gc.patch));
  e.set("gen.hidden", std::to_string(gc.hidden));
  e.set("gen.causal_depth", std::to_string(gc.causal_depth));
  e.set("gen.spatial_depth", std::to_string(gc.spatial_depth));
  e.set("gen.heads", std::to_string(gc.heads));
  e.set("gen.head_layers", std::to_string(gc.head_layers));
  e.set("gen.head_width", std::to_string(gc.head_width));
  e.set("gen.decode_steps", std::to_string(gc.decode_steps));
  e.set("gen.fm_steps", std::to_string(gc.fm_steps));
  e.set("gen.mask_min", join(std::vector<double>{gc.mask_min}));
  e.set("gen.mask_max", join(std::vector<double>{gc.mask_max}));
}

gen::GenConfig gen_config_from_echo(const Config& c) {
  gen::GenConfig gc;
  gc.latent_sizes = parse_index_list(c.str("gen.latent"));
  gc.token_dim = c.integer("gen.token_dim");
  gc.patch = c.integer("gen.patch");
  gc.hidden = c.integer("gen.hidden");
  gc.causal_depth = c.integer("gen.causal_depth");
  gc.spatial_depth = c.integer("gen.spatial_depth");
  gc.heads = c.integer("gen.heads");
  gc.head_layers = c.integer("gen.head_layers");
  gc.head_width = c.integer("gen.head_width");
  gc.decode_steps = c.integer("gen.decode_steps");
  gc.fm_steps = c.integer("gen.fm_steps");
  gc.mask_min = c.num("gen.mask_min");
  gc.mask_max = c.num("gen.mask_max");
  gc.validate();
  return gc;
}

void write_config_echo(const fs::path& dir, const Config& eff) {
  std::ofstream f(dir / "config.txt", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write config echo in " + dir.string());
  f << eff.serialize();
}

void write_loss_csv(const fs::path& path, const std::vector<double>& trace,
                    std::int64_t first_step, const std::string& echo) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  std::istringstream in(echo);
  std::string line;
  while (std::getline(in, line)) f << "# " << line << "\n";
  f << "step,loss\n";
  char buf[64];
  for (size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9g", trace[i]);
    f << first_step + static_cast<std::int64_t>(i) << "," << buf << "\n";
  }
}

Tensor<Scalar> frames_slice(const Dataset& d, Index traj, Index t0, Index count) {
  const float* p = d.traj(traj) + t0 * d.frame_size();
  std::vector<Scalar> v(p, p + count * d.frame_size());
  return Tensor<Scalar>::from({count, d.sites(), d.channels}, std::move(v));
}

Tensor<Scalar> patchify_frames(const Tensor<Scalar>& z, const gen::GenConfig& gc) {
  std::vector<Tensor<Scalar>> fr;
  for (Index t = 0; t < z.dim(0); ++t)
    fr.push_back(reshape(
        gen::patchify(reshape(slice(z, 0, t, 1), {z.dim(1), z.dim(2)}), gc.latent_sizes,
                      gc.patch),
        {1, gc.m_tokens(), gc.patch_dim()}));
  return concat(fr, 0);
}

Tensor<Scalar> unpatchify_frames(const Tensor<Scalar>& zp, const gen::GenConfig& gc) {
  std::vector<Tensor<Scalar>> fr;
  for (Index t = 0; t < zp.dim(0); ++t)
    fr.push_back(reshape(
        gen::unpatchify(reshape(slice(zp, 0, t, 1), {gc.m_tokens(), gc.patch_dim()}),
                        gc.latent_sizes, gc.patch, gc.token_dim),
        {1, gc.latent_count(), gc.token_dim}));
  return concat(fr, 0);
}

struct Args {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_gen_data(const Args& a) {
  Config c = Config::parse_file(a.config);
  const pde::System sys = pde::parse_system(c.str("data.system"));
  pde::SolveConfig sc = pde::default_config(sys);
  if (c.has("data.grid")) {
    const auto sizes = parse_index_list(c.str("data.grid"));
    sc.grid = pde::sim_grid(sys, sizes);
    sc.store_sizes = sizes;
  }
  if (c.has("data.store")) sc.store_sizes = parse_index_list(c.str("data.store"));
  sc.nt = c.integer("data.nt", sc.nt);
  sc.t_end = c.num("data.t_end", sc.t_end);
  const Index n_train = c.integer("data.n_train", 500);
  const Index n_test = c.integer("data.n_test", 50);
  const Index bs = c.integer("data.batch_size", 10);
  const std::string regime = c.str("data.regime", "both");

  fs::create_directories(a.out);
  Config eff = c;
  eff.set("data.regime", regime);
  eff.set("run.seed", std::to_string(a.seed));
  write_config_echo(a.out, eff);

  // disjoint seed offsets per split
  if (regime == "both" || regime == "InD") {
    pde::generate_dataset(sys, pde::Regime::InD, n_train, bs, a.seed, sc)
        .save((fs::path(a.out) / "train.enma").string());
    pde::generate_dataset(sys, pde::Regime::InD, n_test, bs, a.seed + 1000003, sc)
        .save((fs::path(a.out) / "test.enma").string());
  }
  if (regime == "both" || regime == "OutD") {
    pde::generate_dataset(sys, pde::Regime::OutD, n_test, bs, a.seed + 2000003, sc)
        .save((fs::path(a.out) / "ood.enma").string());
  }
  return 0;
}

int cmd_train_vae(const Args& a) {
  Config c = Config::parse_file(a.config);
  Dataset data = Dataset::load(c.str("io.dataset"));

  vae::VaeTrainConfig tc;
  tc.steps = c.integer("train.steps", 500);
  tc.batch = c.integer("train.batch", 8);
  tc.pi_min = c.num("train.pi_min", 0.2);
  tc.pi_max = c.num("train.pi_max", 1.0);
  tc.beta = c.num("train.beta", 1e-4);
  tc.beta_ramp_start = c.num("train.beta_ramp_start", 0.25);
  tc.beta_ramp_end = c.num("train.beta_ramp_end", 0.75);
  tc.lr.base = c.num("train.lr", 1e-3);
  tc.lr.floor = c.num("train.lr_floor", tc.lr.base / 100.0);
  tc.lr.warmup_steps = c.integer("train.warmup", std::max<Index>(1, tc.steps / 10));
  tc.lr.total_steps = tc.steps;

  ParamStore<Scalar> store;
  vae::VaeConfig vc;
  vae::Vae<Scalar> model;
  std::int64_t first_step = 0;
  if (c.has("io.resume")) {
    auto ck = load_checkpoint<Scalar>(c.str("io.resume"), "ENMAVAE1");
    Config echo = Config::parse(ck.config_text);
    vc = vae_config_from_echo(echo);
    store = std::move(ck.store);
    model = vae::Vae<Scalar>::from_store(store, vc);
    first_step = store.step();
  } else {
    vc = make_vae_config(c, data);
    RngStream init(a.seed);
    model = vae::Vae<Scalar>::create(store, vc, init);
  }

  Config eff = c;
  echo_vae_config(eff, vc);
  eff.set("run.seed", std::to_string(a.seed));
  const std::string echo = eff.serialize();

  auto trace = vae::train_vae(data, store, model, tc, a.seed + 1);

  fs::create_directories(a.out);
  write_config_echo(a.out, eff);
  save_checkpoint((fs::path(a.out) / "vae.ckpt").string(), "ENMAVAE1", echo, store);
  write_loss_csv(fs::path(a.out) / "loss.csv", trace, first_step, echo);
  return 0;
}

int cmd_train_gen(const Args& a) {
  Config c = Config::parse_file(a.config);
  if (!c.has("io.vae"))
    throw std::runtime_error("train-gen requires io.vae (trained tokenizer checkpoint)");
  auto vck = load_checkpoint<Scalar>(c.str("io.vae"), "ENMAVAE1");
  Config vecho = Config::parse(vck.config_text);
  vae::VaeConfig vc = vae_config_from_echo(vecho);
  vae::Vae<Scalar> tokenizer = vae::Vae<Scalar>::from_store(vck.store, vc);

  Dataset data = Dataset::load(c.str("io.dataset"));
  auto latents = gen::encode_latents(tokenizer, data);
  gen::LatentStats stats = gen::latent_statistics(latents, vc.token_dim);
  for (auto& z : latents) z = gen::standardize_latent(z, stats);

  gen::GenTrainConfig tc;
  tc.steps = c.integer("train.steps", 500);
  tc.batch = c.integer("train.batch", 8);
  tc.lr.base = c.num("train.lr", 1e-3);
  tc.lr.floor = c.num("train.lr_floor", tc.lr.base / 100.0);
  tc.lr.warmup_steps = c.integer("train.warmup", std::max<Index>(1, tc.steps / 10));
  tc.lr.total_steps = tc.steps;

  ParamStore<Scalar> store;
  gen::GenConfig gc;
  gen::Generator<Scalar> model;
  std::int64_t first_step = 0;
  if (c.has("io.resume")) {
    auto ck = load_checkpoint<Scalar>(c.str("io.resume"), "ENMAGEN1");
    Config echo = Config::parse(ck.config_text);
    gc = gen_config_from_echo(echo);
    store = std::move(ck.store);
    model = gen::Generator<Scalar>::from_store(store, gc);
    first_step = store.step();
  } else {
    gc = make_gen_config(c, vc);
    RngStream init(a.seed);
    model = gen::Generator<Scalar>::create(store, gc, init);
    // frozen latent statistics ride along in the checkpoint
    store.add("stats.mean",
              Tensor<Scalar>::from({vc.token_dim}, std::vector<Scalar>(stats.mean.begin(),
                                                                       stats.mean.end())),
              false);
    store.add("stats.stdev",
              Tensor<Scalar>::from({vc.token_dim}, std::vector<Scalar>(stats.stdev.begin(),
                                                                       stats.stdev.end())),
              false);
  }

  Config eff = c;
  echo_vae_config(eff, vc);
  echo_gen_config(eff, gc);
  eff.set("run.seed", std::to_string(a.seed));
  const std::string echo = eff.serialize();

  auto trace = gen::train_generator(latents, store, model, tc, a.seed + 1);

  fs::create_directories(a.out);
  write_config_echo(a.out, eff);
  save_checkpoint((fs::path(a.out) / "gen.ckpt").string(), "ENMAGEN1", echo, store);
  write_loss_csv(fs::path(a.out) / "loss.csv", trace, first_step, echo);
  return 0;
}

int cmd_rollout(const Args& a) {
  Config c = Config::parse_file(a.config);
  auto vck = load_checkpoint<Scalar>(c.str("io.vae"), "ENMAVAE1");
  vae::VaeConfig vc = vae_config_from_echo(Config::parse(vck.config_text));
  vae::Vae<Scalar> tokenizer = vae::Vae<Scalar>::from_store(vck.store, vc);

  auto gck = load_checkpoint<Scalar>(c.str("io.gen"), "ENMAGEN1");
  Config gecho = Config::parse(gck.config_text);
  gen::GenConfig gc = gen_config_from_echo(gecho);
  gen::Generator<Scalar> model = gen::Generator<Scalar>::from_store(gck.store, gc);
  if (gc.latent_sizes != vc.latent_sizes() || gc.token_dim != vc.token_dim)
    throw std::runtime_error("rollout: tokenizer and generator checkpoints disagree on the "
                             "latent grid");
  gen::LatentStats stats;
  {
    const auto& m = gck.store.get("stats.mean").values();
    const auto& s = gck.store.get("stats.stdev").values();
    stats.mean.assign(m.begin(), m.end());
    stats.stdev.assign(s.begin(), s.end());
  }

  Dataset data = Dataset::load(c.str("io.dataset"));
  const std::string setting = c.str("eval.setting", "temporal");
  const Index horizon = c.integer("eval.horizon", 10);
  const Index L = setting == "ivp" ? 1 : c.integer("eval.history", 10);
  const Index E = c.integer("eval.ensemble", 1);
  const Index n_eval =
      std::min<Index>(c.integer("eval.n_traj", 8), data.n_traj);
  if (L < 1 || horizon < 1 || L + horizon > data.nt)
    throw std::runtime_error("rollout: need 1 <= history and history + horizon <= dataset nt");
  if (setting == "ivp" && data.batch_size < 2)
    throw std::runtime_error(
        "rollout: setting=ivp requires a context trajectory sharing each target's parameters "
        "(batch_size >= 2)");
  if (setting != "ivp" && setting != "temporal")
    throw std::runtime_error("rollout: unknown setting " + setting);

  Tensor<Scalar> coords = vae::coords_tensor<Scalar>(data);
  const Index t_total = L + horizon;
  const Index total_lat = vae::stage_shapes(vc, t_total).back().T;

  auto encode = [&](const Tensor<Scalar>& values) {
    auto vo = vae::compress(tokenizer, vae::interp_encode(tokenizer, coords, values));
    return gen::standardize_latent(vo.mean, stats);
  };

  std::vector<eval::EnsembleForecast> forecasts;
  Dataset pred = data;
  pred.n_traj = n_eval;
  pred.nt = t_total;
  pred.batch_size = 1;
  pred.seed = a.seed;
  pred.fields.assign(static_cast<size_t>(n_eval * t_total * data.frame_size()), 0.0f);
  pred.batch_params.assign(static_cast<size_t>(n_eval), {});

  NoGrad off;
  for (Index ti = 0; ti < n_eval; ++ti) {
    std::vector<Tensor<Scalar>> members;
    const std::uint64_t base = a.seed + 1000003ull * static_cast<std::uint64_t>(ti);
    if (setting == "temporal") {
      Tensor<Scalar> hist_lat = encode(frames_slice(data, ti, 0, L));
      Tensor<Scalar> hist = patchify_frames(hist_lat, gc);
      for (Index e = 0; e < E; ++e) {
        RngStream rng(base + static_cast<std::uint64_t>(e));
        Tensor<Scalar> gen_frames = gen::rollout(model, hist, total_lat, rng);
        Tensor<Scalar> all = gen_frames.dim(0) > 0
                                 ? concat(std::vector<Tensor<Scalar>>{hist, gen_frames}, 0)
                                 : hist;
        Tensor<Scalar> tokens =
            gen::unstandardize_latent(unpatchify_frames(all, gc), stats);
        members.push_back(vae::decompress_and_decode(tokenizer, tokens, t_total, coords));
      }
    } else {
      // partner trajectory in the same batch shares the PDE parameters
      const Index in_batch = ti % data.batch_size;
      const Index ctx_idx = in_batch + 1 < data.batch_size ? ti + 1 : ti - 1;
      Tensor<Scalar> ctx_lat = encode(frames_slice(data, ctx_idx, 0, data.nt));
      Tensor<Scalar> ctx = patchify_frames(ctx_lat, gc);
      Tensor<Scalar> z0_lat = encode(frames_slice(data, ti, 0, 1));
      Tensor<Scalar> z0 = reshape(patchify_frames(z0_lat, gc),
                                  {gc.m_tokens(), gc.patch_dim()});
      for (Index e = 0; e < E; ++e) {
        RngStream rng(base + static_cast<std::uint64_t>(e));
        Tensor<Scalar> gen_frames =
            gen::rollout_with_context(model, ctx, z0, total_lat - 1, rng);
        Tensor<Scalar> all = concat(
            std::vector<Tensor<Scalar>>{reshape(z0, {1, gc.m_tokens(), gc.patch_dim()}),
                                        gen_frames},
            0);
        Tensor<Scalar> tokens =
            gen::unstandardize_latent(unpatchify_frames(all, gc), stats);
        members.push_back(vae::decompress_and_decode(tokenizer, tokens, t_total, coords));
      }
    }

    // member 0 is the stored representative sample
    float* dst = pred.fields.data() + ti * t_total * data.frame_size();
    for (Index i = 0; i < members[0].size(); ++i)
      dst[i] = static_cast<float>(members[0].data()[i]);

    eval::EnsembleForecast f;
    f.steps = horizon;
    f.points = data.frame_size();
    const float* tp = data.traj(ti) + L * data.frame_size();
    f.truth.assign(tp, tp + horizon * data.frame_size());
    for (auto& m : members) {
      const Scalar* mp = m.data() + L * data.frame_size();
      f.members.emplace_back(mp, mp + horizon * data.frame_size());
    }
    forecasts.push_back(std::move(f));
  }

  Config eff = c;
  eff.set("eval.setting", setting);
  eff.set("eval.history", std::to_string(L));
  eff.set("eval.horizon", std::to_string(horizon));
  eff.set("eval.ensemble", std::to_string(E));
  eff.set("run.seed", std::to_string(a.seed));
  const std::string echo = eff.serialize();

  fs::create_directories(a.out);
  write_config_echo(a.out, eff);
  pred.save((fs::path(a.out) / "predictions.enma").string());
  eval::EvalReport rep = eval::evaluate(forecasts, c.flag("eval.fair_crps", false));
  eval::write_report_rows_csv((fs::path(a.out) / "metrics.csv").string(), rep, echo);
  eval::write_report_aggregate_csv((fs::path(a.out) / "aggregate.csv").string(), rep, echo);
  return 0;
}

int cmd_evaluate(const Args& a) {
  Config c = Config::parse_file(a.config);
  Dataset pred = Dataset::load(c.str("io.predictions"));
  Dataset truth = Dataset::load(c.str("io.dataset"));
  if (pred.frame_size() != truth.frame_size() || pred.nt > truth.nt ||
      pred.n_traj > truth.n_traj)
    throw std::runtime_error("evaluate: predictions do not fit inside the truth dataset");
  const Index skip = c.integer("eval.history", 0);
  if (skip >= pred.nt) throw std::runtime_error("evaluate: history skip exceeds stored frames");

  std::vector<eval::EnsembleForecast> forecasts;
  for (Index ti = 0; ti < pred.n_traj; ++ti) {
    eval::EnsembleForecast f;
    f.steps = pred.nt - skip;
    f.points = pred.frame_size();
    const float* pp = pred.traj(ti) + skip * pred.frame_size();
    const float* tp = truth.traj(ti) + skip * truth.frame_size();
    f.members.emplace_back(pp, pp + f.steps * f.points);
    f.truth.assign(tp, tp + f.steps * f.points);
    forecasts.push_back(std::move(f));
  }
  Config eff = c;
  eff.set("run.seed", std::to_string(a.seed));
  const std::string echo = eff.serialize();
  fs::create_directories(a.out);
  write_config_echo(a.out, eff);
  eval::EvalReport rep = eval::evaluate(forecasts);
  eval::write_report_rows_csv((fs::path(a.out) / "metrics.csv").string(), rep, echo);
  eval::write_report_aggregate_csv((fs::path(a.out) / "aggregate.csv").string(), rep, echo);
  return 0;
}

int cmd_plot(const Args& a) {
  Config c = Config::parse_file(a.config);
  Dataset pred = Dataset::load(c.str("io.predictions"));
  Dataset truth = Dataset::load(c.str("io.dataset"));
  if (pred.frame_size() != truth.frame_size() || pred.nt > truth.nt)
    throw std::runtime_error("plot: predictions do not fit inside the truth dataset");
  const Index n_plot = std::min<Index>(c.integer("plot.max_traj", 1),
                                       std::min(pred.n_traj, truth.n_traj));
  fs::create_directories(a.out);
  Config eff = c;
  eff.set("run.seed", std::to_string(a.seed));
  write_config_echo(a.out, eff);

  auto emit = [&](const std::string& stem, const std::vector<double>& p,
                  const std::vector<double>& t, Index h, Index w) {
    double vmin = p[0], vmax = p[0];
    for (double v : p) {
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
    for (double v : t) {
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
    std::vector<double> err(p.size());
    double emax = 0;
    for (size_t i = 0; i < p.size(); ++i) {
      err[i] = std::abs(p[i] - t[i]);
      emax = std::max(emax, err[i]);
    }
    const fs::path dir(a.out);
    write_pgm_heatmap((dir / (stem + "_pred.pgm")).string(), p, h, w, vmin, vmax);
    write_pgm_heatmap((dir / (stem + "_truth.pgm")).string(), t, h, w, vmin, vmax);
    // exact agreement renders all-black
    write_pgm_heatmap((dir / (stem + "_err.pgm")).string(), err, h, w, 0.0,
                      emax > 0 ? emax : 1.0);
  };

  for (Index ti = 0; ti < n_plot; ++ti)
    for (Index ch = 0; ch < pred.channels; ++ch) {
      const std::string cstem = pred.channels > 1 ? "_c" + std::to_string(ch) : "";
      auto gather = [&](const Dataset& d, Index t0, Index count, std::vector<double>& out) {
        out.clear();
        const float* p = d.traj(ti);
        for (Index t = t0; t < t0 + count; ++t)
          for (Index s = 0; s < d.sites(); ++s)
            out.push_back(p[(t * d.sites() + s) * d.channels + ch]);
      };
      std::vector<double> pv, tv;
      if (pred.spatial.size() == 1) {
        // space-time heatmap: rows are frames
        gather(pred, 0, pred.nt, pv);
        gather(truth, 0, pred.nt, tv);
        emit("traj" + std::to_string(ti) + cstem, pv, tv, pred.nt, pred.spatial[0]);
      } else {
        for (Index t = 0; t < pred.nt; ++t) {
          gather(pred, t, 1, pv);
          gather(truth, t, 1, tv);
          emit("traj" + std::to_string(ti) + "_f" + std::to_string(t) + cstem, pv, tv,
               pred.spatial[0], pred.spatial[1]);
        }
      }
    }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // training churns through large short-lived buffers; keep them on the heap
  // instead of round-tripping pages through mmap
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
  CLI::App app{"autoregressive neural-operator pipeline for parametric PDEs"};
  app.require_subcommand(1);

  std::map<std::string, int (*)(const Args&)> handlers{
      {"gen-data", cmd_gen_data}, {"train-vae", cmd_train_vae},
      {"train-gen", cmd_train_gen}, {"rollout", cmd_rollout},
      {"evaluate", cmd_evaluate}, {"plot", cmd_plot}};
  std::map<std::string, Args> args;
  for (auto& [name, fn] : handlers) {
    CLI::App* sub = app.add_subcommand(name);
    Args& a = args[name];
    sub->add_option("--config", a.config, "config file path")->required();
    sub->add_option("--seed", a.seed, "run seed");
    sub->add_option("--out", a.out, "output directory")->required();
  }

  CLI11_PARSE(app, argc, argv);
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    return handlers.at(name)(args.at(name));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
