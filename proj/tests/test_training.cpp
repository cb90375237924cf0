#include <doctest.h>

#include "helpers.hpp"

using namespace testutil;

namespace {

TrainConfig small_run(Method method, int iterations, std::uint64_t seed = 4) {
  TrainConfig cfg;
  cfg.method = method;
  cfg.data.classes = {markov_reference()};
  cfg.codebook = std::make_shared<const Codebook>(square_codebook());
  cfg.model.hidden_width = 16;
  cfg.model.time_features = 8;
  cfg.optim.batch_size = 16;
  cfg.optim.iterations = iterations;
  cfg.optim.lr = 1e-3;
  cfg.logging.log_every = 2;
  cfg.seed = seed;
  cfg.finalize();
  return cfg;
}

}  // namespace

TEST_CASE("AdamW step matches a hand-computed update") {
  ModelConfig mc;
  mc.G = 1;
  mc.K = 2;
  mc.E = 1;
  mc.hidden_layers = 0;
  mc.time_features = 2;
  Params<double> p = Params<double>::zeros_like(ParamLayout::for_config(mc));
  std::fill(p.values.begin(), p.values.end(), 0.5);
  Params<double> g = Params<double>::zeros_like(p.layout);
  std::fill(g.values.begin(), g.values.end(), 0.2);
  AdamState<double> st = AdamState<double>::zeros(p.size());
  OptimConfig oc;
  oc.lr = 0.1;
  oc.weight_decay = 0.01;

  optim_step(p, g, st, oc);
  // Decay first, then the bias-corrected step: m_hat = g, v_hat = g^2.
  const double first = 0.5 * (1 - 0.1 * 0.01) - 0.1 * 0.2 / (0.2 + 1e-6);
  CHECK(p.values[0] == doctest::Approx(first).epsilon(1e-14));

  optim_step(p, g, st, oc);
  const double m = 0.9 * 0.1 * 0.2 + 0.1 * 0.2;
  const double v = 0.999 * 0.001 * 0.04 + 0.001 * 0.04;
  const double m_hat = m / (1 - 0.81);
  const double v_hat = v / (1 - 0.999 * 0.999);
  const double second = first * (1 - 0.1 * 0.01) - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-6);
  CHECK(p.values[0] == doctest::Approx(second).epsilon(1e-13));
  CHECK(st.step == 2);

  g.values[1] = std::nan("");
  const auto before = p.values;
  CHECK_THROWS_AS(optim_step(p, g, st, oc), NumericalError);
  CHECK(p.values == before);
}

TEST_CASE("EMA update and warmup schedule") {
  ModelConfig mc;
  mc.hidden_layers = 0;
  mc.time_features = 2;
  Params<double> ema = Params<double>::zeros_like(ParamLayout::for_config(mc));
  Params<double> p = ema;
  std::fill(p.values.begin(), p.values.end(), 1.0);
  ema_update(ema, p, 0.75);
  CHECK(ema.values[0] == doctest::Approx(0.25));
  ema_update(ema, p, 1.0);
  CHECK(ema.values[0] == doctest::Approx(0.25));

  OptimConfig oc;
  CHECK(ema_decay_at(oc, 1) == doctest::Approx(2.0 / 11.0));
  CHECK(ema_decay_at(oc, 100000) == doctest::Approx(0.9999));
  oc.ema_warmup = false;
  CHECK(ema_decay_at(oc, 1) == 0.9999);
}

TEST_CASE("trainer is deterministic per seed") {
  Trainer a(small_run(Method::purrception, 5));
  Trainer b(small_run(Method::purrception, 5));
  Trainer c(small_run(Method::purrception, 5, 99));
  for (int i = 0; i < 5; ++i) {
    const MetricsRow ra = a.step();
    const MetricsRow rb = b.step();
    CHECK(ra.loss_total == rb.loss_total);
    c.step();
  }
  CHECK(a.params().values == b.params().values);
  CHECK(a.ema().values == b.ema().values);
  CHECK(a.params().values != c.params().values);
  CHECK(a.iteration() == 5);
}

TEST_CASE("training reduces the loss for every method") {
  for (Method m : {Method::purrception, Method::cfm, Method::dfm}) {
    CAPTURE(method_name(m));
    TrainConfig cfg = small_run(m, 300);
    cfg.optim.batch_size = 64;
    cfg.logging.log_every = 50;
    const TrainResult res = train(cfg);
    REQUIRE(res.metrics.size() == 6);
    CHECK(res.metrics.back().loss_total < res.metrics.front().loss_total);
    CHECK(res.checkpoint.iteration == 300);
  }
}

TEST_CASE("checkpoint round trip and integrity") {
  Trainer tr(small_run(Method::dfm, 3));
  for (int i = 0; i < 3; ++i) tr.step();
  const Checkpoint ck = tr.checkpoint();
  const std::string bytes = serialize_checkpoint(ck);
  CHECK(bytes.substr(0, 8) == "PURRCKPT");
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(back.method == Method::dfm);
  CHECK(back.iteration == 3);
  CHECK(back.params.values == ck.params.values);
  CHECK(back.ema.values == ck.ema.values);
  CHECK(back.adam.m == ck.adam.m);
  CHECK(back.adam.v == ck.adam.v);
  CHECK(back.config_hash() == ck.config_hash());
  CHECK(serialize_checkpoint(back) == bytes);

  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x10;
  CHECK_THROWS_AS(deserialize_checkpoint(flipped), FormatError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 4)), FormatError);
  CHECK_THROWS_AS(deserialize_checkpoint("NOTACKPT"), FormatError);

  CHECK_THROWS_AS(require_method(ck, Method::purrception), ConfigError);
  CHECK_NOTHROW(require_method(ck, Method::dfm));

  const auto dir = scratch_dir("training_ckpt");
  save_checkpoint(ck, dir / "a.ckpt");
  CHECK(read_file((dir / "a.ckpt").string()) == bytes);
  CHECK(load_checkpoint(dir / "a.ckpt").params.values == ck.params.values);
}

TEST_CASE("train writes metrics and periodic checkpoints") {
  TrainConfig cfg = small_run(Method::cfm, 6);
  cfg.logging.ckpt_every = 3;
  const auto dir = scratch_dir("training_run");
  const TrainResult res = train(cfg, dir);
  CHECK(std::filesystem::exists(dir / "ckpt_00000003.ckpt"));
  CHECK(std::filesystem::exists(dir / "ckpt_00000006.ckpt"));
  CHECK(std::filesystem::exists(dir / "ckpt_final.ckpt"));
  const std::string csv = read_file((dir / "metrics.csv").string());
  CHECK(csv.rfind(std::string(metrics_csv_header()), 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  // Wall-clock timing is opt-in.
  CHECK(csv.find("\n2,0.000,") != std::string::npos);

  const auto dir2 = scratch_dir("training_run2");
  train(cfg, dir2);
  CHECK(read_file((dir2 / "metrics.csv").string()) == csv);
  CHECK(read_file((dir2 / "ckpt_final.ckpt").string()) == read_file((dir / "ckpt_final.ckpt").string()));
}

TEST_CASE("metrics row formatting") {
  MetricsRow r;
  r.iteration = 7;
  r.loss_total = 0.5;
  r.loss_primary = 0.25;
  r.loss_z = 1e-6;
  r.grad_norm = 2;
  r.mean_log2z = 0.1;
  CHECK(std::string(metrics_csv_header()) == "iteration,wall_ms,loss_total,loss_primary,loss_z,grad_norm,mean_log2Z");
  CHECK(metrics_csv_row(r) == "7,0.000,0.5,0.25,1e-06,2,0.1");
}

TEST_CASE("config consistency checks") {
  TrainConfig cfg = small_run(Method::purrception, 1);
  cfg.codebook = std::make_shared<const Codebook>(pair_codebook());
  CHECK_THROWS_AS(cfg.finalize(), ConfigError);

  TrainConfig bad = small_run(Method::purrception, 1);
  bad.optim.lr = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_run(Method::purrception, 1);
  bad.optim.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
