#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "gradcheck.hpp"
#include "ttabench/dataset.hpp"
#include "ttabench/model.hpp"

using namespace ttb;
using gradcheck::fd_gradient;
using gradcheck::random_tensor;
using gradcheck::to_double;
using refops::dvec;

namespace {

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "ttabench-test";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("build_model is deterministic and rejects bad arguments") {
  Model a = build_model("smallcnn-32", 10, 7);
  Model b = build_model("smallcnn-32", 10, 7);
  CHECK(a.digest() == b.digest());
  Model c = build_model("smallcnn-32", 10, 8);
  CHECK(a.digest() != c.digest());
  CHECK_THROWS_AS(build_model("resnet-26", 10, 7), config_error);
  CHECK_THROWS_AS(build_model("smallcnn-32", 1, 7), config_error);
}

TEST_CASE("parameter group partition and sizes") {
  Model m = build_model("smallcnn-32", 10, 7);
  // head: 128*10 + 10
  CHECK(m.param("head.w").numel() + m.param("head.b").numel() == 1290);
  // norm_affine: 2 * (32 + 64 + 128)
  std::int64_t affine = 0;
  for (const auto& name : m.group_params(kGroupNormAffine)) {
    affine += m.param(name).numel();
  }
  CHECK(affine == 448);
  // union of groups == all parameters, pairwise disjoint
  std::set<std::string> seen;
  std::size_t total = 0;
  for (const auto& [group, names] : m.groups()) {
    for (const auto& n : names) {
      CHECK(seen.insert(n).second);  // no duplicates across groups
      ++total;
    }
  }
  CHECK(total == m.param_order().size());
  // norm_stats never carries requires_grad
  for (const auto& name : m.group_params(kGroupNormStats)) {
    CHECK_FALSE(m.param(name).requires_grad());
  }
}

TEST_CASE("frozen eval forward is pure and deterministic") {
  Model m = build_model("smallcnn-32", 10, 3);
  Rng rng(17);
  Tensor batch = random_tensor({4, 3, 32, 32}, rng, 0.0, 1.0);
  const std::string digest_before = m.digest();
  ForwardOutput o1 = forward_eval(m, batch);
  ForwardOutput o2 = forward_eval(m, batch);
  CHECK(o1.logits.content_hash() == o2.logits.content_hash());
  CHECK(o1.embeddings.shape() == Shape{4, 128});
  CHECK(m.digest() == digest_before);
}

TEST_CASE("adapt forward moves running stats; later eval output changes") {
  Model m = build_model("smallcnn-32", 10, 3);
  Rng rng(18);
  Tensor batch = random_tensor({8, 3, 32, 32}, rng, 0.0, 1.0);
  Tensor probe = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  ForwardOutput before = forward_eval(m, probe);
  ForwardOpts adapt;
  adapt.mode = ForwardMode::kAdapt;
  forward(m, batch, adapt);
  ForwardOutput after = forward_eval(m, probe);
  CHECK(before.logits.content_hash() != after.logits.content_hash());
}

TEST_CASE("forward rejects wrong spatial shape") {
  Model m = build_model("smallcnn-32", 10, 3);
  CHECK_THROWS_AS(forward_eval(m, Tensor::zeros({2, 3, 16, 16})), shape_error);
  CHECK_THROWS_AS(forward_eval(m, Tensor::zeros({2, 1, 32, 32})), shape_error);
}

TEST_CASE("gradcheck: full classifier loss vs finite differences") {
  Model m = build_model("smallcnn-32", 10, 5);
  Rng rng(51);
  Tensor images = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  std::vector<int> labels = {3, 7};

  std::vector<std::string> trainable;
  for (const auto& g :
       {kGroupFeatureWeights, kGroupNormAffine, kGroupClassifierHead}) {
    for (const auto& n : m.group_params(g)) trainable.push_back(n);
  }
  for (const auto& n : trainable) m.param(n).set_requires_grad(true);

  ForwardOpts fwd;
  fwd.mode = ForwardMode::kAdapt;
  fwd.update_running = false;
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    ForwardOutput out = forward(m, images, fwd);
    loss = cross_entropy_mean(out.logits, labels);
  }
  backward(loss, tape);

  std::map<std::string, dvec> ref_params;
  for (const auto& name : m.param_order()) {
    ref_params[name] = to_double(m.param(name));
  }
  const dvec ref_images = to_double(images);

  // Probe a few random elements in several parameter tensors.
  double worst = 0.0;
  for (const auto& name : {"conv1.w", "conv3.w", "bn2.gamma", "head.w"}) {
    Tensor& p = m.param(name);
    dvec& rp = ref_params.at(name);
    double scale = 0.0;
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      scale = std::max(scale, std::abs(static_cast<double>(p.grad()[i])));
    }
    for (int probe = 0; probe < 2; ++probe) {
      const std::size_t i =
          static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(p.numel())));
      const double saved = rp[i];
      const double eps = 1e-6;  // double-precision oracle; tiny eps avoids
                                // relu/max-pool kink-crossing bias
      rp[i] = saved + eps;
      const double up =
          refops::smallcnn_ce_loss(ref_params, ref_images, labels, 2, true);
      rp[i] = saved - eps;
      const double down =
          refops::smallcnn_ce_loss(ref_params, ref_images, labels, 2, true);
      rp[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      worst = std::max(worst,
                       std::abs(static_cast<double>(p.grad()[i]) - fd) /
                           std::max(scale, 1e-8));
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("pretrain: epochs=0 unchanged, determinism, loss decreases") {
  Model m = build_model("smallcnn-32", 10, 9);
  LabeledDataset ds = generate_synthshapes(10, 24, 77);
  PretrainOpts opts;
  opts.epochs = 0;
  opts.seed = 5;
  Model unchanged = pretrain_source(m, ds, opts);
  CHECK(unchanged.digest() == m.digest());

  opts.epochs = 3;
  opts.lr = 0.05f;
  PretrainLog log1, log2;
  Model t1 = pretrain_source(m, ds, opts, &log1);
  Model t2 = pretrain_source(m, ds, opts, &log2);
  CHECK(t1.digest() == t2.digest());
  REQUIRE(log1.epoch_losses.size() == 3);
  CHECK(log1.epoch_losses[1] < log1.epoch_losses[0]);
  CHECK(log1.epoch_losses[2] < log1.epoch_losses[1]);
  // trained parameters no longer carry gradients or requires_grad
  for (const auto& name : t1.param_order()) {
    CHECK_FALSE(t1.param(name).requires_grad());
  }
}

TEST_CASE("model file round trip") {
  Model m = build_model("smallcnn-32", 10, 12);
  const auto dir = temp_dir();
  const auto path = dir / "model_roundtrip.ttbm";
  save_model(m, path);
  Model loaded = load_model(path);
  CHECK(loaded.digest() == m.digest());
  CHECK(loaded.arch_id == "smallcnn-32");
  CHECK(loaded.class_count == 10);
  // save -> load -> save produces byte-identical files
  const auto path2 = dir / "model_roundtrip2.ttbm";
  save_model(loaded, path2);
  CHECK(read_file(path) == read_file(path2));
  // logits identical after reload
  Rng rng(19);
  Tensor batch = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  CHECK(forward_eval(m, batch).logits.content_hash() ==
        forward_eval(loaded, batch).logits.content_hash());
}

TEST_CASE("model file corruption and truncation are rejected") {
  Model m = build_model("smallcnn-32", 4, 2);
  std::string bytes = serialize_model(m);
  // flip one payload byte
  std::string corrupted = bytes;
  corrupted[corrupted.size() / 2] =
      static_cast<char>(corrupted[corrupted.size() / 2] ^ 0x40);
  CHECK_THROWS_AS(deserialize_model(corrupted), io_error);
  // truncated file
  CHECK_THROWS_AS(deserialize_model(bytes.substr(0, bytes.size() / 3)), io_error);
  // bad magic
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(bad_magic), io_error);
  // version mismatch (recompute crc so only the version check fires)
  std::string bad_version = bytes;
  bad_version[4] = 9;
  std::string no_crc = bad_version.substr(0, bad_version.size() - 4);
  std::string fixed = no_crc;
  put_u32le(fixed, crc32(no_crc.data(), no_crc.size()));
  CHECK_THROWS_AS(deserialize_model(fixed), io_error);
}
