#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "ttabench/dataset.hpp"
#include "ttabench/rng.hpp"

using namespace ttb;

namespace {

// Compile-time guard: the adaptation surface must not expose labels.
template <typename T>
concept ExposesLabels = requires(const T& t) { t.labels; } ||
                        requires(const T& t, int i) { t.label(i); } ||
                        requires(const T& t) { t.gather_labels(std::vector<int>{}); };
static_assert(!ExposesLabels<AdaptationSet>,
              "adaptation sets must keep labels sealed");
static_assert(ExposesLabels<LabeledDataset>);

std::filesystem::path write_fake_cifar(int per_class) {
  auto dir = std::filesystem::temp_directory_path() / "ttabench-test";
  std::filesystem::create_directories(dir);
  auto path = dir / "fake_cifar.bin";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  Rng rng(7);
  for (int cls = 0; cls < 10; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      out.put(static_cast<char>(cls));
      for (int p = 0; p < 3072; ++p) {
        out.put(static_cast<char>(rng.next_below(256)));
      }
    }
  }
  return path;
}

}  // namespace

TEST_CASE("synthshapes: counts, determinism, learnable classes") {
  LabeledDataset ds = generate_synthshapes(10, 200, 1);
  CHECK(ds.size() == 2000);
  CHECK(ds.category_set().size() == 10);
  ds.validate();
  LabeledDataset again = generate_synthshapes(10, 200, 1);
  CHECK(ds.digest() == again.digest());
  LabeledDataset other = generate_synthshapes(10, 200, 2);
  CHECK(ds.digest() != other.digest());

  // Nearest-centroid pixel classifier beats chance on a fresh sample.
  LabeledDataset train = generate_synthshapes(10, 40, 11);
  LabeledDataset fresh = generate_synthshapes(10, 10, 12);
  const std::int64_t d = 3 * 32 * 32;
  std::vector<std::vector<double>> centroids(10, std::vector<double>(d, 0.0));
  std::vector<int> counts(10, 0);
  for (int i = 0; i < train.size(); ++i) {
    const float* img = train.images.data() + static_cast<std::ptrdiff_t>(i) * d;
    auto& cen = centroids[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(i)])];
    for (std::int64_t j = 0; j < d; ++j) cen[static_cast<std::size_t>(j)] += img[j];
    counts[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(i)])]++;
  }
  for (int c = 0; c < 10; ++c) {
    for (auto& v : centroids[static_cast<std::size_t>(c)]) {
      v /= counts[static_cast<std::size_t>(c)];
    }
  }
  int correct = 0;
  for (int i = 0; i < fresh.size(); ++i) {
    const float* img = fresh.images.data() + static_cast<std::ptrdiff_t>(i) * d;
    int best = -1;
    double best_dist = 1e300;
    for (int c = 0; c < 10; ++c) {
      double dist = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double diff = img[j] - centroids[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    if (best == fresh.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  const double acc = static_cast<double>(correct) / fresh.size();
  INFO("nearest-centroid accuracy " << acc);
  CHECK(acc > 0.10);
}

TEST_CASE("cifar-10 binary loader") {
  const auto path = write_fake_cifar(20);  // 200 records
  LabeledDataset all = load_cifar10_binary(path, 0, 1);
  CHECK(all.size() == 200);
  for (std::int64_t i = 0; i < all.images.numel(); ++i) {
    CHECK(all.images.data()[i] >= 0.0f);
    CHECK(all.images.data()[i] <= 1.0f);
  }
  LabeledDataset sub = load_cifar10_binary(path, 10, 1);
  CHECK(sub.size() == 100);
  std::map<int, int> per_class;
  for (int y : sub.labels) per_class[y]++;
  for (const auto& [cls, count] : per_class) CHECK(count == 10);
  CHECK_THROWS_AS(load_cifar10_binary(path, 21, 1), config_error);

  // truncated record
  auto bad = std::filesystem::temp_directory_path() / "ttabench-test" / "bad.bin";
  {
    std::ofstream out(bad, std::ios::binary | std::ios::trunc);
    std::string content(3073 * 2 + 100, '\0');
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
  }
  CHECK_THROWS_AS(load_cifar10_binary(bad, 0, 1), io_error);

  // bad label byte
  auto badlabel = std::filesystem::temp_directory_path() / "ttabench-test" / "badlabel.bin";
  {
    std::ofstream out(badlabel, std::ios::binary | std::ios::trunc);
    std::string content(3073, '\0');
    content[0] = 11;
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
  }
  CHECK_THROWS_AS(load_cifar10_binary(badlabel, 0, 1), io_error);
}

TEST_CASE("make_target_domain copies labels and tags the domain") {
  LabeledDataset src = generate_synthshapes(10, 8, 5);
  std::vector<CorruptionSpec> specs = {{"gaussian_noise", 5}};
  LabeledDataset tgt = make_target_domain(src, specs, 9);
  CHECK(tgt.labels == src.labels);
  CHECK(tgt.domains == std::vector<std::string>{"gaussian_noise@5"});
  CHECK(tgt.digest() != src.digest());
  LabeledDataset tgt2 = make_target_domain(src, specs, 9);
  CHECK(tgt.digest() == tgt2.digest());
  CHECK_THROWS_AS(make_target_domain(src, {}, 9), config_error);
}

TEST_CASE("scenario1: unique subset, full-set case, sweep defaults") {
  auto d_t = std::make_shared<LabeledDataset>(generate_synthshapes(10, 80, 3));
  ScenarioSplit s = scenario1(d_t, 512, 21);
  CHECK(s.delta_t.size() == 512);
  std::set<int> unique(s.delta_t.indices().begin(), s.delta_t.indices().end());
  CHECK(unique.size() == 512);
  CHECK_FALSE(s.delta_ood.has_value());
  // repeatable
  ScenarioSplit again = scenario1(d_t, 512, 21);
  CHECK(s.delta_t.indices() == again.delta_t.indices());

  ScenarioSplit full = scenario1(d_t, d_t->size(), 4);
  std::set<int> all(full.delta_t.indices().begin(), full.delta_t.indices().end());
  CHECK(static_cast<int>(all.size()) == d_t->size());

  CHECK_THROWS_AS(scenario1(d_t, d_t->size() + 1, 4), config_error);
  CHECK_THROWS_AS(scenario1(d_t, 0, 4), config_error);

  const auto sweep = default_s1_sweep();
  for (int v : {64, 128, 512, 8192}) {
    CHECK(std::count(sweep.begin(), sweep.end(), v) == 1);
  }
}

TEST_CASE("scenario2: category split with fixed choice per seed") {
  auto d_t = std::make_shared<LabeledDataset>(generate_synthshapes(10, 50, 3));
  ScenarioSplit s = scenario2(d_t, 3, 40, 77);
  CHECK(s.delta_t.size() == 3 * 40);
  REQUIRE(s.delta_ood.has_value());
  auto t_labels = detail::LabelOracleKey::labels(s.delta_t);
  auto o_labels = detail::LabelOracleKey::labels(*s.delta_ood);
  std::set<int> t_cats(t_labels.begin(), t_labels.end());
  std::set<int> o_cats(o_labels.begin(), o_labels.end());
  CHECK(t_cats.size() == 3);
  CHECK(o_cats.size() == 7);
  for (int c : t_cats) CHECK_FALSE(o_cats.count(c));
  // identical category choice for the same seed
  ScenarioSplit again = scenario2(d_t, 3, 40, 77);
  CHECK(s.delta_t.indices() == again.delta_t.indices());

  ScenarioSplit nine = scenario2(d_t, 9, 10, 5);
  auto ood9 = detail::LabelOracleKey::labels(*nine.delta_ood);
  CHECK(std::set<int>(ood9.begin(), ood9.end()).size() == 1);

  CHECK_THROWS_AS(scenario2(d_t, 10, 10, 5), config_error);
  CHECK_THROWS_AS(scenario2(d_t, 2, 51, 5), config_error);
}

TEST_CASE("scenario3: domain split") {
  LabeledDataset src = generate_synthshapes(10, 20, 3);
  std::vector<LabeledDataset> domains;
  for (const auto& tau : {"gaussian_noise", "fog", "brightness"}) {
    domains.push_back(make_target_domain(src, {{tau, 3}}, 4));
  }
  ScenarioSplit s = scenario3(domains, 2, 150, 8);
  CHECK(s.delta_t.size() == 300);
  REQUIRE(s.delta_ood.has_value());
  CHECK(s.delta_ood->size() == 200);
  CHECK(s.d_t->size() == 600);
  std::set<std::string> t_doms, o_doms;
  for (int i = 0; i < s.delta_t.size(); ++i) t_doms.insert(s.delta_t.domain_tag(i));
  for (int i = 0; i < s.delta_ood->size(); ++i) {
    o_doms.insert(s.delta_ood->domain_tag(i));
  }
  CHECK(t_doms.size() == 2);
  CHECK(o_doms.size() == 1);
  for (const auto& d : t_doms) CHECK_FALSE(o_doms.count(d));

  ScenarioSplit all = scenario3(domains, 3, 100, 8);
  CHECK(all.delta_ood->size() == 0);

  CHECK_THROWS_AS(scenario3(domains, 4, 10, 8), config_error);
  CHECK_THROWS_AS(scenario3(domains, 2, 201, 8), config_error);
}

TEST_CASE("scenario4: stacked corruption domain") {
  LabeledDataset src = generate_synthshapes(10, 20, 3);
  std::vector<CorruptionSpec> stack = {{"brightness", 5}, {"zoom_blur", 5}};
  ScenarioSplit s = scenario4(src, stack, 64, 13);
  CHECK(s.delta_t.size() == 64);
  CHECK(s.d_t->size() == src.size());
  // every delta_t sample carries the stacked-domain digest of d_t
  for (int i = 0; i < s.delta_t.size(); ++i) {
    CHECK(s.delta_t.domain_tag(i) == "brightness@5+zoom_blur@5");
  }
  CHECK(s.d_t->domains == std::vector<std::string>{"brightness@5+zoom_blur@5"});
  // singleton stack reduces to the scenario-1 construction on one domain
  ScenarioSplit single = scenario4(src, {{"fog", 5}}, 32, 13);
  CHECK(single.delta_t.size() == 32);
  CHECK(single.d_t->domains == std::vector<std::string>{"fog@5"});
}

TEST_CASE("adaptation set rejects duplicate or out-of-range indices") {
  auto ds = std::make_shared<LabeledDataset>(generate_synthshapes(10, 4, 3));
  CHECK_THROWS_AS(AdaptationSet(ds, {1, 1}), shape_error);
  CHECK_THROWS_AS(AdaptationSet(ds, {40}), shape_error);
  AdaptationSet ok(ds, {0, 3, 7});
  CHECK(ok.size() == 3);
  Tensor batch = ok.gather_images({0, 2});
  CHECK(batch.shape() == Shape{2, 3, 32, 32});
}
