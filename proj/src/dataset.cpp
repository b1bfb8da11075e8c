#include "ttabench/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <set>

#include <nlohmann/json.hpp>

#include "ttabench/rng.hpp"

namespace ttb {

using nlohmann::json;

namespace {
constexpr int kSide = 32;
constexpr int kChannels = 3;
constexpr std::int64_t kImageElems = kChannels * kSide * kSide;
}  // namespace

std::vector<int> LabeledDataset::category_set() const {
  std::set<int> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

std::vector<std::string> LabeledDataset::domain_set() const {
  return domains;
}

Tensor LabeledDataset::image(int i) const {
  if (i < 0 || i >= size()) throw shape_error("image index out of range");
  Tensor out = Tensor::zeros({kChannels, kSide, kSide});
  std::memcpy(out.data(), images.data() + static_cast<std::ptrdiff_t>(i) * kImageElems,
              static_cast<std::size_t>(kImageElems) * 4);
  return out;
}

Tensor LabeledDataset::gather_images(const std::vector<int>& indices) const {
  Tensor out = Tensor::zeros(
      {static_cast<int>(indices.size()), kChannels, kSide, kSide});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const int i = indices[j];
    if (i < 0 || i >= size()) throw shape_error("image index out of range");
    std::memcpy(out.data() + static_cast<std::ptrdiff_t>(j) * kImageElems,
                images.data() + static_cast<std::ptrdiff_t>(i) * kImageElems,
                static_cast<std::size_t>(kImageElems) * 4);
  }
  return out;
}

std::vector<int> LabeledDataset::gather_labels(
    const std::vector<int>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

std::string LabeledDataset::digest() const {
  std::uint64_t h = fnv1a64(images.data(),
                            static_cast<std::size_t>(images.numel()) * 4);
  h = fnv1a64(labels.data(), labels.size() * sizeof(int), h);
  for (const auto& d : domains) h = fnv1a64(d, h);
  h = fnv1a64(domain_ids.data(), domain_ids.size() * sizeof(int), h);
  return to_hex(h);
}

void LabeledDataset::validate() const {
  const int n = size();
  if (images.ndim() != 4 || images.dim(0) != n || images.dim(1) != kChannels ||
      images.dim(2) != kSide || images.dim(3) != kSide) {
    throw shape_error("dataset image tensor shape mismatch");
  }
  if (static_cast<int>(domain_ids.size()) != n) {
    throw shape_error("dataset domain tags mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count) throw shape_error("label out of range");
  }
  for (int d : domain_ids) {
    if (d < 0 || d >= static_cast<int>(domains.size())) {
      throw shape_error("domain id out of range");
    }
  }
}

// ---------------------------------------------------------------------------

AdaptationSet::AdaptationSet(std::shared_ptr<const LabeledDataset> base,
                             std::vector<int> indices)
    : base_(std::move(base)), indices_(std::move(indices)) {
  std::set<int> unique(indices_.begin(), indices_.end());
  if (unique.size() != indices_.size()) {
    throw shape_error("adaptation set indices must be unique");
  }
  for (int i : indices_) {
    if (i < 0 || i >= base_->size()) {
      throw shape_error("adaptation set index out of range");
    }
  }
}

Tensor AdaptationSet::image(int i) const {
  return base_->image(indices_.at(static_cast<std::size_t>(i)));
}

Tensor AdaptationSet::gather_images(const std::vector<int>& positions) const {
  std::vector<int> idx;
  idx.reserve(positions.size());
  for (int p : positions) idx.push_back(indices_.at(static_cast<std::size_t>(p)));
  return base_->gather_images(idx);
}

std::string AdaptationSet::domain_tag(int i) const {
  const int base_idx = indices_.at(static_cast<std::size_t>(i));
  return base_->domains.at(
      static_cast<std::size_t>(base_->domain_ids.at(static_cast<std::size_t>(base_idx))));
}

std::string AdaptationSet::digest() const {
  std::uint64_t h = fnv1a64(base_->digest());
  h = fnv1a64(indices_.data(), indices_.size() * sizeof(int), h);
  return to_hex(h);
}

namespace detail {
std::vector<int> LabelOracleKey::labels(const AdaptationSet& set) {
  return set.base_->gather_labels(set.indices_);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// SynthShapes

const std::vector<std::string>& synthshapes_class_names() {
  static const std::vector<std::string> names = {
      "circle", "square", "triangle", "cross",  "ring",
      "star",   "bars-h", "bars-v",   "checker", "blob"};
  return names;
}

namespace {

struct ShapeParams {
  float cx, cy, scale, rot;
  float bg[3], fg[3];
  float blob_a[3], blob_p[3];
};

bool inside_shape(int cls, float px, float py, const ShapeParams& sp) {
  // shape-local coordinates, rotated
  const float dx = px - sp.cx;
  const float dy = py - sp.cy;
  const float cosr = std::cos(-sp.rot), sinr = std::sin(-sp.rot);
  const float u = dx * cosr - dy * sinr;
  const float v = dx * sinr + dy * cosr;
  const float s = sp.scale;
  switch (cls) {
    case 0: {  // circle
      const float r = 8.5f * s;
      return u * u + v * v <= r * r;
    }
    case 1: {  // square
      const float a = 7.0f * s;
      return std::max(std::abs(u), std::abs(v)) <= a;
    }
    case 2: {  // triangle (equilateral, pointing along rot)
      const float r = 9.5f * s;
      float verts[3][2];
      for (int i = 0; i < 3; ++i) {
        const float ang = static_cast<float>(std::numbers::pi) *
                          (0.5f + 2.0f * static_cast<float>(i) / 3.0f);
        verts[i][0] = r * std::cos(ang);
        verts[i][1] = r * std::sin(ang);
      }
      bool pos = false, neg = false;
      for (int i = 0; i < 3; ++i) {
        const float* a = verts[i];
        const float* b = verts[(i + 1) % 3];
        const float cross = (b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0]);
        if (cross > 0) pos = true;
        if (cross < 0) neg = true;
      }
      return !(pos && neg);
    }
    case 3: {  // cross
      const float w = 2.4f * s, l = 8.5f * s;
      return (std::abs(u) <= w && std::abs(v) <= l) ||
             (std::abs(v) <= w && std::abs(u) <= l);
    }
    case 4: {  // ring
      const float ro = 8.5f * s, ri = 4.5f * s;
      const float d2 = u * u + v * v;
      return d2 <= ro * ro && d2 >= ri * ri;
    }
    case 5: {  // star (5-petal radial profile)
      const float rho = std::sqrt(u * u + v * v);
      const float phi = std::atan2(v, u);
      const float lobe = 0.5f * (std::cos(5.0f * phi) + 1.0f);
      const float r = 9.5f * s * (0.38f + 0.62f * lobe * lobe);
      return rho <= r;
    }
    case 6: {  // bars-h
      if (std::abs(u) > 9.0f * s || std::abs(v) > 8.0f * s) return false;
      const float period = 5.2f * s;
      float m = std::fmod(v + 16.0f * s, period);
      return m < 2.6f * s;
    }
    case 7: {  // bars-v
      if (std::abs(u) > 8.0f * s || std::abs(v) > 9.0f * s) return false;
      const float period = 5.2f * s;
      float m = std::fmod(u + 16.0f * s, period);
      return m < 2.6f * s;
    }
    case 8: {  // checker
      if (std::abs(u) > 9.0f * s || std::abs(v) > 9.0f * s) return false;
      const float cell = 4.5f * s;
      const int iu = static_cast<int>(std::floor(u / cell));
      const int iv = static_cast<int>(std::floor(v / cell));
      return ((iu + iv) & 1) == 0;
    }
    case 9: {  // blob
      const float rho = std::sqrt(u * u + v * v);
      const float phi = std::atan2(v, u);
      float r = 7.5f * s;
      float mod = 1.0f;
      for (int k = 0; k < 3; ++k) {
        mod += sp.blob_a[k] * std::cos(static_cast<float>(k + 1) * phi +
                                       sp.blob_p[k]);
      }
      return rho <= r * mod;
    }
    default:
      return false;
  }
}

void render_sample(int cls, Rng& rng, float* out) {
  ShapeParams sp;
  sp.cx = 15.5f + static_cast<float>(rng.uniform(-3.0, 3.0));
  sp.cy = 15.5f + static_cast<float>(rng.uniform(-3.0, 3.0));
  sp.scale = static_cast<float>(rng.uniform(0.75, 1.05));
  const bool full_rot = (cls == 2 || cls == 5 || cls == 9);
  const bool no_rot = (cls == 0 || cls == 4);
  if (full_rot) {
    sp.rot = static_cast<float>(rng.uniform(0.0, 2.0 * std::numbers::pi));
  } else if (no_rot) {
    sp.rot = 0.0f;
  } else {
    sp.rot = static_cast<float>(rng.uniform(-0.15, 0.15));
  }
  for (int c = 0; c < 3; ++c) sp.bg[c] = static_cast<float>(rng.uniform(0.05, 0.35));
  for (int c = 0; c < 3; ++c) sp.fg[c] = static_cast<float>(rng.uniform(0.55, 0.95));
  for (int k = 0; k < 3; ++k) {
    sp.blob_a[k] = static_cast<float>(rng.uniform(-0.22, 0.22));
    sp.blob_p[k] = static_cast<float>(rng.uniform(0.0, 2.0 * std::numbers::pi));
  }

  static const float subs[4][2] = {
      {0.25f, 0.25f}, {0.25f, 0.75f}, {0.75f, 0.25f}, {0.75f, 0.75f}};
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      int hits = 0;
      for (const auto& sub : subs) {
        if (inside_shape(cls, static_cast<float>(x) + sub[0],
                         static_cast<float>(y) + sub[1], sp)) {
          ++hits;
        }
      }
      const float cov = static_cast<float>(hits) / 4.0f;
      for (int c = 0; c < 3; ++c) {
        out[(c * kSide + y) * kSide + x] =
            sp.bg[c] + (sp.fg[c] - sp.bg[c]) * cov;
      }
    }
  }
}

}  // namespace

LabeledDataset generate_synthshapes(int classes, int per_class,
                                    std::uint64_t seed) {
  if (classes < 2 || classes > 10) {
    throw config_error("synthshapes supports 2..10 classes");
  }
  if (per_class < 1) throw config_error("per_class must be positive");
  LabeledDataset ds;
  ds.class_count = classes;
  const int n = classes * per_class;
  ds.images = Tensor::zeros({n, kChannels, kSide, kSide});
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.domain_ids.assign(static_cast<std::size_t>(n), 0);
  ds.domains = {"clean"};
  for (int cls = 0; cls < classes; ++cls) {
    for (int j = 0; j < per_class; ++j) {
      const int i = cls * per_class + j;
      Rng rng(seed_split(seed, "synthshapes",
                         (static_cast<std::uint64_t>(cls) << 32) |
                             static_cast<std::uint64_t>(j)));
      render_sample(cls, rng,
                    ds.images.data() + static_cast<std::ptrdiff_t>(i) * kImageElems);
      ds.labels[static_cast<std::size_t>(i)] = cls;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary

LabeledDataset load_cifar10_binary(const std::filesystem::path& path,
                                   int subset_per_class, std::uint64_t seed) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.path().extension() == ".bin") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  if (files.empty()) throw io_error("no .bin files at " + path.string());

  constexpr std::size_t kRecord = 3073;  // label byte + 3 * 1024 pixels
  std::vector<float> pixels;
  std::vector<int> labels;
  for (const auto& f : files) {
    const std::string bytes = read_file(f);
    if (bytes.size() % kRecord != 0) {
      throw io_error("bad record length in " + f.string() + ": " +
                     std::to_string(bytes.size()) + " not a multiple of 3073");
    }
    const std::size_t count = bytes.size() / kRecord;
    for (std::size_t r = 0; r < count; ++r) {
      const auto* rec =
          reinterpret_cast<const unsigned char*>(bytes.data()) + r * kRecord;
      if (rec[0] >= 10) {
        throw io_error("label byte >= 10 in " + f.string());
      }
      labels.push_back(rec[0]);
      for (std::size_t p = 0; p < 3072; ++p) {
        pixels.push_back(static_cast<float>(rec[1 + p]) / 255.0f);
      }
    }
  }
  const int n_all = static_cast<int>(labels.size());

  std::vector<int> keep;
  if (subset_per_class > 0) {
    std::vector<std::vector<int>> by_class(10);
    for (int i = 0; i < n_all; ++i) {
      by_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]
          .push_back(i);
    }
    Rng rng(seed_split(seed, "cifar-subset"));
    for (int cls = 0; cls < 10; ++cls) {
      auto& pool = by_class[static_cast<std::size_t>(cls)];
      if (static_cast<int>(pool.size()) < subset_per_class) {
        throw config_error("class " + std::to_string(cls) + " has only " +
                           std::to_string(pool.size()) + " samples");
      }
      rng.shuffle(pool);
      std::vector<int> chosen(pool.begin(), pool.begin() + subset_per_class);
      std::sort(chosen.begin(), chosen.end());
      keep.insert(keep.end(), chosen.begin(), chosen.end());
    }
  } else {
    keep.resize(static_cast<std::size_t>(n_all));
    for (int i = 0; i < n_all; ++i) keep[static_cast<std::size_t>(i)] = i;
  }

  LabeledDataset ds;
  ds.class_count = 10;
  const int n = static_cast<int>(keep.size());
  ds.images = Tensor::zeros({n, kChannels, kSide, kSide});
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.domain_ids.assign(static_cast<std::size_t>(n), 0);
  ds.domains = {"cifar10-clean"};
  for (int j = 0; j < n; ++j) {
    const int i = keep[static_cast<std::size_t>(j)];
    ds.labels[static_cast<std::size_t>(j)] = labels[static_cast<std::size_t>(i)];
    std::memcpy(ds.images.data() + static_cast<std::ptrdiff_t>(j) * kImageElems,
                pixels.data() + static_cast<std::ptrdiff_t>(i) * kImageElems,
                static_cast<std::size_t>(kImageElems) * 4);
  }
  return ds;
}

// ---------------------------------------------------------------------------

LabeledDataset make_target_domain(const LabeledDataset& source,
                                  const std::vector<CorruptionSpec>& specs,
                                  std::uint64_t seed) {
  if (specs.empty()) {
    throw config_error("make_target_domain requires a non-empty stack");
  }
  for (const auto& s : specs) validate_spec(s);
  LabeledDataset out;
  out.class_count = source.class_count;
  out.labels = source.labels;
  const int n = source.size();
  out.images = Tensor::zeros(source.images.shape());
  out.domains = {stack_id(specs)};
  out.domain_ids.assign(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    Tensor corrupted = compose(source.image(i), specs,
                               seed_split(seed, "img", static_cast<std::uint64_t>(i)));
    std::memcpy(out.images.data() + static_cast<std::ptrdiff_t>(i) * kImageElems,
                corrupted.data(), static_cast<std::size_t>(kImageElems) * 4);
  }
  return out;
}

// ---------------------------------------------------------------------------
// scenarios

namespace {

ScenarioDescriptor make_descriptor(const std::string& id, const json& params,
                                   std::uint64_t seed) {
  ScenarioDescriptor d;
  d.scenario_id = id;
  d.params_json = params.dump();
  d.seed = seed;
  return d;
}

}  // namespace

ScenarioSplit scenario1(std::shared_ptr<const LabeledDataset> d_t, int size,
                        std::uint64_t seed) {
  const int n = d_t->size();
  if (size < 1 || size > n) {
    throw config_error("scenario1 size " + std::to_string(size) +
                       " out of range [1, " + std::to_string(n) + "]");
  }
  Rng rng(seed_split(seed, "s1-sample"));
  std::vector<int> idx = rng.sample_without_replacement(n, size);
  ScenarioSplit split;
  split.d_t = d_t;
  split.delta_t = AdaptationSet(d_t, std::move(idx));
  split.descriptor = make_descriptor("s1", json{{"size", size}}, seed);
  return split;
}

ScenarioSplit scenario2(std::shared_ptr<const LabeledDataset> d_t, int k,
                        int per_class, std::uint64_t seed) {
  const auto cats = d_t->category_set();
  const int c = static_cast<int>(cats.size());
  if (k < 1 || k >= c) {
    throw config_error("scenario2 requires 1 <= k < " + std::to_string(c));
  }
  Rng cat_rng(seed_split(seed, "s2-categories"));
  std::vector<int> chosen_pos = cat_rng.sample_without_replacement(c, k);
  std::set<int> chosen;
  for (int p : chosen_pos) chosen.insert(cats[static_cast<std::size_t>(p)]);

  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(
      *std::max_element(cats.begin(), cats.end()) + 1));
  for (int i = 0; i < d_t->size(); ++i) {
    by_class[static_cast<std::size_t>(d_t->labels[static_cast<std::size_t>(i)])]
        .push_back(i);
  }

  std::vector<int> delta_idx;
  for (int cls : chosen) {
    auto& pool = by_class[static_cast<std::size_t>(cls)];
    if (static_cast<int>(pool.size()) < per_class) {
      throw config_error("scenario2: class " + std::to_string(cls) +
                         " has only " + std::to_string(pool.size()) +
                         " samples, need " + std::to_string(per_class));
    }
    Rng s_rng(seed_split(seed, "s2-sample", static_cast<std::uint64_t>(cls)));
    std::vector<int> pos = s_rng.sample_without_replacement(
        static_cast<int>(pool.size()), per_class);
    std::sort(pos.begin(), pos.end());
    for (int p : pos) delta_idx.push_back(pool[static_cast<std::size_t>(p)]);
  }
  std::vector<int> ood_idx;
  for (int i = 0; i < d_t->size(); ++i) {
    if (!chosen.count(d_t->labels[static_cast<std::size_t>(i)])) {
      ood_idx.push_back(i);
    }
  }
  ScenarioSplit split;
  split.d_t = d_t;
  split.delta_t = AdaptationSet(d_t, std::move(delta_idx));
  split.delta_ood = AdaptationSet(d_t, std::move(ood_idx));
  json params;
  params["k"] = k;
  params["per_class"] = per_class;
  params["categories"] = std::vector<int>(chosen.begin(), chosen.end());
  split.descriptor = make_descriptor("s2", params, seed);
  return split;
}

ScenarioSplit scenario3(const std::vector<LabeledDataset>& domains, int k,
                        int per_domain, std::uint64_t seed) {
  const int nd = static_cast<int>(domains.size());
  if (nd == 0) throw config_error("scenario3 requires at least one domain");
  if (k < 1 || k > nd) {
    throw config_error("scenario3 requires 1 <= k <= " + std::to_string(nd));
  }
  // Union dataset; every sample keeps its domain tag.
  auto un = std::make_shared<LabeledDataset>();
  un->class_count = domains[0].class_count;
  int total = 0;
  for (const auto& d : domains) total += d.size();
  un->images = Tensor::zeros({total, kChannels, kSide, kSide});
  std::vector<int> offsets;
  int off = 0;
  for (const auto& d : domains) {
    offsets.push_back(off);
    std::memcpy(un->images.data() + static_cast<std::ptrdiff_t>(off) * kImageElems,
                d.images.data(),
                static_cast<std::size_t>(d.size()) * kImageElems * 4);
    for (int i = 0; i < d.size(); ++i) {
      un->labels.push_back(d.labels[static_cast<std::size_t>(i)]);
      un->domain_ids.push_back(static_cast<int>(un->domains.size()));
    }
    un->domains.push_back(d.domains.empty() ? "domain-" + std::to_string(off)
                                            : d.domains[0]);
    off += d.size();
  }

  Rng dom_rng(seed_split(seed, "s3-domains"));
  std::vector<int> chosen = dom_rng.sample_without_replacement(nd, k);
  std::sort(chosen.begin(), chosen.end());
  std::set<int> chosen_set(chosen.begin(), chosen.end());

  std::vector<int> delta_idx;
  for (int dom : chosen) {
    const auto& d = domains[static_cast<std::size_t>(dom)];
    if (d.size() < per_domain) {
      throw config_error("scenario3: domain " + std::to_string(dom) +
                         " has only " + std::to_string(d.size()) +
                         " samples, need " + std::to_string(per_domain));
    }
    Rng s_rng(seed_split(seed, "s3-sample", static_cast<std::uint64_t>(dom)));
    std::vector<int> pos = s_rng.sample_without_replacement(d.size(), per_domain);
    std::sort(pos.begin(), pos.end());
    for (int p : pos) {
      delta_idx.push_back(offsets[static_cast<std::size_t>(dom)] + p);
    }
  }
  std::vector<int> ood_idx;
  for (int dom = 0; dom < nd; ++dom) {
    if (chosen_set.count(dom)) continue;
    for (int i = 0; i < domains[static_cast<std::size_t>(dom)].size(); ++i) {
      ood_idx.push_back(offsets[static_cast<std::size_t>(dom)] + i);
    }
  }
  ScenarioSplit split;
  split.d_t = un;
  split.delta_t = AdaptationSet(un, std::move(delta_idx));
  split.delta_ood = AdaptationSet(un, std::move(ood_idx));
  json params;
  params["k"] = k;
  params["per_domain"] = per_domain;
  params["domains"] = chosen;
  split.descriptor = make_descriptor("s3", params, seed);
  return split;
}

ScenarioSplit scenario4(const LabeledDataset& source,
                        const std::vector<CorruptionSpec>& stack, int n,
                        std::uint64_t seed) {
  if (stack.empty()) throw config_error("scenario4 requires a non-empty stack");
  auto target = std::make_shared<LabeledDataset>(
      make_target_domain(source, stack, seed_split(seed, "s4-domain")));
  if (n < 1 || n > target->size()) {
    throw config_error("scenario4 size out of range");
  }
  Rng rng(seed_split(seed, "s4-sample"));
  std::vector<int> idx = rng.sample_without_replacement(target->size(), n);
  ScenarioSplit split;
  split.d_t = target;
  split.delta_t = AdaptationSet(target, std::move(idx));
  json params;
  params["stack"] = stack_id(stack);
  params["stack_size"] = stack.size();
  params["n"] = n;
  split.descriptor = make_descriptor("s4", params, seed);
  return split;
}

std::vector<int> default_s1_sweep() {
  std::vector<int> sizes;
  for (int s = 1; s <= 8192; s *= 2) sizes.push_back(s);
  return sizes;
}

}  // namespace ttb
