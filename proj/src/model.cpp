#include "ttabench/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "ttabench/dataset.hpp"
#include "ttabench/rng.hpp"

namespace ttb {

using nlohmann::json;

Tensor& Model::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw shape_error("unknown parameter: " + name);
  return it->second;
}

const Tensor& Model::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw shape_error("unknown parameter: " + name);
  return it->second;
}

bool Model::has_param(const std::string& name) const {
  return params_.count(name) > 0;
}

void Model::add_param(const std::string& name, Tensor t,
                      const std::string& group) {
  if (params_.count(name)) throw shape_error("duplicate parameter: " + name);
  params_.emplace(name, std::move(t));
  order_.push_back(name);
  groups_[group].push_back(name);
}

std::vector<std::string> Model::group_params(const std::string& group) const {
  auto it = groups_.find(group);
  if (it == groups_.end()) return {};
  return it->second;
}

Model Model::clone() const {
  Model m;
  m.arch_id = arch_id;
  m.class_count = class_count;
  m.feature_dim = feature_dim;
  m.order_ = order_;
  m.groups_ = groups_;
  for (const auto& name : order_) {
    m.params_.emplace(name, params_.at(name).clone());
  }
  return m;
}

std::string Model::digest() const {
  std::uint64_t h = fnv1a64(arch_id);
  h = fnv1a64(&class_count, sizeof(class_count), h);
  for (const auto& name : order_) {
    h = fnv1a64(name, h);
    const Tensor& t = params_.at(name);
    for (int d : t.shape()) h = fnv1a64(&d, sizeof(d), h);
    h = fnv1a64(t.data(), static_cast<std::size_t>(t.numel()) * 4, h);
  }
  return to_hex(h);
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kImageSide = 32;
constexpr int kImageChannels = 3;
const int kConvWidths[3] = {32, 64, 128};

Tensor fan_in_uniform(const Shape& shape, int fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  const float bound = std::sqrt(1.0f / static_cast<float>(fan_in));
  float* p = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    p[i] = static_cast<float>(rng.uniform(-bound, bound));
  }
  return t;
}

}  // namespace

Model build_model(const std::string& arch_id, int class_count,
                  std::uint64_t seed) {
  if (arch_id != "smallcnn-32") {
    throw config_error("unknown arch_id: " + arch_id);
  }
  if (class_count < 2) throw config_error("class_count must be >= 2");
  Model m;
  m.arch_id = arch_id;
  m.class_count = class_count;
  m.feature_dim = kConvWidths[2];
  Rng rng(seed_split(seed, "model-init"));
  int cin = kImageChannels;
  for (int li = 0; li < 3; ++li) {
    const int cout = kConvWidths[li];
    const std::string idx = std::to_string(li + 1);
    m.add_param("conv" + idx + ".w",
                fan_in_uniform({cout, cin, 3, 3}, cin * 9, rng),
                kGroupFeatureWeights);
    m.add_param("bn" + idx + ".gamma", Tensor::full({cout}, 1.0f),
                kGroupNormAffine);
    m.add_param("bn" + idx + ".beta", Tensor::zeros({cout}), kGroupNormAffine);
    m.add_param("bn" + idx + ".rmean", Tensor::zeros({cout}), kGroupNormStats);
    m.add_param("bn" + idx + ".rvar", Tensor::full({cout}, 1.0f),
                kGroupNormStats);
    cin = cout;
  }
  m.add_param("head.w",
              fan_in_uniform({class_count, m.feature_dim}, m.feature_dim, rng),
              kGroupClassifierHead);
  m.add_param("head.b", Tensor::zeros({class_count}), kGroupClassifierHead);
  return m;
}

ForwardOutput forward(const Model& model, const Tensor& batch,
                      const ForwardOpts& opts) {
  if (batch.ndim() != 4 || batch.dim(1) != kImageChannels ||
      batch.dim(2) != kImageSide || batch.dim(3) != kImageSide) {
    throw shape_error("forward expects [B, 3, 32, 32], got " +
                      shape_str(batch.shape()));
  }
  auto& model_mut = const_cast<Model&>(model);  // running stats update in place
  if (opts.mode == ForwardMode::kAdapt) {
    active_op_counters().adapt_forward_batches[batch.dim(0)] += 1;
  }
  BatchNormOpts bn;
  bn.momentum = opts.bn_momentum;
  bn.iabn_alpha = opts.iabn_alpha;
  switch (opts.mode) {
    case ForwardMode::kEval: bn.mode = NormMode::kRunningStats; break;
    case ForwardMode::kAdapt:
      bn.mode = NormMode::kBatchStats;
      bn.update_running = opts.update_running;
      break;
    case ForwardMode::kInstanceAware: bn.mode = NormMode::kInstanceAware; break;
  }

  Tensor h = batch;
  for (int li = 1; li <= 3; ++li) {
    const std::string idx = std::to_string(li);
    h = conv2d(h, model.param("conv" + idx + ".w"), 1, 1);
    h = batch_norm(h, model.param("bn" + idx + ".gamma"),
                   model.param("bn" + idx + ".beta"),
                   model_mut.param("bn" + idx + ".rmean"),
                   model_mut.param("bn" + idx + ".rvar"), bn);
    h = relu(h);
    h = max_pool(h, 2, 2);
  }
  ForwardOutput out;
  out.embeddings = global_avg_pool(h);
  Tensor scores = matmul(out.embeddings, model.param("head.w"), false, true);
  out.logits = linear_bias_add(scores, model.param("head.b"));
  return out;
}

ForwardOutput forward_eval(const Model& model, const Tensor& batch) {
  return forward(model, batch, ForwardOpts{});
}

// ---------------------------------------------------------------------------
// pretraining

Model pretrain_source(const Model& model, const LabeledDataset& train,
                      const PretrainOpts& opts, PretrainLog* log) {
  Model m = model.clone();
  if (opts.epochs <= 0) return m;
  if (train.size() == 0) throw config_error("pretrain on empty dataset");

  std::vector<std::string> trainable;
  for (const auto& g :
       {kGroupFeatureWeights, kGroupNormAffine, kGroupClassifierHead}) {
    for (const auto& name : m.group_params(g)) trainable.push_back(name);
  }
  std::map<std::string, Tensor> velocity;
  for (const auto& name : trainable) {
    m.param(name).set_requires_grad(true);
    velocity.emplace(name, Tensor::zeros(m.param(name).shape()));
  }

  ForwardOpts fwd;
  fwd.mode = ForwardMode::kAdapt;

  const int n = train.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng shuffle_rng(seed_split(opts.seed, "pretrain-epoch",
                               static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += opts.batch_size) {
      const int bsz = std::min(opts.batch_size, n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + bsz);
      Tensor images = train.gather_images(idx);
      std::vector<int> labels = train.gather_labels(idx);

      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        ForwardOutput out = forward(m, images, fwd);
        loss = cross_entropy_mean(out.logits, labels, opts.label_smoothing);
      }
      const float lv = loss.item();
      if (!std::isfinite(lv)) {
        throw numeric_error("pretraining diverged: non-finite loss at epoch " +
                            std::to_string(epoch) + " batch " +
                            std::to_string(batches));
      }
      epoch_loss += lv;
      ++batches;
      for (const auto& name : trainable) m.param(name).zero_grad();
      backward(loss, tape);
      for (const auto& name : trainable) {
        Tensor& p = m.param(name);
        Tensor& v = velocity.at(name);
        float* pv = p.data();
        float* vv = v.data();
        const float* g = p.grad();
        for (std::int64_t i = 0; i < p.numel(); ++i) {
          vv[i] = opts.momentum * vv[i] + g[i];
          pv[i] -= opts.lr * vv[i];
        }
      }
    }
    if (log) log->epoch_losses.push_back(epoch_loss / std::max(batches, 1));
  }

  for (const auto& name : trainable) {
    m.param(name).set_requires_grad(false);
    m.param(name).drop_grad();
  }
  return m;
}

// ---------------------------------------------------------------------------
// serialization

namespace {
constexpr char kMagic[4] = {'B', 'O', 'T', 'A'};
constexpr std::uint16_t kFormatVersion = 1;
}  // namespace

std::string serialize_model(const Model& model) {
  json header;
  header["arch_id"] = model.arch_id;
  header["class_count"] = model.class_count;
  header["feature_dim"] = model.feature_dim;
  json params = json::array();
  std::map<std::string, std::string> group_of;
  for (const auto& [group, names] : model.groups()) {
    for (const auto& n : names) group_of[n] = group;
  }
  for (const auto& name : model.param_order()) {
    const Tensor& t = model.param(name);
    json p;
    p["name"] = name;
    p["shape"] = t.shape();
    p["group"] = group_of.at(name);
    params.push_back(p);
  }
  header["params"] = params;
  const std::string header_str = header.dump();

  std::string out;
  out.append(kMagic, 4);
  put_u16le(out, kFormatVersion);
  put_u32le(out, static_cast<std::uint32_t>(header_str.size()));
  out += header_str;
  for (const auto& name : model.param_order()) {
    const Tensor& t = model.param(name);
    // f32 little-endian payload; this build targets little-endian hosts.
    out.append(reinterpret_cast<const char*>(t.data()),
               static_cast<std::size_t>(t.numel()) * 4);
  }
  put_u32le(out, crc32(out.data(), out.size()));
  return out;
}

Model deserialize_model(const std::string& bytes) {
  if (bytes.size() < 14) throw io_error("model file truncated");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::memcmp(p, kMagic, 4) != 0) {
    throw io_error("bad model file magic");
  }
  const std::uint16_t version = get_u16le(p + 4);
  if (version != kFormatVersion) {
    throw io_error("unsupported model format version " +
                   std::to_string(version));
  }
  const std::uint32_t stored_crc = get_u32le(p + bytes.size() - 4);
  const std::uint32_t actual_crc = crc32(bytes.data(), bytes.size() - 4);
  if (stored_crc != actual_crc) {
    throw io_error("model file checksum mismatch");
  }
  const std::uint32_t header_len = get_u32le(p + 6);
  if (10 + static_cast<std::size_t>(header_len) + 4 > bytes.size()) {
    throw io_error("model file truncated header");
  }
  json header = json::parse(bytes.substr(10, header_len));
  Model m;
  m.arch_id = header.at("arch_id").get<std::string>();
  m.class_count = header.at("class_count").get<int>();
  m.feature_dim = header.at("feature_dim").get<int>();
  std::size_t off = 10 + header_len;
  for (const auto& pj : header.at("params")) {
    const auto name = pj.at("name").get<std::string>();
    const auto shape = pj.at("shape").get<Shape>();
    const auto group = pj.at("group").get<std::string>();
    const std::size_t nbytes = static_cast<std::size_t>(numel_of(shape)) * 4;
    if (off + nbytes + 4 > bytes.size()) {
      throw io_error("model file truncated payload at " + name);
    }
    Tensor t = Tensor::zeros(shape);
    std::memcpy(t.data(), bytes.data() + off, nbytes);
    m.add_param(name, std::move(t), group);
    off += nbytes;
  }
  if (off + 4 != bytes.size()) {
    throw io_error("model file has trailing bytes");
  }
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  atomic_write_file(path, serialize_model(model));
}

Model load_model(const std::filesystem::path& path) {
  return deserialize_model(read_file(path));
}

}  // namespace ttb
