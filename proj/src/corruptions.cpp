#include "ttabench/corruptions.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "ttabench/rng.hpp"

namespace ttb {

using nlohmann::json;

namespace {

constexpr int kSide = 32;
constexpr int kChannels = 3;

inline float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

inline std::size_t pix(int c, int y, int x) {
  return static_cast<std::size_t>((c * kSide + y) * kSide + x);
}

void check_image(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != kChannels ||
      image.dim(1) != kSide || image.dim(2) != kSide) {
    throw shape_error("corruption expects [3, 32, 32] image, got " +
                      shape_str(image.shape()));
  }
}

// Clamp-to-edge bilinear sample on one channel plane.
float bilinear(const float* plane, float y, float x) {
  y = std::min(static_cast<float>(kSide - 1), std::max(0.0f, y));
  x = std::min(static_cast<float>(kSide - 1), std::max(0.0f, x));
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, kSide - 1), x1 = std::min(x0 + 1, kSide - 1);
  const float fy = y - static_cast<float>(y0);
  const float fx = x - static_cast<float>(x0);
  const float a = plane[y0 * kSide + x0], b = plane[y0 * kSide + x1];
  const float c = plane[y1 * kSide + x0], d = plane[y1 * kSide + x1];
  return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) +
         d * fy * fx;
}

// Seeded value noise in [0, 1]: coarse uniform grid, bilinear upsampled.
std::vector<float> value_noise(Rng& rng, int grid) {
  std::vector<float> coarse(static_cast<std::size_t>(grid * grid));
  for (auto& v : coarse) v = rng.next_float();
  std::vector<float> out(kSide * kSide);
  const float step = static_cast<float>(grid - 1) / (kSide - 1);
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      const float gy = y * step, gx = x * step;
      const int y0 = std::min(static_cast<int>(gy), grid - 2);
      const int x0 = std::min(static_cast<int>(gx), grid - 2);
      const float fy = gy - y0, fx = gx - x0;
      const float a = coarse[static_cast<std::size_t>(y0 * grid + x0)];
      const float b = coarse[static_cast<std::size_t>(y0 * grid + x0 + 1)];
      const float c = coarse[static_cast<std::size_t>((y0 + 1) * grid + x0)];
      const float d = coarse[static_cast<std::size_t>((y0 + 1) * grid + x0 + 1)];
      out[static_cast<std::size_t>(y * kSide + x)] =
          a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) +
          d * fy * fx;
    }
  }
  return out;
}

Tensor convolve_kernel(const Tensor& image, const std::vector<float>& kernel,
                       int ksize) {
  Tensor out = Tensor::zeros(image.shape());
  const int half = ksize / 2;
  const float* in = image.data();
  float* o = out.data();
  for (int c = 0; c < kChannels; ++c) {
    const float* plane = in + static_cast<std::ptrdiff_t>(c) * kSide * kSide;
    for (int y = 0; y < kSide; ++y) {
      for (int x = 0; x < kSide; ++x) {
        float acc = 0.0f;
        for (int ky = 0; ky < ksize; ++ky) {
          for (int kx = 0; kx < ksize; ++kx) {
            const float w = kernel[static_cast<std::size_t>(ky * ksize + kx)];
            if (w == 0.0f) continue;
            const int iy = std::clamp(y + ky - half, 0, kSide - 1);
            const int ix = std::clamp(x + kx - half, 0, kSide - 1);
            acc += w * plane[iy * kSide + ix];
          }
        }
        o[pix(c, y, x)] = clamp01(acc);
      }
    }
  }
  return out;
}

// --- individual corruptions --------------------------------------------

Tensor gaussian_noise_c(const Tensor& image, float sigma, Rng& rng) {
  Tensor out = Tensor::zeros(image.shape());
  const float* in = image.data();
  float* o = out.data();
  for (std::int64_t i = 0; i < image.numel(); ++i) {
    o[i] = clamp01(in[i] + sigma * static_cast<float>(rng.normal()));
  }
  return out;
}

Tensor impulse_noise_c(const Tensor& image, float fraction, Rng& rng) {
  Tensor out = image.clone();
  float* o = out.data();
  for (std::int64_t i = 0; i < image.numel(); ++i) {
    if (rng.next_float() < fraction) {
      o[i] = rng.next_float() < 0.5f ? 0.0f : 1.0f;
    }
  }
  return out;
}

Tensor defocus_blur_c(const Tensor& image, float radius) {
  const int half = static_cast<int>(std::ceil(radius));
  const int ksize = 2 * half + 1;
  std::vector<float> kernel(static_cast<std::size_t>(ksize * ksize));
  double total = 0.0;
  for (int ky = 0; ky < ksize; ++ky) {
    for (int kx = 0; kx < ksize; ++kx) {
      const float dy = static_cast<float>(ky - half);
      const float dx = static_cast<float>(kx - half);
      const float d = std::sqrt(dy * dy + dx * dx);
      const float cov = std::clamp(radius - d + 0.5f, 0.0f, 1.0f);
      kernel[static_cast<std::size_t>(ky * ksize + kx)] = cov;
      total += cov;
    }
  }
  for (auto& w : kernel) w = static_cast<float>(w / total);
  return convolve_kernel(image, kernel, ksize);
}

Tensor motion_blur_c(const Tensor& image, float length) {
  const int taps = std::max(2, static_cast<int>(std::lround(length)));
  Tensor out = Tensor::zeros(image.shape());
  const float* in = image.data();
  float* o = out.data();
  const float w = 1.0f / static_cast<float>(taps);
  for (int c = 0; c < kChannels; ++c) {
    const float* plane = in + static_cast<std::ptrdiff_t>(c) * kSide * kSide;
    for (int y = 0; y < kSide; ++y) {
      for (int x = 0; x < kSide; ++x) {
        float acc = 0.0f;
        for (int t = 0; t < taps; ++t) {
          // 45-degree line through the pixel
          const float off = static_cast<float>(t) - (taps - 1) * 0.5f;
          acc += bilinear(plane, static_cast<float>(y) + off,
                          static_cast<float>(x) + off);
        }
        o[pix(c, y, x)] = clamp01(acc * w);
      }
    }
  }
  return out;
}

Tensor zoom_blur_c(const Tensor& image, float max_zoom) {
  std::vector<float> zooms;
  for (float z = 1.02f; z <= max_zoom + 1e-6f; z += 0.02f) zooms.push_back(z);
  Tensor out = image.clone();
  float* o = out.data();
  const float* in = image.data();
  const float center = (kSide - 1) * 0.5f;
  for (float z : zooms) {
    for (int c = 0; c < kChannels; ++c) {
      const float* plane = in + static_cast<std::ptrdiff_t>(c) * kSide * kSide;
      for (int y = 0; y < kSide; ++y) {
        for (int x = 0; x < kSide; ++x) {
          const float sy = center + (static_cast<float>(y) - center) / z;
          const float sx = center + (static_cast<float>(x) - center) / z;
          o[pix(c, y, x)] += bilinear(plane, sy, sx);
        }
      }
    }
  }
  const float scale = 1.0f / static_cast<float>(zooms.size() + 1);
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = clamp01(o[i] * scale);
  return out;
}

Tensor fog_c(const Tensor& image, float density, Rng& rng) {
  const std::vector<float> low = value_noise(rng, 4);
  const std::vector<float> mid = value_noise(rng, 8);
  Tensor out = Tensor::zeros(image.shape());
  const float* in = image.data();
  float* o = out.data();
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      const float mask = 0.7f * low[static_cast<std::size_t>(y * kSide + x)] +
                         0.3f * mid[static_cast<std::size_t>(y * kSide + x)];
      const float t = std::clamp(density * (0.35f + 0.65f * mask), 0.0f, 1.0f);
      for (int c = 0; c < kChannels; ++c) {
        o[pix(c, y, x)] = clamp01(in[pix(c, y, x)] * (1 - t) + t);
      }
    }
  }
  return out;
}

Tensor brightness_c(const Tensor& image, float add) {
  Tensor out = Tensor::zeros(image.shape());
  const float* in = image.data();
  float* o = out.data();
  for (std::int64_t i = 0; i < image.numel(); ++i) o[i] = clamp01(in[i] + add);
  return out;
}

Tensor contrast_c(const Tensor& image, float strength) {
  const float factor = 1.0f - strength;
  Tensor out = Tensor::zeros(image.shape());
  const float* in = image.data();
  float* o = out.data();
  for (int c = 0; c < kChannels; ++c) {
    double acc = 0.0;
    for (int i = 0; i < kSide * kSide; ++i) {
      acc += in[static_cast<std::size_t>(c * kSide * kSide + i)];
    }
    const float mean = static_cast<float>(acc / (kSide * kSide));
    for (int i = 0; i < kSide * kSide; ++i) {
      const std::size_t j = static_cast<std::size_t>(c * kSide * kSide + i);
      o[j] = clamp01((in[j] - mean) * factor + mean);
    }
  }
  return out;
}

Tensor snow_c(const Tensor& image, float amount, Rng& rng) {
  Tensor out = image.clone();
  float* o = out.data();
  // light global whitening, then seeded flakes
  const float haze = 0.25f * amount;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    o[i] = clamp01(o[i] * (1 - haze) + haze * 0.85f);
  }
  const int flakes = static_cast<int>(std::lround(3 + 50 * amount));
  for (int f = 0; f < flakes; ++f) {
    const float cy = static_cast<float>(rng.uniform(0, kSide));
    const float cx = static_cast<float>(rng.uniform(0, kSide));
    const float r = 0.5f + 1.1f * rng.next_float();
    const float alpha = 0.5f + 0.4f * rng.next_float();
    const int lo_y = std::max(0, static_cast<int>(cy - r - 1));
    const int hi_y = std::min(kSide - 1, static_cast<int>(cy + r + 1));
    const int lo_x = std::max(0, static_cast<int>(cx - r - 1));
    const int hi_x = std::min(kSide - 1, static_cast<int>(cx + r + 1));
    for (int y = lo_y; y <= hi_y; ++y) {
      for (int x = lo_x; x <= hi_x; ++x) {
        const float dy = static_cast<float>(y) - cy;
        const float dx = static_cast<float>(x) - cx;
        const float d = std::sqrt(dy * dy + dx * dx);
        const float cov = std::clamp(r - d + 0.5f, 0.0f, 1.0f) * alpha;
        if (cov <= 0.0f) continue;
        for (int c = 0; c < kChannels; ++c) {
          o[pix(c, y, x)] = clamp01(o[pix(c, y, x)] * (1 - cov) + cov * 0.98f);
        }
      }
    }
  }
  return out;
}

Tensor frost_c(const Tensor& image, float amount, Rng& rng) {
  const std::vector<float> low = value_noise(rng, 5);
  const std::vector<float> mid = value_noise(rng, 11);
  Tensor out = Tensor::zeros(image.shape());
  const float* in = image.data();
  float* o = out.data();
  const float frost_rgb[3] = {0.88f, 0.92f, 0.97f};
  const float threshold = 1.0f - 0.95f * amount;
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      const float noise = 0.6f * low[static_cast<std::size_t>(y * kSide + x)] +
                          0.4f * mid[static_cast<std::size_t>(y * kSide + x)];
      const float m =
          std::clamp((noise - threshold) / 0.3f, 0.0f, 1.0f) * 0.85f;
      for (int c = 0; c < kChannels; ++c) {
        o[pix(c, y, x)] =
            clamp01(in[pix(c, y, x)] * (1 - m) + m * frost_rgb[c]);
      }
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string spec_id(const CorruptionSpec& spec) {
  return spec.tau + "@" + std::to_string(spec.mu);
}

std::string stack_id(const std::vector<CorruptionSpec>& specs) {
  std::string out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i) out += "+";
    out += spec_id(specs[i]);
  }
  return out;
}

const std::vector<std::string>& corruption_registry() {
  static const std::vector<std::string> names = {
      "gaussian_noise", "impulse_noise", "defocus_blur", "motion_blur",
      "zoom_blur",      "fog",           "brightness",   "contrast",
      "snow",           "frost"};
  return names;
}

bool is_known_corruption(const std::string& tau) {
  const auto& reg = corruption_registry();
  return std::find(reg.begin(), reg.end(), tau) != reg.end();
}

void validate_spec(const CorruptionSpec& spec) {
  if (!is_known_corruption(spec.tau)) {
    throw config_error("unknown corruption type: " + spec.tau);
  }
  if (spec.mu < 1 || spec.mu > 5) {
    throw config_error("severity out of range [1,5]: " +
                       std::to_string(spec.mu));
  }
}

const std::string& embedded_severity_table_json() {
  static const std::string text = R"({
  "version": 1,
  "strengths": {
    "gaussian_noise": [0.03, 0.06, 0.1, 0.15, 0.22],
    "impulse_noise": [0.01, 0.03, 0.06, 0.1, 0.17],
    "defocus_blur": [0.6, 0.9, 1.3, 1.8, 2.4],
    "motion_blur": [2.0, 3.0, 4.5, 6.0, 8.0],
    "zoom_blur": [1.06, 1.12, 1.18, 1.26, 1.36],
    "fog": [0.2, 0.32, 0.45, 0.6, 0.75],
    "brightness": [0.06, 0.12, 0.2, 0.3, 0.42],
    "contrast": [0.2, 0.35, 0.5, 0.62, 0.72],
    "snow": [0.12, 0.24, 0.36, 0.5, 0.62],
    "frost": [0.15, 0.28, 0.42, 0.55, 0.68]
  }
}
)";
  return text;
}

SeverityTable parse_severity_table(const std::string& json_text) {
  json j = json::parse(json_text);
  SeverityTable table;
  table.version = j.at("version").get<int>();
  const auto& strengths = j.at("strengths");
  for (const auto& tau : corruption_registry()) {
    if (!strengths.contains(tau)) {
      throw config_error("severity table missing corruption: " + tau);
    }
    const auto vals = strengths.at(tau).get<std::vector<float>>();
    if (vals.size() != 5) {
      throw config_error("severity table for " + tau + " must have 5 levels");
    }
    std::array<float, 5> arr{};
    for (int i = 0; i < 5; ++i) {
      arr[static_cast<std::size_t>(i)] = vals[static_cast<std::size_t>(i)];
      if (i > 0 && vals[static_cast<std::size_t>(i)] <=
                       vals[static_cast<std::size_t>(i - 1)]) {
        throw config_error("severity strengths must strictly increase for " +
                           tau);
      }
    }
    table.entries.emplace_back(tau, arr);
  }
  return table;
}

const SeverityTable& default_severity_table() {
  static const SeverityTable table =
      parse_severity_table(embedded_severity_table_json());
  return table;
}

float SeverityTable::strength(const std::string& tau, int mu) const {
  if (mu < 1 || mu > 5) {
    throw config_error("severity out of range [1,5]: " + std::to_string(mu));
  }
  for (const auto& [name, arr] : entries) {
    if (name == tau) return arr[static_cast<std::size_t>(mu - 1)];
  }
  throw config_error("unknown corruption type: " + tau);
}

Tensor apply_corruption(const Tensor& image, const CorruptionSpec& spec,
                        std::uint64_t rng_seed) {
  check_image(image);
  validate_spec(spec);
  const float s = default_severity_table().strength(spec.tau, spec.mu);
  Rng rng(seed_split(rng_seed, spec_id(spec)));
  if (spec.tau == "gaussian_noise") return gaussian_noise_c(image, s, rng);
  if (spec.tau == "impulse_noise") return impulse_noise_c(image, s, rng);
  if (spec.tau == "defocus_blur") return defocus_blur_c(image, s);
  if (spec.tau == "motion_blur") return motion_blur_c(image, s);
  if (spec.tau == "zoom_blur") return zoom_blur_c(image, s);
  if (spec.tau == "fog") return fog_c(image, s, rng);
  if (spec.tau == "brightness") return brightness_c(image, s);
  if (spec.tau == "contrast") return contrast_c(image, s);
  if (spec.tau == "snow") return snow_c(image, s, rng);
  if (spec.tau == "frost") return frost_c(image, s, rng);
  throw config_error("unknown corruption type: " + spec.tau);
}

Tensor compose(const Tensor& image, const std::vector<CorruptionSpec>& specs,
               std::uint64_t rng_seed) {
  if (specs.empty()) throw config_error("compose requires a non-empty stack");
  Tensor out = image;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    out = apply_corruption(out, specs[i], seed_split(rng_seed, "stage", i));
  }
  return out;
}

std::vector<std::vector<CorruptionSpec>> default_pairs() {
  return {
      {{"brightness", 5}, {"zoom_blur", 5}},
      {{"fog", 5}, {"impulse_noise", 5}},
      {{"snow", 5}, {"defocus_blur", 5}},
      {{"snow", 5}, {"motion_blur", 5}},
      {{"zoom_blur", 5}, {"gaussian_noise", 5}},
  };
}

std::vector<std::vector<CorruptionSpec>> default_triplets() {
  return {
      {{"frost", 5}, {"fog", 5}, {"snow", 5}},
      {{"gaussian_noise", 5}, {"defocus_blur", 5}, {"brightness", 5}},
      {{"impulse_noise", 5}, {"motion_blur", 5}, {"contrast", 5}},
      {{"fog", 5}, {"motion_blur", 5}, {"gaussian_noise", 5}},
      {{"snow", 5}, {"zoom_blur", 5}, {"impulse_noise", 5}},
  };
}

double psnr(const Tensor& clean, const Tensor& corrupted) {
  if (clean.shape() != corrupted.shape()) {
    throw shape_error("psnr shape mismatch");
  }
  const float* a = clean.data();
  const float* b = corrupted.data();
  double mse = 0.0;
  for (std::int64_t i = 0; i < clean.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(clean.numel());
  if (mse <= 0.0) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace ttb
