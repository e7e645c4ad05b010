#include "fsh/toy.hpp"

#include "fsh/errors.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace fsh {

namespace {

struct Palette {
  Eigen::Vector3f background, skin, hair, lips, iris;
  float width_ratio = 1.0f;
  float hairline = -0.45f;
};

struct Pose {
  float cx, cy, size, roll, mouth_open, eye_open;
};

Eigen::Vector3f random_color(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> byte(0, 255);
  return {from_byte(static_cast<std::uint8_t>(byte(rng))), from_byte(static_cast<std::uint8_t>(byte(rng))),
          from_byte(static_cast<std::uint8_t>(byte(rng)))};
}

Eigen::Vector3f distinct_color(std::mt19937_64& rng, const std::vector<Eigen::Vector3f>& avoid) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    Eigen::Vector3f c = random_color(rng);
    bool ok = true;
    for (const auto& a : avoid) ok = ok && (c - a).cwiseAbs().sum() > 0.9f;
    if (ok) return c;
  }
  return random_color(rng);
}

Palette make_palette(std::uint64_t seed, int identity) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(identity) * 7919u + 17u);
  Palette p;
  p.background = random_color(rng);
  p.skin = distinct_color(rng, {p.background});
  p.hair = distinct_color(rng, {p.background, p.skin});
  p.lips = distinct_color(rng, {p.skin});
  p.iris = random_color(rng);
  p.width_ratio = std::uniform_real_distribution<float>(0.8f, 1.05f)(rng);
  p.hairline = std::uniform_real_distribution<float>(-0.6f, -0.35f)(rng);
  return p;
}

// Face-local coordinates: u to the image right, v downward, unit = head size.
Eigen::Matrix<float, kNumLandmarks, 2> local_landmarks(const Palette& p, const Pose& pose) {
  Eigen::Matrix<float, kNumLandmarks, 2> pts;
  const float pi = std::numbers::pi_v<float>;
  const float lower = 1.1f + 0.15f * pose.mouth_open;
  for (int k = 0; k <= 16; ++k) {
    const float phi = pi * static_cast<float>(k) / 16.0f;
    pts(k, 0) = -0.95f * p.width_ratio * std::cos(phi);
    pts(k, 1) = 0.1f + lower * std::sin(phi);
  }
  for (int j = 0; j < 5; ++j) {
    const float t = static_cast<float>(j) / 4.0f;
    const float arc = 0.08f * std::sin(pi * t);
    pts(17 + j, 0) = -0.6f + 0.45f * t;
    pts(17 + j, 1) = -0.42f - arc;
    pts(22 + j, 0) = 0.15f + 0.45f * t;
    pts(22 + j, 1) = -0.42f - 0.08f * std::sin(pi * t);
  }
  for (int j = 0; j < 4; ++j) {
    pts(27 + j, 0) = 0.0f;
    pts(27 + j, 1) = -0.3f + 0.13f * static_cast<float>(j);
  }
  for (int j = 0; j < 5; ++j) {
    const float t = static_cast<float>(j) / 4.0f;
    pts(31 + j, 0) = -0.18f + 0.36f * t;
    pts(31 + j, 1) = 0.2f + 0.04f * std::sin(pi * t);
  }
  const float eye_ry = 0.07f * pose.eye_open;
  for (int side = 0; side < 2; ++side) {
    const float cx = side == 0 ? -0.35f : 0.35f;
    for (int j = 0; j < 6; ++j) {
      const float a = pi + 2.0f * pi * static_cast<float>(j) / 6.0f;
      pts(36 + 6 * side + j, 0) = cx + 0.14f * std::cos(a);
      pts(36 + 6 * side + j, 1) = -0.2f + eye_ry * std::sin(a);
    }
  }
  const float outer_ry = 0.08f + 0.12f * pose.mouth_open;
  for (int j = 0; j < 12; ++j) {
    const float a = pi + 2.0f * pi * static_cast<float>(j) / 12.0f;
    pts(48 + j, 0) = 0.32f * std::cos(a);
    pts(48 + j, 1) = 0.5f + outer_ry * std::sin(a);
  }
  const float inner_ry = 0.02f + 0.1f * pose.mouth_open;
  for (int j = 0; j < 8; ++j) {
    const float a = pi + 2.0f * pi * static_cast<float>(j) / 8.0f;
    pts(60 + j, 0) = 0.22f * std::cos(a);
    pts(60 + j, 1) = 0.5f + inner_ry * std::sin(a);
  }
  return pts;
}

bool in_ellipse(float u, float v, float cu, float cv, float ru, float rv) {
  if (ru <= 0 || rv <= 0) return false;
  const float a = (u - cu) / ru, b = (v - cv) / rv;
  return a * a + b * b <= 1.0f;
}

Eigen::Vector3f shade(const Palette& p, const Pose& pose, float u, float v) {
  const float lower = 1.1f + 0.15f * pose.mouth_open;
  const float head_rv = v > 0.1f ? lower : 1.1f;
  const bool head = in_ellipse(u, v, 0.0f, 0.1f, 0.95f * p.width_ratio, head_rv);
  const bool hair_cap = in_ellipse(u, v, 0.0f, 0.0f, 1.05f * p.width_ratio, 1.15f) && v < -0.3f;
  if (!head && !hair_cap) return p.background;
  if (!head || v < p.hairline - 0.25f * std::abs(u)) return p.hair;

  const float eye_ry = 0.07f * pose.eye_open;
  for (float cx : {-0.35f, 0.35f}) {
    if (in_ellipse(u, v, cx, -0.2f, 0.14f, eye_ry)) {
      return in_ellipse(u, v, cx, -0.2f, 0.05f, std::min(0.05f, eye_ry)) ? p.iris : Eigen::Vector3f(0.9f, 0.9f, 0.9f);
    }
  }
  for (float sign : {-1.0f, 1.0f}) {
    const float t = (sign * u - 0.15f) / 0.45f;
    if (t >= 0.0f && t <= 1.0f) {
      const float brow_v = -0.42f - 0.08f * std::sin(std::numbers::pi_v<float> * t);
      if (std::abs(v - brow_v) < 0.04f) return p.hair;
    }
  }
  if (in_ellipse(u, v, 0.0f, 0.5f, 0.22f, 0.02f + 0.1f * pose.mouth_open)) return {-0.8f, -0.9f, -0.9f};
  if (in_ellipse(u, v, 0.0f, 0.5f, 0.32f, 0.08f + 0.12f * pose.mouth_open)) return p.lips;
  if (std::abs(u) < 0.05f && v > -0.25f && v < 0.2f) return 0.8f * p.skin;
  return p.skin;
}

}  // namespace

Dataset make_toy_dataset(const ToyDatasetOptions& options, const ConnectivitySpec& connectivity) {
  if (options.identities < 1 || options.frames < 1 || options.videos_per_identity < 1)
    throw ConfigError("toy dataset needs at least one identity, video and frame");
  if (options.resolution < 8) throw ConfigError("toy dataset resolution must be at least 8");
  const int res = options.resolution;
  const float two_pi = 2.0f * std::numbers::pi_v<float>;

  Dataset dataset;
  for (int id = 0; id < options.identities; ++id) {
    const int identity = options.first_identity + id;
    const Palette palette = make_palette(options.seed, identity);
    for (int vid = 0; vid < options.videos_per_identity; ++vid) {
      std::mt19937_64 rng(options.seed * 31u + static_cast<std::uint64_t>(identity) * 1000003u +
                          static_cast<std::uint64_t>(vid) * 7u + 1u);
      std::uniform_real_distribution<float> phase(0.0f, two_pi);
      std::uniform_int_distribution<int> freq(1, 3);
      float ph[6], fr[6];
      for (int k = 0; k < 6; ++k) {
        ph[k] = phase(rng);
        fr[k] = static_cast<float>(freq(rng));
      }
      const int blink_offset = std::uniform_int_distribution<int>(0, 8)(rng);

      VideoSequence seq;
      seq.name = "id" + std::to_string(identity) + "_v" + std::to_string(vid);
      seq.identity = "id" + std::to_string(identity);
      for (int t = 0; t < options.frames; ++t) {
        const float s = two_pi * static_cast<float>(t) / static_cast<float>(options.frames);
        Pose pose;
        pose.cx = 0.5f + 0.06f * std::sin(fr[0] * s + ph[0]);
        pose.cy = 0.47f + 0.04f * std::sin(fr[1] * s + ph[1]);
        pose.size = 0.27f + 0.025f * std::sin(fr[2] * s + ph[2]);
        pose.roll = 0.2f * std::sin(fr[3] * s + ph[3]);
        pose.mouth_open = 0.5f + 0.5f * std::sin(fr[4] * s + ph[4]);
        pose.eye_open = (t + blink_offset) % 9 == 0 ? 0.15f : 1.0f;

        const float c = std::cos(pose.roll), sn = std::sin(pose.roll);
        FrameRecord frame;
        const auto local = local_landmarks(palette, pose);
        for (int i = 0; i < kNumLandmarks; ++i) {
          const float u = local(i, 0), v = local(i, 1);
          frame.landmarks.points(i, 0) = std::clamp(pose.cx + pose.size * (c * u - sn * v), 0.0f, 1.0f);
          frame.landmarks.points(i, 1) = std::clamp(pose.cy + pose.size * (sn * u + c * v), 0.0f, 1.0f);
        }
        frame.image = Image(res, res);
        for (int row = 0; row < res; ++row) {
          for (int col = 0; col < res; ++col) {
            const float dx = (static_cast<float>(col) + 0.5f) / res - pose.cx;
            const float dy = (static_cast<float>(row) + 0.5f) / res - pose.cy;
            const float u = (c * dx + sn * dy) / pose.size;
            const float v = (-sn * dx + c * dy) / pose.size;
            frame.image.at(row, col) = shade(palette, pose, u, v);
          }
        }
        frame.landmark_image = rasterize_landmarks(frame.landmarks, connectivity, res, res);
        seq.frames.push_back(std::move(frame));
      }
      dataset.sequences.push_back(std::move(seq));
    }
  }
  dataset.renumber();
  return dataset;
}

}  // namespace fsh
