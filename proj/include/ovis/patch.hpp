#pragma once

// Image patchification and the toy ViT-style encoder that turns patches into
// continuous visual representations.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "ovis/nn.hpp"
#include "ovis/rng.hpp"
#include "ovis/tensor.hpp"

namespace ovis {

// Pixels stored channel-major, then row (y), then column (x); values in [0, 1].
struct ImageTensor {
  int channels = 1;
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  static ImageTensor blank(int channels, int width, int height) {
    if (channels <= 0 || width <= 0 || height <= 0) {
      throw ShapeError("image dimensions must be positive");
    }
    return {channels, width, height,
            std::vector<float>(static_cast<std::size_t>(channels) * width * height, 0.0f)};
  }

  float& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  void clamp() {
    for (auto& p : pixels) p = std::clamp(p, 0.0f, 1.0f);
  }

  bool operator==(const ImageTensor&) const = default;
};

// n patches in row-major grid order, each flattened as (channel, row, col).
struct PatchGrid {
  int patch_w = 0;
  int patch_h = 0;
  int grid_cols = 0;
  int grid_rows = 0;
  int channels = 0;
  std::vector<float> values;  // n x (channels * patch_h * patch_w)

  std::size_t count() const { return static_cast<std::size_t>(grid_cols) * grid_rows; }
  std::size_t patch_size() const { return static_cast<std::size_t>(channels) * patch_w * patch_h; }
};

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

// Images whose sides are not multiples of the patch size are zero-padded on
// the right and bottom.
inline PatchGrid patchify(const ImageTensor& img, int patch_w, int patch_h) {
  if (patch_w <= 0 || patch_h <= 0) {
    throw ShapeError("patch dimensions must be positive, got " + std::to_string(patch_w) + "x" +
                     std::to_string(patch_h));
  }
  PatchGrid grid;
  grid.patch_w = patch_w;
  grid.patch_h = patch_h;
  grid.channels = img.channels;
  grid.grid_cols = ceil_div(img.width, patch_w);
  grid.grid_rows = ceil_div(img.height, patch_h);
  grid.values.assign(grid.count() * grid.patch_size(), 0.0f);
  std::size_t k = 0;
  for (int gr = 0; gr < grid.grid_rows; ++gr) {
    for (int gc = 0; gc < grid.grid_cols; ++gc) {
      for (int c = 0; c < img.channels; ++c) {
        for (int dy = 0; dy < patch_h; ++dy) {
          for (int dx = 0; dx < patch_w; ++dx, ++k) {
            const int y = gr * patch_h + dy;
            const int x = gc * patch_w + dx;
            if (y < img.height && x < img.width) grid.values[k] = img.at(c, y, x);
          }
        }
      }
    }
  }
  return grid;
}

// Inverse of patchify for an image of the given size; padding is dropped.
inline ImageTensor unpatchify(const PatchGrid& grid, int width, int height) {
  auto img = ImageTensor::blank(grid.channels, width, height);
  std::size_t k = 0;
  for (int gr = 0; gr < grid.grid_rows; ++gr) {
    for (int gc = 0; gc < grid.grid_cols; ++gc) {
      for (int c = 0; c < grid.channels; ++c) {
        for (int dy = 0; dy < grid.patch_h; ++dy) {
          for (int dx = 0; dx < grid.patch_w; ++dx, ++k) {
            const int y = gr * grid.patch_h + dy;
            const int x = gc * grid.patch_w + dx;
            if (y < height && x < width) img.at(c, y, x) = grid.values[k];
          }
        }
      }
    }
  }
  return img;
}

struct EncoderConfig {
  int channels = 1;
  int patch_w = 8;
  int patch_h = 8;
  std::size_t max_patches = 16;
  std::size_t width = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
};

template <class T>
struct VisualEncoder {
  EncoderConfig config;
  Linear<T> patch_proj;
  Tensor<T> pos;  // [max_patches x width]
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> ln_post;

  static VisualEncoder make(const EncoderConfig& cfg, Rng& rng) {
    if (cfg.layers == 0) throw ShapeError("encoder needs at least one block");
    VisualEncoder enc;
    enc.config = cfg;
    const std::size_t patch_dim = static_cast<std::size_t>(cfg.channels) * cfg.patch_w * cfg.patch_h;
    enc.patch_proj = Linear<T>::make(patch_dim, cfg.width, rng);
    enc.pos = normal_tensor<T>({cfg.max_patches, cfg.width}, rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      enc.blocks.push_back(TransformerBlock<T>::make(cfg.width, cfg.heads, rng));
    }
    enc.ln_post = LayerNorm<T>::make(cfg.width);
    return enc;
  }

  static std::string block_name(std::size_t i) { return "block" + std::to_string(i); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    patch_proj.visit(qualify(prefix, "patch_proj"), f);
    f(qualify(prefix, "pos"), pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(qualify(prefix, block_name(i)), f);
    ln_post.visit(qualify(prefix, "ln_post"), f);
  }
};

// Patch rows -> [n x width] representations (no class token).
template <class T>
Tensor<T> encode(Tape<T>& tape, const VisualEncoder<T>& enc, const PatchGrid& grid) {
  const std::size_t n = grid.count();
  if (n > enc.config.max_patches) {
    throw ShapeError("encode: " + std::to_string(n) + " patches exceed positional capacity " +
                     std::to_string(enc.config.max_patches));
  }
  if (grid.patch_size() != enc.patch_proj.in_features()) {
    throw ShapeError("encode: patch size " + std::to_string(grid.patch_size()) +
                     " does not match encoder input " + std::to_string(enc.patch_proj.in_features()));
  }
  auto patches = Tensor<T>::from({n, grid.patch_size()},
                                 std::vector<T>(grid.values.begin(), grid.values.end()));
  auto x = enc.patch_proj(tape, patches);
  x = add(tape, x, slice(tape, enc.pos, 0, 0, n));
  for (const auto& block : enc.blocks) x = block(tape, x, /*causal=*/false);
  return enc.ln_post(tape, x);
}

// Copy of enc whose final block is redrawn from the init distribution.
// All other parameters share storage with enc.
template <class T>
VisualEncoder<T> reinit_last_block(const VisualEncoder<T>& enc, std::uint64_t seed) {
  VisualEncoder<T> out = enc;
  Rng rng(seed, "encoder.reinit_last_block");
  const bool trainable = enc.blocks.back().qkv.weight.requires_grad();
  out.blocks.back() = TransformerBlock<T>::make(enc.config.width, enc.config.heads, rng);
  out.blocks.back().visit("", [&](const std::string&, Tensor<T>& t) { t.set_requires_grad(trainable); });
  return out;
}

}  // namespace ovis
