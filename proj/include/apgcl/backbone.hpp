#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "apgcl/params.hpp"
#include "apgcl/tape.hpp"

namespace apgcl {

struct BackboneConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 1;
  int embed_dim = 64;   // d
  int num_layers = 8;   // N_L
  int num_heads = 4;
  double mlp_ratio = 2.0;
  int prompt_layer = 0;  // l; 0 means "use default round(0.75 * N_L)"

  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }  // N_E
  int patch_dim() const { return patch_size * patch_size * channels; }
  int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }
  int head_dim() const { return embed_dim / num_heads; }

  int effective_prompt_layer() const {
    if (prompt_layer > 0) return prompt_layer;
    int l = static_cast<int>(std::lround(0.75 * num_layers));
    if (l < 1) l = 1;
    if (l > num_layers - 1) l = num_layers - 1;
    return l;
  }

  void validate() const {
    if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0)
      throw std::invalid_argument("BackboneConfig: image_size must be divisible by patch_size");
    if (embed_dim < 1 || num_layers < 2 || num_heads < 1)
      throw std::invalid_argument("BackboneConfig: bad embed_dim/num_layers/num_heads");
    if (embed_dim % num_heads != 0)
      throw std::invalid_argument("BackboneConfig: embed_dim must divide by num_heads");
    int l = effective_prompt_layer();
    if (l < 1 || l >= num_layers)
      throw std::invalid_argument("BackboneConfig: prompt layer must lie in [1, N_L-1]");
  }
};

// Token sequence flowing through the transformer. Row 0 is the class token,
// rows [1, 1+n_prompts) the prompt block, the rest are patch tokens.
template <class T>
struct TokenSeq {
  Var<T> tokens;
  int n_prompts = 0;

  int length() const { return tokens.val().rows; }
};

// single image, row-major pixels
template <class T>
struct Image {
  int h = 0, w = 0, c = 1;
  std::vector<T> pix;

  Image() = default;
  Image(int h_, int w_, int c_)
      : h(h_), w(w_), c(c_), pix(static_cast<std::size_t>(h_) * w_ * c_, T(0)) {}
  T& at(int y, int x, int ch = 0) {
    return pix[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  const T& at(int y, int x, int ch = 0) const {
    return pix[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
};

inline std::string layer_prefix(int layer) {
  return "backbone.layers." + std::to_string(layer) + ".";
}

template <class T>
void init_backbone_params(ParameterSet<T>& params, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  const T std02 = T(0.02);
  params.add("backbone.patch_embed.weight",
             Mat<T>::gaussian(cfg.patch_dim(), cfg.embed_dim, std02, rng));
  params.add("backbone.patch_embed.bias", Mat<T>(1, cfg.embed_dim));
  params.add("backbone.cls_token", Mat<T>::gaussian(1, cfg.embed_dim, std02, rng));
  params.add("backbone.pos_embed",
             Mat<T>::gaussian(1 + cfg.num_patches(), cfg.embed_dim, std02, rng));
  for (int i = 1; i <= cfg.num_layers; ++i) {
    std::string p = layer_prefix(i);
    Mat<T> ones(1, cfg.embed_dim);
    for (auto& x : ones.v) x = T(1);
    params.add(p + "ln1.gamma", ones);
    params.add(p + "ln1.beta", Mat<T>(1, cfg.embed_dim));
    params.add(p + "attn.wq", Mat<T>::gaussian(cfg.embed_dim, cfg.embed_dim, std02, rng));
    params.add(p + "attn.wk", Mat<T>::gaussian(cfg.embed_dim, cfg.embed_dim, std02, rng));
    params.add(p + "attn.wv", Mat<T>::gaussian(cfg.embed_dim, cfg.embed_dim, std02, rng));
    params.add(p + "attn.wo", Mat<T>::gaussian(cfg.embed_dim, cfg.embed_dim, std02, rng));
    params.add(p + "attn.bq", Mat<T>(1, cfg.embed_dim));
    params.add(p + "attn.bk", Mat<T>(1, cfg.embed_dim));
    params.add(p + "attn.bv", Mat<T>(1, cfg.embed_dim));
    params.add(p + "attn.bo", Mat<T>(1, cfg.embed_dim));
    params.add(p + "ln2.gamma", ones);
    params.add(p + "ln2.beta", Mat<T>(1, cfg.embed_dim));
    params.add(p + "mlp.fc1.weight",
               Mat<T>::gaussian(cfg.embed_dim, cfg.mlp_hidden(), std02, rng));
    params.add(p + "mlp.fc1.bias", Mat<T>(1, cfg.mlp_hidden()));
    params.add(p + "mlp.fc2.weight",
               Mat<T>::gaussian(cfg.mlp_hidden(), cfg.embed_dim, std02, rng));
    params.add(p + "mlp.fc2.bias", Mat<T>(1, cfg.embed_dim));
  }
}

// image -> (N_E x patch_dim) patch matrix, patches in row-major scan order
template <class T>
Mat<T> extract_patches(const Image<T>& img, const BackboneConfig& cfg) {
  if (img.h != cfg.image_size || img.w != cfg.image_size || img.c != cfg.channels)
    throw std::invalid_argument("patch_embed: image " + std::to_string(img.h) + "x" +
                                std::to_string(img.w) + "x" + std::to_string(img.c) +
                                " does not match config");
  int pps = cfg.patches_per_side();
  int ps = cfg.patch_size;
  Mat<T> out(cfg.num_patches(), cfg.patch_dim());
  for (int py = 0; py < pps; ++py) {
    for (int px = 0; px < pps; ++px) {
      int row = py * pps + px;
      int k = 0;
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int ch = 0; ch < cfg.channels; ++ch)
            out(row, k++) = img.at(py * ps + y, px * ps + x, ch);
    }
  }
  return out;
}

// tokenize: patch projection, class token prepended, positional embeddings
// added once here (prompts inserted later never see them)
template <class T>
TokenSeq<T> patch_embed(Tape<T>& tape, const Image<T>& img, const Bound<T>& b,
                        const BackboneConfig& cfg) {
  Var<T> patches = tape.leaf(extract_patches(img, cfg));
  Var<T> embedded = add_bias(matmul(patches, b["backbone.patch_embed.weight"]),
                             b["backbone.patch_embed.bias"]);
  Var<T> tokens = concat_rows<T>({b["backbone.cls_token"], embedded});
  tokens = add(tokens, b["backbone.pos_embed"]);
  return TokenSeq<T>{tokens, 0};
}

namespace detail {

// multi-head self-attention over X (pre-projected with q/k/v), per-head
// scaling 1/sqrt(d_k)
template <class T>
Var<T> multi_head_self_attention(Var<T> q, Var<T> k, Var<T> v, int num_heads) {
  int d = q.val().cols;
  int dk = d / num_heads;
  T scaling = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dk)));
  std::vector<Var<T>> heads;
  heads.reserve(static_cast<std::size_t>(num_heads));
  for (int h = 0; h < num_heads; ++h) {
    Var<T> qh = slice_cols(q, h * dk, (h + 1) * dk);
    Var<T> kh = slice_cols(k, h * dk, (h + 1) * dk);
    Var<T> vh = slice_cols(v, h * dk, (h + 1) * dk);
    Var<T> scores = softmax_rows(scale(matmul(qh, transpose(kh)), scaling));
    heads.push_back(matmul(scores, vh));
  }
  return concat_cols(heads);
}

}  // namespace detail

// one pre-norm transformer block: x += MHA(LN(x)); x += MLP(LN(x))
template <class T>
TokenSeq<T> self_attention_layer(TokenSeq<T> x, const Bound<T>& b,
                                 const BackboneConfig& cfg, int layer) {
  std::string p = layer_prefix(layer);
  Var<T> normed = layernorm_rows(x.tokens, b[p + "ln1.gamma"], b[p + "ln1.beta"]);
  Var<T> q = add_bias(matmul(normed, b[p + "attn.wq"]), b[p + "attn.bq"]);
  Var<T> k = add_bias(matmul(normed, b[p + "attn.wk"]), b[p + "attn.bk"]);
  Var<T> v = add_bias(matmul(normed, b[p + "attn.wv"]), b[p + "attn.bv"]);
  Var<T> attn_out = detail::multi_head_self_attention(q, k, v, cfg.num_heads);
  attn_out = add_bias(matmul(attn_out, b[p + "attn.wo"]), b[p + "attn.bo"]);
  Var<T> h1 = add(x.tokens, attn_out);

  Var<T> normed2 = layernorm_rows(h1, b[p + "ln2.gamma"], b[p + "ln2.beta"]);
  Var<T> mlp = add_bias(
      matmul(gelu(add_bias(matmul(normed2, b[p + "mlp.fc1.weight"]), b[p + "mlp.fc1.bias"])),
             b[p + "mlp.fc2.weight"]),
      b[p + "mlp.fc2.bias"]);
  return TokenSeq<T>{add(h1, mlp), x.n_prompts};
}

// plain (prompt-free) forward through layers 1..l; v_l is row 0 of X_l
template <class T>
struct IntermediateFeature {
  TokenSeq<T> x_l;
  Var<T> v_l;
};

template <class T>
IntermediateFeature<T> forward_to_layer(Tape<T>& tape, const Image<T>& img,
                                        const Bound<T>& b, const BackboneConfig& cfg,
                                        int layer) {
  TokenSeq<T> x = patch_embed(tape, img, b, cfg);
  for (int i = 1; i <= layer; ++i) x = self_attention_layer(x, b, cfg, i);
  return IntermediateFeature<T>{x, slice_rows(x.tokens, 0, 1)};
}

// [cls | P | patches]; class and patch tokens untouched, no positional
// embedding added to P
template <class T>
TokenSeq<T> insert_prompts(TokenSeq<T> x, Var<T> prompts) {
  const Mat<T>& pv = prompts.val();
  if (pv.rows == 0) return x;
  if (pv.cols != x.tokens.val().cols)
    throw std::invalid_argument("insert_prompts: prompt width " + std::to_string(pv.cols) +
                                " != token width " + std::to_string(x.tokens.val().cols));
  Var<T> cls = slice_rows(x.tokens, 0, 1);
  Var<T> rest = slice_rows(x.tokens, 1, x.length());
  return TokenSeq<T>{concat_rows<T>({cls, prompts, rest}), x.n_prompts + pv.rows};
}

// layers l+1..N_L with prompts attending fully; class-token readout
template <class T>
Var<T> forward_from_layer(TokenSeq<T> x, const Bound<T>& b, const BackboneConfig& cfg,
                          int layer) {
  for (int i = layer + 1; i <= cfg.num_layers; ++i) x = self_attention_layer(x, b, cfg, i);
  return slice_rows(x.tokens, 0, 1);  // prompt rows discarded at readout
}

}  // namespace apgcl
