#include "moelab/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace moelab {

void AttentionSpec::validate() const {
  if (n_q_heads <= 0 || n_kv_heads <= 0 || head_dim <= 0) {
    throw std::invalid_argument("AttentionSpec: head counts and dim must be positive");
  }
  if (n_q_heads % n_kv_heads != 0) {
    throw std::invalid_argument("AttentionSpec: n_q_heads (" +
                                std::to_string(n_q_heads) +
                                ") not divisible by n_kv_heads (" +
                                std::to_string(n_kv_heads) + ")");
  }
  if (rope_dims % 2 != 0 || rope_dims > head_dim) {
    throw std::invalid_argument("AttentionSpec: rope_dims must be even and <= head_dim");
  }
  if (window && *window < 1) {
    throw std::invalid_argument("AttentionSpec: window must be >= 1");
  }
}

std::vector<LayerKind> build_layout(int n_layers, LayoutPattern pattern) {
  if (n_layers < 1) throw std::invalid_argument("build_layout: n_layers < 1");
  std::vector<LayerKind> layout;
  switch (pattern) {
    case LayoutPattern::FFFF:
      layout.assign(n_layers, LayerKind::FULL);
      return layout;
    case LayoutPattern::S3F1:
      if (n_layers % 4 != 1) {
        throw std::invalid_argument(
            "build_layout: S3F1 needs n_layers == 1 (mod 4), got " +
            std::to_string(n_layers));
      }
      layout.push_back(LayerKind::FULL);
      for (int b = 0; b < (n_layers - 1) / 4; ++b) {
        layout.insert(layout.end(), {LayerKind::SWA, LayerKind::SWA,
                                     LayerKind::SWA, LayerKind::FULL});
      }
      return layout;
    case LayoutPattern::S1F1:
      if (n_layers % 2 != 1) {
        throw std::invalid_argument(
            "build_layout: S1F1 needs n_layers == 1 (mod 2), got " +
            std::to_string(n_layers));
      }
      layout.push_back(LayerKind::FULL);
      for (int b = 0; b < (n_layers - 1) / 2; ++b) {
        layout.insert(layout.end(), {LayerKind::SWA, LayerKind::FULL});
      }
      return layout;
  }
  throw std::logic_error("build_layout: bad pattern");
}

Eigen::ArrayXXi swa_mask(Eigen::Index seq_len, Eigen::Index window) {
  if (seq_len < 1 || window < 1) {
    throw std::invalid_argument("swa_mask: seq_len and window must be >= 1");
  }
  Eigen::ArrayXXi mask = Eigen::ArrayXXi::Zero(seq_len, seq_len);
  for (Eigen::Index i = 0; i < seq_len; ++i) {
    for (Eigen::Index j = std::max<Eigen::Index>(0, i - window + 1); j <= i; ++j) {
      mask(i, j) = 1;
    }
  }
  return mask;
}

Eigen::ArrayXXi causal_mask(Eigen::Index seq_len) {
  return swa_mask(seq_len, seq_len);
}

Tensor apply_rope(const Tensor& vectors, const std::vector<Eigen::Index>& positions,
                  double theta, int rope_dims) {
  const auto T = vectors.rows();
  const auto d = vectors.cols();
  if (rope_dims % 2 != 0 || rope_dims > d) {
    throw std::invalid_argument("apply_rope: rope_dims must be even and <= head_dim");
  }
  if (static_cast<Eigen::Index>(positions.size()) != T) {
    throw std::invalid_argument("apply_rope: positions size != rows");
  }
  const int pairs = rope_dims / 2;
  Matrix cs(T, pairs), sn(T, pairs);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (int m = 0; m < pairs; ++m) {
      const double freq =
          std::pow(theta, -2.0 * m / static_cast<double>(rope_dims));
      const double ang = static_cast<double>(positions[t]) * freq;
      cs(t, m) = std::cos(ang);
      sn(t, m) = std::sin(ang);
    }
  }

  Matrix y = vectors.value();
  for (Eigen::Index t = 0; t < T; ++t) {
    for (int m = 0; m < pairs; ++m) {
      const double a = vectors.value()(t, 2 * m);
      const double b = vectors.value()(t, 2 * m + 1);
      y(t, 2 * m) = a * cs(t, m) - b * sn(t, m);
      y(t, 2 * m + 1) = a * sn(t, m) + b * cs(t, m);
    }
  }

  auto vn = vectors.node();
  return make_op(std::move(y), {vectors},
                 [vn, cs, sn, pairs](detail::BackwardCtx& ctx, const Matrix& g) {
                   if (!ctx.wants(vn)) return;
                   auto& gv = ctx.grad_of(vn);
                   for (Eigen::Index t = 0; t < g.rows(); ++t) {
                     for (int m = 0; m < pairs; ++m) {
                       const double ga = g(t, 2 * m);
                       const double gb = g(t, 2 * m + 1);
                       gv(t, 2 * m) += ga * cs(t, m) + gb * sn(t, m);
                       gv(t, 2 * m + 1) += -ga * sn(t, m) + gb * cs(t, m);
                     }
                   }
                   gv.rightCols(gv.cols() - 2 * pairs) +=
                       g.rightCols(g.cols() - 2 * pairs);
                 });
}

namespace {

// Normalizers Z_i = sum_{allowed j} exp(s_ij), via logsumexp for stability.
Vector masked_normalizers(const Matrix& scores, const Eigen::ArrayXXi& mask) {
  Vector z(scores.rows());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (mask(i, j)) m = std::max(m, scores(i, j));
    }
    if (!std::isfinite(m)) {
      z(i) = 0.0;
      continue;
    }
    double acc = 0.0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (mask(i, j)) acc += std::exp(scores(i, j) - m);
    }
    z(i) = std::exp(m + std::log(acc));
  }
  return z;
}

}  // namespace

std::vector<Tensor> gqa_attention(const std::vector<Tensor>& q,
                                  const std::vector<Tensor>& k,
                                  const std::vector<Tensor>& v,
                                  const Eigen::ArrayXXi& mask,
                                  const AttentionSpec& spec,
                                  AttentionTrace* trace) {
  spec.validate();
  if (static_cast<int>(q.size()) != spec.n_q_heads ||
      static_cast<int>(k.size()) != spec.n_kv_heads ||
      static_cast<int>(v.size()) != spec.n_kv_heads) {
    throw std::invalid_argument("gqa_attention: head count mismatch with spec");
  }
  const int group = spec.n_q_heads / spec.n_kv_heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(spec.head_dim));

  std::vector<Tensor> outputs;
  outputs.reserve(q.size());
  for (int h = 0; h < spec.n_q_heads; ++h) {
    const int kv = h / group;
    Tensor scores = inv_sqrt_d * matmul(q[h], transpose(k[kv]));
    Tensor alpha = softmax_rows(scores, mask);
    Tensor y = matmul(alpha, v[kv]);
    if (trace) {
      Matrix s = scores.value();
      for (Eigen::Index i = 0; i < s.rows(); ++i)
        for (Eigen::Index j = 0; j < s.cols(); ++j)
          if (!mask(i, j)) s(i, j) = -std::numeric_limits<double>::infinity();
      trace->scores.push_back(std::move(s));
      trace->normalizers.push_back(masked_normalizers(scores.value(), mask));
      trace->weights.push_back(alpha.value());
      trace->head_outputs.push_back(y.value());
    }
    outputs.push_back(std::move(y));
  }
  return outputs;
}

Tensor head_gate(const Tensor& y, const Tensor& x, const Tensor& w_gate_row,
                 Vector* gate_values) {
  if (w_gate_row.rows() != 1 || w_gate_row.cols() != x.cols()) {
    throw std::invalid_argument("head_gate: w_gate must be 1 x model_width");
  }
  Tensor a = matmul(x, transpose(w_gate_row));  // T x 1
  Tensor g = sigmoid(a);
  if (gate_values) *gate_values = g.value().col(0);
  return scale_rows(y, g);
}

Tensor attention_layer_forward(const Tensor& x, const AttentionLayerConfig& cfg,
                               const AttentionLayerParams& params,
                               AttentionTrace* trace) {
  const AttentionSpec& spec = cfg.spec;
  spec.validate();
  const auto T = x.rows();
  const auto width = x.cols();
  const auto d = spec.head_dim;

  auto expect = [&](const Tensor& w, Eigen::Index r, Eigen::Index c,
                    const char* name) {
    if (w.rows() != r || w.cols() != c) {
      throw std::invalid_argument(
          std::string("attention_layer_forward: ") + name + " is " +
          std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
          ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
  };
  expect(params.w_q, width, spec.n_q_heads * d, "w_q");
  expect(params.w_k, width, spec.n_kv_heads * d, "w_k");
  expect(params.w_v, width, spec.n_kv_heads * d, "w_v");
  expect(params.w_o, spec.n_q_heads * d, width, "w_o");
  if (spec.gated) expect(params.w_gate, spec.n_q_heads, width, "w_gate");
  if (cfg.sink_alternative) expect(params.sink_logits, 1, spec.n_q_heads, "sink_logits");

  Tensor qkv_in = params.in_norm_gamma.defined()
                      ? rmsnorm_zero_centered(x, params.in_norm_gamma, 1e-6)
                      : x;
  Tensor q_all = matmul(qkv_in, params.w_q);
  Tensor k_all = matmul(qkv_in, params.w_k);
  Tensor v_all = matmul(qkv_in, params.w_v);

  std::vector<Eigen::Index> positions(T);
  for (Eigen::Index t = 0; t < T; ++t) positions[t] = t;

  auto split_heads = [&](const Tensor& all, int n_heads, bool norm_and_rope) {
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
      Tensor hd = slice_cols(all, h * d, d);
      if (norm_and_rope) {
        if (spec.qk_norm) hd = rmsnorm_zero_centered(hd, Tensor(), 1e-6);
        if (spec.rope_dims > 0) {
          hd = apply_rope(hd, positions, spec.rope_theta, spec.rope_dims);
        }
      }
      heads.push_back(std::move(hd));
    }
    return heads;
  };
  std::vector<Tensor> q = split_heads(q_all, spec.n_q_heads, true);
  std::vector<Tensor> k = split_heads(k_all, spec.n_kv_heads, true);
  std::vector<Tensor> v = split_heads(v_all, spec.n_kv_heads, false);

  Eigen::ArrayXXi mask =
      spec.window ? swa_mask(T, *spec.window) : causal_mask(T);

  std::vector<Tensor> heads;
  if (cfg.sink_alternative) {
    // Learnable per-head scalar sink: one extra always-allowed key with
    // logit sink_h and zero value.
    const int group = spec.n_q_heads / spec.n_kv_heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Eigen::ArrayXXi mask_ext(T, T + 1);
    mask_ext.leftCols(T) = mask;
    mask_ext.col(T).setOnes();
    Tensor ones_col = Tensor::leaf(Matrix::Ones(T, 1));
    for (int h = 0; h < spec.n_q_heads; ++h) {
      const int kv = h / group;
      Tensor scores = inv_sqrt_d * matmul(q[h], transpose(k[kv]));
      Tensor sink_col = matmul(ones_col, slice_cols(params.sink_logits, h, 1));
      Tensor alpha = softmax_rows(concat_cols({scores, sink_col}), mask_ext);
      Tensor y = matmul(slice_cols(alpha, 0, T), v[kv]);
      if (trace) {
        trace->weights.push_back(alpha.value().leftCols(T));
        trace->normalizers.push_back(masked_normalizers(scores.value(), mask));
        trace->head_outputs.push_back(y.value());
      }
      heads.push_back(std::move(y));
    }
  } else {
    heads = gqa_attention(q, k, v, mask, spec, trace);
    if (spec.gated) {
      for (int h = 0; h < spec.n_q_heads; ++h) {
        Vector gvals;
        heads[h] = head_gate(heads[h], x, slice_rows(params.w_gate, h, 1),
                             trace ? &gvals : nullptr);
        if (trace) trace->gates.push_back(std::move(gvals));
      }
    }
  }

  Tensor delta = matmul(concat_cols(heads), params.w_o);
  return x + delta;
}

}  // namespace moelab
