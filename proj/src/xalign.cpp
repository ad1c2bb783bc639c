#include "adeid/xalign.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace adeid::xalign {

using json = nlohmann::json;

void XAlignConfig::validate() const {
  if (t < 1 || t > 64) fail(ErrorKind::InvalidConfig, "t must lie in [1, 64]");
  if (m < 1 || m > t) fail(ErrorKind::InvalidConfig, "m must lie in [1, t]");
  if (!(tau > 0.0)) fail(ErrorKind::InvalidConfig, "tau must be positive");
  if (!(tau_c > 0.0)) fail(ErrorKind::InvalidConfig, "tau_c must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail(ErrorKind::InvalidConfig, "dropout_p must lie in [0, 1)");
  if (epochs < 0) fail(ErrorKind::InvalidConfig, "epochs must be non-negative");
  if (batch_size < 1) fail(ErrorKind::InvalidConfig, "batch_size must be positive");
  if (!align_ablated && batch_size < 2) {
    fail(ErrorKind::InvalidConfig, "alignment loss needs batch_size >= 2");
  }
  if (lr < 0.0 || weight_decay < 0.0) fail(ErrorKind::InvalidConfig, "lr and weight_decay must be non-negative");
}

// ---------------------------------------------------------------------------

std::vector<TensorView> XAlignParams::trainable() {
  return {
      {"aspects", aspects.data(), aspects.rows(), aspects.cols()},
      {"wq", wq.data(), wq.rows(), wq.cols()},
      {"wk", wk.data(), wk.rows(), wk.cols()},
      {"wv", wv.data(), wv.rows(), wv.cols()},
      {"bn_gamma", bn_gamma.data(), bn_gamma.size(), 1},
      {"bn_beta", bn_beta.data(), bn_beta.size(), 1},
      {"w1", w1.data(), w1.rows(), w1.cols()},
      {"b1", b1.data(), b1.size(), 1},
      {"w2", w2.data(), w2.rows(), w2.cols()},
      {"b2", b2.data(), b2.size(), 1},
  };
}

std::vector<TensorView> XAlignParams::all_tensors() {
  auto out = trainable();
  out.push_back({"running_mean", running_mean.data(), running_mean.size(), 1});
  out.push_back({"running_var", running_var.data(), running_var.size(), 1});
  return out;
}

XAlignParams XAlignParams::zeros_like() const {
  XAlignParams z;
  z.aspects = Matrix::Zero(aspects.rows(), aspects.cols());
  z.wq = Matrix::Zero(wq.rows(), wq.cols());
  z.wk = Matrix::Zero(wk.rows(), wk.cols());
  z.wv = Matrix::Zero(wv.rows(), wv.cols());
  z.bn_gamma = Vector::Zero(bn_gamma.size());
  z.bn_beta = Vector::Zero(bn_beta.size());
  z.running_mean = Vector::Zero(running_mean.size());
  z.running_var = Vector::Zero(running_var.size());
  z.w1 = Matrix::Zero(w1.rows(), w1.cols());
  z.b1 = Vector::Zero(b1.size());
  z.w2 = Matrix::Zero(w2.rows(), w2.cols());
  z.b2 = Vector::Zero(b2.size());
  return z;
}

void XAlignParams::round_to_f32() {
  for (auto& t : all_tensors()) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = static_cast<float>(t.data[i]);
  }
}

bool XAlignParams::all_finite() const {
  auto& self = const_cast<XAlignParams&>(*this);
  for (auto& t : self.all_tensors()) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (!std::isfinite(t.data[i])) return false;
    }
  }
  return true;
}

XAlignParams init_params(const XAlignConfig& config) {
  config.validate();
  if (config.dim <= 0) fail(ErrorKind::InvalidConfig, "dimension must be positive");
  const int D = config.dim;
  const int H = D;
  Rng rng(derive_seed(config.seed, "xalign-init"));
  const auto normal_matrix = [&](Eigen::Index r, Eigen::Index c, double sd) {
    Matrix m(r, c);
    for (Eigen::Index j = 0; j < c; ++j) {
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal(0.0, sd);
    }
    return m;
  };
  XAlignParams p;
  p.aspects = normal_matrix(config.t, D, 1.0 / std::sqrt(static_cast<double>(D)));
  p.wq = Matrix::Identity(D, D) + normal_matrix(D, D, 0.02);
  p.wk = Matrix::Identity(D, D) + normal_matrix(D, D, 0.02);
  p.wv = Matrix::Identity(D, D) + normal_matrix(D, D, 0.02);
  p.bn_gamma = Vector::Ones(D);
  p.bn_beta = Vector::Zero(D);
  p.running_mean = Vector::Zero(D);
  p.running_var = Vector::Ones(D);
  p.w1 = normal_matrix(H, D, 1.0 / std::sqrt(static_cast<double>(D)));
  p.b1 = Vector::Zero(H);
  p.w2 = normal_matrix(kNumGradeClasses, H, 1.0 / std::sqrt(static_cast<double>(H)));
  p.b2 = Vector::Zero(kNumGradeClasses);
  p.round_to_f32();
  return p;
}

// ---------------------------------------------------------------------------

namespace {

double cas_scale(const XAlignConfig& config, Eigen::Index dim) {
  return 1.0 / (config.tau * std::sqrt(static_cast<double>(dim)));
}

Matrix sigmoid(const Matrix& s) {
  return s.unaryExpr([](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}

void check_width(const Matrix& m, Eigen::Index dim, const char* what) {
  if (m.cols() != dim) {
    fail(ErrorKind::Shape, std::string(what) + " has " + std::to_string(m.cols()) + " columns, expected " +
                               std::to_string(dim));
  }
}

struct AttentionCache {
  Matrix queries;  // raw query rows
  Matrix qp;
  Matrix cas;
  Vector row_sum;
  Matrix weights;
  Matrix h0;
};

AttentionCache attention_core(const Matrix& queries, const Matrix& kp, const Matrix& vp,
                              const XAlignParams& params, double scale) {
  AttentionCache c;
  c.queries = queries;
  c.qp = queries * params.wq;
  c.cas = sigmoid(scale * (c.qp * kp.transpose()));
  c.row_sum = c.cas.rowwise().sum();
  c.weights = c.cas.array().colwise() / c.row_sum.array();
  c.h0 = c.weights * vp;
  return c;
}

struct NormCache {
  Vector mean, var, inv_std;
  Matrix normalized;  // stacked rows
  Matrix out;
};

NormCache batch_norm_train(const Matrix& rows, const XAlignParams& params, double eps) {
  NormCache n;
  n.mean = rows.colwise().mean().transpose();
  const Matrix centered = rows.rowwise() - n.mean.transpose();
  n.var = centered.array().square().colwise().mean().transpose();
  n.inv_std = (n.var.array() + eps).rsqrt();
  n.normalized = centered.array().rowwise() * n.inv_std.transpose().array();
  n.out = (n.normalized.array().rowwise() * params.bn_gamma.transpose().array()).rowwise() +
          params.bn_beta.transpose().array();
  return n;
}

Matrix batch_norm_infer(const Matrix& rows, const XAlignParams& params, double eps) {
  const Vector inv_std = (params.running_var.array() + eps).rsqrt();
  const Matrix normalized =
      (rows.rowwise() - params.running_mean.transpose()).array().rowwise() * inv_std.transpose().array();
  return (normalized.array().rowwise() * params.bn_gamma.transpose().array()).rowwise() +
         params.bn_beta.transpose().array();
}

Matrix apply_dropout(const Matrix& h, const Matrix* mask, double p) {
  if (mask == nullptr || mask->size() == 0) return h;
  if (mask->rows() != h.rows() || mask->cols() != h.cols()) fail(ErrorKind::Shape, "dropout mask shape mismatch");
  return h.cwiseProduct(*mask) / (1.0 - p);
}

Vector row_mean(const Matrix& h) { return h.colwise().mean().transpose(); }

Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp();
  return e / e.sum();
}

}  // namespace

Matrix compute_cas(const Matrix& queries, const Matrix& keys, const XAlignParams& params,
                   const XAlignConfig& config) {
  const auto D = params.wq.rows();
  check_width(queries, D, "query");
  check_width(keys, D, "key");
  const Matrix qp = queries * params.wq;
  const Matrix kp = keys * params.wk;
  return sigmoid(cas_scale(config, D) * (qp * kp.transpose()));
}

AttendResult attend(const Matrix& queries, const Matrix& keys, const Matrix& values,
                    const XAlignParams& params, const XAlignConfig& config, Mode mode,
                    const Matrix* dropout_mask) {
  const auto D = params.wq.rows();
  check_width(queries, D, "query");
  check_width(keys, D, "key");
  check_width(values, D, "value");
  if (values.rows() != keys.rows()) fail(ErrorKind::Shape, "value and key row counts differ");
  if (keys.rows() == 0 || queries.rows() == 0) fail(ErrorKind::InvalidInput, "empty attention input");
  const Matrix kp = keys * params.wk;
  const Matrix vp = values * params.wv;
  auto core = attention_core(queries, kp, vp, params, cas_scale(config, D));
  AttendResult r;
  r.cas = core.cas;
  r.weights = core.weights;
  if (mode == Mode::Train) {
    const Matrix h1 = apply_dropout(core.h0, dropout_mask, config.dropout_p);
    r.h = batch_norm_train(h1, params, config.bn_eps).out;
  } else {
    r.h = batch_norm_infer(core.h0, params, config.bn_eps);
  }
  r.z = row_mean(r.h);
  return r;
}

Matrix document_matrix(const SensitiveDocument& doc) {
  if (doc.sub_sentences.empty()) fail(ErrorKind::InvalidInput, "empty document " + doc.doc_id);
  const auto D = static_cast<Eigen::Index>(doc.sub_sentences.front().embedding.size());
  Matrix x(static_cast<Eigen::Index>(doc.sub_sentences.size()), D);
  for (std::size_t i = 0; i < doc.sub_sentences.size(); ++i) {
    const auto& e = doc.sub_sentences[i].embedding;
    if (static_cast<Eigen::Index>(e.size()) != D) fail(ErrorKind::Shape, "ragged embeddings in " + doc.doc_id);
    for (Eigen::Index j = 0; j < D; ++j) x(static_cast<Eigen::Index>(i), j) = e[static_cast<std::size_t>(j)];
  }
  return x;
}

Matrix note_matrix(const ReferenceNote& note) {
  if (note.sub_sentences.empty()) fail(ErrorKind::InvalidInput, "empty note for " + note.person_id);
  const auto D = static_cast<Eigen::Index>(note.sub_sentences.front().embedding.size());
  Matrix x(static_cast<Eigen::Index>(note.sub_sentences.size()), D);
  for (std::size_t i = 0; i < note.sub_sentences.size(); ++i) {
    const auto& e = note.sub_sentences[i].embedding;
    if (static_cast<Eigen::Index>(e.size()) != D) fail(ErrorKind::Shape, "ragged embeddings in note");
    for (Eigen::Index j = 0; j < D; ++j) x(static_cast<Eigen::Index>(i), j) = e[static_cast<std::size_t>(j)];
  }
  return x;
}

Vector mlp_logits(const XAlignParams& params, const Vector& z) {
  const Vector act = (params.w1 * z + params.b1).array().tanh();
  return params.w2 * act + params.b2;
}

ForwardResult forward_pass(QueryKind kind, const Matrix& query_embeddings, const SensitiveDocument& document,
                           const XAlignParams& params, const XAlignConfig& config, Mode mode,
                           const std::vector<int>& aspect_rows) {
  if (document.sub_sentences.empty()) fail(ErrorKind::InvalidInput, "empty document " + document.doc_id);
  const Matrix x = document_matrix(document);
  Matrix queries;
  if (kind == QueryKind::Expert) {
    queries = query_embeddings;
  } else if (aspect_rows.empty()) {
    queries = params.aspects;
  } else {
    queries.resize(static_cast<Eigen::Index>(aspect_rows.size()), params.aspects.cols());
    for (std::size_t i = 0; i < aspect_rows.size(); ++i) {
      const int r = aspect_rows[i];
      if (r < 0 || r >= params.t()) fail(ErrorKind::InvalidInput, "aspect row out of range");
      queries.row(static_cast<Eigen::Index>(i)) = params.aspects.row(r);
    }
  }
  auto att = attend(queries, x, x, params, config, mode);
  ForwardResult out;
  out.h = std::move(att.h);
  out.z = std::move(att.z);
  out.cas = std::move(att.cas);
  if (config.aux_enabled) out.logits = mlp_logits(params, out.z);
  return out;
}

// ---------------------------------------------------------------------------

double reconstruction_loss(const Matrix& h, const Matrix& queries) {
  if (h.rows() != queries.rows() || h.cols() != queries.cols()) fail(ErrorKind::Shape, "reconstruction shape mismatch");
  return (h - queries).squaredNorm() / static_cast<double>(h.rows() * h.cols());
}

double cross_entropy(const Vector& logits, int label) {
  if (label < 0 || label >= logits.size()) fail(ErrorKind::InvalidInput, "label out of range");
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits(label);
}

namespace {

// Loss and gradient of the symmetric NT-Xent objective over 2N vectors.
double alignment_loss_grad(const Matrix& z_expert, const Matrix& z_aspect, double tau_c, Matrix* d_expert,
                           Matrix* d_aspect) {
  const Eigen::Index n = z_expert.rows();
  if (n < 2) fail(ErrorKind::InvalidConfig, "alignment loss needs at least 2 instances");
  if (z_aspect.rows() != n || z_aspect.cols() != z_expert.cols()) fail(ErrorKind::Shape, "z shape mismatch");
  const Eigen::Index total = 2 * n;
  Matrix z(total, z_expert.cols());
  z.topRows(n) = z_expert;
  z.bottomRows(n) = z_aspect;
  Vector norms = z.rowwise().norm();
  for (Eigen::Index i = 0; i < total; ++i) norms(i) = std::max(norms(i), 1e-12);
  const Matrix unit = z.array().colwise() / norms.array();
  const Matrix sim = unit * unit.transpose();

  double loss = 0.0;
  Matrix g = Matrix::Zero(total, total);  // dL/dsim(i,k) from anchor i
  for (Eigen::Index i = 0; i < total; ++i) {
    const Eigen::Index pos = i < n ? i + n : i - n;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < total; ++k) {
      if (k != i) mx = std::max(mx, sim(i, k) / tau_c);
    }
    double denom = 0.0;
    for (Eigen::Index k = 0; k < total; ++k) {
      if (k != i) denom += std::exp(sim(i, k) / tau_c - mx);
    }
    const double log_denom = mx + std::log(denom);
    loss += log_denom - sim(i, pos) / tau_c;
    for (Eigen::Index k = 0; k < total; ++k) {
      if (k == i) continue;
      const double p = std::exp(sim(i, k) / tau_c - log_denom);
      g(i, k) = (p - (k == pos ? 1.0 : 0.0)) / tau_c;
    }
  }
  const double inv = 1.0 / static_cast<double>(total);
  loss *= inv;
  if (d_expert != nullptr && d_aspect != nullptr) {
    g *= inv;
    Matrix dz = Matrix::Zero(total, z.cols());
    for (Eigen::Index i = 0; i < total; ++i) {
      for (Eigen::Index k = 0; k < total; ++k) {
        if (k == i || g(i, k) == 0.0) continue;
        // d cos(a,b)/da = (b_hat - cos * a_hat) / |a|
        dz.row(i) += g(i, k) * (unit.row(k) - sim(i, k) * unit.row(i)) / norms(i);
        dz.row(k) += g(i, k) * (unit.row(i) - sim(i, k) * unit.row(k)) / norms(k);
      }
    }
    *d_expert = dz.topRows(n);
    *d_aspect = dz.bottomRows(n);
  }
  return loss;
}

}  // namespace

double alignment_loss(const Matrix& z_expert, const Matrix& z_aspect, double tau_c) {
  return alignment_loss_grad(z_expert, z_aspect, tau_c, nullptr, nullptr);
}

// ---------------------------------------------------------------------------

namespace {

struct BranchCache {
  std::vector<AttentionCache> att;
  std::vector<Matrix> masks;  // scaled keep-masks (mask / (1-p)); empty = none
  std::vector<Eigen::Index> offsets;
  NormCache norm;
  std::vector<Matrix> h;
  std::vector<Vector> z;
};

BranchCache run_branch(const std::vector<Matrix>& queries, const std::vector<const Matrix*>& masks,
                       const std::vector<Matrix>& kp, const std::vector<Matrix>& vp, const XAlignParams& params,
                       const XAlignConfig& config, double scale) {
  BranchCache b;
  Eigen::Index total_rows = 0;
  for (const auto& q : queries) {
    b.offsets.push_back(total_rows);
    total_rows += q.rows();
  }
  Matrix stacked(total_rows, params.wq.rows());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    b.att.push_back(attention_core(queries[i], kp[i], vp[i], params, scale));
    Matrix h1 = b.att.back().h0;
    if (masks[i] != nullptr && masks[i]->size() > 0) {
      if (masks[i]->rows() != h1.rows() || masks[i]->cols() != h1.cols()) fail(ErrorKind::Shape, "dropout mask shape");
      b.masks.push_back(*masks[i] / (1.0 - config.dropout_p));
      h1 = h1.cwiseProduct(b.masks.back());
    } else {
      b.masks.emplace_back();
    }
    stacked.middleRows(b.offsets[i], h1.rows()) = h1;
  }
  b.norm = batch_norm_train(stacked, params, config.bn_eps);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    b.h.push_back(b.norm.out.middleRows(b.offsets[i], queries[i].rows()));
    b.z.push_back(row_mean(b.h.back()));
  }
  return b;
}

// Back-propagates dL/dh (per instance) through norm, dropout and attention.
// Accumulates into grads and returns dL/d(raw queries) per instance.
std::vector<Matrix> backprop_branch(const BranchCache& b, const std::vector<Matrix>& dh, const XAlignParams& params,
                                    double scale, const std::vector<Matrix>& kp, const std::vector<Matrix>& vp,
                                    std::vector<Matrix>& dkp, std::vector<Matrix>& dvp, XAlignParams& grads) {
  const Eigen::Index rows = b.norm.normalized.rows();
  Matrix dout(rows, params.wq.rows());
  for (std::size_t i = 0; i < dh.size(); ++i) dout.middleRows(b.offsets[i], dh[i].rows()) = dh[i];

  grads.bn_gamma += (dout.cwiseProduct(b.norm.normalized)).colwise().sum().transpose();
  grads.bn_beta += dout.colwise().sum().transpose();
  const Matrix dnorm = dout.array().rowwise() * params.bn_gamma.transpose().array();
  const Vector sum_dnorm = dnorm.colwise().sum().transpose();
  const Vector sum_dnorm_x = dnorm.cwiseProduct(b.norm.normalized).colwise().sum().transpose();
  const double r = static_cast<double>(rows);
  Matrix dh1 = (r * dnorm.array()).matrix();
  dh1.rowwise() -= sum_dnorm.transpose();
  dh1 -= (b.norm.normalized.array().rowwise() * sum_dnorm_x.transpose().array()).matrix();
  dh1 = (dh1.array().rowwise() * (b.norm.inv_std.transpose().array() / r)).matrix();

  std::vector<Matrix> dqueries;
  for (std::size_t i = 0; i < dh.size(); ++i) {
    const auto& att = b.att[i];
    Matrix dh0 = dh1.middleRows(b.offsets[i], att.h0.rows());
    if (b.masks[i].size() > 0) dh0 = dh0.cwiseProduct(b.masks[i]);
    const Matrix dweights = dh0 * vp[i].transpose();
    dvp[i] += att.weights.transpose() * dh0;
    const Vector inner = dweights.cwiseProduct(att.weights).rowwise().sum();
    const Matrix dcas = (dweights.colwise() - inner).array().colwise() / att.row_sum.array();
    const Matrix ds = dcas.cwiseProduct(att.cas.cwiseProduct((1.0 - att.cas.array()).matrix()));
    const Matrix dqp = scale * (ds * kp[i]);
    dkp[i] += scale * (ds.transpose() * att.qp);
    grads.wq += att.queries.transpose() * dqp;
    dqueries.push_back(dqp * params.wq.transpose());
  }
  return dqueries;
}

}  // namespace

Losses evaluate_batch(const XAlignParams& params, const XAlignConfig& config,
                      const std::vector<TrainingInstance>& batch, XAlignParams* grads, BatchStats* stats) {
  if (batch.empty()) fail(ErrorKind::InvalidInput, "empty batch");
  const Eigen::Index D = params.wq.rows();
  const double scale = cas_scale(config, D);
  const std::size_t n = batch.size();

  std::vector<Matrix> kp(n), vp(n), expert_q(n), aspect_q(n);
  std::vector<const Matrix*> expert_masks(n), aspect_masks(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& inst = batch[i];
    check_width(inst.document, D, "document");
    check_width(inst.expert, D, "expert note");
    if (inst.document.rows() == 0 || inst.expert.rows() == 0) fail(ErrorKind::InvalidInput, "empty instance");
    kp[i] = inst.document * params.wk;
    vp[i] = inst.document * params.wv;
    expert_q[i] = inst.expert;
    if (inst.aspect_rows.empty()) fail(ErrorKind::InvalidInput, "instance without aspect rows");
    aspect_q[i].resize(static_cast<Eigen::Index>(inst.aspect_rows.size()), D);
    for (std::size_t r = 0; r < inst.aspect_rows.size(); ++r) {
      aspect_q[i].row(static_cast<Eigen::Index>(r)) = params.aspects.row(inst.aspect_rows[r]);
    }
    expert_masks[i] = &inst.expert_mask;
    aspect_masks[i] = &inst.aspect_mask;
  }

  const BranchCache ex = run_branch(expert_q, expert_masks, kp, vp, params, config, scale);
  const BranchCache as = run_branch(aspect_q, aspect_masks, kp, vp, params, config, scale);
  if (stats != nullptr) {
    stats->expert_mean = ex.norm.mean;
    stats->expert_var = ex.norm.var;
    stats->aspect_mean = as.norm.mean;
    stats->aspect_var = as.norm.var;
  }

  Losses losses;
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<Matrix> dh_ex(n), dh_as(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix diff = ex.h[i] - expert_q[i];
    const double denom = static_cast<double>(diff.rows() * diff.cols());
    losses.rec += diff.squaredNorm() / denom * inv_n;
    dh_ex[i] = 2.0 * diff / denom * inv_n;
    dh_as[i] = Matrix::Zero(as.h[i].rows(), D);
  }

  std::vector<Vector> dz_ex(n, Vector::Zero(D)), dz_as(n, Vector::Zero(D));
  if (grads != nullptr) *grads = params.zeros_like();

  if (config.aux_enabled) {
    std::size_t labeled = 0;
    for (const auto& inst : batch) labeled += inst.label >= 0 ? 1 : 0;
    if (labeled > 0) {
      const double w = 0.5 / static_cast<double>(labeled);
      const auto head = [&](const Vector& z, int label, Vector& dz) {
        const Vector act = (params.w1 * z + params.b1).array().tanh();
        const Vector logits = params.w2 * act + params.b2;
        const double ce = cross_entropy(logits, label);
        if (grads != nullptr) {
          Vector dlogits = softmax(logits);
          dlogits(label) -= 1.0;
          dlogits *= config.a * w;
          grads->w2 += dlogits * act.transpose();
          grads->b2 += dlogits;
          const Vector du = (params.w2.transpose() * dlogits).cwiseProduct((1.0 - act.array().square()).matrix());
          grads->w1 += du * z.transpose();
          grads->b1 += du;
          dz += params.w1.transpose() * du;
        }
        return ce;
      };
      for (std::size_t i = 0; i < n; ++i) {
        if (batch[i].label < 0) continue;
        losses.aux += w * head(ex.z[i], batch[i].label, dz_ex[i]);
        losses.aux += w * head(as.z[i], batch[i].label, dz_as[i]);
      }
    }
  }

  if (!config.align_ablated) {
    Matrix ze(static_cast<Eigen::Index>(n), D), za(static_cast<Eigen::Index>(n), D);
    for (std::size_t i = 0; i < n; ++i) {
      ze.row(static_cast<Eigen::Index>(i)) = ex.z[i].transpose();
      za.row(static_cast<Eigen::Index>(i)) = as.z[i].transpose();
    }
    Matrix dze, dza;
    losses.align = alignment_loss_grad(ze, za, config.tau_c, grads ? &dze : nullptr, grads ? &dza : nullptr);
    if (grads != nullptr) {
      for (std::size_t i = 0; i < n; ++i) {
        dz_ex[i] += config.b * dze.row(static_cast<Eigen::Index>(i)).transpose();
        dz_as[i] += config.b * dza.row(static_cast<Eigen::Index>(i)).transpose();
      }
    }
  }
  losses.total = losses.rec + config.a * losses.aux + (config.align_ablated ? 0.0 : config.b * losses.align);
  if (grads == nullptr) return losses;

  for (std::size_t i = 0; i < n; ++i) {
    dh_ex[i].rowwise() += dz_ex[i].transpose() / static_cast<double>(dh_ex[i].rows());
    dh_as[i].rowwise() += dz_as[i].transpose() / static_cast<double>(dh_as[i].rows());
  }
  std::vector<Matrix> dkp(n), dvp(n);
  for (std::size_t i = 0; i < n; ++i) {
    dkp[i] = Matrix::Zero(kp[i].rows(), D);
    dvp[i] = Matrix::Zero(vp[i].rows(), D);
  }
  backprop_branch(ex, dh_ex, params, scale, kp, vp, dkp, dvp, *grads);
  const auto dq_as = backprop_branch(as, dh_as, params, scale, kp, vp, dkp, dvp, *grads);
  for (std::size_t i = 0; i < n; ++i) {
    grads->wk += batch[i].document.transpose() * dkp[i];
    grads->wv += batch[i].document.transpose() * dvp[i];
    for (std::size_t r = 0; r < batch[i].aspect_rows.size(); ++r) {
      grads->aspects.row(batch[i].aspect_rows[r]) += dq_as[i].row(static_cast<Eigen::Index>(r));
    }
  }
  return losses;
}

// ---------------------------------------------------------------------------

void AdamW::step(XAlignParams& params, XAlignParams& grads) {
  auto ps = params.trainable();
  auto gs = grads.trainable();
  if (m_.empty()) {
    for (const auto& t : ps) {
      m_.push_back(Vector::Zero(t.size()));
      v_.push_back(Vector::Zero(t.size()));
    }
  }
  ++step_;
  const double c1 = 1.0 - std::pow(config_.adam_beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(config_.adam_beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < ps.size(); ++k) {
    Eigen::Map<Vector> p(ps[k].data, ps[k].size());
    Eigen::Map<Vector> g(gs[k].data, gs[k].size());
    m_[k] = config_.adam_beta1 * m_[k] + (1.0 - config_.adam_beta1) * g;
    v_[k] = config_.adam_beta2 * v_[k] + (1.0 - config_.adam_beta2) * g.cwiseProduct(g);
    const Vector update =
        (m_[k] / c1).array() / ((v_[k] / c2).array().sqrt() + config_.adam_eps) + config_.weight_decay * p.array();
    p -= config_.lr * update;
  }
}

// ---------------------------------------------------------------------------

TrainResult train(const EmbeddedCorpus& corpus, XAlignConfig config) {
  if (config.dim == 0) config.dim = corpus.dim;
  if (config.dim != corpus.dim) fail(ErrorKind::InvalidConfig, "config dimension differs from corpus dimension");
  config.validate();

  struct Source {
    std::string person;
    const Matrix* document;
    Matrix expert;
    int label;
  };
  std::map<std::string, Matrix> documents;
  for (const auto& d : corpus.documents) documents.emplace(d.person_id, document_matrix(d));
  std::vector<Source> sources;
  for (const auto& note : corpus.notes) {
    const int label = note.grade_score ? class_index(grade_to_class(*note.grade_score)) : -1;
    sources.push_back({note.person_id, &documents.at(note.person_id), note_matrix(note), label});
  }
  if (sources.empty()) fail(ErrorKind::InvalidInput, "no training instances (corpus has no notes)");

  TrainResult result;
  result.params = init_params(config);
  auto& params = result.params;
  AdamW adam(config);
  Rng rng(derive_seed(config.seed, "xalign-train"));
  const double keep = 1.0 - config.dropout_p;
  const auto mask = [&](Eigen::Index rows, Eigen::Index cols) {
    if (config.dropout_p == 0.0) return Matrix();
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.uniform() < keep ? 1.0 : 0.0;
    }
    return m;
  };
  const bool need_pairs = !config.align_ablated;
  const auto batch_cap = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> pending(sources.size());
    std::iota(pending.begin(), pending.end(), std::size_t{0});
    rng.shuffle(pending);
    EpochLosses acc;
    acc.epoch = epoch;
    double weight = 0.0;
    int batch_no = 0;
    while (!pending.empty()) {
      std::vector<std::size_t> members, rest;
      std::set<std::string> persons;
      for (auto idx : pending) {
        if (members.size() < batch_cap && persons.insert(sources[idx].person).second) {
          members.push_back(idx);
        } else {
          rest.push_back(idx);
        }
      }
      pending.swap(rest);
      ++batch_no;
      if (need_pairs && members.size() < 2) continue;

      std::vector<TrainingInstance> batch;
      batch.reserve(members.size());
      for (auto idx : members) {
        TrainingInstance inst;
        inst.document = *sources[idx].document;
        inst.expert = sources[idx].expert;
        inst.label = config.aux_enabled ? sources[idx].label : -1;
        for (auto r : rng.sample_without_replacement(static_cast<std::size_t>(config.t),
                                                     static_cast<std::size_t>(config.m))) {
          inst.aspect_rows.push_back(static_cast<int>(r));
        }
        inst.expert_mask = mask(inst.expert.rows(), config.dim);
        inst.aspect_mask = mask(config.m, config.dim);
        batch.push_back(std::move(inst));
      }
      XAlignParams grads;
      BatchStats stats;
      const Losses l = evaluate_batch(params, config, batch, &grads, &stats);
      if (!std::isfinite(l.total) || !grads.all_finite()) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " batch " << batch_no << ": rec=" << l.rec
            << " aux=" << l.aux << " align=" << l.align;
        fail(ErrorKind::NonFiniteLoss, msg.str());
      }
      adam.step(params, grads);
      const double mom = config.bn_momentum;
      params.running_mean = (1.0 - mom) * params.running_mean + mom * stats.expert_mean;
      params.running_var = (1.0 - mom) * params.running_var + mom * stats.expert_var;
      params.running_mean = (1.0 - mom) * params.running_mean + mom * stats.aspect_mean;
      params.running_var = (1.0 - mom) * params.running_var + mom * stats.aspect_var;

      const double w = static_cast<double>(members.size());
      acc.rec += w * l.rec;
      acc.aux += w * l.aux;
      acc.align += w * l.align;
      acc.total += w * l.total;
      weight += w;
    }
    if (weight > 0.0) {
      acc.rec /= weight;
      acc.aux /= weight;
      acc.align /= weight;
      acc.total /= weight;
    }
    result.history.push_back(acc);
  }
  params.trained = true;
  params.round_to_f32();
  return result;
}

// ---------------------------------------------------------------------------

GradCheckReport gradient_check(const XAlignParams& params, const std::vector<TrainingInstance>& batch,
                               const XAlignConfig& config, double epsilon) {
  for (const auto& inst : batch) {
    if (inst.expert_mask.size() > 0 || inst.aspect_mask.size() > 0) {
      fail(ErrorKind::InvalidInput, "gradient check requires dropout disabled");
    }
  }
  XAlignParams grads;
  evaluate_batch(params, config, batch, &grads);
  XAlignParams probe = params;
  auto probe_views = probe.trainable();
  auto grad_views = grads.trainable();
  GradCheckReport report;
  for (std::size_t k = 0; k < probe_views.size(); ++k) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < probe_views[k].size(); ++i) {
      double& x = probe_views[k].data[i];
      const double saved = x;
      x = saved + epsilon;
      const double up = evaluate_batch(probe, config, batch, nullptr).total;
      x = saved - epsilon;
      const double down = evaluate_batch(probe, config, batch, nullptr).total;
      x = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double analytic = grad_views[k].data[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
    report.per_tensor.emplace_back(probe_views[k].name, worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'A', 'D', 'X', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

json config_to_json(const XAlignConfig& c) {
  return json{{"t", c.t},
              {"m", c.m},
              {"dim", c.dim},
              {"tau", c.tau},
              {"tau_c", c.tau_c},
              {"dropout_p", c.dropout_p},
              {"a", c.a},
              {"b", c.b},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"aux_enabled", c.aux_enabled},
              {"align_ablated", c.align_ablated},
              {"bn_momentum", c.bn_momentum},
              {"bn_eps", c.bn_eps},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps}};
}

XAlignConfig config_from_json(const json& j) {
  XAlignConfig c;
  c.t = j.at("t");
  c.m = j.at("m");
  c.dim = j.at("dim");
  c.tau = j.at("tau");
  c.tau_c = j.at("tau_c");
  c.dropout_p = j.at("dropout_p");
  c.a = j.at("a");
  c.b = j.at("b");
  c.lr = j.at("lr");
  c.weight_decay = j.at("weight_decay");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.seed = j.at("seed");
  c.aux_enabled = j.at("aux_enabled");
  c.align_ablated = j.at("align_ablated");
  c.bn_momentum = j.at("bn_momentum");
  c.bn_eps = j.at("bn_eps");
  c.adam_beta1 = j.at("adam_beta1");
  c.adam_beta2 = j.at("adam_beta2");
  c.adam_eps = j.at("adam_eps");
  return c;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  return v;
}

}  // namespace

std::string serialize_checkpoint(const XAlignParams& params, const XAlignConfig& config,
                                 const std::string& provenance_json) {
  auto& p = const_cast<XAlignParams&>(params);
  std::string payload;
  json tensors = json::array();
  for (const auto& t : p.all_tensors()) {
    std::vector<float> values(static_cast<std::size_t>(t.size()));
    for (Eigen::Index i = 0; i < t.size(); ++i) values[static_cast<std::size_t>(i)] = static_cast<float>(t.data[i]);
    payload += pack_f32_le(values);
    tensors.push_back(json{{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  }
  json header{{"config", config_to_json(config)},
              {"dim", params.dim()},
              {"t", params.t()},
              {"hidden_width", params.hidden_width()},
              {"hidden_layers", 1},
              {"hidden_activation", "tanh"},
              {"classes", kNumGradeClasses},
              {"trained", params.trained},
              {"layout", "column-major float32 little-endian"},
              {"tensors", tensors},
              {"payload_sha256", sha256_hex(payload)},
              {"provenance", json::parse(provenance_json)}};
  const std::string header_text = header.dump();
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  out += payload;
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, std::string(kCheckpointMagic, 4)) != 0) {
    fail(ErrorKind::Format, "not an xalign checkpoint");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    fail(ErrorKind::VersionMismatch, "checkpoint version " + std::to_string(version) + " is not supported");
  }
  const std::uint32_t header_len = get_u32(bytes, 8);
  if (12 + static_cast<std::size_t>(header_len) > bytes.size()) fail(ErrorKind::Format, "truncated checkpoint header");
  json header;
  try {
    header = json::parse(bytes.substr(12, header_len));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("checkpoint header: ") + e.what());
  }
  const std::string payload = bytes.substr(12 + header_len);
  if (sha256_hex(payload) != header.at("payload_sha256").get<std::string>()) {
    fail(ErrorKind::Format, "checkpoint payload failed its integrity check");
  }
  Checkpoint ck;
  ck.config = config_from_json(header.at("config"));
  const int D = header.at("dim");
  const int t = header.at("t");
  const int H = header.at("hidden_width");
  ck.config.dim = D;
  auto& p = ck.params;
  p.aspects.resize(t, D);
  p.wq.resize(D, D);
  p.wk.resize(D, D);
  p.wv.resize(D, D);
  p.bn_gamma.resize(D);
  p.bn_beta.resize(D);
  p.running_mean.resize(D);
  p.running_var.resize(D);
  p.w1.resize(H, D);
  p.b1.resize(H);
  p.w2.resize(header.at("classes").get<int>(), H);
  p.b2.resize(header.at("classes").get<int>());
  p.trained = header.at("trained");
  const auto raw = unpack_f32_le({reinterpret_cast<const unsigned char*>(payload.data()), payload.size()});
  std::size_t offset = 0;
  const auto& declared = header.at("tensors");
  auto views = p.all_tensors();
  if (declared.size() != views.size()) fail(ErrorKind::Format, "checkpoint tensor count mismatch");
  for (std::size_t k = 0; k < views.size(); ++k) {
    if (declared[k].at("name").get<std::string>() != views[k].name ||
        declared[k].at("rows").get<Eigen::Index>() != views[k].rows ||
        declared[k].at("cols").get<Eigen::Index>() != views[k].cols) {
      fail(ErrorKind::Format, std::string("checkpoint tensor layout mismatch at ") + views[k].name);
    }
    if (offset + static_cast<std::size_t>(views[k].size()) > raw.size()) fail(ErrorKind::Format, "truncated checkpoint payload");
    for (Eigen::Index i = 0; i < views[k].size(); ++i) views[k].data[i] = raw[offset++];
  }
  if (offset != raw.size()) fail(ErrorKind::Format, "trailing bytes in checkpoint payload");
  return ck;
}

void save_checkpoint(const XAlignParams& params, const XAlignConfig& config, const std::string& path,
                     const std::string& provenance_json) {
  write_file_atomic(path, serialize_checkpoint(params, config, provenance_json));
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

}  // namespace adeid::xalign
