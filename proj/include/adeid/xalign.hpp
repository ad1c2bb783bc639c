#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "adeid/common.hpp"
#include "adeid/corpus.hpp"

namespace adeid::xalign {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct XAlignConfig {
  int t = 10;  // aspect tokens
  int m = 5;   // tokens sampled per training instance
  int dim = 0; // taken from the corpus when 0
  double tau = 0.007;
  double tau_c = 0.5;
  double dropout_p = 0.7;
  double a = 1.0;   // auxiliary loss weight
  double b = 0.01;  // alignment loss weight
  double lr = 1e-4;
  double weight_decay = 0.015;
  int epochs = 150;
  int batch_size = 64;
  std::uint64_t seed = 0;
  bool aux_enabled = true;
  // Removes the alignment term from the objective entirely (ablation).
  bool align_ablated = false;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct TensorView {
  const char* name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const { return rows * cols; }
};

struct XAlignParams {
  Matrix aspects;  // t x D
  Matrix wq, wk, wv;  // D x D, applied as rows * W
  Vector bn_gamma, bn_beta;
  Vector running_mean, running_var;
  Matrix w1;  // H x D
  Vector b1;
  Matrix w2;  // classes x H
  Vector b2;
  bool trained = false;

  int t() const { return static_cast<int>(aspects.rows()); }
  int dim() const { return static_cast<int>(aspects.cols()); }
  int hidden_width() const { return static_cast<int>(w1.rows()); }

  // Learnable tensors in checkpoint order.
  std::vector<TensorView> trainable();
  // trainable() followed by the batch-norm running statistics.
  std::vector<TensorView> all_tensors();

  // Same shapes, all zeros; used as a gradient accumulator.
  XAlignParams zeros_like() const;
  void round_to_f32();
  bool all_finite() const;
};

XAlignParams init_params(const XAlignConfig& config);

enum class Mode { Train, Infer };
enum class QueryKind { Expert, Aspect };

// sigmoid(Q Wq (K Wk)^T / (tau sqrt(D))); q_len x k_len, no row normalisation.
Matrix compute_cas(const Matrix& queries, const Matrix& keys, const XAlignParams& params,
                   const XAlignConfig& config);

struct AttendResult {
  Matrix h;       // q_len x D, after dropout and batch norm
  Vector z;       // row mean of h
  Matrix cas;     // q_len x k_len
  Matrix weights; // cas rows normalised to sum to one
};

// Stand-alone attention block. In Train mode the batch norm uses the rows of
// this call as its batch; pass `dropout_mask` (entries 0 or 1) to apply dropout.
AttendResult attend(const Matrix& queries, const Matrix& keys, const Matrix& values,
                    const XAlignParams& params, const XAlignConfig& config, Mode mode,
                    const Matrix* dropout_mask = nullptr);

struct ForwardResult {
  Matrix h;
  Vector z;
  Matrix cas;
  Vector logits;  // kNumGradeClasses entries; empty when aux is disabled
};

Matrix document_matrix(const SensitiveDocument& doc);
Matrix note_matrix(const ReferenceNote& note);

// Aspect queries use `aspect_rows` (sampled tokens) when given, otherwise all t
// tokens. Train mode draws no randomness here; dropout is disabled.
ForwardResult forward_pass(QueryKind kind, const Matrix& query_embeddings,
                           const SensitiveDocument& document, const XAlignParams& params,
                           const XAlignConfig& config, Mode mode,
                           const std::vector<int>& aspect_rows = {});

Vector mlp_logits(const XAlignParams& params, const Vector& z);

// -- losses -----------------------------------------------------------------

double reconstruction_loss(const Matrix& h, const Matrix& queries);
double cross_entropy(const Vector& logits, int label);
// z_expert and z_aspect are N x D; row k of each forms the positive pair.
double alignment_loss(const Matrix& z_expert, const Matrix& z_aspect, double tau_c);

struct Losses {
  double rec = 0.0;
  double aux = 0.0;
  double align = 0.0;
  double total = 0.0;
};

struct TrainingInstance {
  Matrix document;  // k_len x D key/value rows
  Matrix expert;    // n x D expert note rows
  int label = -1;   // grade class index, -1 when unscored
  std::vector<int> aspect_rows;  // sampled token ids
  Matrix expert_mask;  // dropout keep-mask, empty when dropout is off
  Matrix aspect_mask;
};

struct BatchStats {
  Vector expert_mean, expert_var, aspect_mean, aspect_var;
};

// Full forward/backward over a batch of paired expert/aspect passes. When
// `grads` is non-null it is overwritten with dL_total/dparam.
Losses evaluate_batch(const XAlignParams& params, const XAlignConfig& config,
                      const std::vector<TrainingInstance>& batch, XAlignParams* grads,
                      BatchStats* stats = nullptr);

// -- optimisation -------------------------------------------------------------

class AdamW {
 public:
  explicit AdamW(const XAlignConfig& config) : config_(config) {}
  void step(XAlignParams& params, XAlignParams& grads);
  long steps() const { return step_; }

 private:
  XAlignConfig config_;
  std::vector<Vector> m_, v_;
  long step_ = 0;
};

struct EpochLosses {
  int epoch = 0;
  double rec = 0.0;
  double aux = 0.0;
  double align = 0.0;
  double total = 0.0;
};

struct TrainResult {
  XAlignParams params;
  std::vector<EpochLosses> history;
};

// One instance per (person, expert note); batches never hold two notes of the
// same person so in-batch negatives are always other documents.
TrainResult train(const EmbeddedCorpus& corpus, XAlignConfig config);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<std::pair<std::string, double>> per_tensor;
};

// Central finite differences on every trainable entry against the analytic
// gradient of L_total. Dropout must be off.
GradCheckReport gradient_check(const XAlignParams& params, const std::vector<TrainingInstance>& batch,
                               const XAlignConfig& config, double epsilon);

// -- persistence ---------------------------------------------------------------

struct Checkpoint {
  XAlignParams params;
  XAlignConfig config;
};

std::string serialize_checkpoint(const XAlignParams& params, const XAlignConfig& config,
                                 const std::string& provenance_json = "{}");
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const XAlignParams& params, const XAlignConfig& config, const std::string& path,
                     const std::string& provenance_json = "{}");
Checkpoint load_checkpoint(const std::string& path);

}  // namespace adeid::xalign
