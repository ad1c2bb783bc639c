#include <cmath>

#include "adeid/corpus.hpp"
#include "adeid/xalign.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace adeid;
using namespace adeid::xalign;

namespace {

XAlignConfig small_config(int dim, std::uint64_t seed = 3) {
  XAlignConfig c;
  c.dim = dim;
  c.t = 4;
  c.m = 2;
  c.seed = seed;
  return c;
}

XAlignParams identity_params(const XAlignConfig& c) {
  auto p = init_params(c);
  p.wq.setIdentity();
  p.wk.setIdentity();
  p.wv.setIdentity();
  return p;
}

}  // namespace

TEST_CASE("init_params is deterministic with the declared shapes") {
  XAlignConfig c = small_config(8);
  auto a = init_params(c);
  auto b = init_params(c);
  CHECK(a.aspects == b.aspects);
  CHECK(a.wq == b.wq);
  CHECK(a.w2 == b.w2);
  CHECK(a.aspects.rows() == c.t);
  CHECK(a.aspects.cols() == c.dim);
  CHECK(a.hidden_width() == c.dim);
  CHECK(a.w2.rows() == kNumGradeClasses);
  c.seed = 4;
  CHECK_FALSE(init_params(c).aspects == a.aspects);
}

TEST_CASE("aspect token entries have variance near 1/D") {
  XAlignConfig c;
  c.dim = 32;
  c.t = 40;  // 1280 draws
  c.m = 5;
  const auto p = init_params(c);
  const double mean = p.aspects.mean();
  const double var = (p.aspects.array() - mean).square().mean();
  const double target = 1.0 / c.dim;
  CHECK(var < 3.0 * target);
  CHECK(var > target / 3.0);
}

TEST_CASE("compute_cas is an un-normalised sigmoid of scaled inner products") {
  auto c = small_config(4);
  const auto p = identity_params(c);

  SUBCASE("orthogonal queries and keys give 0.5") {
    Matrix q = Matrix::Zero(2, 4), k = Matrix::Zero(3, 4);
    q(0, 0) = 1;
    q(1, 1) = 1;
    k(0, 2) = 1;
    k(1, 3) = 1;
    k(2, 2) = -2;
    const Matrix cas = compute_cas(q, k, p, c);
    CHECK(cas.rows() == 2);
    CHECK(cas.cols() == 3);
    for (Eigen::Index i = 0; i < cas.size(); ++i) CHECK(cas.data()[i] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("q.k = tau sqrt(D) gives sigmoid(1)") {
    Matrix q = Matrix::Zero(1, 4), k = Matrix::Zero(1, 4);
    q(0, 0) = c.tau * std::sqrt(4.0);
    k(0, 0) = 1.0;
    CHECK(compute_cas(q, k, p, c)(0, 0) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  }
  SUBCASE("entries stay strictly inside (0, 1)") {
    Rng rng(7);
    const auto q = testing::random_unit_rows(rng, 5, 4);
    const auto k = testing::random_unit_rows(rng, 6, 4);
    c.tau = 0.5;
    const auto cas = compute_cas(q, k, init_params(c), c);
    CHECK(cas.minCoeff() > 0.0);
    CHECK(cas.maxCoeff() < 1.0);
  }
  SUBCASE("dimension mismatch is a shape error") {
    CHECK_THROWS_AS(compute_cas(Matrix::Zero(1, 3), Matrix::Zero(1, 4), p, c), Error);
  }
}

TEST_CASE("attend normalises CAS rows into weights") {
  auto c = small_config(4);
  c.tau = 0.5;
  const auto p = identity_params(c);
  Rng rng(11);

  SUBCASE("single key row: every pre-norm output equals that value row") {
    const auto q = testing::random_unit_rows(rng, 3, 4);
    const auto k = testing::random_unit_rows(rng, 1, 4);
    const auto r = attend(q, k, k, p, c, Mode::Infer);
    const double s = 1.0 / std::sqrt(1.0 + c.bn_eps);  // running stats are 0 / 1
    for (Eigen::Index i = 0; i < 3; ++i) {
      CHECK(r.weights(i, 0) == doctest::Approx(1.0));
      for (Eigen::Index j = 0; j < 4; ++j) CHECK(r.h(i, j) == doctest::Approx(k(0, j) * s).epsilon(1e-12));
    }
  }
  SUBCASE("uniform CAS gives the mean of the value rows") {
    Matrix q = Matrix::Zero(1, 4), k = Matrix::Zero(3, 4);
    q(0, 0) = 1;
    k(0, 1) = 1;
    k(1, 2) = 1;
    k(2, 3) = 1;
    Matrix v = testing::random_unit_rows(rng, 3, 4);
    auto pv = p;
    pv.wv.setIdentity();
    const auto r = attend(q, k, v, pv, c, Mode::Infer);
    const Eigen::RowVectorXd expect = v.colwise().mean() / std::sqrt(1.0 + c.bn_eps);
    for (Eigen::Index j = 0; j < 4; ++j) CHECK(r.h(0, j) == doctest::Approx(expect(j)).epsilon(1e-12));
  }
  SUBCASE("weights sum to one per row") {
    const auto q = testing::random_unit_rows(rng, 4, 4);
    const auto k = testing::random_unit_rows(rng, 5, 4);
    const auto r = attend(q, k, k, init_params(c), c, Mode::Train);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(r.weights.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.h.rows() == 4);
  }
  SUBCASE("V row count must match K") {
    CHECK_THROWS_AS(attend(Matrix::Zero(1, 4), Matrix::Zero(2, 4), Matrix::Zero(3, 4), p, c, Mode::Infer), Error);
  }
}

TEST_CASE("attend matches a naive dense-loop oracle on a random 3x4 case") {
  auto c = small_config(4, 19);
  c.tau = 0.8;
  auto p = init_params(c);
  Rng rng(5);
  for (Eigen::Index i = 0; i < 4; ++i) {
    p.running_mean(i) = rng.normal(0.0, 0.1);
    p.running_var(i) = rng.uniform(0.5, 2.0);
    p.bn_gamma(i) = rng.uniform(0.5, 1.5);
    p.bn_beta(i) = rng.normal(0.0, 0.2);
  }
  const auto q = testing::random_unit_rows(rng, 3, 4);
  const auto k = testing::random_unit_rows(rng, 4, 4);
  const auto v = testing::random_unit_rows(rng, 4, 4);
  const auto r = attend(q, k, v, p, c, Mode::Infer);

  const int D = 4;
  const double scale = 1.0 / (c.tau * std::sqrt(4.0));
  double qp[3][4] = {}, kp[4][4] = {}, vp[4][4] = {};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < D; ++j)
      for (int l = 0; l < D; ++l) qp[i][j] += q(i, l) * p.wq(l, j);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < D; ++j)
      for (int l = 0; l < D; ++l) {
        kp[i][j] += k(i, l) * p.wk(l, j);
        vp[i][j] += v(i, l) * p.wv(l, j);
      }
  for (int i = 0; i < 3; ++i) {
    double cas[4];
    double total = 0.0;
    for (int j = 0; j < 4; ++j) {
      double dot = 0.0;
      for (int l = 0; l < D; ++l) dot += qp[i][l] * kp[j][l];
      cas[j] = testing::sigmoid(dot * scale);
      total += cas[j];
      CHECK(r.cas(i, j) == doctest::Approx(cas[j]).epsilon(1e-9));
    }
    for (int l = 0; l < D; ++l) {
      double h0 = 0.0;
      for (int j = 0; j < 4; ++j) h0 += cas[j] / total * vp[j][l];
      const double h = (h0 - p.running_mean(l)) / std::sqrt(p.running_var(l) + c.bn_eps) * p.bn_gamma(l) + p.bn_beta(l);
      CHECK(std::abs(r.h(i, l) - h) < 1e-6);
    }
  }
}

TEST_CASE("forward_pass honours the length and shape contracts") {
  auto c = small_config(6);
  const auto p = init_params(c);
  Rng rng(1);
  SensitiveDocument doc{"d", "p", {}};
  for (int i = 0; i < 5; ++i) {
    SubSentence s;
    s.id = i;
    s.text = "x";
    const auto row = testing::random_unit_rows(rng, 1, 6);
    s.embedding.assign(row.data(), row.data() + 6);
    doc.sub_sentences.push_back(s);
  }
  const auto expert = testing::random_unit_rows(rng, 3, 6);
  const auto fe = forward_pass(QueryKind::Expert, expert, doc, p, c, Mode::Infer);
  CHECK(fe.h.rows() == 3);
  CHECK(fe.cas.rows() == 3);
  CHECK(fe.cas.cols() == 5);
  CHECK(fe.logits.size() == 4);
  for (Eigen::Index j = 0; j < 6; ++j) CHECK(fe.z(j) == doctest::Approx(fe.h.col(j).mean()).epsilon(1e-12));

  const auto fa = forward_pass(QueryKind::Aspect, Matrix(), doc, p, c, Mode::Infer);
  CHECK(fa.cas.rows() == c.t);
  CHECK(fa.cas.cols() == 5);
  const auto fs = forward_pass(QueryKind::Aspect, Matrix(), doc, p, c, Mode::Train, {0, 2});
  CHECK(fs.h.rows() == 2);

  SensitiveDocument empty{"e", "p", {}};
  CHECK_THROWS_AS(forward_pass(QueryKind::Aspect, Matrix(), empty, p, c, Mode::Infer), Error);
}

TEST_CASE("reconstruction and cross-entropy limits") {
  Rng rng(2);
  const auto h = testing::random_unit_rows(rng, 3, 5);
  CHECK(reconstruction_loss(h, h) == 0.0);
  CHECK(reconstruction_loss(h, Matrix::Zero(3, 5)) == doctest::Approx(3.0 / 15.0));

  Vector logits = Vector::Zero(4);
  double previous = cross_entropy(logits, 2);
  CHECK(previous == doctest::Approx(std::log(4.0)));
  for (double margin : {1.0, 5.0, 20.0, 60.0}) {
    logits(2) = margin;
    const double ce = cross_entropy(logits, 2);
    CHECK(ce < previous);
    CHECK(ce >= 0.0);
    previous = ce;
  }
  CHECK(previous < 1e-20);
}

TEST_CASE("alignment loss matches a fully enumerated N = 2 computation") {
  Matrix ze(2, 3), za(2, 3);
  ze << 1.0, 0.0, 0.5, 0.2, 1.0, -0.3;
  za << 0.9, 0.1, 0.4, -0.1, 0.8, 0.2;
  const double tau_c = 0.5;

  // Independent enumeration of the 2N x (2N-1) similarity table.
  double z[4][3];
  for (int j = 0; j < 3; ++j) {
    z[0][j] = ze(0, j);
    z[1][j] = ze(1, j);
    z[2][j] = za(0, j);
    z[3][j] = za(1, j);
  }
  const auto cosine = [&](int a, int b) {
    double dot = 0, na = 0, nb = 0;
    for (int j = 0; j < 3; ++j) {
      dot += z[a][j] * z[b][j];
      na += z[a][j] * z[a][j];
      nb += z[b][j] * z[b][j];
    }
    return dot / std::sqrt(na * nb);
  };
  const auto ell = [&](int i, int j) {
    double denom = 0.0;
    for (int k = 0; k < 4; ++k) {
      if (k != i) denom += std::exp(cosine(i, k) / tau_c);
    }
    return -std::log(std::exp(cosine(i, j) / tau_c) / denom);
  };
  const double oracle = (ell(0, 2) + ell(2, 0) + ell(1, 3) + ell(3, 1)) / 4.0;
  CHECK(std::abs(oracle - 0.32434643414143394) < 1e-12);  // frozen from the enumeration
  CHECK(std::abs(alignment_loss(ze, za, tau_c) - oracle) < 1e-6);
  CHECK(alignment_loss(ze, za, tau_c) >= 0.0);

  CHECK_THROWS_AS(alignment_loss(ze.topRows(1), za.topRows(1), tau_c), Error);
}

TEST_CASE("analytic gradients agree with central finite differences") {
  Rng rng(2024);
  for (int trial = 0; trial < 6; ++trial) {
    XAlignConfig c;
    c.dim = 3 + static_cast<int>(rng.index(6));  // <= 8
    c.t = 3 + static_cast<int>(rng.index(3));
    c.m = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(c.t)));
    c.tau = rng.uniform(0.3, 1.5);
    c.dropout_p = 0.0;
    c.b = rng.uniform(0.1, 1.0);
    c.a = rng.uniform(0.1, 1.0);
    c.seed = rng.next();
    const auto p = init_params(c);
    const auto batch = testing::tiny_batch(rng, c, 2 + rng.index(2));
    const auto report = gradient_check(p, batch, c, 1e-4);
    INFO("trial " << trial);
    for (const auto& [name, err] : report.per_tensor) {
      INFO(name << " " << err);
      CHECK(err < 1e-3);
    }
  }
}

TEST_CASE("reconstruction-only gradient is tighter") {
  Rng rng(77);
  XAlignConfig c;
  c.dim = 5;
  c.t = 3;
  c.m = 2;
  c.tau = 0.7;
  c.dropout_p = 0.0;
  c.aux_enabled = false;
  c.align_ablated = true;
  const auto p = init_params(c);
  const auto batch = testing::tiny_batch(rng, c, 3);
  const auto report = gradient_check(p, batch, c, 1e-4);
  for (const auto& [name, err] : report.per_tensor) {
    if (name == std::string("aspects") || name[0] == 'w' && name[1] != 'q' && name[1] != 'k' && name[1] != 'v') {
      continue;  // untouched by L_rec, gradient identically zero
    }
    INFO(name << " " << err);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("a zero learning-rate step leaves parameters unchanged") {
  auto c = small_config(5);
  c.lr = 0.0;
  auto p = init_params(c);
  const auto before = p;
  Rng rng(9);
  c.dropout_p = 0.0;
  const auto batch = testing::tiny_batch(rng, c, 3);
  XAlignParams grads;
  evaluate_batch(p, c, batch, &grads);
  AdamW adam(c);
  adam.step(p, grads);
  CHECK(p.aspects == before.aspects);
  CHECK(p.wq == before.wq);
  CHECK(p.w1 == before.w1);
  CHECK(p.bn_gamma == before.bn_gamma);
}

TEST_CASE("default configuration echoes the published settings") {
  XAlignConfig c;
  CHECK(c.t == 10);
  CHECK(c.m == 5);
  CHECK(c.tau == 0.007);
  CHECK(c.tau_c == 0.5);
  CHECK(c.dropout_p == 0.7);
  CHECK(c.b == 0.01);
  CHECK(c.a == 1.0);
  CHECK(c.lr == 1e-4);
  CHECK(c.weight_decay == 0.015);
  CHECK(c.epochs == 150);
  CHECK(c.batch_size == 64);
}

TEST_CASE("config validation") {
  XAlignConfig c;
  c.dim = 4;
  c.m = 11;
  CHECK_THROWS_AS(c.validate(), Error);
  c.m = 5;
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), Error);
  c.align_ablated = true;
  CHECK_NOTHROW(c.validate());
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
}

namespace {

EmbeddedCorpus smoke_corpus() {
  SynthConfig s;
  s.n_persons = 20;
  s.dim = 16;
  s.seed = 5;
  return synthesize_corpus(s);
}

XAlignConfig smoke_config() {
  XAlignConfig c;
  c.epochs = 30;
  c.batch_size = 8;
  c.lr = 3e-3;
  c.seed = 12;
  return c;
}

}  // namespace

TEST_CASE("smoke training lowers the reconstruction loss") {
  const auto corpus = smoke_corpus();
  const auto r = train(corpus, smoke_config());
  REQUIRE(r.history.size() == 30);
  CHECK(r.history.back().rec < r.history.front().rec);
  CHECK(r.params.trained);
  for (const auto& e : r.history) {
    CHECK(e.rec >= 0.0);
    CHECK(e.aux >= 0.0);
    CHECK(e.align >= 0.0);
  }
}

TEST_CASE("training is deterministic and b = 0 matches the ablated objective") {
  const auto corpus = smoke_corpus();
  auto c = smoke_config();
  c.epochs = 5;
  const auto a = train(corpus, c);
  const auto b = train(corpus, c);
  CHECK(a.params.aspects == b.params.aspects);
  CHECK(a.params.wk == b.params.wk);
  CHECK(a.params.running_var == b.params.running_var);

  c.b = 0.0;
  const auto zero_weight = train(corpus, c);
  c.align_ablated = true;
  const auto ablated = train(corpus, c);
  CHECK(zero_weight.params.aspects == ablated.params.aspects);
  CHECK(zero_weight.params.wq == ablated.params.wq);
  CHECK(zero_weight.params.w2 == ablated.params.w2);
  CHECK(zero_weight.history.back().align > 0.0);  // still reported
  CHECK(ablated.history.back().align == 0.0);
}

TEST_CASE("non-finite embeddings abort training with diagnostics") {
  auto corpus = smoke_corpus();
  corpus.documents[0].sub_sentences[0].embedding[0] = std::nanf("");
  auto c = smoke_config();
  c.epochs = 1;
  try {
    train(corpus, c);
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonFiniteLoss);
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip and integrity") {
  auto c = small_config(6);
  auto p = init_params(c);
  p.trained = true;
  const auto bytes = serialize_checkpoint(p, c);
  const auto ck = parse_checkpoint(bytes);
  CHECK(ck.params.aspects == p.aspects);
  CHECK(ck.params.w1 == p.w1);
  CHECK(ck.params.running_var == p.running_var);
  CHECK(ck.params.trained);
  CHECK(ck.config.t == c.t);
  CHECK(ck.config.tau == c.tau);

  auto corrupted = bytes;
  corrupted.back() ^= 0x1;
  CHECK_THROWS_AS(parse_checkpoint(corrupted), Error);

  auto future = bytes;
  future[4] = 9;
  try {
    parse_checkpoint(future);
    FAIL("expected version mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::VersionMismatch);
  }
}
