#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cofact/error.hpp"
#include "cofact/model.hpp"
#include "cofact/tensor_io.hpp"
#include "gradcheck.hpp"
#include "loss_reference.hpp"

using namespace cofact;
using namespace cofact::testing;

namespace {

DTensor constant(Shape shape, std::vector<double> v) { return DTensor::constant(std::move(shape), std::move(v)); }

void fill(DTensor t, double value) {
  for (auto& x : t.mutable_values()) x = value;
}

void set_identity(DTensor t) {
  auto v = t.mutable_values();
  std::fill(v.begin(), v.end(), 0.0);
  for (std::size_t i = 0; i < std::min(t.dim(0), t.dim(1)); ++i) v[i * t.dim(1) + i] = 1.0;
}

}  // namespace

TEST_CASE("embed_stream") {
  Rng rng(1);
  auto e = StreamEmbedder<double>::make(Stream::kClaimImage, 3, 3, rng);
  SUBCASE("identity weights pass nonnegative input through") {
    set_identity(e.weight);
    fill(e.bias, 0.0);
    auto x = constant({2, 3}, {0.5, 1.0, 2.0, 0.0, 3.0, 0.25});
    auto y = embed_stream(x, e);
    for (std::size_t i = 0; i < 6; ++i) CHECK(y.values()[i] == x.values()[i]);
  }
  SUBCASE("strongly negative bias saturates") {
    fill(e.bias, -100.0);
    auto y = embed_stream(constant({2, 3}, {0.5, 1.0, 2.0, 0.0, 3.0, 0.25}), e);
    for (double v : y.values()) CHECK(v == 0.0);
  }
  SUBCASE("width mismatch names the stream") {
    try {
      embed_stream(constant({2, 4}, std::vector<double>(8, 1.0)), e);
      FAIL("expected DimensionError");
    } catch (const DimensionError& err) {
      CHECK(std::string(err.what()).find("CI") != std::string::npos);
    }
  }
  SUBCASE("gradients") {
    auto x = random_tensor({2, 4, 3}, rng);
    auto r = grad_check({x, e.weight, e.bias}, [&] { return weighted_sum(embed_stream(x, e), 5); });
    CHECK(r.max_rel_err < 1e-4);
  }
  CHECK(e.named_parameters()[0].first == "embed.CI.W");
  CHECK(e.named_parameters()[1].first == "embed.CI.b");
}

TEST_CASE("adapter block") {
  Rng rng(2);
  const std::size_t bd = 6;
  auto a = AdapterBlock<double>::make(bd, rng);
  CHECK(AdapterBlock<double>::inner_width(6) == 12);
  CHECK(AdapterBlock<double>::inner_width(1024) == 512);
  auto x = random_tensor({2, 3, bd}, rng, 1.0, false);

  SUBCASE("zero adapter leaves the host output") {
    fill(a.weight, 0.0);
    fill(a.bias, 0.0);
    fill(a.shift, 0.0);
    auto y = adapt(x, a, AdapterScope::kAdapterOnly);
    auto h = host_ffn(x, a);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.values()[i] == doctest::Approx(h.values()[i]).epsilon(1e-15));
  }
  SUBCASE("zero host with identity adapter reproduces the input") {
    fill(a.ffn_w1, 0.0);
    fill(a.ffn_b1, 0.0);
    fill(a.ffn_w2, 0.0);
    fill(a.ffn_b2, 0.0);
    set_identity(a.weight);
    fill(a.bias, 0.0);
    fill(a.shift, 0.0);
    auto y = adapt(x, a, AdapterScope::kAdapterOnly);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
  }
  SUBCASE("adapter_only: host gradients are exactly zero, count is bd^2 + 2bd") {
    a.configure(AdapterScope::kAdapterOnly);
    CHECK(a.trainable_parameter_count() == bd * bd + 2 * bd);
    CHECK(a.adapter_parameter_count() == bd * bd + 2 * bd);
    CHECK(a.adapter_parameter_count() < a.host_parameter_count());
    weighted_sum(adapt(x, a, AdapterScope::kAdapterOnly), 3).backward();
    for (const auto& t : {a.ffn_w1, a.ffn_b1, a.ffn_w2, a.ffn_b2})
      for (double g : t.grad()) CHECK(g == 0.0);
    CHECK(a.weight.has_grad());
  }
  SUBCASE("frozen scope trains nothing") {
    a.configure(AdapterScope::kFrozen);
    CHECK(a.trainable_parameter_count() == 0);
  }
  SUBCASE("all scope gradients match finite differences") {
    a.configure(AdapterScope::kAll);
    CHECK(a.trainable_parameter_count() == a.adapter_parameter_count() + a.host_parameter_count());
    std::vector<DTensor> params;
    for (const auto& [name, t] : a.named_parameters()) params.push_back(t);
    auto r = grad_check(params, [&] { return weighted_sum(adapt(x, a, AdapterScope::kAll), 4); });
    CHECK(r.max_rel_err < 1e-4);
  }
  SUBCASE("checkpoint names") {
    auto names = a.named_parameters("text_");
    CHECK(names[0].first.rfind("text_", 0) == 0);
  }
}

TEST_CASE("co-attention") {
  Rng rng(3);
  const std::size_t d = 8;
  auto block = CoAttentionBlock<double>::make(d, 16, rng);
  AttentionOptions opt;
  opt.heads = 2;

  auto seq = [&](std::size_t b, std::size_t l, std::vector<std::size_t> lengths) {
    return SequenceBatch<double>{random_tensor({b, l, d}, rng, 1.0, false), std::move(lengths)};
  };

  SUBCASE("rows sum to one and padded keys get zero weight") {
    auto a = seq(2, 3, {3, 2});
    auto b = seq(2, 5, {4, 5});
    auto r = co_attend(a, b, block, opt);
    const auto w = r.weights_ab.values();  // [(2·2)×3×5]
    for (std::size_t bh = 0; bh < 4; ++bh)
      for (std::size_t q = 0; q < 3; ++q) {
        double s = 0.0;
        for (std::size_t k = 0; k < 5; ++k) s += w[(bh * 3 + q) * 5 + k];
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t q = 0; q < 3; ++q) CHECK(w[(h * 3 + q) * 5 + 4] == 0.0);
  }
  SUBCASE("swapping the inputs swaps the outputs") {
    auto a = seq(1, 3, {3});
    auto b = seq(1, 4, {4});
    auto ab = co_attend(a, b, block, opt);
    auto ba = co_attend(b, a, block, opt);
    for (std::size_t i = 0; i < ab.a_to_b.size(); ++i) CHECK(ab.a_to_b.values()[i] == ba.b_to_a.values()[i]);
    for (std::size_t i = 0; i < ab.b_to_a.size(); ++i) CHECK(ab.b_to_a.values()[i] == ba.a_to_b.values()[i]);
  }
  SUBCASE("a single key gets all the attention") {
    auto r = co_attend(seq(1, 3, {3}), seq(1, 1, {1}), block, opt);
    for (double w : r.weights_ab.values()) CHECK(w == 1.0);
  }
  SUBCASE("constant shift of the scores leaves attention unchanged") {
    auto scores = random_tensor({1, 2, 4}, rng, 1.0, false);
    std::vector<double> shifted(scores.values().begin(), scores.values().end());
    for (std::size_t k = 0; k < 4; ++k) shifted[k] += 7.5;
    auto p = softmax(scores, 2), q = softmax(constant({1, 2, 4}, shifted), 2);
    for (std::size_t i = 0; i < 8; ++i) CHECK(p.values()[i] == doctest::Approx(q.values()[i]).epsilon(1e-12));
  }
  SUBCASE("width mismatch") {
    SequenceBatch<double> bad{random_tensor({1, 2, 6}, rng, 1.0, false), {2}};
    CHECK_THROWS_AS(co_attend(bad, seq(1, 2, {2}), block, opt), DimensionError);
    AttentionOptions three = opt;
    three.heads = 3;
    CHECK_THROWS_AS(co_attend(seq(1, 2, {2}), seq(1, 2, {2}), block, three), DimensionError);
  }
  SUBCASE("paper-exact scaling changes the scores") {
    auto a = seq(1, 3, {3});
    auto b = seq(1, 3, {3});
    AttentionOptions exact = opt;
    exact.paper_exact_scaling = true;
    auto r1 = co_attend(a, b, block, opt), r2 = co_attend(a, b, block, exact);
    bool differ = false;
    for (std::size_t i = 0; i < r1.weights_ab.size(); ++i) differ |= r1.weights_ab.values()[i] != r2.weights_ab.values()[i];
    CHECK(differ);
  }
}

TEST_CASE("fuse produces 12 contexts and 4 streams in fixed order") {
  Rng rng(4);
  const std::size_t d = 8;
  std::vector<CoAttentionBlock<double>> blocks;
  for (int k = 0; k < 6; ++k) blocks.push_back(CoAttentionBlock<double>::make(d, 8, rng));
  auto seq = [&](std::size_t l) { return SequenceBatch<double>{random_tensor({2, l, d}, rng, 1.0, false), {l, l}}; };
  StreamSet<double> s{seq(3), seq(4), seq(2), seq(1)};
  AttentionOptions opt;
  opt.heads = 2;
  auto out = fuse<double>(s, blocks, opt, Aggregation::kMean);
  CHECK(out.contexts.size() == 12);
  CHECK(out.streams.size() == 4);
  CHECK(out.concatenated().shape() == Shape{2, 16 * d});
  // Stream slots are CT, CI, DT, DI mean aggregates.
  auto ct_mean = seq_mean(s.claim_text.values, s.claim_text.lengths);
  for (std::size_t i = 0; i < ct_mean.size(); ++i) CHECK(out.streams[0].values()[i] == ct_mean.values()[i]);
  auto ci_mean = seq_mean(s.claim_image.values, s.claim_image.lengths);
  for (std::size_t i = 0; i < ci_mean.size(); ++i) CHECK(out.streams[1].values()[i] == ci_mean.values()[i]);
  // Pairing 1 is (CI, DI) with block 0.
  auto first = co_attend(s.claim_image, s.doc_image, blocks[0], [&] {
    AttentionOptions o = opt;
    o.seed = mix_seed(opt.seed, 1);
    return o;
  }());
  auto agg = seq_mean(first.a_to_b, s.claim_image.lengths);
  for (std::size_t i = 0; i < agg.size(); ++i) CHECK(out.contexts[0].values()[i] == agg.values()[i]);

  auto triple = fuse<double>(s, blocks, opt, Aggregation::kMeanMaxLast);
  CHECK(triple.concatenated().shape() == Shape{2, 48 * d});

  std::vector<CoAttentionBlock<double>> five(blocks.begin(), blocks.begin() + 5);
  CHECK_THROWS_AS(fuse<double>(s, five, opt, Aggregation::kMean), DimensionError);
}

TEST_CASE("fuse with length-1 streams: aggregation is the identity") {
  Rng rng(5);
  const std::size_t d = 4;
  std::vector<CoAttentionBlock<double>> blocks;
  for (int k = 0; k < 6; ++k) blocks.push_back(CoAttentionBlock<double>::make(d, 4, rng));
  auto one = [&] { return SequenceBatch<double>{random_tensor({1, 1, d}, rng, 1.0, false), {1}}; };
  StreamSet<double> s{one(), one(), one(), one()};
  AttentionOptions opt;
  opt.heads = 2;
  auto out = fuse<double>(s, blocks, opt, Aggregation::kMean);
  for (std::size_t i = 0; i < d; ++i) CHECK(out.streams[0].values()[i] == s.claim_text.values.values()[i]);
  auto r = co_attend(s.claim_image, s.doc_image, blocks[0], [&] {
    AttentionOptions o = opt;
    o.seed = mix_seed(opt.seed, 1);
    return o;
  }());
  for (std::size_t i = 0; i < d; ++i) CHECK(out.contexts[1].values()[i] == r.b_to_a.values()[i]);
}

TEST_CASE("classifier head") {
  Rng rng(6);
  auto head = ClassifierHead<double>::make(10, 4, rng);
  auto x = random_tensor({3, 10}, rng, 1.0, false);
  SUBCASE("zero weights give uniform rows") {
    fill(head.wz1, 0.0);
    fill(head.wz2, 0.0);
    const auto out = classify(x, head);
    for (double p : out.probs.values()) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("rows are distributions") {
    auto p = classify(x, head).probs;
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) s += p.values()[r * 5 + c];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  SUBCASE("width mismatch reports expected and actual") {
    try {
      classify(random_tensor({3, 9}, rng, 1.0, false), head);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("10") != std::string::npos);
      CHECK(msg.find("9") != std::string::npos);
    }
  }
  SUBCASE("CE through classify matches finite differences") {
    const std::vector<int> labels = {0, 2, 4};
    auto r = grad_check({head.wz1, head.wz2}, [&] { return cross_entropy(classify(x, head).probs, labels); });
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("cross entropy") {
  const std::vector<int> labels = {0, 3};
  auto uniform = DTensor::full({2, 5}, 0.2);
  CHECK(std::abs(cross_entropy(uniform, labels).item() - std::log(5.0)) < 1e-12);
  auto onehot = constant({2, 5}, {1, 0, 0, 0, 0, 0, 0, 0, 1, 0});
  CHECK(cross_entropy(onehot, labels).item() == 0.0);
  auto zero = constant({1, 5}, {0, 1, 0, 0, 0});
  const std::vector<int> first = {0};
  CHECK(cross_entropy(zero, first).item() == doctest::Approx(-std::log(1e-12)));
  const std::vector<int> bad = {0, 5};
  CHECK_THROWS_AS(cross_entropy(uniform, bad), ValueError);

  // Extended-precision recomputation on a random batch.
  Rng rng(8);
  auto logits = random_tensor({6, 5}, rng, 2.0, false);
  auto p = softmax(logits, 1);
  const std::vector<int> y = {0, 1, 2, 3, 4, 2};
  long double ref = 0.0L;
  for (std::size_t i = 0; i < 6; ++i) ref -= std::log(static_cast<long double>(p.values()[i * 5 + y[i]]));
  ref /= 6.0L;
  CHECK(std::abs(static_cast<long double>(cross_entropy(p, y).item()) - ref) < 1e-12L);
}

TEST_CASE("supervised contrastive loss") {
  Rng rng(9);
  SUBCASE("brute-force agreement") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Rng r(seed);
      const std::size_t n = 2 + r.index(7);  // 2..8
      std::vector<std::vector<double>> e(n, std::vector<double>(5));
      std::vector<double> flat;
      std::vector<int> y;
      for (std::size_t i = 0; i < n; ++i) {
        for (auto& x : e[i]) {
          x = r.normal();
          flat.push_back(x);
        }
        y.push_back(static_cast<int>(r.index(3)));
      }
      const double got = supcon_loss(constant({n, 5}, flat), y, 0.3).item();
      CHECK(std::abs(got - supcon_reference(e, y, 0.3)) < 1e-6);
    }
  }
  SUBCASE("no positives gives zero") {
    const std::vector<int> y = {0, 1, 2, 3};
    CHECK(supcon_loss(random_tensor({4, 3}, rng, 1.0, false), y, 0.3).item() == 0.0);
  }
  SUBCASE("two identical same-label samples") {
    const std::vector<int> y = {1, 1};
    CHECK(std::abs(supcon_loss(constant({2, 3}, {1, 2, 3, 1, 2, 3}), y, 0.3).item()) < 1e-12);
  }
  SUBCASE("batch of one is rejected") {
    const std::vector<int> y = {1};
    CHECK_THROWS_AS(supcon_loss(constant({1, 3}, {1, 2, 3}), y, 0.3), ValueError);
  }
  SUBCASE("rotation invariance") {
    auto e = random_tensor({6, 2}, rng, 1.0, false);
    const double c = std::cos(0.7), s = std::sin(0.7);
    auto rot = matmul(e, constant({2, 2}, {c, -s, s, c}));
    const std::vector<int> y = {0, 1, 0, 1, 2, 2};
    CHECK(supcon_loss(e, y, 0.3).item() == doctest::Approx(supcon_loss(rot, y, 0.3).item()).epsilon(1e-12));
  }
}

TEST_CASE("total loss mixing") {
  Rng rng(10);
  auto probs = softmax(random_tensor({6, 5}, rng, 1.0, false), 1);
  auto emb = random_tensor({6, 4}, rng, 1.0, false);
  const std::vector<int> y = {0, 1, 0, 1, 2, 2};
  const double ce = cross_entropy(probs, y).item();
  const double sc = supcon_loss(emb, y, 0.3).item();
  CHECK(total_loss(probs, emb, y, LossConfig::final_model()).total.item() == ce);
  CHECK(total_loss(probs, emb, y, LossConfig{0.0, 0.3}).total.item() == sc);
  const auto joint = total_loss(probs, emb, y, LossConfig::joint());
  CHECK(joint.total.item() == doctest::Approx(0.7 * ce + 0.3 * sc).epsilon(1e-14));
  CHECK(joint.cross_entropy == ce);
  CHECK(joint.supcon == sc);
  CHECK(total_loss(probs, emb, y, LossConfig{}).total.item() >= 0.0);
  CHECK_THROWS_AS(total_loss(probs, emb, y, LossConfig{1.5, 0.3}), ValueError);
}

TEST_CASE("model assembly, parameter naming and checkpoints") {
  ModelConfig c;
  c.text_dim = 6;
  c.image_dim = 5;
  c.d = 8;
  c.heads = 2;
  c.ff_inner = 8;
  c.d_m = 4;
  CHECK(c.classifier_input_width() == 16 * 8 + 32);
  auto m = Model<float>::init(c, 7);

  std::vector<std::string> names;
  for (const auto& [n, t] : m.named_parameters()) names.push_back(n);
  auto has = [&](const std::string& n) { return std::find(names.begin(), names.end(), n) != names.end(); };
  for (const char* n : {"embed.CT.W", "embed.DI.b", "adapter.W", "adapter.b", "adapter.v", "ffn.W1", "ffn.b2",
                        "fusion.pair1.Wq", "fusion.pair6.ffn.W2", "fusion.pair3.norm2.gain", "head.Wz1", "head.Wz2"})
    CHECK_MESSAGE(has(n), n);

  auto groups = m.param_groups(5e-5, 1e-5);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].learning_rate == 5e-5);
  CHECK(groups[1].learning_rate == 1e-5);
  CHECK(groups[1].params.size() == 7);  // adapter W/b/v + ffn W1/b1/W2/b2

  const auto path = std::filesystem::temp_directory_path() / "cofact_test_model.pcfk";
  save_archive(path, m.to_archive(c.to_json()));
  auto archive = load_archive(path);
  CHECK(ModelConfig::from_json(archive.metadata).to_json() == c.to_json());
  auto restored = Model<float>::from_archive(archive, c);
  auto a = m.named_parameters(), b = restored.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(std::equal(a[i].second.values().begin(), a[i].second.values().end(), b[i].second.values().begin()));
  }

  ModelConfig wider = c;
  wider.d_m = 6;
  try {
    Model<float>::from_archive(archive, wider);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("head.Wz1") != std::string::npos);
  }
  std::filesystem::remove(path);

  ModelConfig bad = c;
  bad.heads = 3;
  CHECK_THROWS_AS(Model<float>::init(bad, 1), ValueError);
}

TEST_CASE("text-only ablation uses the text streams and one block") {
  ModelConfig c;
  c.text_dim = 6;
  c.image_dim = 5;
  c.d = 8;
  c.heads = 2;
  c.ff_inner = 8;
  c.d_m = 4;
  c.text_only = true;
  CHECK(c.classifier_input_width() == 4 * 8);
  auto m = Model<double>::init(c, 3);
  for (const auto& [n, t] : m.named_parameters()) {
    CHECK(n.find("embed.CI") == std::string::npos);
    CHECK(n.find("adapter.") == std::string::npos);
    if (n.rfind("fusion.", 0) == 0) CHECK(n.rfind("fusion.pair2.", 0) == 0);
  }
  Rng rng(4);
  ModelInput<double> in;
  in.streams.claim_text = {random_tensor({2, 3, 6}, rng, 1.0, false), {3, 2}};
  in.streams.doc_text = {random_tensor({2, 4, 6}, rng, 1.0, false), {4, 4}};
  auto out = m.forward(in, false, 0);
  CHECK(out.probs.shape() == Shape{2, 5});
}

TEST_CASE("eval forward is deterministic and training forward depends on the seed") {
  ModelConfig c;
  c.text_dim = 4;
  c.image_dim = 4;
  c.d = 4;
  c.heads = 2;
  c.ff_inner = 4;
  c.d_m = 4;
  c.dropout = 0.5;
  auto m = Model<double>::init(c, 11);
  Rng rng(12);
  auto seq = [&] { return SequenceBatch<double>{random_tensor({2, 3, 4}, rng, 1.0, false), {3, 2}}; };
  ModelInput<double> in{{seq(), seq(), seq(), seq()}, random_tensor({2, 32}, rng, 1.0, false)};
  auto e1 = m.forward(in, false, 1).probs, e2 = m.forward(in, false, 2).probs;
  for (std::size_t i = 0; i < e1.size(); ++i) CHECK(e1.values()[i] == e2.values()[i]);
  auto t1 = m.forward(in, true, 1).probs, t1b = m.forward(in, true, 1).probs, t2 = m.forward(in, true, 2).probs;
  bool differ = false;
  for (std::size_t i = 0; i < t1.size(); ++i) {
    CHECK(t1.values()[i] == t1b.values()[i]);
    differ |= t1.values()[i] != t2.values()[i];
  }
  CHECK(differ);
}
