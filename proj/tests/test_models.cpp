#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "test_support.hpp"

using namespace charlm;
using charlm::testing::micro_config;
using charlm::testing::param_tensors;
using charlm::testing::random_ids;
using TD = Tensor<double>;

namespace {

const ModelFamily kFamilies[] = {ModelFamily::char_lstm, ModelFamily::transformer, ModelFamily::transformer_xl};

IdMatrix columns(const IdMatrix& m, std::size_t begin, std::size_t end) {
  IdMatrix out{m.rows, end - begin, {}};
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = begin; c < end; ++c) out.data.push_back(m(r, c));
  }
  return out;
}

std::vector<std::int32_t> targets_for(const IdMatrix& ids, std::size_t vocab) {
  std::vector<std::int32_t> t(ids.data.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<std::int32_t>((ids.data[i] + 1) % static_cast<std::int32_t>(vocab));
  return t;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::map<std::string, TD> by_name(const LanguageModel<double>& m) {
  std::map<std::string, TD> out;
  for (const auto& p : m.parameters()) out[p.name] = p.tensor;
  return out;
}

// Plain-loop forward of a one-layer, one-head post-norm causal transformer.
std::vector<double> reference_transformer(const LanguageModel<double>& model, const std::vector<std::int32_t>& ids) {
  const auto& c = model.config();
  auto P = by_name(model);
  const std::size_t T = ids.size(), E = c.embedding_dim, V = c.vocab_size, F = c.feed_forward_dim();
  auto w = [&](const std::string& n, std::size_t r, std::size_t col) { return P.at(n).at({r, col}); };
  auto v1 = [&](const std::string& n, std::size_t i) { return P.at(n).values()[i]; };
  using Mat = std::vector<std::vector<double>>;
  Mat x(T, std::vector<double>(E));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < E; ++k) {
      const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(k - k % 2) / static_cast<double>(E));
      const double pe = k % 2 == 0 ? std::sin(angle) : std::cos(angle);
      x[t][k] = w("embedding.table", static_cast<std::size_t>(ids[t]), k) * std::sqrt(static_cast<double>(E)) + pe;
    }
  }
  auto project = [&](const Mat& in, const std::string& n, std::size_t out_dim, bool bias) {
    Mat out(in.size(), std::vector<double>(out_dim, 0.0));
    for (std::size_t t = 0; t < in.size(); ++t) {
      for (std::size_t o = 0; o < out_dim; ++o) {
        double s = bias ? v1(n + ".bias", o) : 0.0;
        for (std::size_t i = 0; i < in[t].size(); ++i) s += in[t][i] * w(n + ".weight", i, o);
        out[t][o] = s;
      }
    }
    return out;
  };
  auto norm = [&](const Mat& in, const std::string& n) {
    Mat out = in;
    for (auto& row : out) {
      double mu = 0, var = 0;
      for (double v : row) mu += v;
      mu /= static_cast<double>(row.size());
      for (double v : row) var += (v - mu) * (v - mu);
      var /= static_cast<double>(row.size());
      for (std::size_t i = 0; i < row.size(); ++i) {
        row[i] = (row[i] - mu) / std::sqrt(var + 1e-5) * v1(n + ".gain", i) + v1(n + ".bias", i);
      }
    }
    return out;
  };
  const std::string b = "block.0.";
  const auto q = project(x, b + "attention.query", E, false);
  const auto k = project(x, b + "attention.key", E, false);
  const auto v = project(x, b + "attention.value", E, false);
  Mat ctx(T, std::vector<double>(E, 0.0));
  for (std::size_t i = 0; i < T; ++i) {
    std::vector<double> s(i + 1);
    double mx = -1e300, z = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      double dot = 0;
      for (std::size_t d = 0; d < E; ++d) dot += q[i][d] * k[j][d];
      s[j] = dot / std::sqrt(static_cast<double>(E));
      mx = std::max(mx, s[j]);
    }
    for (auto& e : s) z += e = std::exp(e - mx);
    for (std::size_t j = 0; j <= i; ++j) {
      for (std::size_t d = 0; d < E; ++d) ctx[i][d] += s[j] / z * v[j][d];
    }
  }
  const auto attn = project(ctx, b + "attention.output", E, false);
  Mat mid = x;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < E; ++d) mid[t][d] += attn[t][d];
  }
  mid = norm(mid, b + "attention_norm");
  auto inner = project(mid, b + "ffn.inner", F, true);
  for (auto& row : inner) {
    for (auto& e : row) e = std::max(0.0, e);
  }
  const auto outer = project(inner, b + "ffn.outer", E, true);
  Mat top = mid;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < E; ++d) top[t][d] += outer[t][d];
  }
  top = norm(top, b + "ffn_norm");
  const auto logits = project(top, "output", V, true);
  std::vector<double> flat;
  for (const auto& row : logits) flat.insert(flat.end(), row.begin(), row.end());
  return flat;
}

}  // namespace

TEST(ModelConfig, ValidateRejectsBadConfigs) {
  auto c = micro_config(ModelFamily::transformer);
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), InvalidConfig);
  c = micro_config(ModelFamily::char_lstm);
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), InvalidConfig);
  c = micro_config(ModelFamily::char_lstm);
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), InvalidConfig);
  EXPECT_THROW(parse_family("gru"), InvalidConfig);
}

TEST(Models, OutputShapes) {
  for (const auto fam : kFamilies) {
    Rng rng(1);
    auto model = make_model<double>(micro_config(fam), rng);
    const auto ids = random_ids(2, 5, 7, rng);
    const auto logits = model->forward_stateful(ids, false, rng);
    EXPECT_EQ(logits.shape(), (Shape{2, 5, 7})) << to_string(fam);
  }
}

TEST(Models, ZeroedOutputLayerGivesLogV) {
  for (const auto fam : kFamilies) {
    auto c = micro_config(fam);
    c.vocab_size = 102;
    Rng rng(2);
    auto model = make_model<double>(c, rng);
    model->zero_output_layer();
    std::vector<std::int32_t> ids(300);
    for (auto& id : ids) id = static_cast<std::int32_t>(rng.uniform_int(0, 101));
    const auto m = evaluate(*model, ids, 5);
    EXPECT_NEAR(m.ce_nats, std::log(102.0), 1e-6) << to_string(fam);
  }
}

TEST(Models, ParameterCountsMatchFixtureAndFormula) {
  const auto cases = nlohmann::json::parse(read_file(charlm::testing::fixture("param_counts.json")));
  ASSERT_FALSE(cases.empty());
  for (const auto& c : cases) {
    auto cfg = model_config_from_json(c.at("config"));
    Rng rng(3);
    const auto model = make_model<float>(cfg, rng);
    const std::size_t want = c.at("parameters");
    EXPECT_EQ(model->parameter_count(), want) << c.at("name");
    const std::size_t V = cfg.vocab_size, E = cfg.embedding_dim, H = cfg.hidden_dim, N = cfg.num_layers,
                      F = cfg.feed_forward_dim();
    std::size_t formula = V * E + H * V + V;
    if (cfg.family == ModelFamily::char_lstm) {
      for (std::size_t l = 0; l < N; ++l) formula += 4 * H * ((l == 0 ? E : H) + H) + 4 * H;
    } else {
      const std::size_t in = cfg.family == ModelFamily::transformer && cfg.position_combine == PositionCombine::concat ? 2 * E : E;
      if (in != H) formula += in * H;
      const std::size_t block = 4 * H * H + 4 * H + 2 * H * F + F + H;
      formula += N * (block + (cfg.family == ModelFamily::transformer_xl ? H * H + 2 * H : 0));
    }
    EXPECT_EQ(formula, want) << c.at("name");
  }
}

TEST(Models, ParameterNamesAreUnique) {
  for (const auto fam : kFamilies) {
    Rng rng(4);
    const auto model = make_model<double>(micro_config(fam), rng);
    std::set<std::string> names;
    for (const auto& p : model->parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  }
}

TEST(Models, SameSeedSameInitialisation) {
  for (const auto fam : kFamilies) {
    Rng a(5), b(5);
    const auto ma = make_model<double>(micro_config(fam), a);
    const auto mb = make_model<double>(micro_config(fam), b);
    const auto pa = ma->parameters(), pb = mb->parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      EXPECT_EQ(max_abs_diff(pa[i].tensor.values(), pb[i].tensor.values()), 0.0);
    }
  }
}

TEST(Models, GradientCheckAllFamilies) {
  for (const auto fam : kFamilies) {
    auto c = micro_config(fam);
    Rng rng(6);
    auto model = make_model<double>(c, rng);
    ASSERT_LE(model->parameter_count(), 10000u);
    const auto ids = random_ids(2, 5, 7, rng);
    const auto targets = targets_for(ids, 7);
    MemoryCache<double> memory;
    if (fam == ModelFamily::transformer_xl) {
      const auto warm = random_ids(2, 5, 7, rng);
      memory = static_cast<TransformerXL<double>&>(*model).forward(warm, {}, false, rng).second;
    }
    const auto f = [&] {
      Rng unused(0);
      TD logits;
      if (fam == ModelFamily::char_lstm) {
        logits = static_cast<CharLstm<double>&>(*model).forward(ids, {}, false, unused).first;
      } else if (fam == ModelFamily::transformer) {
        logits = static_cast<Transformer<double>&>(*model).forward(ids, false, unused);
      } else {
        logits = static_cast<TransformerXL<double>&>(*model).forward(ids, memory, false, unused).first;
      }
      return cross_entropy(logits, std::span<const std::int32_t>(targets));
    };
    const auto r = grad_check<double>(f, param_tensors(*model));
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(fam) << " param " << model->parameters()[r.worst_param].name;
  }
}

TEST(CharLstmModel, StateThreadingMatchesFullUnroll) {
  auto c = micro_config(ModelFamily::char_lstm);
  c.num_layers = 1;
  Rng rng(7);
  CharLstm<double> model(c, rng);
  const auto ids = random_ids(2, 10, 7, rng);
  const auto full = model.forward(ids, {}, false, rng).first;
  auto [first, state] = model.forward(columns(ids, 0, 4), {}, false, rng);
  const auto second = model.forward(columns(ids, 4, 10), state, false, rng).first;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t < 10; ++t) {
      for (std::size_t v = 0; v < 7; ++v) {
        const double want = full.at({b, t, v});
        const double got = t < 4 ? first.at({b, t, v}) : second.at({b, t - 4, v});
        EXPECT_NEAR(got, want, 1e-12);
      }
    }
  }
}

TEST(CharLstmModel, FloatStatefulSegmentsWithinTolerance) {
  auto c = micro_config(ModelFamily::char_lstm);
  Rng rng(8);
  CharLstm<float> model(c, rng);
  const auto ids = random_ids(2, 12, 7, rng);
  const auto full = model.forward(ids, {}, false, rng).first;
  model.reset_state();
  std::vector<float> pieces;
  for (std::size_t s = 0; s < 12; s += 3) {
    const auto part = model.forward_stateful(columns(ids, s, s + 3), false, rng);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t v = 0; v < 7; ++v) EXPECT_NEAR(part.at({b, t, v}), full.at({b, s + t, v}), 1e-5);
      }
    }
  }
}

TEST(CharLstmModel, StateErrors) {
  auto c = micro_config(ModelFamily::char_lstm);
  Rng rng(9);
  CharLstm<double> model(c, rng);
  const auto ids = random_ids(2, 3, 7, rng);
  CharLstm<double>::State one_layer = {LstmState<double>::zeros(2, c.hidden_dim)};
  EXPECT_THROW(model.forward(ids, one_layer, false, rng), LayerCountMismatch);
  CharLstm<double>::State wrong_batch(2, LstmState<double>::zeros(3, c.hidden_dim));
  EXPECT_THROW(model.forward(ids, wrong_batch, false, rng), ShapeMismatch);
}

TEST(TransformerModel, MatchesLoopReference) {
  ModelConfig c;
  c.family = ModelFamily::transformer;
  c.vocab_size = 5;
  c.seq_len = 6;
  c.num_layers = 1;
  c.embedding_dim = 4;
  c.hidden_dim = 4;
  c.num_heads = 1;
  c.ffn_dim = 6;
  Rng rng(10);
  Transformer<double> model(c, rng);
  for (auto& p : model.parameters()) {
    // Non-trivial norms and biases so every term is exercised.
    if (p.name.find("norm") != std::string::npos || p.name.find("bias") != std::string::npos) {
      auto t = p.tensor;
      for (auto& v : t.mutable_values()) v += rng.normal(0.0, 0.3);
    }
  }
  const std::vector<std::int32_t> ids = {3, 1, 4, 1, 0, 2};
  const auto logits = model.forward({1, 6, ids}, false, rng);
  const auto want = reference_transformer(model, ids);
  EXPECT_LT(max_abs_diff(logits.values(), want), 1e-12);
}

TEST(TransformerModel, CausalPerturbation) {
  Rng rng(11);
  Transformer<double> model(micro_config(ModelFamily::transformer), rng);
  const auto ids = random_ids(1, 5, 7, rng);
  const auto base = model.forward(ids, false, rng);
  for (std::size_t j = 0; j < 5; ++j) {
    auto changed = ids;
    changed.data[j] = (changed.data[j] + 3) % 7;
    const auto out = model.forward(changed, false, rng);
    EXPECT_EQ(max_abs_diff(base.values().first(j * 7), out.values().first(j * 7)), 0.0) << j;
    EXPECT_GT(max_abs_diff(base.values().subspan(j * 7), out.values().subspan(j * 7)), 0.0) << j;
  }
}

TEST(TransformerModel, RejectsSegmentsLongerThanContext) {
  Rng rng(12);
  Transformer<double> model(micro_config(ModelFamily::transformer), rng);
  EXPECT_THROW(model.forward(random_ids(1, 6, 7, rng), false, rng), ShapeMismatch);
  EXPECT_EQ(model.forward(random_ids(1, 3, 7, rng), false, rng).shape(), (Shape{1, 3, 7}));
}

TEST(TransformerModel, ConcatPositionMode) {
  auto c = micro_config(ModelFamily::transformer);
  c.position_combine = PositionCombine::concat;
  Rng rng(13);
  Transformer<double> model(c, rng);
  EXPECT_EQ(model.forward(random_ids(2, 5, 7, rng), false, rng).shape(), (Shape{2, 5, 7}));
  const auto names = by_name(model);
  EXPECT_EQ(names.at("input_projection.weight").shape(), (Shape{16, 8}));
}

TEST(TransformerXLModel, CausalPerturbationWithMemory) {
  Rng rng(14);
  TransformerXL<double> model(micro_config(ModelFamily::transformer_xl), rng);
  const auto warm = random_ids(1, 5, 7, rng);
  const auto memory = model.forward(warm, {}, false, rng).second;
  const auto ids = random_ids(1, 5, 7, rng);
  const auto base = model.forward(ids, memory, false, rng).first;
  for (std::size_t j = 0; j < 5; ++j) {
    auto changed = ids;
    changed.data[j] = (changed.data[j] + 2) % 7;
    const auto out = model.forward(changed, memory, false, rng).first;
    EXPECT_EQ(max_abs_diff(base.values().first(j * 7), out.values().first(j * 7)), 0.0) << j;
  }
}

TEST(TransformerXLModel, ZeroMemLenEqualsNoMemory) {
  auto c = micro_config(ModelFamily::transformer_xl);
  c.mem_len = 0;
  Rng rng(15);
  TransformerXL<double> model(c, rng);
  const auto s1 = random_ids(2, 5, 7, rng), s2 = random_ids(2, 5, 7, rng);
  model.forward_stateful(s1, false, rng);
  EXPECT_EQ(model.memory().length(), 0u);
  const auto carried = model.forward_stateful(s2, false, rng);
  const auto fresh = model.forward(s2, {}, false, rng).first;
  EXPECT_LT(max_abs_diff(carried.values(), fresh.values()), 1e-12);
}

TEST(TransformerXLModel, MemoryHoldsLayerInputs) {
  auto c = micro_config(ModelFamily::transformer_xl);  // seq 5, mem_len 4, E == H
  Rng rng(16);
  TransformerXL<double> model(c, rng);
  const auto ids = random_ids(1, 5, 7, rng);
  const auto memory = model.forward(ids, {}, false, rng).second;
  ASSERT_EQ(memory.layers.size(), 2u);
  EXPECT_EQ(memory.layers[0].shape(), (Shape{1, 4, 8}));
  const auto table = by_name(model).at("embedding.table");
  const double s = std::sqrt(8.0);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t k = 0; k < 8; ++k) {
      EXPECT_EQ(memory.layers[0].at({0, t, k}), table.at({static_cast<std::size_t>(ids(0, t + 1)), k}) * s);
    }
  }
  for (const auto& m : memory.layers) EXPECT_FALSE(m.has_graph_link());
}

TEST(TransformerXLModel, ContextGrowsWithDepth) {
  // Two layers, segment length == mem_len: the output for segment s depends
  // on segments s-2..s and nothing earlier.
  auto c = micro_config(ModelFamily::transformer_xl);
  c.mem_len = 5;
  Rng rng(17);
  TransformerXL<double> model(c, rng);
  std::vector<IdMatrix> segs;
  for (int i = 0; i < 4; ++i) segs.push_back(random_ids(1, 5, 7, rng));
  auto run = [&](const std::vector<IdMatrix>& s) {
    std::vector<std::vector<double>> outs;
    MemoryCache<double> mem;
    for (const auto& seg : s) {
      auto [logits, next] = model.forward(seg, mem, false, rng);
      outs.emplace_back(logits.values().begin(), logits.values().end());
      mem = std::move(next);
    }
    return outs;
  };
  const auto base = run(segs);
  auto changed = segs;
  changed[0].data[4] = (changed[0].data[4] + 1) % 7;
  const auto out = run(changed);
  EXPECT_GT(max_abs_diff(base[1], out[1]), 0.0);
  EXPECT_GT(max_abs_diff(base[2], out[2]), 0.0);
  EXPECT_EQ(max_abs_diff(base[3], out[3]), 0.0);
}

TEST(TransformerXLModel, NoGradientIntoMemory) {
  Rng rng(18);
  TransformerXL<double> model(micro_config(ModelFamily::transformer_xl), rng);
  auto memory = model.forward(random_ids(2, 5, 7, rng), {}, false, rng).second;
  for (auto& m : memory.layers) m.set_requires_grad(true);
  const auto ids = random_ids(2, 5, 7, rng);
  const auto targets = targets_for(ids, 7);
  backward(cross_entropy(model.forward(ids, memory, true, rng).first, std::span<const std::int32_t>(targets)));
  for (const auto& m : memory.layers) EXPECT_FALSE(m.has_grad());
}

TEST(TransformerXLModel, MemoryErrors) {
  Rng rng(19);
  TransformerXL<double> model(micro_config(ModelFamily::transformer_xl), rng);
  const auto ids = random_ids(2, 5, 7, rng);
  MemoryCache<double> one{{TD::zeros({2, 4, 8})}};
  EXPECT_THROW(model.forward(ids, one, false, rng), LayerCountMismatch);
  MemoryCache<double> wrong_batch{{TD::zeros({3, 4, 8}), TD::zeros({3, 4, 8})}};
  EXPECT_THROW(model.forward(ids, wrong_batch, false, rng), ShapeMismatch);
}

TEST(UpdateMemory, SlidingWindow) {
  const TD a({1, 2, 1}, {1, 2});
  const TD b({1, 3, 1}, {3, 4, 5});
  const auto first = update_memory<double>({}, {a}, 4);
  EXPECT_EQ(to_vector(first.layers[0]), (std::vector<double>{1, 2}));
  const auto second = update_memory(first, {b}, 4);
  EXPECT_EQ(to_vector(second.layers[0]), (std::vector<double>{2, 3, 4, 5}));
  const auto third = update_memory(second, {b}, 2);
  EXPECT_EQ(to_vector(third.layers[0]), (std::vector<double>{4, 5}));
  EXPECT_THROW(update_memory(second, {b, b}, 4), LayerCountMismatch);
  EXPECT_THROW(update_memory(second, {TD::zeros({1, 3, 2})}, 4), ShapeMismatch);
}

TEST(UpdateMemory, EntriesAreDetached) {
  auto x = TD({1, 2, 1}, {1, 2}, true);
  const auto y = mul(x, x);
  const auto mem = update_memory<double>({}, {y}, 4);
  EXPECT_FALSE(mem.layers[0].has_graph_link());
  EXPECT_FALSE(mem.layers[0].requires_grad());
}

TEST(Models, CopyParametersFloatToDouble) {
  Rng a(20), b(21);
  const auto src = make_model<float>(micro_config(ModelFamily::transformer_xl), a);
  auto dst = make_model<double>(micro_config(ModelFamily::transformer_xl), b);
  copy_parameters(*src, *dst);
  const auto ps = src->parameters();
  const auto pd = dst->parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (std::size_t k = 0; k < ps[i].tensor.size(); ++k) {
      EXPECT_EQ(static_cast<double>(ps[i].tensor.values()[k]), pd[i].tensor.values()[k]);
    }
  }
  auto other = make_model<double>(micro_config(ModelFamily::transformer), b);
  EXPECT_THROW(copy_parameters(*src, *other), ShapeMismatch);
}
