#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "cemformer/episodes.hpp"
#include "cemformer/error.hpp"
#include "cemformer/seed.hpp"

using namespace cem;
using namespace cem::episodes;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("cem_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

GeneratorConfig small_generator() {
  GeneratorConfig g;
  g.height = g.width = 16;
  g.marker_size = 2;
  g.blob_jitter = 2;
  return g;
}

DatasetManifest balanced_manifest(std::size_t per_class, std::size_t classes) {
  DatasetManifest m;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) m.entries.push_back({m.entries.size(), c, {}, 0, {}});
  return m;
}

// Plain gradient-descent logistic regression, kept here as the oracle for
// the single-frame bound.
struct Logistic {
  std::vector<double> w;
  double b = 0.0;

  void fit(const std::vector<std::vector<double>>& x, const std::vector<int>& y, std::size_t iters, double lr,
           double l2) {
    const std::size_t n = x.size(), d = x[0].size();
    w.assign(d, 0.0);
    b = 0.0;
    std::vector<double> gw(d);
    for (std::size_t it = 0; it < iters; ++it) {
      std::fill(gw.begin(), gw.end(), 0.0);
      double gb = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double err = 1.0 / (1.0 + std::exp(-score(x[i]))) - y[i];
        for (std::size_t j = 0; j < d; ++j) gw[j] += err * x[i][j];
        gb += err;
      }
      for (std::size_t j = 0; j < d; ++j) w[j] -= lr * (gw[j] / n + l2 * w[j]);
      b -= lr * gb / n;
    }
  }
  double score(const std::vector<double>& x) const {
    double s = b;
    for (std::size_t j = 0; j < x.size(); ++j) s += w[j] * x[j];
    return s;
  }
};

}  // namespace

TEST_SUITE("generate_episode") {
  TEST_CASE("same seed gives identical episodes") {
    GeneratorConfig g;
    CHECK(generate_episode(42, g, 3) == generate_episode(42, g, 3));
    CHECK_FALSE(generate_episode(42, g) == generate_episode(43, g));
    auto a = generate_dataset(6, 9, g), b = generate_dataset(6, 9, g);
    CHECK(a == b);
  }

  TEST_CASE("shape and pixel range") {
    GeneratorConfig g;
    auto ep = generate_episode(1, g);
    REQUIRE(ep.frames.size() == 5);
    for (const auto& f : ep.frames) {
      REQUIRE(f.views.size() == 2);
      for (const auto& v : f.views) {
        CHECK(v.channels == 1);
        CHECK(v.height == 32);
        CHECK(v.width == 32);
        for (float p : v.pixels) CHECK((p >= 0.0f && p <= 1.0f));
      }
    }
  }

  TEST_CASE("class frequencies over 10,000 episodes") {
    auto g = small_generator();
    g.frames = 1;
    std::vector<std::size_t> count(5, 0);
    for (std::uint64_t i = 0; i < 10000; ++i) ++count[generate_episode(derive_seed(5, i), g).label];
    for (auto c : count) CHECK(std::abs(c / 10000.0 - 0.2) <= 0.015);
  }

  TEST_CASE("episodes never contradict their context") {
    auto g = small_generator();
    g.frames = 1;
    std::set<std::string> seen;
    for (std::uint64_t i = 0; i < 2000; ++i) {
      auto ep = generate_episode(derive_seed(6, i), g);
      CHECK_FALSE(rules::contradicts(g.rules, ep.label, ep.context));
      seen.insert(std::to_string(ep.label) + ep.context.str());
    }
    // every consistent (label, context) pair shows up: 8 + 4 + 4 + 3 + 3
    CHECK(seen.size() == 22);
  }

  TEST_CASE("context markers are drawn in the road view corners") {
    GeneratorConfig g;
    g.noise_sigma = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      auto ep = generate_episode(s, g);
      const auto& road = ep.frames[0].views[1];
      CHECK(road.at(0, 1, 1) == static_cast<float>(ep.context.bits[0]));
      CHECK(road.at(0, 1, 30) == static_cast<float>(ep.context.bits[1]));
      CHECK(road.at(0, 30, 1) == static_cast<float>(ep.context.bits[2]));
      CHECK(road.at(0, 30, 30) == static_cast<float>(ep.context.bits[2]));
    }
  }

  TEST_CASE("noise-free blob tracks the class drift") {
    GeneratorConfig g;
    g.noise_sigma = 0.0;
    for (std::uint64_t s = 0; s < 30; ++s) {
      auto ep = generate_episode(s, g);
      std::vector<double> centers;
      for (const auto& f : ep.frames) {
        const auto& cabin = f.views[0];
        double m = 0, mx = 0;
        for (std::size_t y = 0; y < 32; ++y)
          for (std::size_t x = 0; x < 32; ++x) {
            const double v = cabin.at(0, y, x) - g.blob_background;
            m += v;
            mx += v * (x + 0.5);
          }
        centers.push_back(mx / m);
      }
      for (std::size_t t = 1; t < centers.size(); ++t)
        CHECK(centers[t] - centers[t - 1] == doctest::Approx(g.drift[ep.label]).epsilon(0.02).scale(1.0));
    }
  }

  TEST_CASE("unsatisfiable ruleset is a configuration error") {
    GeneratorConfig g;
    g.rules = rules::parse_rules("go_straight : ***", rules::default_maneuvers());
    CHECK_THROWS_AS(generate_episode(1, g), ConfigError);
  }

  TEST_CASE("one frame cannot tell left_turn from left_lane_change by motion") {
    // Logistic regression on the pixels of a single frame at a fixed t, both
    // views, 1200 train and 600 test episodes of the two classes. The corner
    // markers are left out: the context alone separates these two classes
    // at the rate checked in the next case, and says nothing about drift.
    GeneratorConfig g;
    const std::size_t ms = g.marker_size, w = g.width, h = g.height;
    auto in_marker = [&](std::size_t y, std::size_t x) { return (y < ms || y >= h - ms) && (x < ms || x >= w - ms); };
    auto collect = [&](std::uint64_t base, std::size_t n, std::size_t t, std::vector<std::vector<double>>& x,
                       std::vector<int>& y) {
      for (std::uint64_t i = 0; x.size() < n; ++i) {
        auto ep = generate_episode(derive_seed(base, i), g);
        if (ep.label != 1 && ep.label != 2) continue;
        std::vector<double> row;
        for (const auto& v : ep.frames[t].views)
          for (std::size_t yy = 0; yy < h; ++yy)
            for (std::size_t xx = 0; xx < w; ++xx)
              if (!in_marker(yy, xx)) row.push_back(v.at(0, yy, xx) - 0.5);
        x.push_back(std::move(row));
        y.push_back(ep.label == 2);
      }
    };
    for (std::size_t t : {0u, 2u, 4u}) {
      std::vector<std::vector<double>> xtr, xte;
      std::vector<int> ytr, yte;
      collect(100, 1200, t, xtr, ytr);
      collect(200, 600, t, xte, yte);
      Logistic clf;
      clf.fit(xtr, ytr, 300, 0.05, 1e-3);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < xte.size(); ++i) correct += (clf.score(xte[i]) > 0) == static_cast<bool>(yte[i]);
      const double acc = static_cast<double>(correct) / xte.size();
      MESSAGE("frame " << t << " single-frame accuracy " << acc);
      CHECK(acc <= 0.75);
    }
  }

  TEST_CASE("the context alone separates left_turn from left_lane_change at 7/8") {
    // Consistent contexts: left_lane_change {000, 001, 010, 011}, left_turn
    // {001, 101, 111}; only 001 is shared, and it is likelier under left_turn.
    const auto S = rules::default_ruleset();
    double bayes = 0.0;
    for (const auto& c : rules::all_contexts(3)) {
      double p_llc = 0, p_lt = 0;
      const double n_llc = 4, n_lt = 3;
      if (!rules::contradicts(S, 1, c)) p_llc = 0.5 / n_llc;
      if (!rules::contradicts(S, 2, c)) p_lt = 0.5 / n_lt;
      bayes += std::max(p_llc, p_lt);
    }
    CHECK(bayes == doctest::Approx(0.875));
  }
}

TEST_SUITE("dataset files") {
  TEST_CASE("write then read is bitwise identical") {
    TempDir dir("roundtrip");
    auto eps = generate_dataset(7, 11, small_generator());
    auto written = write_dataset(eps, dir.path, rules::default_maneuvers(), "rules.txt");
    CHECK(written.size() == 7);
    auto back = read_dataset(dir.path);
    CHECK(back.manifest == written);
    CHECK(back.manifest.size() == eps.size());
    CHECK(back.manifest.rules_path == "rules.txt");
    CHECK(back.episodes == eps);
    CHECK(fs::exists(dir.path / "ep_0_view1.bin"));
  }

  TEST_CASE("a mutated magic byte is a format error naming the file") {
    TempDir dir("magic");
    write_dataset(generate_dataset(2, 12, small_generator()), dir.path, rules::default_maneuvers());
    const auto raster = dir.path / "ep_1_view0.bin";
    {
      std::fstream f(raster, std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(2);
      f.put('X');
    }
    try {
      read_dataset(dir.path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("ep_1_view0.bin") != std::string::npos);
    }
  }

  TEST_CASE("truncated payload and broken manifest") {
    TempDir dir("truncated");
    write_dataset(generate_dataset(2, 13, small_generator()), dir.path, rules::default_maneuvers());
    const auto raster = dir.path / "ep_0_view1.bin";
    fs::resize_file(raster, fs::file_size(raster) - 4);
    CHECK_THROWS_AS(read_raster(raster), FormatError);
    CHECK_THROWS_AS(read_dataset(dir.path), FormatError);
    std::ofstream(dir.path / "manifest.txt") << "not a manifest\n";
    CHECK_THROWS_AS(read_dataset(dir.path), FormatError);
    CHECK_THROWS_AS(read_dataset(dir.path / "missing"), FormatError);
  }
}

TEST_SUITE("kfold_split") {
  TEST_CASE("ten episodes into five folds of two") {
    auto split = kfold_split(balanced_manifest(2, 5), 5, 1);
    REQUIRE(split.ids.size() == 5);
    for (const auto& f : split.ids) CHECK(f.size() == 2);
  }

  TEST_CASE("folds partition, balance and stratify") {
    for (std::size_t n : {10u, 23u, 101u, 500u})
      for (std::size_t folds : {2u, 3u, 5u}) {
        DatasetManifest m;
        std::mt19937_64 rng(n * 7 + folds);
        for (std::size_t i = 0; i < n; ++i)
          m.entries.push_back({i, std::uniform_int_distribution<std::size_t>(0, 4)(rng), {}, 0, {}});
        auto split = kfold_split(m, folds, 3);
        std::multiset<std::uint64_t> all;
        std::size_t lo = n, hi = 0;
        for (const auto& f : split.ids) {
          all.insert(f.begin(), f.end());
          lo = std::min(lo, f.size());
          hi = std::max(hi, f.size());
        }
        CHECK(all.size() == n);
        CHECK(std::set<std::uint64_t>(all.begin(), all.end()).size() == n);
        CHECK(hi - lo <= 1);
        for (std::size_t c = 0; c < 5; ++c) {
          const double total = static_cast<double>(std::count_if(
              m.entries.begin(), m.entries.end(), [&](const ManifestEntry& e) { return e.label == c; }));
          for (const auto& f : split.ids) {
            const double in_fold = static_cast<double>(std::count_if(f.begin(), f.end(), [&](std::uint64_t id) {
              return m.entries[id].label == c;
            }));
            CHECK(std::abs(in_fold - total / folds) <= 1.0);
          }
        }
      }
  }

  TEST_CASE("deterministic under a fixed seed") {
    auto m = balanced_manifest(9, 5);
    CHECK(kfold_split(m, 5, 4).ids == kfold_split(m, 5, 4).ids);
    CHECK(kfold_split(m, 5, 4).ids != kfold_split(m, 5, 5).ids);
  }

  TEST_CASE("too few episodes") {
    CHECK_THROWS_AS(kfold_split(balanced_manifest(0, 5), 5, 1), ConfigError);
    CHECK_THROWS_AS(kfold_split(balanced_manifest(1, 4), 5, 1), ConfigError);
    CHECK_THROWS_AS(kfold_split(balanced_manifest(2, 5), 1, 1), ConfigError);
  }
}

TEST_SUITE("metrics") {
  TEST_CASE("perfect predictions") {
    std::vector<std::size_t> y{0, 1, 2, 3, 4, 2};
    CHECK(accuracy(y, y) == 1.0);
    CHECK(macro_f1(y, y, 5) == 1.0);
  }

  TEST_CASE("always class 0 on a balanced set") {
    std::vector<std::size_t> labels, preds;
    for (std::size_t i = 0; i < 100; ++i) {
      labels.push_back(i % 5);
      preds.push_back(0);
    }
    CHECK(accuracy(preds, labels) == doctest::Approx(0.2));
    CHECK(macro_f1(preds, labels, 5) == doctest::Approx((2 * 0.2 * 1.0 / 1.2) / 5));
    CHECK(macro_f1(preds, labels, 5) == doctest::Approx(0.0667).epsilon(1e-3));
  }

  TEST_CASE("three-class confusion against per-class counts") {
    const std::vector<std::size_t> labels{0, 0, 0, 1, 1, 2, 2, 2, 2, 1};
    const std::vector<std::size_t> preds{0, 1, 0, 1, 2, 2, 2, 0, 2, 1};
    // class 0: tp 2, fp 1, fn 1 -> P 2/3 R 2/3
    // class 1: tp 2, fp 1, fn 1 -> P 2/3 R 2/3
    // class 2: tp 3, fp 1, fn 1 -> P 3/4 R 3/4
    const double f1 = (2.0 / 3 + 2.0 / 3 + 3.0 / 4) / 3;
    CHECK(macro_f1(preds, labels, 3) == doctest::Approx(f1).epsilon(1e-14));
    auto s = class_scores(preds, labels, 3);
    CHECK(s.precision[2] == doctest::Approx(0.75));
    CHECK(s.recall[0] == doctest::Approx(2.0 / 3));
    CHECK(accuracy(preds, labels) == doctest::Approx(0.7));
  }

  TEST_CASE("random confusions against a counting oracle") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::size_t> labels(40), preds(40);
      for (auto& v : labels) v = rng() % 4;
      for (auto& v : preds) v = rng() % 4;
      double sum = 0;
      for (std::size_t c = 0; c < 4; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < 40; ++i) {
          tp += preds[i] == c && labels[i] == c;
          fp += preds[i] == c && labels[i] != c;
          fn += preds[i] != c && labels[i] == c;
        }
        const double p = tp + fp > 0 ? tp / (tp + fp) : 0, r = tp + fn > 0 ? tp / (tp + fn) : 0;
        sum += p + r > 0 ? 2 * p * r / (p + r) : 0;
      }
      CHECK(macro_f1(preds, labels, 4) == doctest::Approx(sum / 4).epsilon(1e-12));
    }
  }

  TEST_CASE("empty input") {
    CHECK_THROWS_AS(accuracy({}, {}), ContractError);
    CHECK_THROWS_AS(macro_f1({}, {}, 5), ContractError);
    CHECK_THROWS_AS(accuracy({1}, {1, 2}), ContractError);
  }

  TEST_CASE("contradiction rate") {
    const auto S = rules::default_ruleset();
    using rules::ContextVector;
    CHECK(contradiction_rate({0, 0}, {ContextVector::from_string("100"), ContextVector::from_string("000")}, S) == 0.0);
    CHECK(contradiction_rate({1}, {ContextVector::from_string("100")}, S) == 1.0);
    std::mt19937_64 rng(9);
    auto contexts = rules::all_contexts(3);
    std::vector<std::size_t> preds;
    std::vector<ContextVector> cs;
    double hits = 0;
    for (int i = 0; i < 500; ++i) {
      preds.push_back(rng() % 5);
      cs.push_back(contexts[rng() % 8]);
      for (const auto& r : S.rules)
        if (r.maneuver == preds.back() && rules::matches(r.pattern, cs.back())) {
          hits += 1;
          break;
        }
    }
    CHECK(contradiction_rate(preds, cs, S) == doctest::Approx(hits / 500));
  }

  TEST_CASE("anticipation time") {
    CHECK(anticipation_time({2, 2, 2, 2, 2}, 2) == 4u);
    CHECK(anticipation_time({0, 1, 0, 0, 2}, 2) == 0u);
    CHECK(anticipation_time({0, 3, 3}, 3) == 1u);
    CHECK(anticipation_time({3, 0, 3}, 3) == 0u);
    CHECK_FALSE(anticipation_time({3, 3, 0}, 3).has_value());
  }

  TEST_CASE("summaries use the sample standard deviation") {
    auto s = summarize({1.0, 2.0, 3.0, 4.0});
    CHECK(s.mean == 2.5);
    CHECK(s.sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(summarize({0.7}).sd == 0.0);
  }

  TEST_CASE("report text has one row per fold and an average line") {
    MetricsReport r;
    for (double a : {0.9, 0.8, 0.85, 0.95, 0.7}) r.folds.push_back({a, a - 0.1, 0.0, 1.0, 10, {}, {}});
    r.finalize();
    CHECK(r.accuracy.mean == doctest::Approx(0.84));
    const auto text = r.to_text();
    CHECK(std::count(text.begin(), text.end(), '\n') >= 6);
    CHECK(text.find("AVG") != std::string::npos);
  }

  TEST_CASE("evaluate_predictions ties the pieces together") {
    const std::vector<std::vector<std::size_t>> tracks{{0, 0, 0}, {1, 1, 3}, {2, 4, 4}};
    const std::vector<std::size_t> labels{0, 3, 4};
    const std::vector<rules::ContextVector> cs(3, rules::ContextVector::from_string("001"));
    auto m = evaluate_predictions(tracks, labels, cs, rules::default_ruleset(), 5);
    CHECK(m.accuracy == 1.0);
    CHECK(m.anticipated == 3);
    CHECK(m.anticipation == doctest::Approx((2.0 + 0.0 + 1.0) / 3));
    CHECK(m.contradiction_rate == 0.0);
  }
}
