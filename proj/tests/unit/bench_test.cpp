#include "equidesc/bench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "equidesc/orient.hpp"

namespace equidesc {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("equidesc_bench_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void WriteText(const std::string& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

std::string ReadBytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename F>
std::string ErrorOf(F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

PointCloud RandomCloud(Rng& rng, int n, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  PointCloud c;
  for (int i = 0; i < n; ++i) c.points.emplace_back(u(rng), u(rng), u(rng));
  return c;
}

Descriptor Vector(std::vector<double> v) {
  Descriptor d;
  d.bandwidth = 0;
  d.values = std::move(v);
  return d;
}

TEST(CloudIo, AsciiPlyThreePoints) {
  TempDir dir;
  WriteText(dir.file("a.ply"),
            "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
            "1 2 3\n-0.5 0.25 4\n0 0 1e-3\n");
  const PointCloud c = load_cloud(dir.file("a.ply"));
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.points[0], Vec3(1, 2, 3));
  EXPECT_EQ(c.points[1], Vec3(-0.5, 0.25, 4));
  EXPECT_EQ(c.points[2], Vec3(0, 0, static_cast<float>(1e-3)));
  EXPECT_FALSE(c.has_normals());
}

TEST(CloudIo, BinaryPlyRoundTripIsBitwise) {
  TempDir dir;
  Rng rng(1);
  PointCloud c = RandomCloud(rng, 500);
  for (const Vec3& p : c.points) c.normals.push_back(p.normalized());
  c.sensor_origin = Vec3(0.1, -0.2, 1.7);
  save_cloud(c, dir.file("a.ply"));
  const PointCloud back = load_cloud(dir.file("a.ply"));
  save_cloud(back, dir.file("b.ply"));
  EXPECT_EQ(ReadBytes(dir.file("a.ply")), ReadBytes(dir.file("b.ply")));
  ASSERT_EQ(back.size(), c.size());
  ASSERT_TRUE(back.has_normals());
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (int a = 0; a < 3; ++a) ASSERT_EQ(back.points[i](a), static_cast<float>(c.points[i](a)));
  }
  ASSERT_TRUE(back.sensor_origin.has_value());
  EXPECT_EQ(*back.sensor_origin, *c.sensor_origin);
}

TEST(CloudIo, AsciiAndXyzMatchBinary) {
  TempDir dir;
  Rng rng(2);
  const PointCloud c = RandomCloud(rng, 200);
  save_cloud(c, dir.file("bin.ply"));
  save_cloud(c, dir.file("txt.ply"), PlyEncoding::kAscii);
  save_cloud(c, dir.file("pts.xyz"));
  const PointCloud a = load_cloud(dir.file("bin.ply"));
  EXPECT_EQ(load_cloud(dir.file("txt.ply")).points, a.points);
  EXPECT_EQ(load_cloud(dir.file("pts.xyz")).points, a.points);
}

TEST(CloudIo, ElementCountMismatch) {
  TempDir dir;
  std::string text = "ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\n"
                     "property float y\nproperty float z\nend_header\n";
  for (int i = 0; i < 9; ++i) text += "0 0 " + std::to_string(i) + "\n";
  WriteText(dir.file("short.ply"), text);
  EXPECT_NE(ErrorOf([&] { load_cloud(dir.file("short.ply")); }).find("element count mismatch"),
            std::string::npos);

  Rng rng(3);
  save_cloud(RandomCloud(rng, 10), dir.file("full.ply"));
  std::string bytes = ReadBytes(dir.file("full.ply"));
  bytes.resize(bytes.size() - 12);
  WriteText(dir.file("cut.ply"), bytes);
  const std::string msg = ErrorOf([&] { load_cloud(dir.file("cut.ply")); });
  EXPECT_NE(msg.find("element count mismatch"), std::string::npos);
  EXPECT_NE(msg.find("offset"), std::string::npos);
}

TEST(CloudIo, MalformedHeadersReportTheLine) {
  TempDir dir;
  WriteText(dir.file("d.ply"),
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\n"
            "property float y\nproperty float z\nend_header\n0 0 0\n");
  std::string msg = ErrorOf([&] { load_cloud(dir.file("d.ply")); });
  EXPECT_NE(msg.find("non-float property type"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 4"), std::string::npos) << msg;

  WriteText(dir.file("m.ply"), "plx\nformat ascii 1.0\n");
  msg = ErrorOf([&] { load_cloud(dir.file("m.ply")); });
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;

  WriteText(dir.file("e.ply"), "ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n");
  EXPECT_THROW(load_cloud(dir.file("e.ply")), CloudFormatError);

  WriteText(dir.file("cloud.pcd"), "");
  msg = ErrorOf([&] { load_cloud(dir.file("cloud.pcd")); });
  EXPECT_NE(msg.find("unknown format"), std::string::npos) << msg;

  WriteText(dir.file("bad.xyz"), "1 2 3\n4 5\n");
  msg = ErrorOf([&] { load_cloud(dir.file("bad.xyz")); });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
}

TEST(CloudIo, PoseRoundTripIsExact) {
  TempDir dir;
  Rng rng(4);
  const Mat4 t = make_transform(sample_uniform_rotation(rng).to_matrix(), Vec3(0.1, 1.0 / 3.0, -2.5));
  save_pose(t, dir.file("p.pose"));
  EXPECT_EQ(load_pose(dir.file("p.pose")), t);
  WriteText(dir.file("q.pose"), "1 0 0\n");
  EXPECT_THROW(load_pose(dir.file("q.pose")), CloudFormatError);
}

TEST(KdTree, MatchesBruteForce) {
  Rng rng(5);
  PointCloud c = RandomCloud(rng, 700);
  for (int i = 0; i < 50; ++i) c.points.push_back(c.points[i]);  // duplicates create ties
  const KdTree tree(c.points);
  for (int q = 0; q < 200; ++q) {
    const Vec3 p = q < 50 ? c.points[q] : RandomCloud(rng, 1).points[0];
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < c.size(); ++i) all.emplace_back((c.points[i] - p).squaredNorm(), i);
    std::sort(all.begin(), all.end());
    EXPECT_EQ(tree.nearest(p), all[0].second);
    const std::vector<std::size_t> k = tree.knn(p, 9);
    ASSERT_EQ(k.size(), 9u);
    for (int i = 0; i < 9; ++i) EXPECT_EQ(k[i], all[i].second);
    std::vector<std::size_t> ball;
    for (const auto& [d2, i] : all) {
      if (d2 <= 0.3 * 0.3) ball.push_back(i);
    }
    std::sort(ball.begin(), ball.end());
    EXPECT_EQ(tree.radius_search(p, 0.3), ball);
  }
  EXPECT_THROW(KdTree({}).nearest(Vec3::Zero()), InvalidArgument);
}

TEST(VoxelDownsample, TwoPointsInOneVoxelGiveTheirMidpoint) {
  PointCloud c;
  c.points = {Vec3(0.001, 0.002, 0.003), Vec3(0.011, 0.012, 0.013)};
  const PointCloud d = voxel_downsample(c, 0.02);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_LT((d.points[0] - Vec3(0.006, 0.007, 0.008)).norm(), 1e-15);
}

TEST(VoxelDownsample, SparseGridIsUnchanged) {
  PointCloud c;
  for (int i = 2; i >= 0; --i) {
    for (int j = 0; j < 3; ++j) c.points.emplace_back(0.05 * i + 0.01, 0.05 * j + 0.01, 0.01);
  }
  const PointCloud d = voxel_downsample(c, 0.02);
  std::vector<Vec3> a = c.points, b = d.points;
  auto less = [](const Vec3& x, const Vec3& y) {
    return std::lexicographical_compare(x.data(), x.data() + 3, y.data(), y.data() + 3);
  };
  std::sort(a.begin(), a.end(), less);
  std::sort(b.begin(), b.end(), less);
  EXPECT_EQ(a, b);
}

TEST(VoxelDownsample, OutputStaysNearInputAndIsIdempotent) {
  Rng rng(6);
  const PointCloud c = RandomCloud(rng, 10000, 0.5);
  const double voxel = 0.05;
  const PointCloud d = voxel_downsample(c, voxel);
  const KdTree tree(c.points);
  for (const Vec3& p : d.points) {
    double d2 = 0.0;
    tree.nearest(p, &d2);
    EXPECT_LE(std::sqrt(d2), voxel * std::sqrt(3.0) / 2.0);
  }
  // Centroids of distinct voxels stay in their voxel, so a second pass is a no-op.
  const PointCloud twice = voxel_downsample(d, voxel);
  EXPECT_EQ(twice.points, d.points);
  EXPECT_THROW(voxel_downsample(c, 0.0), InvalidArgument);
}

TEST(Normals, PlaneFacesViewpoint) {
  PointCloud c;
  for (int i = 0; i < 20; ++i) {
    for (int j = 0; j < 20; ++j) c.points.emplace_back(0.01 * i, 0.013 * j, 0.0);
  }
  const PointCloud n = estimate_normals(c, 17, Vec3(0, 0, 1));
  for (const Vec3& v : n.normals) EXPECT_LT((v - Vec3::UnitZ()).norm(), 1e-6);
}

TEST(Normals, SpherePointsOutward) {
  Rng rng(7);
  std::normal_distribution<double> g(0.0, 1.0);
  PointCloud c;
  for (int i = 0; i < 3000; ++i) c.points.push_back(Vec3(g(rng), g(rng), g(rng)).normalized());
  const PointCloud n = estimate_normals(c, 17);
  int outward = 0;
  for (std::size_t i = 0; i < c.size(); ++i) outward += n.normals[i].dot(c.points[i]) > 0.0;
  EXPECT_GE(outward, static_cast<int>(0.99 * c.size()));
}

TEST(Normals, CollinearPointsGiveADeterministicOrthogonalNormal) {
  PointCloud c;
  c.points = {Vec3(0, 0, 0), Vec3(1, 1, 0), Vec3(2, 2, 0)};
  const PointCloud a = estimate_normals(c, 3);
  const PointCloud b = estimate_normals(c, 3);
  const Vec3 line = Vec3(1, 1, 0).normalized();
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(a.normals[i].norm(), 1.0, 1e-12);
    EXPECT_NEAR(a.normals[i].dot(line), 0.0, 1e-12);
    EXPECT_EQ(a.normals[i], b.normals[i]);
  }
  EXPECT_THROW(estimate_normals(c, 4), InvalidArgument);
  EXPECT_THROW(estimate_normals(c, 2), InvalidArgument);
}

TEST(Keypoints, AllIndicesAndReproducible) {
  Rng rng(8);
  const PointCloud c = RandomCloud(rng, 100);
  Rng a(3), b(3);
  std::vector<std::size_t> all = sample_keypoints(c, 100, a);
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(all[i], i);
  Rng c1(9), c2(9);
  EXPECT_EQ(sample_keypoints(c, 30, c1), sample_keypoints(c, 30, c2));
  EXPECT_THROW(sample_keypoints(c, 101, a), InvalidArgument);
}

TEST(Keypoints, OctantCountsAreUniform) {
  Rng rng(10);
  const PointCloud c = RandomCloud(rng, 80000);
  std::array<double, 8> expected{}, observed{};
  for (const Vec3& p : c.points) {
    expected[(p.x() > 0) + 2 * (p.y() > 0) + 4 * (p.z() > 0)] += 1.0;
  }
  const std::size_t n = 8000;
  for (std::size_t i : sample_keypoints(c, n, rng)) {
    const Vec3& p = c.points[i];
    observed[(p.x() > 0) + 2 * (p.y() > 0) + 4 * (p.z() > 0)] += 1.0;
  }
  double chi2 = 0.0;
  for (int o = 0; o < 8; ++o) {
    const double e = expected[o] * n / c.size();
    chi2 += (observed[o] - e) * (observed[o] - e) / e;
  }
  const boost::math::chi_squared dist(7);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01);
}

FragmentPair PlanarPair(double shift) {
  FragmentPair p;
  for (int i = 0; i < 50; ++i) {
    for (int j = 0; j < 50; ++j) {
      p.source.points.emplace_back(0.02 * i, 0.02 * j, 0.0);
      p.target.points.emplace_back(0.02 * i + shift, 0.02 * j, 0.0);
    }
  }
  return p;
}

TEST(Overlap, Examples) {
  FragmentPair same = PlanarPair(0.0);
  EXPECT_EQ(compute_overlap(same), 1.0);
  FragmentPair far = PlanarPair(0.0);
  far.gt_pose = make_transform(Mat3::Identity(), Vec3(0.0, 0.0, 1.0));
  EXPECT_EQ(compute_overlap(far, 0.05), 0.0);
  // Half the columns coincide; the 5 cm band adds at most 3 columns of 50.
  EXPECT_NEAR(compute_overlap(PlanarPair(0.5), 0.05), 0.5, 0.02 + 0.06);
  EXPECT_NEAR(compute_overlap(PlanarPair(0.5), 0.01), 0.5, 0.02);
  FragmentPair empty;
  EXPECT_THROW(compute_overlap(empty), InvalidArgument);
}

TEST(Matching, IdentityListsMatchThemselves) {
  Rng rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Descriptor> a;
  for (int i = 0; i < 40; ++i) a.push_back(Vector({g(rng), g(rng), g(rng), g(rng)}));
  const std::vector<Correspondence> m = match_keypoints(a, a, true);
  ASSERT_EQ(m.size(), a.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(m[i].source, i);
    EXPECT_EQ(m[i].target, i);
  }
}

TEST(Matching, TiesGoToTheLowestIndex) {
  const std::vector<Descriptor> a{Vector({0.0, 0.0})};
  const std::vector<Descriptor> b{Vector({5.0, 5.0}), Vector({1.0, 0.0}), Vector({0.0, 1.0})};
  const std::vector<Correspondence> m = match_keypoints(a, b);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].target, 1u);
  EXPECT_THROW(match_keypoints({}, b), InvalidArgument);
}

TEST(Matching, AgreesWithBruteForceForAnyThreadCount) {
  Rng rng(12);
  std::normal_distribution<double> g(0.0, 1.0);
  auto random_list = [&](int n) {
    std::vector<Descriptor> out;
    for (int i = 0; i < n; ++i) {
      std::vector<double> v(16);
      for (double& x : v) x = g(rng);
      out.push_back(Vector(v));
    }
    return out;
  };
  const std::vector<Descriptor> a = random_list(300), b = random_list(250);
  const std::vector<Correspondence> m = match_keypoints(a, b, false, 1);
  ASSERT_EQ(m.size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < b.size(); ++j) {
      if (descriptor_distance(a[i], b[j]) < descriptor_distance(a[i], b[best])) best = j;
    }
    EXPECT_EQ(m[i].target, best);
  }
  const std::vector<Correspondence> m3 = match_keypoints(a, b, false, 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(m3[i].target, m[i].target);
  // Mutual matching keeps exactly the reciprocal pairs.
  const std::vector<Correspondence> back = match_keypoints(b, a);
  const std::vector<Correspondence> mutual = match_keypoints(a, b, true);
  std::size_t expected = 0;
  for (std::size_t i = 0; i < a.size(); ++i) expected += back[m[i].target].target == i;
  EXPECT_EQ(mutual.size(), expected);
}

// Keypoints on a shared plane; the target frame is a rigid motion away.
PairDescriptors OraclePair(Rng& rng, int n, double quantum) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PairDescriptors p;
  p.gt_pose = make_transform(sample_uniform_rotation(rng).to_matrix(), Vec3(0.3, -0.2, 1.0));
  const Mat4 inv = rigid_inverse(p.gt_pose);
  auto oracle = [&](const Vec3& world) {
    std::vector<double> v(3);
    for (int a = 0; a < 3; ++a) v[a] = quantum * std::round(world(a) / quantum);
    return Vector(v);
  };
  for (int i = 0; i < n; ++i) {
    const Vec3 s(u(rng), u(rng), 0.0);
    const Vec3 t(u(rng) + 0.3, u(rng), 0.0);
    p.source_keypoints.push_back(s);
    p.source_descriptors.push_back(oracle(s));
    p.target_keypoints.push_back(transform_point(inv, t));
    p.target_descriptors.push_back(oracle(t));
  }
  p.overlap = 0.7;
  return p;
}

TEST(Recall, PerfectOracleDescriptorsRegisterEveryPair) {
  Rng rng(13);
  std::vector<PairDescriptors> pairs;
  for (int i = 0; i < 5; ++i) pairs.push_back(OraclePair(rng, 400, 0.01));
  const RecallResult r = registration_recall(pairs, EvalConfig{});
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.evaluated, 5u);
  ASSERT_EQ(r.curve.size(), 20u);
  EXPECT_DOUBLE_EQ(r.curve.front().first, 0.01);
  EXPECT_DOUBLE_EQ(r.curve.back().first, 0.20);
}

TEST(Recall, RandomDescriptorsRegisterNothing) {
  Rng rng(14);
  std::normal_distribution<double> g(0.0, 1.0);
  PairDescriptors p = OraclePair(rng, 5000, 0.01);
  for (auto* list : {&p.source_descriptors, &p.target_descriptors}) {
    for (Descriptor& d : *list) {
      d.values.resize(16);
      for (double& v : d.values) v = g(rng);
    }
  }
  const RecallResult r = registration_recall({p}, EvalConfig{});
  EXPECT_EQ(r.recall, 0.0);
  EXPECT_LT(r.pairs[0].inlier_ratio, 0.05);
}

TEST(Recall, SweepIsNonIncreasingAndLowOverlapIsSkipped) {
  Rng rng(15);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<PairDescriptors> pairs;
  for (int i = 0; i < 8; ++i) {
    PairDescriptors p = OraclePair(rng, 200, 0.01);
    // Corrupt a varying share of the source descriptors.
    for (int k = 0; k < 25 * i; ++k) {
      for (double& v : p.source_descriptors[k].values) v = 10.0 + g(rng);
    }
    pairs.push_back(p);
  }
  pairs[7].overlap = 0.1;
  const RecallResult r = registration_recall(pairs, EvalConfig{});
  EXPECT_EQ(r.evaluated, 7u);
  EXPECT_FALSE(r.pairs[7].evaluated);
  for (std::size_t i = 1; i < r.curve.size(); ++i) {
    EXPECT_LE(r.curve[i].second, r.curve[i - 1].second);
  }
}

TEST(Recall, TinyTau2CountsAnyCorrectMatch) {
  PairDescriptors p;
  p.overlap = 1.0;
  for (int i = 0; i < 100; ++i) {
    p.source_keypoints.push_back(Vec3(i, 0, 0));
    p.target_keypoints.push_back(Vec3(i, 0, 0));
    p.source_descriptors.push_back(Vector({static_cast<double>(i)}));
    // Only keypoint 0 maps onto itself; everything else matches far away.
    p.target_descriptors.push_back(Vector({i == 0 ? 0.0 : 1000.0 + i}));
  }
  EvalConfig cfg;
  cfg.tau2 = 1e-9;
  EXPECT_EQ(registration_recall({p}, cfg).recall, 1.0);
}

TEST(Recall, Errors) {
  Rng rng(16);
  PairDescriptors p = OraclePair(rng, 10, 0.01);
  p.overlap = 0.2;
  EXPECT_THROW(registration_recall({p}, EvalConfig{}), InvalidArgument);
  p.overlap = 0.9;
  p.source_descriptors.pop_back();
  EXPECT_THROW(registration_recall({p}, EvalConfig{}), InvalidArgument);
}

TEST(RotatedBenchmark, IdentitySamplerLeavesPairsUnchanged) {
  Rng rng(17);
  SceneSpec spec;
  spec.pairs = 2;
  spec.points = 500;
  const std::vector<FragmentPair> pairs = generate_synthetic_scene(rng, spec);
  const auto same = make_rotated_benchmark(pairs, [] { return RotationZYZ::Identity(); });
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(same[i].source.points, pairs[i].source.points);
    EXPECT_EQ(same[i].target.points, pairs[i].target.points);
    EXPECT_EQ(same[i].gt_pose, pairs[i].gt_pose);
  }
}

Vec3 Centroid(const PointCloud& c) {
  Vec3 m = Vec3::Zero();
  for (const Vec3& p : c.points) m += p;
  return m / static_cast<double>(c.size());
}

TEST(RotatedBenchmark, PosesStayConsistent) {
  Rng rng(18);
  SceneSpec spec;
  spec.pairs = 3;
  spec.points = 3000;
  const std::vector<FragmentPair> pairs = generate_synthetic_scene(rng, spec);
  std::vector<Mat3> drawn;
  const std::vector<FragmentPair> rotated = make_rotated_benchmark(pairs, [&] {
    const RotationZYZ r = sample_uniform_rotation(rng);
    drawn.push_back(r.to_matrix());
    return r;
  });
  ASSERT_EQ(drawn.size(), 2 * pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const FragmentPair& a = pairs[i];
    const FragmentPair& b = rotated[i];
    const Mat3& rs = drawn[2 * i];
    const Mat3& rt = drawn[2 * i + 1];
    const Vec3 cs = Centroid(a.source), ct = Centroid(a.target);
    const Mat4 as = make_transform(rs, cs - rs * cs);
    const Mat4 at = make_transform(rt, ct - rt * ct);
    EXPECT_LT(orthogonality_residual(b.gt_pose.topLeftCorner<3, 3>()), 1e-9);
    EXPECT_NEAR(compute_overlap(b), compute_overlap(a), 1e-6);
    for (std::size_t k = 0; k < 50; ++k) {
      const Vec3& p = a.target.points[k];
      const Vec3 lhs = transform_point(b.gt_pose, transform_point(at, p));
      const Vec3 rhs = transform_point(as, transform_point(a.gt_pose, p));
      EXPECT_LT((lhs - rhs).norm(), 1e-9);
      EXPECT_LT((b.target.points[k] - transform_point(at, p)).norm(), 1e-12);
    }
  }
}

TEST(SyntheticScene, FullOverlapWithoutNoise) {
  Rng rng(19);
  SceneSpec spec;
  spec.pairs = 2;
  spec.points = 6000;
  spec.noise = 0.0;
  spec.overlap = 1.0;
  for (const FragmentPair& p : generate_synthetic_scene(rng, spec)) {
    EXPECT_NEAR(compute_overlap(p), 1.0, 1e-6);
    EXPECT_LT(orthogonality_residual(p.gt_pose.topLeftCorner<3, 3>()), 1e-6);
    ASSERT_TRUE(p.source.sensor_origin && p.target.sensor_origin);
  }
}

TEST(SyntheticScene, RequestedOverlapIsMet) {
  Rng rng(20);
  SceneSpec spec;
  spec.pairs = 4;
  spec.points = 6000;
  spec.overlap = 0.5;
  for (const FragmentPair& p : generate_synthetic_scene(rng, spec)) {
    EXPECT_NEAR(p.overlap, 0.5, 0.1);
    EXPECT_EQ(p.overlap, compute_overlap(p));
  }
  spec.overlap = 1.2;
  EXPECT_THROW(generate_synthetic_scene(rng, spec), InvalidArgument);
}

TEST(SyntheticScene, FixedSeedWritesIdenticalFiles) {
  TempDir one, two;
  SceneSpec spec;
  spec.pairs = 2;
  spec.points = 800;
  Rng a(21), b(21);
  save_scene(generate_synthetic_scene(a, spec), one.path().string());
  save_scene(generate_synthetic_scene(b, spec), two.path().string());
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(one.path())) names.push_back(e.path().filename());
  EXPECT_EQ(names.size(), 7u);  // 4 clouds, 2 poses, index
  for (const std::string& n : names) {
    EXPECT_EQ(ReadBytes(one.file(n)), ReadBytes(two.file(n))) << n;
  }
  const std::vector<FragmentPair> loaded = load_scene(one.path().string());
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[0].source.size(), 800u);
  EXPECT_TRUE(loaded[1].target.sensor_origin.has_value());
}

TEST(Preprocess, DownsamplesAndOrientsNormalsTowardTheSensor) {
  Rng rng(22);
  SceneSpec spec;
  spec.pairs = 1;
  spec.points = 20000;
  const FragmentPair p = generate_synthetic_scene(rng, spec)[0];
  const PointCloud c = preprocess(p.source, EvalConfig{});
  EXPECT_LT(c.size(), p.source.size());
  ASSERT_TRUE(c.has_normals());
  int facing = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    facing += c.normals[i].dot(*c.sensor_origin - c.points[i]) > 0.0;
  }
  EXPECT_EQ(facing, static_cast<int>(c.size()));
}

}  // namespace
}  // namespace equidesc
