#include "oracles.hpp"

#include "terrafit/error.hpp"
#include "terrafit/field_model.hpp"
#include "terrafit/simulate.hpp"

#include <doctest.h>

#include <sstream>

using namespace terrafit;

TEST_CASE("csv: one row per layer groups into three datasets") {
  std::istringstream in(
      "cell,layer,x,y,direction,rmv\n"
      "27,1,1.0,2.0,0,20.5\n"
      "27,2,1.5,2.5,1,21.5\n"
      "27,3,2.0,3.0,0,22.5\n");
  const auto data = read_rmv_csv(in);
  REQUIRE(data.size() == 3);
  for (int t = 1; t <= 3; ++t) {
    const auto& ds = data.at({"27", t});
    CHECK(ds.size() == 1);
    CHECK(layer_number(ds.layer) == t);
  }
  CHECK(data.at({"27", 2}).records[0].direction == 1);
  CHECK(data.at({"27", 3}).records[0].value == 22.5);
}

TEST_CASE("csv: columns located by header name, CRLF and BOM accepted") {
  std::istringstream in(
      "\xEF\xBB\xBFrmv,x,y,cell,direction,layer\r\n"
      "19.25,3,4,A,1,2\r\n");
  const auto data = read_rmv_csv(in);
  const auto& r = data.at({"A", 2}).records.at(0);
  CHECK(r.x == 3.0);
  CHECK(r.y == 4.0);
  CHECK(r.value == 19.25);
  CHECK(r.direction == 1);
}

TEST_CASE("csv: invalid rows report their line") {
  SUBCASE("layer 4") {
    std::istringstream in("cell,layer,x,y,direction,rmv\n1,1,0,0,0,1\n1,4,0,0,0,1\n");
    try {
      read_rmv_csv(in);
      FAIL("expected an error");
    } catch (const InputError& e) {
      CHECK(e.line() == 3);
      CHECK(std::string(e.what()).find("4") != std::string::npos);
    }
  }
  SUBCASE("direction 2") {
    std::istringstream in("cell,layer,x,y,direction,rmv\n1,1,0,0,2,1\n");
    CHECK_THROWS_AS(read_rmv_csv(in), InputError);
  }
  SUBCASE("non-numeric value") {
    std::istringstream in("cell,layer,x,y,direction,rmv\n1,1,0,zero,0,1\n");
    try {
      read_rmv_csv(in);
      FAIL("expected an error");
    } catch (const InputError& e) {
      CHECK(e.line() == 2);
    }
  }
  SUBCASE("missing column") {
    std::istringstream in("cell,layer,x,y,rmv\n1,1,0,0,1\n");
    CHECK_THROWS_AS(read_rmv_csv(in), InputError);
  }
}

TEST_CASE("csv: simulated 2 cells x 3 layers keep every row and round-trip") {
  SimulationSpec spec;
  spec.x_max = 60.0;
  spec.y_max = 6.0;
  spec.lanes = 4;
  spec.along_track = 0.24;  // 251 points per lane
  spec.params.assign(3, {0.2, 1.0, 1.0});
  std::vector<LayerDataset> all;
  for (const char* cell : {"A", "B"}) {
    spec.cell = cell;
    spec.seed = cell[0];
    for (auto& ds : simulate(spec).datasets) all.push_back(std::move(ds));
  }
  std::vector<const LayerDataset*> ptrs;
  Index total = 0;
  for (const auto& ds : all) {
    ptrs.push_back(&ds);
    total += ds.size();
  }
  CHECK(total == 6 * 4 * 251);

  std::stringstream first;
  write_rmv_csv(first, ptrs);
  const auto loaded = read_rmv_csv(first);
  CHECK(loaded.size() == 6);
  Index sum = 0;
  for (const auto& [key, ds] : loaded) sum += ds.size();
  CHECK(sum == total);

  std::vector<const LayerDataset*> again;
  for (const auto& [key, ds] : loaded) again.push_back(&ds);
  std::stringstream second;
  write_rmv_csv(second, again);
  const auto reloaded = read_rmv_csv(second);
  std::stringstream third;
  std::vector<const LayerDataset*> thrice;
  for (const auto& [key, ds] : reloaded) thrice.push_back(&ds);
  write_rmv_csv(third, thrice);
  CHECK(second.str() == third.str());
  for (const auto& [key, ds] : loaded) {
    const auto& other = reloaded.at(key);
    REQUIRE(other.size() == ds.size());
    for (Index r = 0; r < ds.size(); ++r) {
      CHECK(other.records[static_cast<std::size_t>(r)].value ==
            ds.records[static_cast<std::size_t>(r)].value);
    }
  }
}

TEST_CASE("subsurface split at the cell boundary") {
  std::istringstream in(
      "cell,layer,x,y,direction,rmv\n"
      "S,1,10,1,0,20\n"
      "S,1,60,1,0,21\n"
      "S,2,10,1,0,22\n");
  const auto split = split_subsurface(read_rmv_csv(in), "S", 50.0, "L", "R");
  CHECK(split.at({"L", 1}).records.at(0).x == 10.0);
  CHECK(split.at({"R", 1}).records.at(0).x == 60.0);
  CHECK(split.at({"S", 2}).size() == 1);
  CHECK(split.count({"S", 1}) == 0);
}

TEST_CASE("build_grid node counts") {
  const auto g = build_grid(0, 300, 0, 15, 0.5, 0.5);
  CHECK(g.nx == 601);
  CHECK(g.ny == 31);
  CHECK(g.size() == 18631);
  const auto unit = build_grid(0, 1, 0, 1, 1, 1);
  CHECK(unit.size() == 4);
  const auto coarse = build_grid(0, 10, 0, 10, 3, 3);
  CHECK(coarse.nx == 5);
  CHECK(coarse.ny == 5);
  CHECK_THROWS_AS(build_grid(0, 1, 0, 1, 0, 1), Error);
  CHECK_THROWS_AS(build_grid(1, 1, 0, 1, 1, 1), Error);
}

TEST_CASE("grid index bijection") {
  const auto g = build_grid(0, 4, 0, 2, 1, 1);
  for (Index k = 0; k < g.size(); ++k) CHECK(g.node(g.column_of(k), g.row_of(k)) == k);
}

namespace {
LayerDataset points(const std::vector<std::pair<double, double>>& xy) {
  LayerDataset ds;
  for (const auto& [x, y] : xy) ds.records.push_back({"1", Layer::subsurface, x, y, 0, 0.0});
  return ds;
}
}  // namespace

TEST_CASE("incidence: exact nodes, ties and snapping") {
  const auto g = build_grid(0, 3, 0, 2, 1, 1);  // 4 x 3
  SUBCASE("observation on a node") {
    const auto h = build_incidence(points({{2, 1}}), g);
    CHECK(h.column(0) == g.node(2, 1));
  }
  SUBCASE("midpoint of four nodes goes to the smallest index") {
    const auto h = build_incidence(points({{1.5, 0.5}}), g);
    CHECK(h.column(0) == g.node(1, 0));
  }
  SUBCASE("half a cell outside snaps, further out fails") {
    const auto h = build_incidence(points({{-0.4, 2.45}}), g);
    CHECK(h.column(0) == g.node(0, 2));
    CHECK_THROWS_AS(build_incidence(points({{-0.7, 1.0}}), g), InputError);
  }
}

TEST_CASE("incidence agrees with the exhaustive nearest-node scan") {
  std::mt19937_64 rng(11);
  for (const double spacing : {0.5, 0.7, 1.0}) {
    const auto g = build_grid(0, 9.3, -2, 4.1, spacing, spacing * 1.3);
    const auto ds = oracle::random_dataset(g, 100, rng);
    std::vector<std::pair<double, double>> xy;
    for (const auto& r : ds.records) xy.emplace_back(r.x, r.y);
    const auto want = oracle::brute_nearest(g, xy);
    const auto h = build_incidence(ds, g);
    for (Index r = 0; r < h.rows(); ++r) CHECK(h.column(r) == want[static_cast<std::size_t>(r)]);
    const Eigen::MatrixXd dense = h.matrix();
    CHECK((dense.rowwise().sum().array() == 1.0).all());
  }
}

TEST_CASE("design: centred record, half-range scaling, rank") {
  SUBCASE("record at the centre") {
    auto ds = points({{150, 7.5}});
    ds.records[0].direction = 1;
    const ScalingSpec s{150.0, 7.5, 150.0, 7.5};
    const auto d = build_design(ds, s);
    Eigen::RowVectorXd want(6);
    want << 1, 0, 0, 0, 0, 1;
    CHECK(d.values.row(0) == want);
  }
  SUBCASE("x in {0, 300} maps to -1 and +1") {
    const auto d = build_design(points({{0, 0}, {300, 15}}));
    CHECK(d.values(0, 1) == -1.0);
    CHECK(d.values(1, 1) == 1.0);
    CHECK(d.values(1, 3) == 1.0);
    CHECK(d.values(0, 4) == -1.0);
  }
  SUBCASE("20 random records have full rank, auto then fixed scaling is idempotent") {
    std::mt19937_64 rng(3);
    const auto g = build_grid(0, 300, 0, 15, 0.5, 0.5);
    const auto ds = oracle::random_dataset(g, 20, rng);
    const auto a = build_design(ds);
    CHECK(oracle::rank(a.values) == 6);
    CHECK((a.values.col(0).array() == 1.0).all());
    CHECK(a.values.col(1).cwiseAbs().maxCoeff() <= 1.0);
    CHECK(a.values.col(2).cwiseAbs().maxCoeff() <= 1.0);
    const auto b = build_design(ds, a.scaling);
    CHECK(a.values == b.values);
  }
  SUBCASE("identical coordinates cannot be scaled") {
    CHECK_THROWS_AS(build_design(points({{1, 1}, {1, 1}})), Error);
  }
}
