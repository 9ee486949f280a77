#include <gtest/gtest.h>

#include <sstream>

#include "vaelasso/io.hpp"
#include "vaelasso/pksim.hpp"

using namespace vaelasso;
using namespace vaelasso::io;

namespace {

CsvTable table_of(const std::string& text) {
  std::istringstream in(text);
  return parse_csv(in, "memory");
}

std::vector<pksim::Subject> sample(std::size_t n) {
  pksim::SimulationConfig cfg;
  cfg.n_train = n;
  cfg.n_test = 1;
  return pksim::generate_dataset(cfg).train;
}

}  // namespace

TEST(FormatDouble, ShortestRoundTrip) {
  Rng rng = make_stream(1, 0);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng) * std::pow(10.0, i % 20 - 10);
    EXPECT_EQ(parse_double(format_double(v), "v"), v);
  }
  EXPECT_EQ(format_double(0.5), "0.5");
}

TEST(ParseNumbers, RejectGarbage) {
  EXPECT_THROW(parse_double("1.5x", "c"), ParseError);
  EXPECT_THROW(parse_double("", "c"), ParseError);
  EXPECT_THROW(parse_int("3.0", "c"), ParseError);
}

TEST(Csv, RaggedRowRejected) {
  EXPECT_THROW(table_of("a,b\n1,2\n3\n"), ParseError);
  EXPECT_THROW(table_of(""), ParseError);
}

TEST(DatasetCsv, RoundTrip) {
  const auto data = sample(25);
  const auto csv = dataset_to_csv(data);
  const auto back = dataset_from_table(table_of(csv), 48.0, "memory");
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].covariates, data[i].covariates);
    EXPECT_EQ(back[i].curve.subject_id, data[i].curve.subject_id);
    EXPECT_EQ(back[i].curve.concentrations, data[i].curve.concentrations);
    EXPECT_EQ(back[i].curve.time_grid, data[i].curve.time_grid);
  }
  EXPECT_EQ(dataset_to_csv(back), csv);
}

TEST(DatasetCsv, CorruptedHeaderNamesColumn) {
  auto csv = dataset_to_csv(sample(2));
  csv.replace(csv.find("hgb"), 3, "hgx");
  try {
    dataset_from_table(table_of(csv), 48.0, "train.csv");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("'hgb'"), std::string::npos) << e.what();
  }
}

TEST(DatasetCsv, BadValuesRejected) {
  const auto good = dataset_to_csv(sample(1));
  auto bad = good;
  bad.replace(bad.find(",male,") != std::string::npos ? bad.find(",male,") : bad.find(",female,"), 1, ",x");
  EXPECT_THROW(dataset_from_table(table_of(bad), 48.0, "m"), ParseError);
  auto neg = table_of(good);
  neg.rows[0].back() = "-1";
  EXPECT_THROW(dataset_from_table(neg, 48.0, "m"), ParseError);
}

TEST(LatentCsv, RoundTrip) {
  LatentTable t;
  t.subject_ids = {4, 1, 9};
  Rng rng = make_stream(2, 0);
  std::normal_distribution<double> n;
  t.mu.resize(3, 2);
  t.logvar.resize(3, 2);
  for (Eigen::Index i = 0; i < 6; ++i) {
    t.mu.data()[i] = n(rng);
    t.logvar.data()[i] = n(rng);
  }
  const auto csv = latents_to_csv(t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "subject_id,mu_1,mu_2,logvar_1,logvar_2");
  EXPECT_EQ(latents_from_table(table_of(csv), "m"), t);
}

TEST(Sha256, KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
