#include <gtest/gtest.h>

#include <sstream>

#include "test_support.hpp"

using namespace mebal;
using namespace mebal::testing;

namespace {

template <class F>
std::string error_text(F&& f, ErrorCode expected) {
  try {
    f();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), expected) << e.what();
    return e.what();
  }
  ADD_FAILURE() << "no error thrown";
  return {};
}

CsvTable parse(const std::string& text) {
  std::istringstream in(text);
  return parse_csv(in);
}

}  // namespace

TEST(ParseCsv, LongFormatWithReplicatesAndAnyColumnOrder) {
  const CsvTable t = parse(
      "x_1,id,u_1,treat,rep,outcome\n"
      "0.5,a,2,1,1,3.5\n"
      "0.7,a,2,1,2,3.5\n"
      "1.5,b,4,0,1,2\n");
  ASSERT_EQ(t.records.size(), 3u);
  EXPECT_TRUE(t.has_outcome);
  EXPECT_EQ(t.x_names, std::vector<std::string>{"x_1"});
  EXPECT_EQ(t.records[1].rep, 2);
  const Dataset d = validate(t.records);
  EXPECT_EQ(d.m(0), 2);
  EXPECT_EQ(d.outcome()(1), 2.0);
}

TEST(ParseCsv, PartlyMissingOutcomeIsRejected) {
  const CsvTable t = parse("id,treat,outcome,x_1\na,1,3.5,0.5\nb,0,NA,1.5\n");
  EXPECT_FALSE(t.records[1].outcome.has_value());
  error_text([&] { validate(t.records); }, ErrorCode::MissingOutcome);
}

TEST(ParseCsv, ErrorsCarryLineNumbers) {
  EXPECT_NE(error_text([] { parse("id,treat,x_1\na,1,0.1\nb,0,zz\n"); }, ErrorCode::ParseError).find("line 3"),
            std::string::npos);
  EXPECT_NE(error_text([] { parse("id,treat,x_1\na,1\n"); }, ErrorCode::ParseError).find("line 2"),
            std::string::npos);
  EXPECT_NE(error_text([] { parse("id,treat,x_1,rep\na,1,0.1,0\n"); }, ErrorCode::ParseError).find("line 2"),
            std::string::npos);
  EXPECT_NE(error_text([] { parse("id,treat,weird\n"); }, ErrorCode::ParseError).find("weird"), std::string::npos);
  error_text([] { parse("treat,x_1\n1,2\n"); }, ErrorCode::ParseError);
  error_text([] { parse(""); }, ErrorCode::ParseError);
}

TEST(ParseCsv, SkipsBlankLinesAndTrimsCells) {
  const CsvTable t = parse("id, treat ,x_1\n\n a ,1, 0.25\n\nb,0,1\n");
  ASSERT_EQ(t.records.size(), 2u);
  EXPECT_EQ(t.records[0].id, "a");
  EXPECT_EQ(t.records[0].x[0], 0.25);
}

TEST(Weights, RoundTripIsBitExact) {
  std::mt19937_64 rng(3);
  const auto inst = random_instance(rng, 80, 2, 1);
  const BalanceFit fit = solve_eb(inst.data, SolverConfig{});
  std::stringstream ss;
  write_weights(ss, inst.data, fit.weights);
  const WeightVector back = read_weights(ss, inst.data);
  EXPECT_TRUE(back.values() == fit.weights.values());
  EXPECT_EQ(back.rows(), fit.weights.rows());
}

TEST(Weights, RejectsBadFiles) {
  Eigen::MatrixXd z(4, 1);
  z << 1, 2, 3, 4;
  const Dataset d = from_matrix(z, {1, 0, 1, 0}, 1);
  const std::string c0 = d.ids()[1], c1 = d.ids()[3], t0 = d.ids()[0];
  auto read = [&](const std::string& text) {
    std::istringstream in(text);
    return read_weights(in, d);
  };
  error_text([&] { read("id,w\n"); }, ErrorCode::ParseError);
  error_text([&] { read("id,weight\n" + c0 + ",0.5\n" + c1 + ",0.6\n"); }, ErrorCode::InvalidWeights);
  error_text([&] { read("id,weight\n" + c0 + ",1\n"); }, ErrorCode::InvalidWeights);
  error_text([&] { read("id,weight\n" + c0 + ",0.5\n" + t0 + ",0.5\n"); }, ErrorCode::InvalidWeights);
  error_text([&] { read("id,weight\n" + c0 + ",0.5\n" + c0 + ",0.5\n"); }, ErrorCode::InvalidWeights);
  error_text([&] { read("id,weight\nnobody,1\n"); }, ErrorCode::InvalidWeights);
  const WeightVector ok = read("id,weight\n" + c1 + ",0.75\n" + c0 + ",0.25\n");
  EXPECT_EQ(ok.values()(0), 0.25);
}

TEST(Json, NonFiniteNumbersBecomeNull) {
  const json j = to_json(Eigen::VectorXd(Eigen::Vector3d(1.0, std::nan(""), INFINITY)));
  EXPECT_EQ(j[0], 1.0);
  EXPECT_TRUE(j[1].is_null());
  EXPECT_TRUE(j[2].is_null());
}

TEST(Json, ImbalanceReportKeepsAbsentEntriesAsNull) {
  ImbalanceReport r;
  r.asmd = {0.5, std::nullopt};
  r.flags = {"ZeroTreatedSd: column 1"};
  const json j = to_json(r);
  EXPECT_EQ(j["asmd"][0], 0.5);
  EXPECT_TRUE(j["asmd"][1].is_null());
  EXPECT_TRUE(j["md"].is_null());
  EXPECT_EQ(j["basis"], "observed_covariates");
}

TEST(Json, AttResultAndErrorModel) {
  AttResult r;
  r.method = "ceb";
  r.tau = 1.5;
  r.se = 0.25;
  const json j = to_json(r);
  EXPECT_EQ(j["att"], 1.5);
  EXPECT_EQ(j["se"], 0.25);
  EXPECT_TRUE(j["ci_lower"].is_null());
  const json m = to_json(ErrorModel::isotropic(ErrorFamily::normal, 2, 0.3));
  EXPECT_EQ(m["family"], "normal");
  EXPECT_DOUBLE_EQ(m["sigma1"][1][1].get<double>(), 0.3);
}

TEST(TableCsv, OneRowPerCellWithSemicolonVectors) {
  ScenarioSpec s;
  s.design = Design::bivariate;
  s.error_variance = 0.2;
  s.n = 500;
  s.reps = 3;
  s.methods = {SimMethod{Method::eb}, SimMethod{Method::bceb}};
  const MonteCarloTable t = run_table(s);
  std::ostringstream out;
  write_table_csv(out, {t});
  std::istringstream in(out.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0].substr(0, 7), "design,");
  EXPECT_EQ(lines[1].substr(0, 17), "bivariate,normal,");
  // every row has the header's field count
  const auto count = [](const std::string& l) { return std::count(l.begin(), l.end(), ','); };
  EXPECT_EQ(count(lines[1]), count(lines[0]));
  EXPECT_NE(lines[1].find(';'), std::string::npos);

  std::ostringstream plot;
  write_plot_csv(plot, plot_rows(t, 0.2));
  EXPECT_EQ(plot.str().substr(0, 31), "scenario,method,x,metric,value\n");
  EXPECT_NE(plot.str().find("bivariate/normal,eb,0.20000000000000001,bias,"), std::string::npos);
}
