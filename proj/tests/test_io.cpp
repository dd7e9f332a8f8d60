#include <sstream>

#include <json.hpp>

#include "test_util.hpp"

using namespace splos;
using splos::testing::snapshot;

TEST(Checkpoint, RoundTripIsBitExact) {
  auto b = make_bundle({4, 3, 5, {16, 8}}, 12);
  std::stringstream ss;
  write_checkpoint(ss, b);
  auto back = read_checkpoint(ss);
  EXPECT_EQ(back.num_classes(), 3u);
  EXPECT_EQ(back.num_gm(), 5u);
  EXPECT_EQ(back.config.input_dim, 4u);
  EXPECT_EQ(back.f.widths(), (std::vector<std::size_t>{16, 8}));
  EXPECT_EQ(snapshot(back.parameters()), snapshot(b.parameters()));
  std::stringstream again;
  write_checkpoint(again, back);
  std::stringstream first;
  write_checkpoint(first, b);
  EXPECT_EQ(again.str(), first.str());
}

TEST(Checkpoint, HeaderLayout) {
  auto b = make_bundle({2, 2, 2, {3}}, 1);
  std::stringstream ss;
  write_checkpoint(ss, b);
  std::string s = ss.str();
  EXPECT_EQ(s.substr(0, 8), "SPLOSCKP");
  // version 1, |C^S| 2, m 2, input 2, one layer of width 3, all little-endian u32.
  const unsigned char expect[] = {1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0};
  for (std::size_t i = 0; i < sizeof expect; ++i) EXPECT_EQ(static_cast<unsigned char>(s[8 + i]), expect[i]);
  std::size_t params = 0;
  for (const auto& p : b.parameters()) params += p.size();
  EXPECT_EQ(s.size(), 8 + sizeof expect + 8 * params);
}

TEST(Checkpoint, CorruptInputsRejected) {
  auto b = make_bundle({2, 2, 2, {3}}, 1);
  std::stringstream ss;
  write_checkpoint(ss, b);
  std::string good = ss.str();
  auto parse = [](std::string s) {
    std::istringstream is(s);
    return read_checkpoint(is);
  };
  EXPECT_THROW(parse("NOTACKPT" + good.substr(8)), ParseError);
  EXPECT_THROW(parse(good.substr(0, good.size() - 3)), ParseError);
  EXPECT_THROW(parse(good + "x"), ParseError);
  std::string bad_version = good;
  bad_version[8] = 9;
  EXPECT_THROW(parse(bad_version), ParseError);
}

TEST(Report, EpochRecordIsJsonWithFullPrecision) {
  EpochLog e;
  e.epoch = 4;
  e.h = 0.1;
  e.loss_adv = 1.0 / 3;
  e.metrics = Metrics{0.5, 0.6, 0.4, h_score(0.6, 0.4)};
  std::ostringstream os;
  write_epoch_record(os, e);
  auto j = nlohmann::json::parse(os.str());
  EXPECT_EQ(j["epoch"], 4);
  EXPECT_EQ(j["h"].get<double>(), 0.1);
  EXPECT_EQ(j["loss_adv"].get<double>(), 1.0 / 3);
  EXPECT_EQ(j["metrics"]["h_score"].get<double>(), h_score(0.6, 0.4));
  EXPECT_NE(os.str().find("0.33333333333333331"), std::string::npos);
}

TEST(Report, SummaryAndAudit) {
  RunSummary s;
  s.epochs = 2;
  s.final_h = 0.8;
  s.metrics = Metrics{0.9, 0.95, 0.85, h_score(0.95, 0.85)};
  s.eval_h = 0.75;
  s.decision_rule = "commonness";
  std::ostringstream os;
  write_summary_record(os, s);
  auto j = nlohmann::json::parse(os.str());
  EXPECT_TRUE(j["summary"].get<bool>());
  EXPECT_EQ(j["final_h"].get<double>(), 0.8);
  EXPECT_EQ(j["os"].get<double>(), 0.9);
  EXPECT_EQ(j["h_score"].get<double>(), h_score(0.95, 0.85));

  TrainLog log;
  AuditRow gated;
  gated.epoch = 1;
  gated.target_index = 3;
  gated.scores = {0.2, 0.01, 0.9, 0.9};
  gated.pseudo_label = 2;
  gated.gated = true;
  gated.lambda2 = 0.5;
  AuditRow skipped = gated;
  skipped.gated = false;
  skipped.lambda2 = std::nan("");
  log.audit = {gated, skipped};
  std::ostringstream csv;
  write_audit_csv(csv, log);
  EXPECT_EQ(csv.str(),
            "epoch,target_index,omega_ent,omega_cons,omega_conf,omega_t,pseudo_label,gated,lambda2\n"
            "1,3,0.20000000000000001,0.01,0.90000000000000002,0.90000000000000002,2,1,0.5\n"
            "1,3,0.20000000000000001,0.01,0.90000000000000002,0.90000000000000002,2,0,\n");
}

TEST(Report, RealsRoundTrip) {
  Rng rng(1);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    double v = u(rng) / 7.0;
    EXPECT_EQ(std::stod(format_real(v)), v);
  }
}
