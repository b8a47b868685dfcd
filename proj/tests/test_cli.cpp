#include "stable_dml/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace sdml;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string out, err;
};

RunResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("stable_dml_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(file(name)) << text;
    return file(name);
  }

 private:
  fs::path path_;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

const std::vector<std::string> kSubcommands{"simulate", "estimate", "stability", "counterexample", "regime", "qq"};

}  // namespace

// ------------------------------------------------------------ help and parsing

TEST(CliHelp, EveryOptionDocumentedWithDefault) {
  cli::Options o;
  const auto app = cli::build_app(o);
  for (const auto& name : kSubcommands) {
    const auto res = run_cli({name, "--help"});
    ASSERT_EQ(res.code, 0) << name;
    const auto* sub = app->get_subcommand(name);
    for (const auto* opt : sub->get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string lname = opt->get_lnames().front();
      if (lname == "help") continue;
      const auto pos = res.out.find("--" + lname + " ");
      ASSERT_NE(pos, std::string::npos) << name << " --" << lname;
      const std::string line = res.out.substr(pos, res.out.find('\n', pos) - pos);
      if (opt->get_required()) {
        EXPECT_NE(line.find("REQUIRED"), std::string::npos) << line;
      } else {
        EXPECT_FALSE(opt->get_default_str().empty()) << name << " --" << lname;
        EXPECT_NE(line.find("[" + opt->get_default_str() + "]"), std::string::npos) << name << ": " << line << " vs " << opt->get_default_str();
      }
    }
  }
}

TEST(CliHelp, TopLevelListsSubcommands) {
  const auto res = run_cli({"--help"});
  EXPECT_EQ(res.code, 0);
  for (const auto& name : kSubcommands) EXPECT_NE(res.out.find(name), std::string::npos);
}

TEST(CliParse, UnknownFlagAndMissingSubcommand) {
  EXPECT_EQ(run_cli({"regime", "--bogus", "1"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"regime", "--n", "abc"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"estimate"}).code, cli::kExitConfig);  // --data required
}

TEST(CliParse, RuleParsers) {
  EXPECT_EQ(cli::parse_m_rule("n").label(), "n");
  EXPECT_EQ(cli::parse_m_rule("n^10/11").label(), "n^10/11");
  EXPECT_EQ(cli::parse_m_rule("n^0.49").label(), "n^0.49");
  EXPECT_EQ(cli::parse_m_rule("7").resolve(100), 7);
  EXPECT_THROW(cli::parse_m_rule("n^2"), cli::CliError);
  EXPECT_EQ(cli::parse_b_rule("auto").kind, BRule::Kind::automatic);
  EXPECT_EQ(cli::parse_b_rule("exact").kind, BRule::Kind::exact);
  EXPECT_EQ(cli::parse_b_rule("ratio:2").resolve(100, 10), 20);
  EXPECT_EQ(cli::parse_b_rule("12").resolve(100, 10), 12);
  EXPECT_THROW(cli::parse_b_rule("zero"), cli::CliError);
  const auto modes = cli::parse_modes("1,2,5");
  ASSERT_EQ(modes.size(), 3u);
  EXPECT_EQ(modes[0].mode, Mode::nosplit);
  EXPECT_EQ(modes[2].K, 5);
}

TEST(CliParse, FixedDecimals) {
  EXPECT_EQ(cli::fmt6(0.5), "0.500000");
  EXPECT_EQ(cli::fmt6(-0.0), "0.000000");
  EXPECT_EQ(cli::fmt6(-1e-9), "0.000000");
  EXPECT_EQ(cli::fmt6(1.2345675), "1.234568");
}

// ------------------------------------------------------------ config file

TEST(CliConfig, Precedence) {
  TempDir dir;
  const auto cfg = dir.write("run.cfg", "# regime defaults\nn = 400\nm=10\n\nB=300\n");
  // Config overrides defaults.
  auto res = run_cli({"regime", "--config", cfg});
  ASSERT_EQ(res.code, 0) << res.err;
  EXPECT_EQ(lines(res.out)[1].substr(0, 11), "400,10,300,");
  // Flags override config.
  res = run_cli({"regime", "--config", cfg, "--m", "12"});
  ASSERT_EQ(res.code, 0) << res.err;
  EXPECT_EQ(lines(res.out)[1].substr(0, 11), "400,12,300,");
  res = run_cli({"regime", "--n", "900", "--config", cfg});
  EXPECT_EQ(lines(res.out)[1].substr(0, 11), "900,10,300,");
}

TEST(CliConfig, UnknownKeyRejected) {
  TempDir dir;
  const auto cfg = dir.write("bad.cfg", "n=100\ncolour=blue\n");
  const auto res = run_cli({"regime", "--config", cfg});
  EXPECT_EQ(res.code, cli::kExitConfig);
  EXPECT_NE(res.err.find("colour"), std::string::npos);
  // A key valid for another subcommand is still unknown here.
  const auto cfg2 = dir.write("bad2.cfg", "reps=3\n");
  EXPECT_EQ(run_cli({"regime", "--config", cfg2}).code, cli::kExitConfig);
}

TEST(CliConfig, MalformedAndMissingFile) {
  TempDir dir;
  const auto cfg = dir.write("bad.cfg", "just some words\n");
  EXPECT_EQ(run_cli({"regime", "--config", cfg}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"regime", "--config", dir.file("absent.cfg")}).code, cli::kExitIo);
}

// ------------------------------------------------------------ simulate

TEST(CliSimulate, SmokeOneRep) {
  const auto res = run_cli({"simulate", "--reps", "1", "--n", "50", "--threads", "1"});
  ASSERT_EQ(res.code, 0) << res.err;
  const auto ls = lines(res.out);
  ASSERT_EQ(ls.size(), 3u);
  EXPECT_EQ(ls[0], "config,n,n_x,learner,m_rule,cv,bias,std,std_est,cov95,reps,seed");
  EXPECT_EQ(ls[1].substr(0, 24), "custom,50,1,nn,n^0.49,1,");
  EXPECT_NE(ls[1].find(",0.000000,"), std::string::npos);  // std of one rep
  EXPECT_EQ(ls[2].substr(0, 24), "custom,50,1,nn,n^0.49,2,");
  EXPECT_NE(res.err.find("warning"), std::string::npos);
  EXPECT_EQ(res.out.find('\r'), std::string::npos);
}

TEST(CliSimulate, PresetGridShape) {
  const auto res = run_cli({"simulate", "--preset", "paper-1nn-049", "--reps", "2", "--threads", "1"});
  ASSERT_EQ(res.code, 0) << res.err;
  const auto ls = lines(res.out);
  ASSERT_EQ(ls.size(), 17u);
  std::set<std::string> keys;
  for (std::size_t i = 1; i < ls.size(); ++i) {
    const auto cells = cli::split(ls[i], ',');
    ASSERT_EQ(cells.size(), 12u);
    EXPECT_EQ(cells[0], "paper-1nn-049");
    EXPECT_EQ(cells[4], "n^0.49");
    keys.insert(cells[1] + "/" + cells[2] + "/" + cells[5]);
  }
  EXPECT_EQ(keys.size(), 16u);
  for (const char* n : {"50", "100", "500", "1000"})
    for (const char* nx : {"1", "2"})
      for (const char* cv : {"1", "2"}) EXPECT_TRUE(keys.count(std::string(n) + "/" + nx + "/" + cv));
}

TEST(CliSimulate, PresetRejectsGridFlags) {
  EXPECT_EQ(run_cli({"simulate", "--preset", "paper-1nn-049", "--n", "50"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"simulate", "--preset", "nope"}).code, cli::kExitConfig);
}

TEST(CliSimulate, ByteIdenticalReruns) {
  TempDir dir;
  auto go = [&](const std::string& tag, const std::string& threads) {
    const auto res = run_cli({"simulate", "--reps", "6", "--n", "60", "--seed", "5", "--threads", threads,
                              "--out", dir.file(tag + ".csv"), "--raw", dir.file(tag + "_raw.csv")});
    EXPECT_EQ(res.code, 0) << res.err;
  };
  go("a", "1");
  go("b", "1");
  go("c", "4");
  EXPECT_EQ(slurp(dir.file("a.csv")), slurp(dir.file("b.csv")));
  EXPECT_EQ(slurp(dir.file("a.csv")), slurp(dir.file("c.csv")));
  EXPECT_EQ(slurp(dir.file("a_raw.csv")), slurp(dir.file("c_raw.csv")));
  EXPECT_EQ(lines(slurp(dir.file("a_raw.csv"))).size(), 1u + 12u);
}

TEST(CliSimulate, BadConfigAndIo) {
  EXPECT_EQ(run_cli({"simulate", "--reps", "0"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"simulate", "--modes", "1,0"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"simulate", "--learner", "svm"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"simulate", "--reps", "1", "--n", "10", "--out", "/nonexistent_dir/x.csv"}).code,
            cli::kExitIo);
}

// ------------------------------------------------------------ estimate

TEST(CliEstimate, ZeroNuisanceHandExample) {
  TempDir dir;
  const auto data = dir.write("d.csv", "y,t,x\n2,1,0\n4,2,0\n");
  const auto res = run_cli({"estimate", "--data", data, "--nuisance", "zero"});
  ASSERT_EQ(res.code, 0) << res.err;
  const auto j = nlohmann::json::parse(res.out);
  for (const char* key : {"theta_hat", "se", "ci_low", "ci_high", "degenerate", "min_singular_value", "mode"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_DOUBLE_EQ(j["theta_hat"][0].get<double>(), 2.0);
  EXPECT_EQ(j["se"][0].get<double>(), 0.0);
  EXPECT_FALSE(j["degenerate"].get<bool>());
  EXPECT_EQ(j["mode"], "nosplit");
  EXPECT_TRUE(j["regime"].contains("verdict"));
}

TEST(CliEstimate, MissingTreatmentColumn) {
  TempDir dir;
  const auto data = dir.write("d.csv", "y,x\n1,0\n2,1\n3,2\n");
  const auto res = run_cli({"estimate", "--data", data});
  EXPECT_EQ(res.code, cli::kExitConfig);
  EXPECT_NE(res.err.find("missing columns"), std::string::npos);
  EXPECT_NE(res.err.find(" t"), std::string::npos);
}

TEST(CliEstimate, AteNeedsBinaryTreatment) {
  TempDir dir;
  const auto data = dir.write("d.csv", "y,t,x\n1,0,0\n2,1,1\n3,2,2\n4,0,3\n");
  const auto res = run_cli({"estimate", "--data", data, "--moment", "ate"});
  EXPECT_EQ(res.code, cli::kExitConfig);
  EXPECT_NE(res.err.find("ate"), std::string::npos);
  EXPECT_NE(res.err.find("binary"), std::string::npos);
}

TEST(CliEstimate, LearnerRunCsvFormatAndErrors) {
  TempDir dir;
  DgpConfig dgp;
  const Dataset d = generate_plr_data(dgp, 80, Rng(3));
  std::ostringstream csv;
  csv << "y,t,x1\n";
  for (Index i = 0; i < d.n(); ++i) csv << d.Y(i) << ',' << d.T(i, 0) << ',' << d.X(i, 0) << '\n';
  const auto data = dir.write("d.csv", csv.str());
  const auto a = run_cli({"estimate", "--data", data, "--mode", "crossfit", "--format", "csv", "--seed", "4"});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto ls = lines(a.out);
  ASSERT_EQ(ls.size(), 2u);
  EXPECT_EQ(ls[0], "component,theta_hat,se,ci_low,ci_high,degenerate,min_singular_value,mode");
  EXPECT_EQ(a.out, run_cli({"estimate", "--data", data, "--mode", "crossfit", "--format", "csv", "--seed", "4"}).out);
  EXPECT_EQ(run_cli({"estimate", "--data", dir.file("none.csv")}).code, cli::kExitIo);
  const auto odd = dir.write("odd.csv", "y,t,z\n1,2,3\n4,5,6\n");
  EXPECT_EQ(run_cli({"estimate", "--data", odd}).code, cli::kExitConfig);
  const auto ragged = dir.write("ragged.csv", "y,t,x\n1,2\n");
  EXPECT_EQ(run_cli({"estimate", "--data", ragged}).code, cli::kExitConfig);
}

// ------------------------------------------------------------ other subcommands

TEST(CliRegime, VerdictLine) {
  const auto res = run_cli({"regime", "--n", "1000", "--m", "30", "--B", "100", "--k", "4"});
  ASSERT_EQ(res.code, 0) << res.err;
  const auto ls = lines(res.out);
  ASSERT_EQ(ls.size(), 2u);
  EXPECT_EQ(ls[0], "n,m,B,theorem,verdict,m_stable_bound,m_marginal_bound,required_B,explanation");
  EXPECT_EQ(ls[1].substr(0, 50), "1000,30,100,thm3,marginal,29.512092,31.622777,173.");
  EXPECT_EQ(run_cli({"regime", "--m", "2000"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"regime", "--theorem", "thm9"}).code, cli::kExitConfig);
}

TEST(CliCounterexample, SummaryAndSamples) {
  TempDir dir;
  const auto res = run_cli({"counterexample", "--n", "100,400", "--reps", "200", "--samples", dir.file("s.csv")});
  ASSERT_EQ(res.code, 0) << res.err;
  const auto ls = lines(res.out);
  ASSERT_EQ(ls.size(), 3u);
  EXPECT_EQ(ls[0], "n,reps,mean_lambda,ks_exp2,median_equicont,nu_loo_l2,sqrt_n_nu_loo_l2,max_training_nu,nu_slope");
  EXPECT_EQ(cli::split(ls[1], ',').size(), 9u);
  EXPECT_EQ(lines(slurp(dir.file("s.csv"))).size(), 1u + 400u);
  EXPECT_EQ(run_cli({"counterexample", "--n", "2"}).code, cli::kExitConfig);
}

TEST(CliStability, CsvShape) {
  const auto res = run_cli({"stability", "--n", "20,40,80", "--reps", "2", "--probes", "3", "--eval-points", "20",
                            "--equicont-reps", "2", "--m-pop", "500"});
  ASSERT_EQ(res.code, 0) << res.err;
  const auto ls = lines(res.out);
  ASSERT_EQ(ls.size(), 4u);
  EXPECT_EQ(cli::split(ls[0], ',').size(), 16u);
  EXPECT_EQ(cli::split(ls[1], ',').size(), 16u);
  const auto nl = run_cli({"stability", "--n", "20,40", "--reps", "2", "--learner", "tree"});
  ASSERT_EQ(nl.code, 0) << nl.err;
  EXPECT_NE(lines(nl.out)[1].find(",NA,NA"), std::string::npos);
  EXPECT_EQ(run_cli({"stability", "--coupling", "loose"}).code, cli::kExitConfig);
}

TEST(CliQq, FromRawOutput) {
  TempDir dir;
  ASSERT_EQ(run_cli({"simulate", "--reps", "30", "--n", "40", "--modes", "1", "--raw", dir.file("raw.csv"), "--out",
                     dir.file("sum.csv")})
                .code,
            0);
  const auto res = run_cli({"qq", "--input", dir.file("raw.csv")});
  ASSERT_EQ(res.code, 0) << res.err;
  const auto ls = lines(res.out);
  ASSERT_EQ(ls.size(), 31u);
  EXPECT_EQ(ls[0], "theoretical,sample");
  EXPECT_EQ(cli::split(ls[5], ',').size(), 2u);
  EXPECT_NE(res.err.find("max_probability_gap"), std::string::npos);
  EXPECT_EQ(run_cli({"qq", "--input", dir.file("raw.csv"), "--cv", "2"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"qq", "--input", dir.file("missing.csv")}).code, cli::kExitIo);
}
