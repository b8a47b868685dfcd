#pragma once

// Command-line front end. All logic lives here so tests can drive it
// in-process; tools/ only forwards argv.
//
// Exit codes: 0 ok, 2 bad configuration or input, 3 I/O failure.

#include "stable_dml/core.hpp"
#include "stable_dml/diagnostics.hpp"
#include "stable_dml/estimator.hpp"
#include "stable_dml/learners.hpp"
#include "stable_dml/moments.hpp"
#include "stable_dml/simulation.hpp"
#include "stable_dml/stats.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sdml::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;

class CliError : public std::runtime_error {
 public:
  CliError(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

// ---------------------------------------------------------------------------
// Formatting and parsing helpers
// ---------------------------------------------------------------------------

// Fixed 6 decimals; negative zero printed as zero.
inline std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s = buf;
  if (s == "-0.000000") s = "0.000000";
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
  const std::string t = trim(s);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size()) throw CliError(kExitConfig, "invalid number for " + what + ": '" + s + "'");
  return v;
}

inline Index parse_index(const std::string& s, const std::string& what) {
  const std::string t = trim(s);
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(t, &pos);
  } catch (...) {
    pos = std::string::npos;
  }
  if (t.empty() || pos != t.size()) throw CliError(kExitConfig, "invalid integer for " + what + ": '" + s + "'");
  return static_cast<Index>(v);
}

inline std::vector<Index> parse_index_list(const std::string& s, const std::string& what) {
  std::vector<Index> out;
  for (const auto& part : split(s, ',')) out.push_back(parse_index(part, what));
  if (out.empty()) throw CliError(kExitConfig, what + " needs at least one value");
  return out;
}

// "n", "n^0.49", "n^10/11", or a plain subsample size.
inline MRule parse_m_rule(const std::string& text) {
  const std::string s = trim(text);
  try {
    if (s == "n") return MRule::power(1.0);
    if (s.rfind("n^", 0) == 0) {
      const std::string e = s.substr(2);
      const auto slash = e.find('/');
      const double alpha = slash == std::string::npos
                               ? parse_double(e, "m-rule exponent")
                               : parse_double(e.substr(0, slash), "m-rule exponent") /
                                     parse_double(e.substr(slash + 1), "m-rule exponent");
      return MRule::power(alpha);
    }
    return MRule::fixed(parse_index(s, "m-rule"));
  } catch (const std::invalid_argument& e) {
    throw CliError(kExitConfig, e.what());
  }
}

// "auto", "exact", "ratio:C" or a bag count.
inline BRule parse_b_rule(const std::string& text) {
  const std::string s = trim(text);
  try {
    if (s == "auto") return BRule::automatic();
    if (s == "exact") return BRule::exact();
    if (s.rfind("ratio:", 0) == 0) return BRule::ratio(parse_double(s.substr(6), "B ratio"));
    return BRule::fixed(parse_index(s, "B"));
  } catch (const std::invalid_argument& e) {
    throw CliError(kExitConfig, e.what());
  }
}

// Comma list of cv values: 1 is no-split, K >= 2 is K-fold cross-fitting.
inline std::vector<ModeSpec> parse_modes(const std::string& text) {
  std::vector<ModeSpec> modes;
  for (Index cv : parse_index_list(text, "modes")) {
    if (cv == 1) modes.push_back(ModeSpec::nosplit());
    else if (cv >= 2) modes.push_back(ModeSpec::crossfit(static_cast<int>(cv)));
    else throw CliError(kExitConfig, "modes entries must be 1 (no-split) or K >= 2 (cross-fit)");
  }
  return modes;
}

inline BaseKind parse_base(const std::string& s) {
  if (s == "nn") return BaseKind::one_nn;
  if (s == "tree") return BaseKind::tree;
  throw CliError(kExitConfig, "learner must be nn or tree, got '" + s + "'");
}

inline XDist parse_x_dist(const std::string& s) {
  if (s == "normal") return XDist::std_normal;
  if (s == "uniform") return XDist::uniform;
  throw CliError(kExitConfig, "x-dist must be normal or uniform, got '" + s + "'");
}

// Flat key=value lines; '#' starts a comment line.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError(kExitIo, "cannot read config file '" + path + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos || trim(t.substr(0, eq)).empty())
      throw CliError(kExitConfig, path + ":" + std::to_string(lineno) + ": expected key=value");
    out.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return out;
}

// Output sink: "-" is the supplied stream, anything else a file.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : path_(path), fallback_(fallback) {
    if (path_ != "-") {
      file_.open(path_, std::ios::binary | std::ios::trunc);
      if (!file_) throw CliError(kExitIo, "cannot open output file '" + path_ + "'");
    }
  }
  std::ostream& stream() { return path_ == "-" ? fallback_ : file_; }
  void close() {
    if (path_ == "-") {
      fallback_.flush();
      return;
    }
    file_.close();
    if (!file_) throw CliError(kExitIo, "failed writing output file '" + path_ + "'");
  }

 private:
  std::string path_;
  std::ostream& fallback_;
  std::ofstream file_;
};

// ---------------------------------------------------------------------------
// Options
// ---------------------------------------------------------------------------

struct CommonOptions {
  std::uint64_t seed = 1;
  unsigned threads = 0;
  std::string out = "-";
  std::string config;
};

struct DgpOptions {
  double theta0 = 0.5;
  double coef = 1.0;
  Index sparse_index = 0;
  std::string x_dist = "normal";
  Index n_x = 1;

  DgpConfig build() const {
    DgpConfig d;
    d.theta0 = theta0;
    d.coef = coef;
    d.sparse_index = sparse_index;
    d.x_dist = parse_x_dist(x_dist);
    d.n_x = n_x;
    try {
      d.validate();
    } catch (const std::invalid_argument& e) {
      throw CliError(kExitConfig, e.what());
    }
    return d;
  }
};

struct LearnerOptions {
  std::string learner = "nn";
  std::string m_rule = "n^0.49";
  std::string B = "auto";

  LearnerConfig build() const {
    LearnerConfig c;
    c.base = parse_base(learner);
    c.m_rule = parse_m_rule(m_rule);
    c.b_rule = parse_b_rule(B);
    return c;
  }
};

struct SimulateOptions {
  std::string preset = "none";
  Index n = 500;
  std::string modes = "1,2";
  Index reps = 1000;
  double level = 0.95;
  std::string raw;
  DgpOptions dgp;
  LearnerOptions learner;
};

struct EstimateOptions {
  std::string data;
  std::string moment = "plr";
  std::string mode = "nosplit";
  int folds = 2;
  double level = 0.95;
  std::string nuisance = "learner";
  std::string policy_feature;
  double policy_threshold = 0.0;
  double propensity_clip = 0.01;
  double k = 4.0;
  std::string format = "json";
  LearnerOptions learner;
};

struct StabilityOptionsCli {
  std::string n = "100,200,400,800";
  Index probes = 20;
  Index reps = 20;
  Index eval_points = 200;
  double r = 1.0;
  std::string coupling = "coupled";
  Index equicont_reps = 0;
  Index m_pop = -1;
  DgpOptions dgp;
  LearnerOptions learner;
};

struct CounterexampleOptions {
  std::string n = "10000";
  Index reps = 2000;
  std::string samples;
};

struct RegimeOptions {
  Index n = 1000;
  Index m = 30;
  Index B = 100;
  double k = 4.0;
  std::string theorem = "thm3";
  double r = 1.5;
};

struct QqOptions {
  std::string input;
  int cv = 1;
  Index n = 0;
  Index n_x = 0;
};

struct Options {
  CommonOptions common;
  SimulateOptions simulate;
  EstimateOptions estimate;
  StabilityOptionsCli stability;
  CounterexampleOptions counterexample;
  RegimeOptions regime;
  QqOptions qq;
};

inline void add_common(CLI::App* sub, CommonOptions& c) {
  sub->add_option("--seed", c.seed, "Master seed; all randomness derives from it");
  sub->add_option("--threads", c.threads, "Worker threads (0: STABLE_DML_THREADS, else hardware concurrency)");
  sub->add_option("--out", c.out, "Output file ('-' for stdout)");
  sub->add_option("--config", c.config, "Flat key=value file of option defaults; flags override it")
      ->default_str("\"\"");
}

inline void add_dgp(CLI::App* sub, DgpOptions& d) {
  sub->add_option("--theta0", d.theta0, "True treatment effect");
  sub->add_option("--coef", d.coef, "Coefficient on the confounding covariate in both T and Y");
  sub->add_option("--sparse-index", d.sparse_index, "Index of the confounding covariate");
  sub->add_option("--x-dist", d.x_dist, "Covariate distribution: normal or uniform (on [-sqrt3, sqrt3])");
  sub->add_option("--n-x", d.n_x, "Number of covariates");
}

inline void add_learner(CLI::App* sub, LearnerOptions& l) {
  sub->add_option("--learner", l.learner, "Base learner: nn (1-NN) or tree (fully grown CART)");
  sub->add_option("--m-rule", l.m_rule, "Subsample size: n, n^ALPHA, n^P/Q, or an integer");
  sub->add_option("--B", l.B, "Bag count: auto (max(100, ceil(n/m))), exact, ratio:C (ceil(C n/m)), or an integer");
}

inline std::unique_ptr<CLI::App> build_app(Options& o) {
  auto app = std::make_unique<CLI::App>("Debiased moment estimation with stable bagged nuisance learners", "stable_dml");
  app->require_subcommand(1, 1);
  app->option_defaults()->always_capture_default();

  auto* sim = app->add_subcommand("simulate", "Monte Carlo bias/std/coverage table for the partially linear design");
  sim->option_defaults()->always_capture_default();
  add_common(sim, o.common);
  sim->add_option("--preset", o.simulate.preset,
                  "Grid preset: none, paper-1nn-049, paper-1nn-1011, paper-1nn-n, paper-rf-049, paper-rf-1011, paper-suite");
  sim->add_option("--n", o.simulate.n, "Sample size (ignored grid axis when a preset is set)");
  sim->add_option("--modes", o.simulate.modes, "Comma list of cv values: 1 = no-split, K >= 2 = K-fold cross-fit");
  sim->add_option("--reps", o.simulate.reps, "Monte Carlo replications per configuration");
  sim->add_option("--level", o.simulate.level, "Confidence level");
  sim->add_option("--raw", o.simulate.raw, "Optional per-replication CSV output file")->default_str("\"\"");
  add_dgp(sim, o.simulate.dgp);
  add_learner(sim, o.simulate.learner);

  auto* est = app->add_subcommand("estimate", "Estimate theta on a CSV with columns y, t*, x*, w*");
  est->option_defaults()->always_capture_default();
  add_common(est, o.common);
  est->add_option("--data", o.estimate.data, "Input CSV file")->required();
  est->add_option("--moment", o.estimate.moment, "Moment: plr, pliv, ate, or policy");
  est->add_option("--mode", o.estimate.mode, "nosplit or crossfit");
  est->add_option("--folds", o.estimate.folds, "Cross-fit fold count");
  est->add_option("--level", o.estimate.level, "Confidence level");
  est->add_option("--nuisance", o.estimate.nuisance, "learner, or zero to force every nuisance to 0");
  est->add_option("--policy-feature", o.estimate.policy_feature, "Policy moment: covariate column c, policy 1{c > threshold}")
      ->default_str("\"\"");
  est->add_option("--policy-threshold", o.estimate.policy_threshold, "Policy moment: threshold");
  est->add_option("--propensity-clip", o.estimate.propensity_clip, "ate/policy: propensity clipped to [c, 1 - c]");
  est->add_option("--k", o.estimate.k, "Moment order used by the regime advisory");
  est->add_option("--format", o.estimate.format, "json or csv");
  add_learner(est, o.estimate.learner);

  auto* stab = app->add_subcommand("stability", "Replace-one stability norms of the bagged nuisances, per n");
  stab->option_defaults()->always_capture_default();
  add_common(stab, o.common);
  stab->add_option("--n", o.stability.n, "Comma list of sample sizes (>= 3 increasing values give a rate slope)");
  stab->add_option("--probes", o.stability.probes, "Probed rows per replication (capped at n)");
  stab->add_option("--reps", o.stability.reps, "Monte Carlo replications");
  stab->add_option("--eval-points", o.stability.eval_points, "Fresh X draws approximating the supremum over x");
  stab->add_option("--r", o.stability.r, "Sup norm is taken in L^{2r}");
  stab->add_option("--coupling", o.stability.coupling, "coupled (shared bag index sets) or resampled");
  stab->add_option("--equicont-reps", o.stability.equicont_reps, "If > 0, replications of the equicontinuity statistic");
  stab->add_option("--m-pop", o.stability.m_pop, "Population draws for the equicontinuity statistic (-1: max(1e5, 100 n))");
  add_dgp(stab, o.stability.dgp);
  add_learner(stab, o.stability.learner);

  auto* ce = app->add_subcommand("counterexample", "1-NN misclassification counterexample: lambda law and LOO norm");
  ce->option_defaults()->always_capture_default();
  add_common(ce, o.common);
  ce->add_option("--n", o.counterexample.n, "Comma list of sample sizes");
  ce->add_option("--reps", o.counterexample.reps, "Replications per sample size");
  ce->add_option("--samples", o.counterexample.samples, "Optional CSV file of lambda samples")->default_str("\"\"");

  auto* reg = app->add_subcommand("regime", "Advisory (B, m) regime verdict");
  reg->option_defaults()->always_capture_default();
  add_common(reg, o.common);
  reg->add_option("--n", o.regime.n, "Sample size");
  reg->add_option("--m", o.regime.m, "Subsample size");
  reg->add_option("--B", o.regime.B, "Bag count");
  reg->add_option("--k", o.regime.k, "Moment order k (thm3)");
  reg->add_option("--theorem", o.regime.theorem, "thm3 (k-moment bound) or thm4 (relaxed, uses r)");
  reg->add_option("--r", o.regime.r, "Continuity exponent r > 1 (thm4)");

  auto* qq = app->add_subcommand("qq", "Normal Q-Q points from a simulate --raw file");
  qq->option_defaults()->always_capture_default();
  add_common(qq, o.common);
  qq->add_option("--input", o.qq.input, "Raw per-replication CSV from simulate")->required();
  qq->add_option("--cv", o.qq.cv, "cv value to select");
  qq->add_option("--n", o.qq.n, "Sample size to select (0: any)");
  qq->add_option("--n-x", o.qq.n_x, "Covariate count to select (0: any)");
  return app;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct GridSpec {
  std::string id;
  BaseKind base;
  MRule m_rule;
  std::vector<Index> ns;
  std::vector<Index> nxs;
};

inline std::vector<GridSpec> preset_grids(const std::string& preset) {
  const std::vector<Index> ns{50, 100, 500, 1000};
  const GridSpec nn049{"paper-1nn-049", BaseKind::one_nn, MRule::power(0.49), ns, {1, 2}};
  const GridSpec nn1011{"paper-1nn-1011", BaseKind::one_nn, MRule::power(10.0 / 11.0), ns, {1, 2}};
  const GridSpec nnn{"paper-1nn-n", BaseKind::one_nn, MRule::power(1.0), ns, {1, 2}};
  const GridSpec rf049{"paper-rf-049", BaseKind::tree, MRule::power(0.49), ns, {5, 10}};
  const GridSpec rf1011{"paper-rf-1011", BaseKind::tree, MRule::power(10.0 / 11.0), ns, {5, 10}};
  if (preset == "paper-1nn-049") return {nn049};
  if (preset == "paper-1nn-1011") return {nn1011};
  if (preset == "paper-1nn-n") return {nnn};
  if (preset == "paper-rf-049") return {rf049};
  if (preset == "paper-rf-1011") return {rf1011};
  if (preset == "paper-suite") return {nn049, nn1011, nnn, rf049, rf1011};
  throw CliError(kExitConfig, "unknown preset '" + preset + "'");
}

inline const char* kSummaryHeader = "config,n,n_x,learner,m_rule,cv,bias,std,std_est,cov95,reps,seed\n";
inline const char* kRawHeader = "config,n,n_x,learner,m_rule,cv,rep,theta_hat,se,degenerate,seed\n";

inline void write_summary_row(std::ostream& os, const SummaryRow& r) {
  os << r.config << ',' << r.n << ',' << r.n_x << ',' << r.learner << ',' << r.m_rule << ',' << r.cv << ','
     << fmt6(r.stats.bias) << ',' << fmt6(r.stats.std) << ',' << fmt6(r.stats.std_est) << ','
     << fmt6(r.stats.cov95) << ',' << r.stats.reps << ',' << r.seed << '\n';
}

inline int cmd_simulate(const Options& o, const std::map<std::string, bool>& given, std::ostream& out,
                        std::ostream& log) {
  const auto& s = o.simulate;
  if (s.reps < 1) throw CliError(kExitConfig, "reps must be >= 1");
  if (!(s.level > 0.0 && s.level < 1.0)) throw CliError(kExitConfig, "level must lie in (0, 1)");
  const DgpConfig base_dgp = s.dgp.build();
  LearnerConfig base_learner = s.learner.build();
  if (base_learner.b_rule.kind == BRule::Kind::exact)
    throw CliError(kExitConfig, "simulate does not support B=exact");
  const auto modes = parse_modes(s.modes);

  std::vector<McConfig> configs;
  if (s.preset == "none") {
    McConfig mc;
    mc.config_id = "custom";
    mc.dgp = base_dgp;
    mc.n = s.n;
    mc.learner = base_learner;
    configs.push_back(mc);
  } else {
    for (const char* fixed : {"n", "n-x", "learner", "m-rule"})
      if (given.count(fixed)) throw CliError(kExitConfig, std::string("--preset fixes the grid; drop --") + fixed);
    for (const auto& g : preset_grids(s.preset)) {
      for (Index n : g.ns) {
        for (Index nx : g.nxs) {
          McConfig mc;
          mc.config_id = g.id;
          mc.dgp = base_dgp;
          mc.dgp.n_x = nx;
          mc.dgp.sparse_index = std::min(base_dgp.sparse_index, nx - 1);
          mc.n = n;
          mc.learner = base_learner;
          mc.learner.base = g.base;
          mc.learner.m_rule = g.m_rule;
          configs.push_back(mc);
        }
      }
    }
  }
  for (auto& mc : configs) {
    if (mc.n < 2) throw CliError(kExitConfig, "n must be >= 2");
    for (const auto& m : modes)
      if (m.mode == Mode::crossfit && m.K > mc.n) throw CliError(kExitConfig, "cross-fit folds exceed n");
    mc.modes = modes;
    mc.reps = s.reps;
    mc.level = s.level;
    mc.seed = o.common.seed;
    mc.threads = resolve_threads(o.common.threads);
  }

  Sink sink(o.common.out, out);
  std::unique_ptr<Sink> raw;
  if (!s.raw.empty()) raw = std::make_unique<Sink>(s.raw, out);
  sink.stream() << kSummaryHeader;
  if (raw) raw->stream() << kRawHeader;
  for (const auto& mc : configs) {
    const auto t0 = std::chrono::steady_clock::now();
    const McResult res = run_monte_carlo(mc);
    if (res.rows.front().stats.insufficient_reps)
      log << "[simulate] warning: a single replication gives no spread; std reported as 0\n";
    for (const auto& row : res.rows) write_summary_row(sink.stream(), row);
    if (raw) {
      const auto& r0 = res.rows.front();
      for (const auto& e : res.raw)
        raw->stream() << r0.config << ',' << r0.n << ',' << r0.n_x << ',' << r0.learner << ',' << r0.m_rule << ','
                      << e.cv << ',' << e.rep << ',' << fmt6(e.theta_hat) << ',' << fmt6(e.se) << ','
                      << (e.degenerate ? 1 : 0) << ',' << mc.seed << '\n';
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[256];
    std::snprintf(buf, sizeof buf, "[simulate] %s n=%lld n_x=%lld learner=%s m=%s reps=%lld %.1fs\n",
                  mc.config_id.c_str(), static_cast<long long>(mc.n), static_cast<long long>(mc.dgp.n_x),
                  to_string(mc.learner.base).c_str(), mc.learner.m_rule.label().c_str(),
                  static_cast<long long>(mc.reps), secs);
    log << buf;
  }
  sink.close();
  if (raw) raw->close();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError(kExitIo, "cannot read data file '" + path + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw CliError(kExitConfig, "data file '" + path + "' is empty");
  t.header = split(trim(line), ',');
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    if (cells.size() != t.header.size())
      throw CliError(kExitConfig, path + ":" + std::to_string(lineno) + ": expected " +
                                      std::to_string(t.header.size()) + " fields, got " + std::to_string(cells.size()));
    std::vector<double> row;
    for (std::size_t j = 0; j < cells.size(); ++j)
      row.push_back(parse_double(cells[j], path + ":" + std::to_string(lineno) + " column " + t.header[j]));
    t.rows.push_back(std::move(row));
  }
  return t;
}

struct ColumnRoles {
  Index y = -1;
  std::vector<Index> t, x, w;
  std::vector<std::string> x_names;
};

// y; t, t1, t_dose ...; likewise x*, w*.
inline ColumnRoles classify_columns(const std::vector<std::string>& header) {
  ColumnRoles roles;
  std::vector<std::string> unknown;
  for (std::size_t j = 0; j < header.size(); ++j) {
    const std::string& h = header[j];
    const auto idx = static_cast<Index>(j);
    if (h == "y") {
      if (roles.y >= 0) throw CliError(kExitConfig, "duplicate column 'y'");
      roles.y = idx;
    } else if (!h.empty() && h[0] == 't') {
      roles.t.push_back(idx);
    } else if (!h.empty() && h[0] == 'x') {
      roles.x.push_back(idx);
      roles.x_names.push_back(h);
    } else if (!h.empty() && h[0] == 'w') {
      roles.w.push_back(idx);
    } else {
      unknown.push_back(h);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "unrecognised columns:";
    for (const auto& u : unknown) msg += " '" + u + "'";
    throw CliError(kExitConfig, msg + " (expected y, t*, x*, w*)");
  }
  return roles;
}

inline Eigen::MatrixXd gather(const CsvTable& t, const std::vector<Index>& cols) {
  Eigen::MatrixXd M(static_cast<Index>(t.rows.size()), static_cast<Index>(cols.size()));
  for (Index i = 0; i < M.rows(); ++i)
    for (Index j = 0; j < M.cols(); ++j) M(i, j) = t.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(cols[static_cast<std::size_t>(j)])];
  return M;
}

inline MomentKind parse_moment(const std::string& s) {
  if (s == "plr") return MomentKind::plr;
  if (s == "pliv") return MomentKind::pliv;
  if (s == "ate") return MomentKind::ate;
  if (s == "policy") return MomentKind::policy;
  throw CliError(kExitConfig, "moment must be plr, pliv, ate or policy, got '" + s + "'");
}

inline nlohmann::json to_json_vector(const Eigen::VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline int cmd_estimate(const Options& o, std::ostream& out, std::ostream& log) {
  const auto& e = o.estimate;
  const MomentKind kind = parse_moment(e.moment);
  if (e.format != "json" && e.format != "csv") throw CliError(kExitConfig, "format must be json or csv");
  if (e.nuisance != "learner" && e.nuisance != "zero") throw CliError(kExitConfig, "nuisance must be learner or zero");
  ModeSpec mode;
  if (e.mode == "nosplit") mode = ModeSpec::nosplit();
  else if (e.mode == "crossfit") mode = ModeSpec::crossfit(e.folds);
  else throw CliError(kExitConfig, "mode must be nosplit or crossfit");

  const CsvTable table = read_csv(e.data);
  const ColumnRoles roles = classify_columns(table.header);
  std::vector<std::string> missing;
  if (roles.y < 0) missing.push_back("y");
  if (roles.t.empty()) missing.push_back("t");
  if (roles.x.empty() && e.nuisance != "zero") missing.push_back("x");
  if (kind == MomentKind::pliv && roles.w.empty()) missing.push_back("w");
  if (!missing.empty()) {
    std::string msg = "missing columns:";
    for (const auto& m : missing) msg += " " + m;
    throw CliError(kExitConfig, msg);
  }

  Dataset data;
  data.X = gather(table, roles.x);
  data.T = gather(table, roles.t);
  data.Y = gather(table, {roles.y}).col(0);
  if (!roles.w.empty()) data.W = gather(table, roles.w);

  MomentSpec spec;
  spec.kind = kind;
  spec.propensity_clip = e.propensity_clip;
  if (kind == MomentKind::policy) {
    const auto it = std::find(roles.x_names.begin(), roles.x_names.end(), e.policy_feature);
    if (it == roles.x_names.end())
      throw CliError(kExitConfig, "policy moment needs --policy-feature naming an x column");
    const auto col = static_cast<Index>(it - roles.x_names.begin());
    const double thr = e.policy_threshold;
    spec.policy = [col, thr](const Eigen::VectorXd& x) { return x(col) > thr ? 1 : 0; };
  }

  LearnerConfig cfg = e.learner.build();
  if (e.nuisance == "zero") {
    cfg.base = BaseKind::constant;
    cfg.constant_value = 0.0;
  }

  EstimateResult res;
  try {
    data.validate();
    res = estimate(data, spec, cfg, mode, e.level, Rng(o.common.seed));
  } catch (const ResourceError& err) {
    throw CliError(kExitConfig, err.what());
  } catch (const std::invalid_argument& err) {
    throw CliError(kExitConfig, err.what());
  }
  if (res.clipped_propensities > 0)
    log << "warning: " << res.clipped_propensities << " propensity predictions outside (0, 1) were clipped\n";

  // Advisory regime for the nuisance fits actually used.
  nlohmann::json regime;
  if (cfg.base == BaseKind::constant) {
    regime = {{"verdict", "not-applicable"}, {"explanation", "nuisances fixed at zero"}};
  } else {
    const Index n_train = mode.mode == Mode::nosplit ? data.n() : data.n() - (data.n() + mode.K - 1) / mode.K;
    const Index m = cfg.m_rule.resolve(n_train);
    const Index B = cfg.b_rule.kind == BRule::Kind::exact ? static_cast<Index>(binomial(n_train, m))
                                                          : cfg.b_rule.resolve(n_train, m);
    const auto rc = regime_check(n_train, m, B, e.k, RegimeTheorem::subsample_moments);
    regime = {{"verdict", to_string(rc.verdict)}, {"explanation", rc.explanation}, {"n", n_train},
              {"m", m},   {"B", B},                 {"k", e.k}};
  }

  Sink sink(o.common.out, out);
  if (e.format == "json") {
    nlohmann::json j;
    j["theta_hat"] = to_json_vector(res.theta_hat);
    j["se"] = to_json_vector(res.se);
    j["ci_low"] = to_json_vector(res.ci_low);
    j["ci_high"] = to_json_vector(res.ci_high);
    j["degenerate"] = res.degenerate;
    j["min_singular_value"] = res.min_singular_value;
    j["mode"] = mode.label();
    j["level"] = res.level;
    j["moment"] = to_string(kind);
    j["n"] = data.n();
    j["clipped_propensities"] = res.clipped_propensities;
    j["regime"] = regime;
    sink.stream() << j.dump(2) << '\n';
  } else {
    sink.stream() << "component,theta_hat,se,ci_low,ci_high,degenerate,min_singular_value,mode\n";
    for (Index i = 0; i < res.theta_hat.size(); ++i)
      sink.stream() << i << ',' << fmt6(res.theta_hat(i)) << ',' << fmt6(res.se(i)) << ',' << fmt6(res.ci_low(i))
                    << ',' << fmt6(res.ci_high(i)) << ',' << (res.degenerate ? 1 : 0) << ','
                    << fmt6(res.min_singular_value) << ',' << mode.label() << '\n';
  }
  sink.close();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// stability, counterexample, regime, qq
// ---------------------------------------------------------------------------

inline int cmd_stability(const Options& o, std::ostream& out) {
  const auto& s = o.stability;
  const DgpConfig dgp = s.dgp.build();
  const LearnerConfig cfg = s.learner.build();
  const auto ns = parse_index_list(s.n, "n");
  StabilityOptions opt;
  opt.replications = s.reps;
  opt.eval_points = s.eval_points;
  opt.r = s.r;
  opt.threads = resolve_threads(o.common.threads);
  if (s.coupling == "coupled") opt.coupling = Coupling::coupled;
  else if (s.coupling == "resampled") opt.coupling = Coupling::resampled;
  else throw CliError(kExitConfig, "coupling must be coupled or resampled");
  if (s.probes < 1) throw CliError(kExitConfig, "probes must be >= 1");

  const Rng root(o.common.seed);
  std::vector<StabilityReport> reports;
  std::vector<double> med_A, med_V;
  try {
    for (Index n : ns) {
      StabilityOptions o_n = opt;
      o_n.probes = std::min(n, s.probes);
      reports.push_back(loo_stability(dgp, n, cfg, MomentKind::plr, o_n, root.child("n", static_cast<std::uint64_t>(n))));
      if (s.equicont_reps > 0) {
        std::vector<double> a, v;
        for (Index r = 0; r < s.equicont_reps; ++r) {
          const auto st = equicontinuity_stat(dgp, n, cfg, MomentKind::plr, s.m_pop,
                                              root.child("equicont", static_cast<std::uint64_t>(n))
                                                  .child("rep", static_cast<std::uint64_t>(r)));
          a.push_back(st.stat_A);
          v.push_back(st.stat_V);
        }
        med_A.push_back(stats::median(a));
        med_V.push_back(stats::median(v));
      }
    }
  } catch (const std::invalid_argument& e) {
    throw CliError(kExitConfig, e.what());
  } catch (const ResourceError& e) {
    throw CliError(kExitConfig, e.what());
  }

  // Rate slope of est_sup_loo against n when three or more sizes are given.
  std::string slope = "NA", slope_se = "NA";
  if (ns.size() >= 3) {
    bool increasing = true, positive = true;
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < ns.size(); ++i) {
      if (i > 0 && ns[i] <= ns[i - 1]) increasing = false;
      if (!(reports[i].est_sup_loo > 0.0)) positive = false;
      lx.push_back(std::log(static_cast<double>(ns[i])));
      ly.push_back(positive ? std::log(reports[i].est_sup_loo) : 0.0);
    }
    if (increasing && positive) {
      const auto fit = stats::ols_line(lx, ly);
      slope = fmt6(fit.slope);
      slope_se = fmt6(fit.slope_se);
    }
  }

  Sink sink(o.common.out, out);
  auto& os = sink.stream();
  os << "n,m,B,probes,reps,est_a_train_L1,est_a_fresh_L2,est_nu_train_L1,est_nu_fresh_L2,est_sup_loo,"
        "est_sup_loo_q,est_sup_loo_p,slope,slope_se";
  if (s.equicont_reps > 0) os << ",median_stat_A,median_stat_V";
  os << '\n';
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    os << r.n << ',' << r.m << ',' << r.B << ',' << r.probes << ',' << r.replications << ',' << fmt6(r.est_a_train_L1)
       << ',' << fmt6(r.est_a_fresh_L2) << ',' << fmt6(r.est_nu_train_L1) << ',' << fmt6(r.est_nu_fresh_L2) << ','
       << fmt6(r.est_sup_loo) << ',' << fmt6(r.est_sup_loo_q) << ',' << fmt6(r.est_sup_loo_p) << ',' << slope << ','
       << slope_se;
    if (s.equicont_reps > 0) os << ',' << fmt6(med_A[i]) << ',' << fmt6(med_V[i]);
    os << '\n';
  }
  sink.close();
  return kExitOk;
}

inline int cmd_counterexample(const Options& o, std::ostream& out) {
  const auto& c = o.counterexample;
  const auto ns = parse_index_list(c.n, "n");
  const Rng root(o.common.seed);
  std::vector<CounterexampleReport> reports;
  try {
    for (Index n : ns)
      reports.push_back(counterexample_run(n, c.reps, root.child("n", static_cast<std::uint64_t>(n)),
                                           resolve_threads(o.common.threads)));
  } catch (const std::invalid_argument& e) {
    throw CliError(kExitConfig, e.what());
  }
  std::string slope = "NA";
  if (ns.size() >= 2) {
    std::vector<double> lx, ly;
    bool ok = true;
    for (std::size_t i = 0; i < ns.size(); ++i) {
      if (i > 0 && ns[i] <= ns[i - 1]) ok = false;
      if (!(reports[i].nu_loo_l2 > 0.0)) ok = false;
      lx.push_back(std::log(static_cast<double>(ns[i])));
      ly.push_back(ok ? std::log(reports[i].nu_loo_l2) : 0.0);
    }
    if (ok) slope = fmt6(stats::ols_line(lx, ly).slope);
  }

  Sink sink(o.common.out, out);
  sink.stream() << "n,reps,mean_lambda,ks_exp2,median_equicont,nu_loo_l2,sqrt_n_nu_loo_l2,max_training_nu,nu_slope\n";
  for (const auto& r : reports) {
    const std::string ks = r.lambda_samples.size() >= 100 ? fmt6(exp_rate2_ks(r.lambda_samples)) : "NA";
    sink.stream() << r.n << ',' << r.replications << ',' << fmt6(r.mean_lambda()) << ',' << ks << ','
                  << fmt6(stats::median(r.equicont_samples)) << ',' << fmt6(r.nu_loo_l2) << ','
                  << fmt6(std::sqrt(static_cast<double>(r.n)) * r.nu_loo_l2) << ',' << fmt6(r.max_training_nu)
                  << ',' << slope << '\n';
  }
  sink.close();
  if (!c.samples.empty()) {
    Sink samples(c.samples, out);
    samples.stream() << "n,rep,lambda,equicont\n";
    for (const auto& r : reports)
      for (std::size_t i = 0; i < r.lambda_samples.size(); ++i)
        samples.stream() << r.n << ',' << i << ',' << fmt6(r.lambda_samples[i]) << ','
                         << fmt6(r.equicont_samples[i]) << '\n';
    samples.close();
  }
  return kExitOk;
}

inline int cmd_regime(const Options& o, std::ostream& out) {
  const auto& g = o.regime;
  RegimeTheorem th;
  if (g.theorem == "thm3") th = RegimeTheorem::subsample_moments;
  else if (g.theorem == "thm4") th = RegimeTheorem::relaxed;
  else throw CliError(kExitConfig, "theorem must be thm3 or thm4");
  RegimeReport rep;
  try {
    rep = regime_check(g.n, g.m, g.B, g.k, th, g.r);
  } catch (const std::invalid_argument& e) {
    throw CliError(kExitConfig, e.what());
  }
  Sink sink(o.common.out, out);
  sink.stream() << "n,m,B,theorem,verdict,m_stable_bound,m_marginal_bound,required_B,explanation\n"
                << g.n << ',' << g.m << ',' << g.B << ',' << g.theorem << ',' << to_string(rep.verdict) << ','
                << fmt6(rep.m_stable_bound) << ',' << fmt6(rep.m_marginal_bound) << ',' << fmt6(rep.required_B)
                << ",\"" << rep.explanation << "\"\n";
  sink.close();
  return kExitOk;
}

inline int cmd_qq(const Options& o, std::ostream& out, std::ostream& log) {
  const auto& q = o.qq;
  std::ifstream in(q.input);
  if (!in) throw CliError(kExitIo, "cannot read raw file '" + q.input + "'");
  std::string line;
  if (!std::getline(in, line)) throw CliError(kExitConfig, "raw file is empty");
  const auto header = split(trim(line), ',');
  auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw CliError(kExitConfig, "raw file lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto c_cv = col("cv"), c_n = col("n"), c_nx = col("n_x"), c_theta = col("theta_hat");
  std::vector<double> theta;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    if (cells.size() != header.size()) throw CliError(kExitConfig, "ragged row in raw file");
    if (parse_index(cells[c_cv], "cv") != q.cv) continue;
    if (q.n > 0 && parse_index(cells[c_n], "n") != q.n) continue;
    if (q.n_x > 0 && parse_index(cells[c_nx], "n_x") != q.n_x) continue;
    theta.push_back(parse_double(cells[c_theta], "theta_hat"));
  }
  QqResult res;
  try {
    res = qq_points(theta);
  } catch (const std::invalid_argument& e) {
    throw CliError(kExitConfig, e.what());
  }
  Sink sink(o.common.out, out);
  sink.stream() << "theoretical,sample\n";
  if (res.zero_variance) log << "warning: zero variance in selected estimates; no Q-Q points\n";
  for (std::size_t i = 0; i < res.sample.size(); ++i)
    sink.stream() << fmt6(res.theoretical[i]) << ',' << fmt6(res.sample[i]) << '\n';
  sink.close();
  if (!res.zero_variance) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "[qq] points=%zu max_probability_gap=%.6f\n", res.sample.size(),
                  res.max_probability_gap());
    log << buf;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

// Long option names given on the command line for the selected subcommand.
inline std::map<std::string, bool> given_options(const CLI::App* sub) {
  std::map<std::string, bool> out;
  for (const auto* opt : sub->get_options())
    if (opt->count() > 0 && !opt->get_lnames().empty()) out[opt->get_lnames().front()] = true;
  return out;
}

inline const CLI::App* selected(const CLI::App& app) {
  const auto subs = app.get_subcommands();
  return subs.empty() ? nullptr : subs.front();
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    // Pass 1: command line only, to find the subcommand and config file.
    Options first;
    auto app = build_app(first);
    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
      app->parse(rev);
    } catch (const CLI::CallForHelp&) {
      out << app->help();
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) {
        // Help requested on a subcommand.
        std::ostringstream h;
        app->exit(e, h, h);
        out << h.str();
        return kExitOk;
      }
      err << "error: " << e.what() << "\nRun with --help for usage.\n";
      return kExitConfig;
    }
    const CLI::App* sub = selected(*app);
    std::map<std::string, bool> given = given_options(sub);

    Options opts;
    if (!first.common.config.empty()) {
      // Pass 2: config entries for options not given on the command line.
      std::vector<std::string> merged;
      merged.push_back(sub->get_name());
      for (const auto& [key, value] : read_config_file(first.common.config)) {
        const CLI::Option* opt = nullptr;
        for (const auto* candidate : sub->get_options())
          if (candidate->check_lname(key)) opt = candidate;
        if (!opt || key == "help" || key == "config")
          throw CliError(kExitConfig, "unknown config key '" + key + "' for " + sub->get_name());
        if (given.count(key)) continue;
        merged.push_back("--" + key);
        merged.push_back(value);
      }
      for (std::size_t i = 0; i < args.size(); ++i)
        if (i > 0 || args[0] != sub->get_name()) merged.push_back(args[i]);
      auto app2 = build_app(opts);
      std::vector<std::string> rev2(merged.rbegin(), merged.rend());
      try {
        app2->parse(rev2);
      } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
      }
      given = given_options(selected(*app2));
    } else {
      opts = first;
    }

    const std::string name = sub->get_name();
    if (name == "simulate") return cmd_simulate(opts, given, out, err);
    if (name == "estimate") return cmd_estimate(opts, out, err);
    if (name == "stability") return cmd_stability(opts, out);
    if (name == "counterexample") return cmd_counterexample(opts, out);
    if (name == "regime") return cmd_regime(opts, out);
    if (name == "qq") return cmd_qq(opts, out, err);
    err << "error: unknown subcommand\n";
    return kExitConfig;
  } catch (const CliError& e) {
    err << "error: " << e.what() << "\n";
    return e.code();
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ResourceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::ios_base::failure& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
}

inline int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace sdml::cli
