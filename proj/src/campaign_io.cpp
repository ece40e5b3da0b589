#include "fsibo/campaign_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "fsibo/format.hpp"

namespace fsibo::io {

using nlohmann::json;
using optimizer::CampaignConfig;
using optimizer::CampaignState;
using optimizer::EvaluationRecord;
using testbed::Family;

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(trim(cur));
  return out;
}

struct Entry {
  std::string key;
  std::string value;
  int line;
};

struct Section {
  std::string name;  // "campaign", "parameters", "init", "constraint", "testbed", "sailplane"
  std::string label; // constraint name
  int line;
  std::vector<Entry> entries;
};

const std::set<std::string> kCampaignKeys{"family",       "seed",         "n_init",         "max_iters",
                                          "stall_window", "stall_tol",    "fit_restarts",   "acquisition_budget",
                                          "quarantine_fraction", "objective", "output_dir"};
const std::set<std::string> kTestbedKeys{"q0",          "beta",           "gamma",           "kappa",
                                         "v0",          "second_moment",  "structural_nodes", "fluid_centers",
                                         "coupling_eps", "coupling_max_iter", "coupling_omega", "coupling_filter_tol",
                                         "uniform_min_modulus"};
const std::set<std::string> kSailKeys{"length",        "inflow_speed", "density",      "base_coefficient",
                                      "slope_coefficient", "camber_gain", "base_drag",  "second_moment",
                                      "pressure_length", "beta",       "gamma"};

class Parser {
 public:
  explicit Parser(const std::string& text) { lex(text); }

  CampaignDocument run() {
    const Entry* family_entry = find("campaign", "family");
    const Entry* seed_entry = find("campaign", "seed");
    if (!family_entry) problems_.push_back("missing required key 'family' in section [campaign]");
    if (!seed_entry) problems_.push_back("missing required key 'seed' in section [campaign]");
    if (!family_entry) fail();

    Family family = Family::Custom;
    try {
      family = testbed::parse_family(family_entry->value);
    } catch (const std::invalid_argument& e) {
      problems_.push_back(at(family_entry->line) + e.what());
      fail();
    }
    CampaignDocument doc = preset(family);
    apply_campaign(doc);
    apply_parameters(doc, family);
    apply_init(doc);
    apply_constraints(doc, family);
    apply_testbed(doc);
    apply_sail(doc);
    if (problems_.empty()) {
      try {
        doc.config.validate();
      } catch (const std::invalid_argument& e) {
        problems_.push_back(e.what());
      }
    }
    if (!problems_.empty()) fail();
    return doc;
  }

 private:
  std::vector<Section> sections_;
  std::vector<std::string> problems_;

  static std::string at(int line) { return "line " + std::to_string(line) + ": "; }

  [[noreturn]] void fail() { throw ConfigError(problems_); }

  void lex(const std::string& text) {
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    Section* cur = nullptr;
    while (std::getline(in, raw)) {
      ++line;
      const auto hash = raw.find('#');
      const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') {
          problems_.push_back(at(line) + "malformed section header '" + s + "'");
          cur = nullptr;
          continue;
        }
        const std::string inner = trim(s.substr(1, s.size() - 2));
        Section sec{inner, "", line, {}};
        const auto space = inner.find_first_of(" \t");
        if (space != std::string::npos) {
          sec.name = inner.substr(0, space);
          sec.label = trim(inner.substr(space));
        }
        static const std::set<std::string> known{"campaign", "parameters", "init", "constraint", "testbed", "sailplane"};
        if (!known.count(sec.name) || (sec.name == "constraint") != !sec.label.empty()) {
          problems_.push_back(at(line) + "unknown section [" + inner + "]");
          cur = nullptr;
          continue;
        }
        for (const auto& other : sections_) {
          if (other.name == sec.name && other.label == sec.label) {
            problems_.push_back(at(line) + "duplicate section [" + inner + "]");
          }
        }
        sections_.push_back(std::move(sec));
        cur = &sections_.back();
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) {
        problems_.push_back(at(line) + "expected 'key = value', got '" + s + "'");
        continue;
      }
      if (!cur) {
        problems_.push_back(at(line) + "key outside of any known section");
        continue;
      }
      Entry e{trim(s.substr(0, eq)), trim(s.substr(eq + 1)), line};
      if (e.key.empty()) {
        problems_.push_back(at(line) + "empty key");
        continue;
      }
      const bool repeatable = cur->name == "init" && e.key == "point";
      for (const auto& prev : cur->entries) {
        if (prev.key == e.key && !repeatable) problems_.push_back(at(line) + "duplicate key '" + e.key + "'");
      }
      cur->entries.push_back(std::move(e));
    }
  }

  const Section* section(const std::string& name, const std::string& label = "") const {
    for (const auto& s : sections_) {
      if (s.name == name && s.label == label) return &s;
    }
    return nullptr;
  }

  const Entry* find(const std::string& sec, const std::string& key) const {
    const Section* s = section(sec);
    if (!s) return nullptr;
    for (const auto& e : s->entries) {
      if (e.key == key) return &e;
    }
    return nullptr;
  }

  void check_keys(const Section& s, const std::set<std::string>& allowed) {
    for (const auto& e : s.entries) {
      if (!allowed.count(e.key)) {
        problems_.push_back(at(e.line) + "unknown key '" + e.key + "' in section [" + s.name +
                            (s.label.empty() ? "" : " " + s.label) + "]");
      }
    }
  }

  bool number(const Entry& e, double& out) {
    try {
      out = format::parse_double(e.value);
      if (!std::isfinite(out)) throw std::invalid_argument("non-finite");
      return true;
    } catch (const std::invalid_argument&) {
      problems_.push_back(at(e.line) + "'" + e.key + "' expects a finite number, got '" + e.value + "'");
      return false;
    }
  }

  template <typename Int>
  bool integer(const Entry& e, Int& out) {
    Int v{};
    const auto res = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
    if (res.ec != std::errc() || res.ptr != e.value.data() + e.value.size()) {
      problems_.push_back(at(e.line) + "'" + e.key + "' expects an integer, got '" + e.value + "'");
      return false;
    }
    out = v;
    return true;
  }

  void apply_campaign(CampaignDocument& doc) {
    const Section* s = section("campaign");
    if (!s) return;
    check_keys(*s, kCampaignKeys);
    auto& c = doc.config;
    for (const auto& e : s->entries) {
      if (e.key == "seed") integer(e, c.seed);
      else if (e.key == "n_init") integer(e, c.n_init);
      else if (e.key == "max_iters") integer(e, c.max_iters);
      else if (e.key == "stall_window") integer(e, c.stall_window);
      else if (e.key == "stall_tol") number(e, c.stall_tol);
      else if (e.key == "fit_restarts") integer(e, c.fit_restarts);
      else if (e.key == "acquisition_budget") integer(e, c.acquisition_budget);
      else if (e.key == "quarantine_fraction") number(e, c.quarantine_fraction);
      else if (e.key == "objective") c.objective_name = e.value;
      else if (e.key == "output_dir") doc.output_dir = e.value;
    }
    if (const Entry* e = find("campaign", "n_init"); e && !section("init")) c.init_points.clear();
  }

  void apply_parameters(CampaignDocument& doc, Family family) {
    const Section* s = section("parameters");
    if (!s) {
      if (family == Family::Custom) problems_.push_back("missing required section [parameters] for family 'custom'");
      return;
    }
    std::vector<std::string> names;
    std::vector<double> lo, hi;
    for (const auto& e : s->entries) {
      const auto parts = split_list(e.value);
      double a = 0, b = 0;
      if (parts.size() != 2) {
        problems_.push_back(at(e.line) + "parameter '" + e.key + "' expects 'lower, upper'");
        continue;
      }
      const Entry ea{e.key, parts[0], e.line}, eb{e.key, parts[1], e.line};
      if (!number(ea, a) || !number(eb, b)) continue;
      if (!(a < b)) problems_.push_back(at(e.line) + "bound inversion for parameter '" + e.key + "'");
      names.push_back(e.key);
      lo.push_back(a);
      hi.push_back(b);
    }
    if (names.empty()) {
      problems_.push_back(at(s->line) + "section [parameters] declares no parameters");
      return;
    }
    if (family != Family::Custom && names != doc.config.parameter_names) {
      problems_.push_back(at(s->line) + "family '" + testbed::to_string(family) + "' expects parameters (" +
                          join(doc.config.parameter_names, ", ") + ")");
      return;
    }
    doc.config.parameter_names = names;
    doc.config.bounds.lower = Eigen::Map<Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    doc.config.bounds.upper = Eigen::Map<Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  }

  void apply_init(CampaignDocument& doc) {
    const Section* s = section("init");
    if (!s) return;
    check_keys(*s, {"point"});
    std::vector<Eigen::VectorXd> pts;
    for (const auto& e : s->entries) {
      if (e.key != "point") continue;
      const auto parts = split_list(e.value);
      Eigen::VectorXd x(static_cast<Eigen::Index>(parts.size()));
      bool ok = true;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        double v = 0;
        ok = number(Entry{e.key, parts[i], e.line}, v) && ok;
        x(static_cast<Eigen::Index>(i)) = v;
      }
      if (!ok) continue;
      if (x.size() != doc.config.bounds.dim()) {
        problems_.push_back(at(e.line) + "init point has " + std::to_string(x.size()) + " values, expected " +
                            std::to_string(doc.config.bounds.dim()));
        continue;
      }
      if (!doc.config.bounds.contains(x)) {
        problems_.push_back(at(e.line) + "init point " + std::to_string(pts.size()) + " lies outside the bounds");
      }
      pts.push_back(x);
    }
    doc.config.init_points = pts;
    if (!pts.empty()) doc.config.n_init = static_cast<int>(pts.size());
  }

  void apply_constraints(CampaignDocument& doc, Family family) {
    std::vector<optimizer::NamedConstraint> custom;
    for (const auto& s : sections_) {
      if (s.name != "constraint") continue;
      check_keys(s, {"sense", "threshold"});
      optimizer::NamedConstraint nc{s.label, {}};
      auto existing = std::find_if(doc.config.constraints.begin(), doc.config.constraints.end(),
                                   [&](const auto& c) { return c.name == s.label; });
      if (family != Family::Custom) {
        if (existing == doc.config.constraints.end()) {
          problems_.push_back(at(s.line) + "family '" + testbed::to_string(family) + "' has no constraint '" + s.label + "'");
          continue;
        }
        nc = *existing;
      }
      bool has_threshold = false, has_sense = false;
      for (const auto& e : s.entries) {
        if (e.key == "threshold") has_threshold = number(e, nc.spec.threshold);
        if (e.key == "sense") {
          try {
            nc.spec.sense = acquisition::parse_sense(e.value);
            has_sense = true;
          } catch (const std::invalid_argument& err) {
            problems_.push_back(at(e.line) + err.what());
          }
        }
      }
      if (family == Family::Custom) {
        if (!has_threshold) problems_.push_back(at(s.line) + "missing required key 'threshold' in [constraint " + s.label + "]");
        if (!has_sense) problems_.push_back(at(s.line) + "missing required key 'sense' in [constraint " + s.label + "]");
        custom.push_back(nc);
      } else {
        *existing = nc;
      }
    }
    if (family == Family::Custom) doc.config.constraints = custom;
  }

  void apply_testbed(CampaignDocument& doc) {
    const Section* s = section("testbed");
    if (!s) return;
    check_keys(*s, kTestbedKeys);
    auto& p = doc.problem;
    for (const auto& e : s->entries) {
      if (e.key == "q0") number(e, p.fluid.q0);
      else if (e.key == "beta") number(e, p.fluid.beta);
      else if (e.key == "gamma") number(e, p.fluid.gamma);
      else if (e.key == "kappa") number(e, p.kappa);
      else if (e.key == "v0") number(e, p.v0);
      else if (e.key == "second_moment") number(e, p.section.second_moment);
      else if (e.key == "structural_nodes") integer(e, p.structural_nodes);
      else if (e.key == "fluid_centers") integer(e, p.fluid_centers);
      else if (e.key == "coupling_eps") number(e, p.coupling.eps);
      else if (e.key == "coupling_max_iter") integer(e, p.coupling.max_iter);
      else if (e.key == "coupling_omega") number(e, p.coupling.omega);
      else if (e.key == "coupling_filter_tol") number(e, p.coupling.filter_tol);
      else if (e.key == "uniform_min_modulus") number(e, p.uniform_min_modulus);
    }
    if (p.structural_nodes < 2 || p.fluid_centers < 1) problems_.push_back(at(s->line) + "grid sizes too small");
    if (!(p.coupling.eps > 0.0)) problems_.push_back(at(s->line) + "coupling_eps must be positive");
  }

  void apply_sail(CampaignDocument& doc) {
    const Section* s = section("sailplane");
    if (!s) return;
    check_keys(*s, kSailKeys);
    auto& p = doc.problem.sail;
    for (const auto& e : s->entries) {
      if (e.key == "length") number(e, p.length);
      else if (e.key == "inflow_speed") number(e, p.inflow_speed);
      else if (e.key == "density") number(e, p.density);
      else if (e.key == "base_coefficient") number(e, p.base_coefficient);
      else if (e.key == "slope_coefficient") number(e, p.slope_coefficient);
      else if (e.key == "camber_gain") number(e, p.camber_gain);
      else if (e.key == "base_drag") number(e, p.base_drag);
      else if (e.key == "second_moment") number(e, p.second_moment);
      else if (e.key == "pressure_length") number(e, p.pressure_length);
      else if (e.key == "beta") number(e, p.beta);
      else if (e.key == "gamma") number(e, p.gamma);
    }
  }
};

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd vector_from_json(const json& j) {
  if (!j.is_array()) throw std::invalid_argument("expected an array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw std::invalid_argument("expected an array of numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

std::string num(double v) { return format::shortest(v); }

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << content;
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error("configuration error: " + join(problems, "; ")), problems_(std::move(problems)) {}

CampaignDocument preset(Family family) {
  CampaignDocument doc;
  doc.problem.family = family;
  auto& c = doc.config;
  const double l = testbed::kBeamLength;
  switch (family) {
    case Family::Example1:
      c.parameter_names = {"A"};
      c.bounds = {vec({-31.9088}), vec({31.9088})};
      c.objective_name = "delta";
      c.constraints = {{"v_x", {1.4, acquisition::Sense::AtMost}}};
      c.n_init = 4;
      c.max_iters = 6;
      break;
    case Family::Example2:
      c.parameter_names = {"B"};
      c.bounds = {vec({0.0}), vec({10.0})};
      c.objective_name = "delta";
      c.n_init = 4;
      c.max_iters = 11;
      break;
    case Family::Example3:
      c.parameter_names = {"x_b"};
      c.bounds = {vec({l / 6.0}), vec({l - l / 6.0})};
      c.objective_name = "delta";
      c.init_points = {vec({0.0585}), vec({0.1755}), vec({0.2915})};
      c.n_init = 3;
      c.max_iters = 14;
      break;
    case Family::SailPlane:
      c.parameter_names = {"theta", "E"};
      c.bounds = {vec({0.0, 30.0}), vec({10.0, 50.0})};
      c.objective_name = "F_D";
      c.constraints = {{"F_L", {12000.0, acquisition::Sense::AtLeast}},
                       {"delta", {2.5e-3, acquisition::Sense::AtMost}},
                       {"dp", {1.2e5, acquisition::Sense::AtMost}}};
      c.init_points = {vec({0.0, 40.0}), vec({2.5, 40.0}), vec({5.0, 40.0}), vec({7.5, 40.0}),
                       vec({10.0, 40.0}), vec({2.5, 30.0}), vec({7.5, 50.0}), vec({10.0, 30.0})};
      c.n_init = 8;
      c.max_iters = 8;
      break;
    case Family::Custom:
      c.objective_name = "f";
      break;
  }
  return doc;
}

CampaignDocument parse_config(const std::string& text) { return Parser(text).run(); }

CampaignDocument load_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError({"cannot read config file " + path.string()});
  return parse_config(read_file(path));
}

std::string echo_config(const CampaignDocument& doc) {
  const auto& c = doc.config;
  const auto& p = doc.problem;
  std::ostringstream os;
  os << "[campaign]\n"
     << "family = " << testbed::to_string(p.family) << "\n"
     << "seed = " << c.seed << "\n"
     << "n_init = " << c.n_init << "\n"
     << "max_iters = " << c.max_iters << "\n"
     << "stall_window = " << c.stall_window << "\n"
     << "stall_tol = " << num(c.stall_tol) << "\n"
     << "fit_restarts = " << c.fit_restarts << "\n"
     << "acquisition_budget = " << c.acquisition_budget << "\n"
     << "quarantine_fraction = " << num(c.quarantine_fraction) << "\n"
     << "objective = " << c.objective_name << "\n";
  if (!doc.output_dir.empty()) os << "output_dir = " << doc.output_dir << "\n";
  os << "\n[parameters]\n";
  for (std::size_t i = 0; i < c.parameter_names.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    os << c.parameter_names[i] << " = " << num(c.bounds.lower(k)) << ", " << num(c.bounds.upper(k)) << "\n";
  }
  if (!c.init_points.empty()) {
    os << "\n[init]\n";
    for (const auto& x : c.init_points) {
      os << "point = ";
      for (Eigen::Index k = 0; k < x.size(); ++k) os << (k ? ", " : "") << num(x(k));
      os << "\n";
    }
  }
  for (const auto& nc : c.constraints) {
    os << "\n[constraint " << nc.name << "]\n"
       << "sense = " << acquisition::to_string(nc.spec.sense) << "\n"
       << "threshold = " << num(nc.spec.threshold) << "\n";
  }
  os << "\n[testbed]\n"
     << "q0 = " << num(p.fluid.q0) << "\n"
     << "beta = " << num(p.fluid.beta) << "\n"
     << "gamma = " << num(p.fluid.gamma) << "\n"
     << "kappa = " << num(p.kappa) << "\n"
     << "v0 = " << num(p.v0) << "\n"
     << "second_moment = " << num(p.section.second_moment) << "\n"
     << "structural_nodes = " << p.structural_nodes << "\n"
     << "fluid_centers = " << p.fluid_centers << "\n"
     << "coupling_eps = " << num(p.coupling.eps) << "\n"
     << "coupling_max_iter = " << p.coupling.max_iter << "\n"
     << "coupling_omega = " << num(p.coupling.omega) << "\n"
     << "coupling_filter_tol = " << num(p.coupling.filter_tol) << "\n"
     << "uniform_min_modulus = " << num(p.uniform_min_modulus) << "\n";
  const auto& s = p.sail;
  os << "\n[sailplane]\n"
     << "length = " << num(s.length) << "\n"
     << "inflow_speed = " << num(s.inflow_speed) << "\n"
     << "density = " << num(s.density) << "\n"
     << "base_coefficient = " << num(s.base_coefficient) << "\n"
     << "slope_coefficient = " << num(s.slope_coefficient) << "\n"
     << "camber_gain = " << num(s.camber_gain) << "\n"
     << "base_drag = " << num(s.base_drag) << "\n"
     << "second_moment = " << num(s.second_moment) << "\n"
     << "pressure_length = " << num(s.pressure_length) << "\n"
     << "beta = " << num(s.beta) << "\n"
     << "gamma = " << num(s.gamma) << "\n";
  return os.str();
}

optimizer::Evaluator testbed_evaluator(const CampaignDocument& doc) {
  if (doc.problem.family == Family::Custom) {
    throw std::invalid_argument("family 'custom' has no built-in evaluator; use ask-tell mode");
  }
  const auto problem = doc.problem;
  const auto names = doc.config.constraints;
  return [problem, names](const Eigen::VectorXd& x) -> std::optional<optimizer::Observation> {
    try {
      const auto out = testbed::coupled_evaluate(problem, testbed::profile_for(problem.family, x));
      optimizer::Observation obs{out.objective, {}};
      for (const auto& nc : names) obs.c.push_back(out.constraint(nc.name));
      return obs;
    } catch (const testbed::EvaluationFailure&) {
      return std::nullopt;
    }
  };
}

std::string serialize_state(const CampaignDocument& doc, const CampaignState& state,
                            const std::optional<PendingAsk>& pending) {
  json j;
  j["format"] = "fsibo-state";
  j["version"] = 1;
  j["config"] = echo_config(doc);
  json recs = json::array();
  for (const auto& r : state.history()) {
    json jr;
    jr["iteration"] = r.iteration;
    jr["x"] = to_json(r.x);
    jr["failed"] = r.failed;
    if (!r.failed) {
      jr["f"] = r.f;
      jr["c"] = r.c;
    }
    recs.push_back(jr);
  }
  j["records"] = recs;
  json fits = json::array();
  for (const auto& f : state.fits()) {
    fits.push_back({{"name", f.name},
                    {"signal_var", f.hp.signal_var},
                    {"lengthscale", f.hp.lengthscale},
                    {"noise_var", f.hp.noise_var},
                    {"fallback", f.fallback}});
  }
  j["fits"] = fits;
  if (pending) {
    j["pending"] = {{"iteration", pending->iteration}, {"x", to_json(pending->x)}};
  } else {
    j["pending"] = nullptr;
  }
  return j.dump(1) + "\n";
}

PersistedState deserialize_state(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("format", "") != "fsibo-state" || j.value("version", 0) != 1) {
    throw std::invalid_argument("state: unsupported format or version");
  }
  CampaignDocument doc = parse_config(j.at("config").get<std::string>());
  CampaignState state(doc.config);
  for (const auto& jr : j.at("records")) {
    EvaluationRecord r;
    r.iteration = jr.at("iteration").get<int>();
    r.x = vector_from_json(jr.at("x"));
    r.failed = jr.at("failed").get<bool>();
    if (!r.failed) {
      r.f = jr.at("f").get<double>();
      r.c = jr.at("c").get<std::vector<double>>();
    }
    state.append(r);
  }
  std::vector<optimizer::SurrogateFit> fits;
  for (const auto& jf : j.at("fits")) {
    fits.push_back({jf.at("name").get<std::string>(),
                    {jf.at("signal_var").get<double>(), jf.at("lengthscale").get<double>(), jf.at("noise_var").get<double>()},
                    jf.at("fallback").get<bool>()});
  }
  state.set_fits(std::move(fits));
  std::optional<PendingAsk> pending;
  if (j.contains("pending") && !j.at("pending").is_null()) {
    pending = PendingAsk{vector_from_json(j["pending"].at("x")), j["pending"].at("iteration").get<int>()};
  }
  return PersistedState{std::move(doc), std::move(state), std::move(pending)};
}

void save_state(const fs::path& path, const CampaignDocument& doc, const CampaignState& state,
                const std::optional<PendingAsk>& pending) {
  fs::path tmp = path;
  tmp += ".tmp";
  write_file(tmp, serialize_state(doc, state, pending));
  fs::rename(tmp, path);
}

PersistedState load_state(const fs::path& path) { return deserialize_state(read_file(path)); }

std::string iteration_tag(int iteration) { return iteration == 0 ? "Init" : std::to_string(iteration); }

std::string log_header(const CampaignConfig& cfg) {
  std::vector<std::string> cols{"Iteration"};
  for (const auto& n : cfg.parameter_names) cols.push_back(n);
  cols.push_back(cfg.objective_name);
  for (const auto& c : cfg.constraints) cols.push_back(c.name);
  cols.push_back("feasible");
  cols.push_back("best");
  return join(cols, ",") + "\n";
}

std::string log_row(const CampaignConfig& cfg, const EvaluationRecord& rec, const std::optional<double>& best) {
  std::vector<std::string> cols{iteration_tag(rec.iteration)};
  for (Eigen::Index k = 0; k < rec.x.size(); ++k) cols.push_back(num(rec.x(k)));
  if (rec.failed) {
    cols.push_back("failed");
    for (std::size_t k = 0; k < cfg.constraints.size(); ++k) cols.emplace_back();
  } else {
    cols.push_back(num(rec.f));
    for (double v : rec.c) cols.push_back(num(v));
  }
  cols.push_back(rec.feasible ? "1" : "0");
  cols.push_back(best ? num(*best) : "");
  return join(cols, ",") + "\n";
}

std::string render_log(const CampaignState& state) {
  std::string out = log_header(state.config());
  for (std::size_t i = 0; i < state.history().size(); ++i) {
    out += log_row(state.config(), state.history()[i], state.best_series()[i]);
  }
  return out;
}

std::string render_best_series(const CampaignState& state) {
  std::string out = "iteration,best\n";
  const auto& h = state.history();
  const auto& best = state.best_series();
  for (std::size_t i = 0; i < h.size(); ++i) {
    const bool last_init = h[i].is_init() && (i + 1 == h.size() || !h[i + 1].is_init());
    if (h[i].is_init() && !last_init) continue;
    out += (h[i].is_init() ? std::string("Init") : std::to_string(h[i].iteration)) + "," +
           (best[i] ? num(*best[i]) : "") + "\n";
  }
  return out;
}

namespace {

// Mean and variance per surrogate (objective first), either from posteriors or from the prior.
struct Predictor {
  const optimizer::Surrogates* surrogates = nullptr;
  std::vector<double> prior_mean;
  std::vector<double> prior_var;

  std::pair<double, double> operator()(std::size_t s, const Eigen::VectorXd& x) const {
    if (surrogates) {
      const auto p = surrogates->posteriors[s].predict(x);
      return {p.mean, p.var};
    }
    return {prior_mean[s], prior_var[s]};
  }
};

Predictor make_predictor(const CampaignState& state, const optimizer::Surrogates* surrogates) {
  Predictor pr;
  pr.surrogates = surrogates;
  if (surrogates) return pr;
  const auto& cfg = state.config();
  const std::size_t ns = 1 + cfg.constraints.size();
  for (std::size_t s = 0; s < ns; ++s) {
    std::vector<double> ys;
    for (const auto& r : state.history()) {
      if (!r.failed) ys.push_back(s == 0 ? r.f : r.c[s - 1]);
    }
    Eigen::VectorXd y = Eigen::Map<Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size()));
    const auto norm = gp::Normalization::fit(cfg.bounds.lower, cfg.bounds.upper, y);
    pr.prior_mean.push_back(norm.y_mean);
    pr.prior_var.push_back(norm.y_scale * norm.y_scale);
  }
  return pr;
}

double cei_from(const Predictor& pr, const CampaignConfig& cfg, const acquisition::Incumbent& inc,
                const Eigen::VectorXd& x, double* rho_out = nullptr) {
  double rho = 1.0;
  for (std::size_t k = 0; k < cfg.constraints.size(); ++k) {
    const auto [m, v] = pr(k + 1, x);
    rho *= acquisition::feasibility_probability(m, v, cfg.constraints[k].spec);
  }
  if (rho_out) *rho_out = rho;
  if (!inc.feasible_found) return rho;
  const auto [m, v] = pr(0, x);
  return acquisition::expected_improvement(m, v, inc.f_best) * rho;
}

std::vector<std::string> surrogate_names(const CampaignConfig& cfg) {
  std::vector<std::string> names{cfg.objective_name};
  for (const auto& c : cfg.constraints) names.push_back(c.name);
  return names;
}

std::string curve_header(const CampaignConfig& cfg, const std::string& xname) {
  std::vector<std::string> cols{xname};
  for (const auto& n : surrogate_names(cfg)) {
    cols.push_back(n + "_mean");
    cols.push_back(n + "_lo95");
    cols.push_back(n + "_hi95");
  }
  cols.push_back("cei");
  return join(cols, ",") + "\n";
}

std::string curve_row(const Predictor& pr, const CampaignConfig& cfg, const acquisition::Incumbent& inc,
                      const Eigen::VectorXd& x, double coord) {
  std::vector<std::string> cols{num(coord)};
  for (std::size_t s = 0; s < 1 + cfg.constraints.size(); ++s) {
    const auto [m, v] = pr(s, x);
    const double sd = std::sqrt(std::max(v, 0.0));
    cols.push_back(num(m));
    cols.push_back(num(m - 1.96 * sd));
    cols.push_back(num(m + 1.96 * sd));
  }
  cols.push_back(num(cei_from(pr, cfg, inc, x)));
  return join(cols, ",") + "\n";
}

}  // namespace

PlotFiles write_plot_data(const fs::path& stem, const CampaignState& state, const optimizer::Surrogates* surrogates,
                          int grid) {
  const auto& cfg = state.config();
  const auto& inc = state.incumbent();
  const Predictor pr = make_predictor(state, surrogates);
  const Eigen::Index d = cfg.bounds.dim();
  PlotFiles out;
  const auto lerp = [&](Eigen::Index k, int i, int n) {
    return cfg.bounds.lower(k) + (cfg.bounds.upper(k) - cfg.bounds.lower(k)) * i / (n - 1);
  };

  if (d == 1) {
    std::string body = curve_header(cfg, cfg.parameter_names[0]);
    for (int i = 0; i < grid; ++i) {
      Eigen::VectorXd x(1);
      x(0) = lerp(0, i, grid);
      body += curve_row(pr, cfg, inc, x, x(0));
    }
    fs::path path = stem;
    path += "_curves.csv";
    write_file(path, body);
    out.files.push_back(path);
    return out;
  }
  if (d == 2) {
    const int n = std::max(2, grid / 2);
    std::string body =
        cfg.parameter_names[0] + "," + cfg.parameter_names[1] + "," + cfg.objective_name + "_mean,feasible,cei\n";
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        Eigen::VectorXd x(2);
        x << lerp(0, i, n), lerp(1, j, n);
        double rho = 1.0;
        const double cei = cei_from(pr, cfg, inc, x, &rho);
        body += num(x(0)) + "," + num(x(1)) + "," + num(pr(0, x).first) + "," + (rho >= 0.5 ? "1" : "0") + "," +
                num(cei) + "\n";
      }
    }
    fs::path path = stem;
    path += "_map.csv";
    write_file(path, body);
    out.files.push_back(path);
    return out;
  }
  // Higher dimensions: one marginal slice per parameter through the incumbent (or the box center).
  const Eigen::VectorXd anchor =
      inc.feasible_found ? inc.x_best : Eigen::VectorXd(0.5 * (cfg.bounds.lower + cfg.bounds.upper));
  out.notice = "problem has " + std::to_string(d) + " parameters; emitting marginal slices through " +
               (inc.feasible_found ? std::string("the incumbent") : std::string("the box center"));
  for (Eigen::Index k = 0; k < d; ++k) {
    std::string body = curve_header(cfg, cfg.parameter_names[k]);
    for (int i = 0; i < grid; ++i) {
      Eigen::VectorXd x = anchor;
      x(k) = lerp(k, i, grid);
      body += curve_row(pr, cfg, inc, x, x(k));
    }
    fs::path path = stem;
    path += "_slice_" + cfg.parameter_names[k] + ".csv";
    write_file(path, body);
    out.files.push_back(path);
  }
  return out;
}

PlotFiles emit_plots(const fs::path& state_path, const fs::path& out_dir) {
  const PersistedState ps = load_state(state_path);
  const auto& state = ps.state;
  fs::create_directories(out_dir);
  if (state.fits().empty()) return write_plot_data(out_dir / "surrogates", state, nullptr);

  // Rebuild the posteriors from the recorded hyperparameters on the same usable records.
  const auto& cfg = state.config();
  std::vector<const EvaluationRecord*> usable;
  for (const auto& r : state.history()) {
    if (!r.failed) usable.push_back(&r);
  }
  const auto n = static_cast<Eigen::Index>(usable.size());
  Eigen::MatrixXd X(n, cfg.bounds.dim());
  for (Eigen::Index i = 0; i < n; ++i) X.row(i) = usable[i]->x.transpose();
  optimizer::Surrogates sur;
  const auto names = surrogate_names(cfg);
  for (std::size_t s = 0; s < names.size(); ++s) {
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y(i) = s == 0 ? usable[i]->f : usable[i]->c[s - 1];
    const auto it = std::find_if(state.fits().begin(), state.fits().end(), [&](const auto& f) { return f.name == names[s]; });
    if (it == state.fits().end()) throw std::invalid_argument("state: no recorded fit for surrogate '" + names[s] + "'");
    sur.posteriors.emplace_back(gp::Dataset(X, y, gp::Normalization::fit(cfg.bounds.lower, cfg.bounds.upper, y)), it->hp);
    sur.fits.push_back(*it);
  }
  return write_plot_data(out_dir / "surrogates", state, &sur);
}

int run_auto(const CampaignDocument& doc, const fs::path& out_dir, const RunOptions& opts, std::ostream& diag) {
  optimizer::Evaluator evaluator;
  try {
    evaluator = testbed_evaluator(doc);
  } catch (const std::invalid_argument& e) {
    diag << "error: " << e.what() << "\n";
    return kConfigError;
  }
  fs::create_directories(out_dir);
  write_file(out_dir / "config.echo.ini", echo_config(doc));
  const fs::path state_path = out_dir / "state.json";

  std::optional<CampaignState> state;
  if (opts.resume && fs::exists(state_path)) {
    auto ps = load_state(state_path);
    if (!(ps.doc == doc)) {
      diag << "error: persisted state was produced by a different configuration\n";
      return kConfigError;
    }
    state.emplace(std::move(ps.state));
  } else {
    state.emplace(doc.config);
  }

  write_file(out_dir / "iterations.csv", render_log(*state));
  write_file(out_dir / "best.csv", render_best_series(*state));
  std::ofstream log(out_dir / "iterations.csv", std::ios::binary | std::ios::app);

  int budget_left = opts.stop_after_evaluations.value_or(-1);
  optimizer::StopDecision decision;
  try {
    while (budget_left != 0) {
      auto ask = optimizer::next_ask(*state, &decision);
      if (!ask) break;
      if (ask->proposal && opts.plots) {
        write_plot_data(out_dir / "plots" / ("iter_" + std::to_string(ask->iteration)), *state,
                        &ask->proposal->surrogates);
      }
      const auto obs = evaluator(ask->x);
      if (obs) {
        optimizer::tell(*state, ask->x, obs->f, obs->c, ask->iteration);
      } else {
        optimizer::tell_failure(*state, ask->x, ask->iteration);
        diag << "warning: evaluation failed at iteration " << iteration_tag(ask->iteration) << "; point quarantined\n";
      }
      log << log_row(state->config(), state->history().back(), state->best_series().back()) << std::flush;
      write_file(out_dir / "best.csv", render_best_series(*state));
      save_state(state_path, doc, *state);
      if (budget_left > 0) --budget_left;
    }
  } catch (const optimizer::SurrogateFitError& e) {
    diag << "error: " << e.what() << "\n";
    save_state(state_path, doc, *state);
    return kEvaluationError;
  }
  save_state(state_path, doc, *state);

  const bool interrupted = !decision.stop;
  std::ostringstream summary;
  summary << "family = " << testbed::to_string(doc.problem.family) << "\n"
          << "evaluations = " << state->evaluations() << "\n"
          << "proposals = " << state->proposals() << "\n"
          << "stop_reason = " << (interrupted ? std::string("interrupted") : optimizer::to_string(decision.reason)) << "\n";
  const auto& inc = state->incumbent();
  if (inc.feasible_found) {
    summary << "incumbent_" << doc.config.objective_name << " = " << num(inc.f_best) << "\n";
    for (std::size_t k = 0; k < doc.config.parameter_names.size(); ++k) {
      summary << "incumbent_" << doc.config.parameter_names[k] << " = " << num(inc.x_best(static_cast<Eigen::Index>(k)))
              << "\n";
    }
  } else {
    summary << "incumbent = none (no feasible evaluation)\n";
  }
  write_file(out_dir / "summary.txt", summary.str());
  if (opts.plots && !interrupted) {
    const auto files = emit_plots(state_path, out_dir / "plots");
    if (!files.notice.empty()) diag << "notice: " << files.notice << "\n";
  }
  return kOk;
}

namespace {

json propose_message(const PendingAsk& p) {
  json j;
  j["type"] = "propose";
  j["iteration"] = p.iteration == 0 ? json("Init") : json(p.iteration);
  j["x"] = to_json(p.x);
  return j;
}

struct ParsedObserve {
  Eigen::VectorXd x;
  bool failed = false;
  double f = 0.0;
  std::vector<double> c;
};

ParsedObserve parse_observe(const std::string& line, const CampaignConfig& cfg, const PendingAsk& pending) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("not a JSON record: ") + e.what());
  }
  if (!j.is_object() || j.value("type", "") != "observe") throw std::invalid_argument("expected a record with type 'observe'");
  if (!j.contains("x")) throw std::invalid_argument("observe: missing field 'x'");
  ParsedObserve o;
  o.x = vector_from_json(j["x"]);
  if (o.x.size() != pending.x.size()) throw std::invalid_argument("observe: 'x' has the wrong dimension");
  if ((o.x - pending.x).cwiseAbs().maxCoeff() > 1e-9) {
    throw std::invalid_argument("observe: echoed parameters deviate from the proposal by more than 1e-9");
  }
  if (j.value("failed", false)) {
    o.failed = true;
    return o;
  }
  if (!j.contains("f") || !j["f"].is_number()) throw std::invalid_argument("observe: missing numeric field 'f'");
  o.f = j["f"].get<double>();
  if (cfg.constraints.empty() && !j.contains("c")) return o;
  if (!j.contains("c") || !j["c"].is_array()) throw std::invalid_argument("observe: missing array field 'c'");
  for (const auto& v : j["c"]) {
    if (!v.is_number()) throw std::invalid_argument("observe: 'c' must contain numbers");
    o.c.push_back(v.get<double>());
  }
  if (o.c.size() != cfg.constraints.size()) {
    throw std::invalid_argument("observe: expected " + std::to_string(cfg.constraints.size()) + " constraint values");
  }
  if (!std::isfinite(o.f)) throw std::invalid_argument("observe: 'f' must be finite");
  return o;
}

}  // namespace

int run_asktell(const CampaignDocument& doc_in, const fs::path& state_path, std::istream& in, std::ostream& out,
                std::ostream& diag, const std::optional<fs::path>& log_dir) {
  constexpr int kMaxConsecutiveErrors = 3;
  CampaignDocument doc = doc_in;
  std::optional<CampaignState> state;
  std::optional<PendingAsk> pending;
  if (fs::exists(state_path)) {
    try {
      auto ps = load_state(state_path);
      if (!(ps.doc == doc)) {
        diag << "error: persisted state was produced by a different configuration\n";
        return kConfigError;
      }
      state.emplace(std::move(ps.state));
      pending = std::move(ps.pending);
    } catch (const std::exception& e) {
      diag << "error: cannot resume from " << state_path.string() << ": " << e.what() << "\n";
      return kConfigError;
    }
  } else {
    state.emplace(doc.config);
  }

  const auto write_logs = [&] {
    if (!log_dir) return;
    write_file(*log_dir / "iterations.csv", render_log(*state));
    write_file(*log_dir / "best.csv", render_best_series(*state));
  };

  json hello;
  hello["type"] = "hello";
  hello["protocol"] = "fsibo-asktell";
  hello["version"] = 1;
  hello["parameters"] = doc.config.parameter_names;
  hello["objective"] = doc.config.objective_name;
  json cons = json::array();
  for (const auto& c : doc.config.constraints) {
    cons.push_back({{"name", c.name}, {"sense", acquisition::to_string(c.spec.sense)}, {"threshold", c.spec.threshold}});
  }
  hello["constraints"] = cons;
  hello["evaluations"] = state->evaluations();
  out << hello.dump() << "\n" << std::flush;

  int errors = 0;
  while (true) {
    if (!pending) {
      optimizer::StopDecision decision;
      std::optional<optimizer::Ask> ask;
      try {
        ask = optimizer::next_ask(*state, &decision);
      } catch (const optimizer::SurrogateFitError& e) {
        out << json{{"type", "error"}, {"message", e.what()}}.dump() << "\n" << std::flush;
        diag << "error: " << e.what() << "\n";
        return kEvaluationError;
      }
      if (!ask) {
        json done{{"type", "done"}, {"reason", optimizer::to_string(decision.reason)}, {"evaluations", state->evaluations()}};
        const auto& inc = state->incumbent();
        if (inc.feasible_found) done["incumbent"] = {{"x", to_json(inc.x_best)}, {"f", inc.f_best}};
        out << done.dump() << "\n" << std::flush;
        save_state(state_path, doc, *state);
        write_logs();
        return kOk;
      }
      pending = PendingAsk{ask->x, ask->iteration};
      save_state(state_path, doc, *state, pending);
    }
    out << propose_message(*pending).dump() << "\n" << std::flush;

    std::string line;
    while (true) {
      if (!std::getline(in, line)) return kOk;  // state already persisted; resumable
      if (!trim(line).empty()) break;
    }
    try {
      const auto obs = parse_observe(line, doc.config, *pending);
      if (obs.failed) {
        optimizer::tell_failure(*state, pending->x, pending->iteration);
      } else {
        optimizer::tell(*state, pending->x, obs.f, obs.c, pending->iteration);
      }
      pending.reset();
      errors = 0;
      save_state(state_path, doc, *state);
      write_logs();
    } catch (const std::invalid_argument& e) {
      out << json{{"type", "error"}, {"message", e.what()}}.dump() << "\n" << std::flush;
      if (++errors >= kMaxConsecutiveErrors) {
        diag << "error: too many consecutive malformed observe records\n";
        return kProtocolError;
      }
    }
  }
}

}  // namespace fsibo::io
