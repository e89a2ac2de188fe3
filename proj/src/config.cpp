#include "fms/config.hpp"

#include <cctype>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "fms/curve.hpp"

namespace fms {

namespace {

constexpr double kDegree = 3.14159265358979323846 / 180.0;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

double to_double(const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument("'" + v + "' is not a number");
  return x;
}

long long to_int(const std::string& v) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument("'" + v + "' is not an integer");
  return x;
}

std::size_t to_size(const std::string& v) {
  const auto x = to_int(v);
  if (x < 0) throw std::invalid_argument("'" + v + "' is negative");
  return static_cast<std::size_t>(x);
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("'" + v + "' is not true or false");
}

std::vector<double> to_doubles(const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split(v)) out.push_back(to_double(s));
  return out;
}

Vec3 to_vec3(const std::string& v) {
  const auto xs = to_doubles(v);
  if (xs.size() != 3) throw std::invalid_argument("expected 3 values, got " + std::to_string(xs.size()));
  return {xs[0], xs[1], xs[2]};
}

using Setter = std::function<void(TrainConfig&, const std::string&)>;
using StageSetter = std::function<void(StageConfig&, const std::string&)>;

const std::map<std::string, Setter>& top_keys() {
  static const std::map<std::string, Setter> keys{
      {"seed", [](TrainConfig& c, const std::string& v) { c.seed = static_cast<std::uint64_t>(to_size(v)); }},
      {"steps", [](TrainConfig& c, const std::string& v) { c.steps = static_cast<int>(to_int(v)); }},
      {"batch", [](TrainConfig& c, const std::string& v) { c.batch = to_size(v); }},
      {"lr", [](TrainConfig& c, const std::string& v) { c.lr = to_double(v); }},
      {"momentum", [](TrainConfig& c, const std::string& v) { c.momentum = to_double(v); }},
      {"clip", [](TrainConfig& c, const std::string& v) { c.clip = to_double(v); }},
      {"loss.w", [](TrainConfig& c, const std::string& v) { c.weights.w = to_double(v); }},
      {"loss.fg_gamma", [](TrainConfig& c, const std::string& v) { c.focal_fg.gamma = to_double(v); }},
      {"loss.fg_beta", [](TrainConfig& c, const std::string& v) { c.focal_fg.beta = to_doubles(v); }},
      {"loss.sem_gamma", [](TrainConfig& c, const std::string& v) { c.focal_sem.gamma = to_double(v); }},
      {"loss.sem_beta", [](TrainConfig& c, const std::string& v) { c.focal_sem.beta = to_doubles(v); }},
      {"train_scenes", [](TrainConfig& c, const std::string& v) { c.train_scenes = to_size(v); }},
      {"val_scenes", [](TrainConfig& c, const std::string& v) { c.val_scenes = to_size(v); }},
      {"val_every", [](TrainConfig& c, const std::string& v) { c.val_every = static_cast<int>(to_int(v)); }},
      {"eval_alpha", [](TrainConfig& c, const std::string& v) { c.eval_alpha = to_double(v); }},
      {"timing", [](TrainConfig& c, const std::string& v) { c.timing = to_bool(v); }},
      {"model.head_hidden", [](TrainConfig& c, const std::string& v) { c.model.head_hidden = to_size(v); }},
      {"scene.resolution",
       [](TrainConfig& c, const std::string& v) {
         const auto r = to_vec3(v);
         for (int a = 0; a < 3; ++a) {
           if (r[a] != static_cast<double>(static_cast<std::int64_t>(r[a])) || r[a] < 1)
             throw std::invalid_argument("resolution needs positive integers");
           c.scene.grid.resolution[a] = static_cast<std::int64_t>(r[a]);
         }
       }},
      {"scene.cell_size", [](TrainConfig& c, const std::string& v) { c.scene.grid.cell_size = to_vec3(v); }},
      {"scene.origin", [](TrainConfig& c, const std::string& v) { c.scene.grid.origin = to_vec3(v); }},
      {"scene.min_boxes", [](TrainConfig& c, const std::string& v) { c.scene.min_boxes = static_cast<int>(to_int(v)); }},
      {"scene.max_boxes", [](TrainConfig& c, const std::string& v) { c.scene.max_boxes = static_cast<int>(to_int(v)); }},
      {"scene.classes",
       [](TrainConfig& c, const std::string& v) {
         c.scene.classes.clear();
         for (const auto& s : split(v)) c.scene.classes.push_back(static_cast<int>(to_int(s)));
       }},
      {"scene.fg_fraction", [](TrainConfig& c, const std::string& v) { c.scene.fg_fraction = to_double(v); }},
      {"scene.surface_density", [](TrainConfig& c, const std::string& v) { c.scene.surface_density = to_double(v); }},
      {"scene.surface_noise", [](TrainConfig& c, const std::string& v) { c.scene.surface_noise = to_double(v); }},
      {"scene.empty_background", [](TrainConfig& c, const std::string& v) { c.scene.empty_background = to_size(v); }},
      {"scene.enlarge_xy", [](TrainConfig& c, const std::string& v) { c.scene.enlarge.xy = to_double(v); }},
      {"scene.enlarge_z", [](TrainConfig& c, const std::string& v) { c.scene.enlarge.z = to_double(v); }},
      {"scene.enlarge_frame",
       [](TrainConfig& c, const std::string& v) {
         if (v == "box") c.scene.enlarge.frame = EnlargeFrame::box;
         else if (v == "world") c.scene.enlarge.frame = EnlargeFrame::world;
         else throw std::invalid_argument("'" + v + "' is not box or world");
       }},
  };
  return keys;
}

const std::map<std::string, StageSetter>& stage_keys() {
  static const std::map<std::string, StageSetter> keys{
      {"alpha", [](StageConfig& s, const std::string& v) { s.alpha = to_double(v); }},
      {"angles",
       [](StageConfig& s, const std::string& v) {
         s.angles.clear();
         for (double a : to_doubles(v)) s.angles.push_back(a * kDegree);
       }},
      {"m", [](StageConfig& s, const std::string& v) { s.m = to_size(v); }},
      {"t", [](StageConfig& s, const std::string& v) { s.t = static_cast<int>(to_int(v)); }},
      {"propagate_every", [](StageConfig& s, const std::string& v) { s.propagate_every = to_bool(v); }},
      {"scheme", [](StageConfig& s, const std::string& v) { s.scheme = parse_scheme(v); }},
      {"stride", [](StageConfig& s, const std::string& v) { s.stride = static_cast<int>(to_int(v)); }},
      {"scorer_hidden", [](StageConfig& s, const std::string& v) { s.scorer_hidden = to_size(v); }},
      {"merge_hidden", [](StageConfig& s, const std::string& v) { s.merge_hidden = to_size(v); }},
      {"d", [](StageConfig& s, const std::string& v) { s.block.d = to_size(v); }},
      {"state", [](StageConfig& s, const std::string& v) { s.block.s = to_size(v); }},
      {"semantic_hidden", [](StageConfig& s, const std::string& v) { s.block.head_hidden = to_size(v); }},
      {"saf_taps", [](StageConfig& s, const std::string& v) { s.block.saf_taps = static_cast<int>(to_int(v)); }},
      {"saf_per_group", [](StageConfig& s, const std::string& v) { s.block.saf_per_group = to_bool(v); }},
      {"ssf_kernel", [](StageConfig& s, const std::string& v) { s.block.ssf_kernel = static_cast<int>(to_int(v)); }},
      {"use_saf", [](StageConfig& s, const std::string& v) { s.block.use_saf = to_bool(v); }},
      {"use_ssf", [](StageConfig& s, const std::string& v) { s.block.use_ssf = to_bool(v); }},
      {"use_gate", [](StageConfig& s, const std::string& v) { s.block.use_gate = to_bool(v); }},
  };
  return keys;
}

struct Entry {
  std::string key, value;
  int line = 0;
};

[[noreturn]] void fail(const std::string& source, int line, const std::string& msg) {
  throw ConfigError(source + ":" + std::to_string(line) + ": " + msg);
}

template <class Target, class Fn>
void apply(const Fn& fn, Target& target, const Entry& e, const std::string& source) {
  try {
    fn(target, e.value);
  } catch (const std::exception& ex) {
    fail(source, e.line, e.key + ": " + ex.what());
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string join(const std::vector<double>& xs, double scale = 1.0) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i] * scale);
  return out;
}

std::string join3(const Vec3& v) { return fmt(v[0]) + "," + fmt(v[1]) + "," + fmt(v[2]); }

}  // namespace

TrainConfig parse_config(std::istream& is, const std::string& source) {
  std::vector<Entry> entries;
  std::map<std::string, int> seen;
  std::string line;
  int no = 0;
  while (std::getline(is, line)) {
    ++no;
    const auto text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) fail(source, no, "expected key = value, got '" + text + "'");
    Entry e{trim(text.substr(0, eq)), trim(text.substr(eq + 1)), no};
    if (e.key.empty()) fail(source, no, "empty key");
    if (auto it = seen.find(e.key); it != seen.end())
      fail(source, no, "duplicate key '" + e.key + "' (first on line " + std::to_string(it->second) + ")");
    seen[e.key] = no;
    entries.push_back(std::move(e));
  }

  TrainConfig cfg;
  std::vector<const Entry*> all_stages, one_stage;
  for (const auto& e : entries) {
    if (e.key == "stages") {
      std::size_t n = 0;
      apply([&](TrainConfig&, const std::string& v) { n = to_size(v); }, cfg, e, source);
      if (n == 0) fail(source, e.line, "stages: at least one stage");
      cfg.model.stages.resize(n, cfg.model.stages.front());
    } else if (e.key.rfind("stage.", 0) == 0) {
      const auto rest = e.key.substr(6);
      const bool indexed = !rest.empty() && std::isdigit(static_cast<unsigned char>(rest[0]));
      (indexed ? one_stage : all_stages).push_back(&e);
    } else if (auto it = top_keys().find(e.key); it != top_keys().end()) {
      apply(it->second, cfg, e, source);
    } else {
      fail(source, e.line, "unknown key '" + e.key + "'");
    }
  }
  for (const auto* e : all_stages) {
    auto it = stage_keys().find(e->key.substr(6));
    if (it == stage_keys().end()) fail(source, e->line, "unknown stage key '" + e->key + "'");
    for (auto& st : cfg.model.stages) apply(it->second, st, *e, source);
  }
  for (const auto* e : one_stage) {
    const auto rest = e->key.substr(6);
    const auto dot = rest.find('.');
    if (dot == std::string::npos) fail(source, e->line, "expected stage.<i>.<key>, got '" + e->key + "'");
    std::size_t idx = 0;
    try {
      idx = to_size(rest.substr(0, dot));
    } catch (const std::exception&) {
      fail(source, e->line, "bad stage index in '" + e->key + "'");
    }
    if (idx >= cfg.model.stages.size())
      fail(source, e->line, "stage " + std::to_string(idx) + " does not exist (" +
                                std::to_string(cfg.model.stages.size()) + " stages)");
    auto it = stage_keys().find(rest.substr(dot + 1));
    if (it == stage_keys().end()) fail(source, e->line, "unknown stage key '" + e->key + "'");
    apply(it->second, cfg.model.stages[idx], *e, source);
  }
  try {
    cfg.check();
  } catch (const std::exception& ex) {
    throw ConfigError(source + ": " + ex.what());
  }
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, path);
}

void write_config(std::ostream& os, const TrainConfig& c) {
  const auto& s = c.scene;
  std::string cls;
  for (std::size_t i = 0; i < s.classes.size(); ++i) cls += (i ? "," : "") + std::to_string(s.classes[i]);
  os << "# training\n"
     << "seed = " << c.seed << "\n"
     << "steps = " << c.steps << "\n"
     << "batch = " << c.batch << "\n"
     << "lr = " << fmt(c.lr) << "\n"
     << "momentum = " << fmt(c.momentum) << "\n"
     << "clip = " << fmt(c.clip) << "\n"
     << "train_scenes = " << c.train_scenes << "\n"
     << "val_scenes = " << c.val_scenes << "\n"
     << "val_every = " << c.val_every << "\n"
     << "eval_alpha = " << fmt(c.eval_alpha) << "\n"
     << "timing = " << (c.timing ? "true" : "false") << "\n"
     << "\n# loss\n"
     << "loss.w = " << fmt(c.weights.w) << "\n"
     << "loss.fg_gamma = " << fmt(c.focal_fg.gamma) << "\n"
     << "loss.fg_beta = " << join(c.focal_fg.beta) << "\n"
     << "loss.sem_gamma = " << fmt(c.focal_sem.gamma) << "\n"
     << "loss.sem_beta = " << join(c.focal_sem.beta) << "\n"
     << "\n# scenes\n"
     << "scene.resolution = " << s.grid.resolution[0] << "," << s.grid.resolution[1] << ","
     << s.grid.resolution[2] << "\n"
     << "scene.cell_size = " << join3(s.grid.cell_size) << "\n"
     << "scene.origin = " << join3(s.grid.origin) << "\n"
     << "scene.min_boxes = " << s.min_boxes << "\n"
     << "scene.max_boxes = " << s.max_boxes << "\n"
     << "scene.classes = " << cls << "\n"
     << "scene.fg_fraction = " << fmt(s.fg_fraction) << "\n"
     << "scene.surface_density = " << fmt(s.surface_density) << "\n"
     << "scene.surface_noise = " << fmt(s.surface_noise) << "\n"
     << "scene.empty_background = " << s.empty_background << "\n"
     << "scene.enlarge_xy = " << fmt(s.enlarge.xy) << "\n"
     << "scene.enlarge_z = " << fmt(s.enlarge.z) << "\n"
     << "scene.enlarge_frame = " << (s.enlarge.frame == EnlargeFrame::box ? "box" : "world") << "\n"
     << "\n# model\n"
     << "model.head_hidden = " << c.model.head_hidden << "\n"
     << "stages = " << c.model.stages.size() << "\n";
  for (std::size_t i = 0; i < c.model.stages.size(); ++i) {
    const auto& st = c.model.stages[i];
    const std::string p = "stage." + std::to_string(i) + ".";
    os << "\n# stage " << i << " (angles in degrees, m = 0 picks one patch per 64 rows)\n"
       << p << "alpha = " << fmt(st.alpha) << "\n"
       << p << "angles = " << join(st.angles, 1.0 / kDegree) << "\n"
       << p << "m = " << st.m << "\n"
       << p << "t = " << st.t << "\n"
       << p << "propagate_every = " << (st.propagate_every ? "true" : "false") << "\n"
       << p << "scheme = " << scheme_name(st.scheme) << "\n"
       << p << "stride = " << st.stride << "\n"
       << p << "scorer_hidden = " << st.scorer_hidden << "\n"
       << p << "merge_hidden = " << st.merge_hidden << "\n"
       << p << "d = " << st.block.d << "\n"
       << p << "state = " << st.block.s << "\n"
       << p << "semantic_hidden = " << st.block.head_hidden << "\n"
       << p << "saf_taps = " << st.block.saf_taps << "\n"
       << p << "saf_per_group = " << (st.block.saf_per_group ? "true" : "false") << "\n"
       << p << "ssf_kernel = " << st.block.ssf_kernel << "\n"
       << p << "use_saf = " << (st.block.use_saf ? "true" : "false") << "\n"
       << p << "use_ssf = " << (st.block.use_ssf ? "true" : "false") << "\n"
       << p << "use_gate = " << (st.block.use_gate ? "true" : "false") << "\n";
  }
}

}  // namespace fms
