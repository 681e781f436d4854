#include "rangeseg/config.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace rangeseg {

namespace {

constexpr double kDegToRad = 3.14159265358979323846 / 180.0;

enum class FieldType { U64, Int, Double, Bool, String };

struct Field {
  const char* key;
  FieldType type;
  std::size_t offset;
};

#define RS_FIELD(key, type, member) {key, FieldType::type, offsetof(RunConfig, member)}

// Registry order is the canonical order of the resolved output.
const Field kFields[] = {
    RS_FIELD("seed", U64, seed),
    RS_FIELD("run.dir", String, run_dir),
    RS_FIELD("grid.height", Int, grid_height),
    RS_FIELD("grid.width", Int, grid_width),
    RS_FIELD("grid.elev_min_deg", Double, grid_elev_min_deg),
    RS_FIELD("grid.elev_max_deg", Double, grid_elev_max_deg),
    RS_FIELD("grid.azim_min_deg", Double, grid_azim_min_deg),
    RS_FIELD("grid.azim_max_deg", Double, grid_azim_max_deg),
    RS_FIELD("scene.cars", Int, scene_cars),
    RS_FIELD("scene.pedestrians", Int, scene_pedestrians),
    RS_FIELD("scene.cyclists", Int, scene_cyclists),
    RS_FIELD("scene.range_min", Double, scene_range_min),
    RS_FIELD("scene.range_max", Double, scene_range_max),
    RS_FIELD("scene.sensor_height", Double, scene_sensor_height),
    RS_FIELD("scene.ground_plane", Bool, scene_ground_plane),
    RS_FIELD("source.p_drop", Double, source_p_drop),
    RS_FIELD("source.intensity", String, source_intensity),
    RS_FIELD("source.jitter_deg", Double, source_jitter_deg),
    RS_FIELD("target.p_drop", Double, target_p_drop),
    RS_FIELD("target.intensity", String, target_intensity),
    RS_FIELD("target.jitter_deg", Double, target_jitter_deg),
    RS_FIELD("data.dir", String, data_dir),
    RS_FIELD("data.count_train", Int, data_count_train),
    RS_FIELD("data.count_test", Int, data_count_test),
    RS_FIELD("model.with_cam", Bool, model_with_cam),
    RS_FIELD("model.checkpoint", String, model_checkpoint),
    RS_FIELD("renderer.n_bins", Int, renderer_n_bins),
    RS_FIELD("renderer.loss", String, renderer_loss),
    RS_FIELD("renderer.steps", Int, renderer_steps),
    RS_FIELD("renderer.checkpoint", String, renderer_checkpoint),
    RS_FIELD("renderer.dataset", String, renderer_dataset),
    RS_FIELD("renderer.holdout", String, renderer_holdout),
    RS_FIELD("train.lr", Double, train_lr),
    RS_FIELD("train.lr_decay", Double, train_lr_decay),
    RS_FIELD("train.momentum", Double, train_momentum),
    RS_FIELD("train.batch_size", Int, train_batch_size),
    RS_FIELD("train.steps", Int, train_steps),
    RS_FIELD("train.dataset", String, train_dataset),
    RS_FIELD("loss.gamma", Double, loss_gamma),
    RS_FIELD("loss.lambda", Double, loss_lambda),
    RS_FIELD("loss.n_bins", Int, loss_n_bins),
    RS_FIELD("loss.epsilon_cov", Double, loss_epsilon_cov),
    RS_FIELD("loss.deviation_on_true_bin", Bool, loss_deviation_on_true_bin),
    RS_FIELD("align.rows", Int, align_rows),
    RS_FIELD("align.layer", Int, align_layer),
    RS_FIELD("pdc.enabled", Bool, pdc_enabled),
    RS_FIELD("pdc.images", Int, pdc_images),
    RS_FIELD("pdc.batch", Int, pdc_batch),
    RS_FIELD("adapt.source", String, adapt_source),
    RS_FIELD("adapt.real", String, adapt_real),
    RS_FIELD("calibrate.dataset", String, calibrate_dataset),
    RS_FIELD("eval.dataset", String, eval_dataset),
    RS_FIELD("eval.pred", String, eval_pred),
    RS_FIELD("render.input", String, render_input),
    RS_FIELD("render.output", String, render_output),
    RS_FIELD("noise.p_list", String, noise_p_list),
    RS_FIELD("noise.trials", Int, noise_trials),
    RS_FIELD("noise.shape", String, noise_shape),
    RS_FIELD("noise.kernel", Int, noise_kernel),
};

#undef RS_FIELD

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

void assign(RunConfig& cfg, const Field& field, const std::string& raw) {
  char* base = reinterpret_cast<char*>(&cfg);
  const std::string value = trim(raw);
  try {
    switch (field.type) {
      case FieldType::U64: {
        *reinterpret_cast<std::uint64_t*>(base + field.offset) = std::stoull(value);
        break;
      }
      case FieldType::Int: {
        std::size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        *reinterpret_cast<int*>(base + field.offset) = v;
        break;
      }
      case FieldType::Double: {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        *reinterpret_cast<double*>(base + field.offset) = v;
        break;
      }
      case FieldType::Bool: {
        bool v;
        if (value == "true" || value == "1")
          v = true;
        else if (value == "false" || value == "0")
          v = false;
        else
          throw std::invalid_argument("expected true/false");
        *reinterpret_cast<bool*>(base + field.offset) = v;
        break;
      }
      case FieldType::String: {
        *reinterpret_cast<std::string*>(base + field.offset) = value;
        break;
      }
    }
  } catch (const std::exception& e) {
    throw ConfigError("bad value for '" + std::string(field.key) + "': '" + value + "' (" +
                      e.what() + ")");
  }
}

void apply_pair(RunConfig& cfg, const std::string& key, const std::string& value,
                const std::string& where) {
  for (const Field& field : kFields) {
    if (key == field.key) {
      assign(cfg, field, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "' " + where);
}

void apply_line(RunConfig& cfg, const std::string& line, const std::string& where) {
  std::string stripped = line;
  const std::size_t hash = stripped.find('#');
  if (hash != std::string::npos) stripped = stripped.substr(0, hash);
  stripped = trim(stripped);
  if (stripped.empty()) return;
  const std::size_t eq = stripped.find('=');
  if (eq == std::string::npos)
    throw ConfigError("expected 'key = value' " + where + ": '" + stripped + "'");
  apply_pair(cfg, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)), where);
}

void resolve_paths(RunConfig& cfg) {
  auto data_path = [&](const char* name) { return cfg.data_dir + "/" + name; };
  if (cfg.train_dataset.empty()) cfg.train_dataset = data_path("source_train.rsds");
  if (cfg.renderer_dataset.empty()) cfg.renderer_dataset = data_path("target_train.rsds");
  if (cfg.renderer_holdout.empty()) cfg.renderer_holdout = data_path("target_test.rsds");
  if (cfg.adapt_source.empty()) cfg.adapt_source = data_path("source_train_rendered.rsds");
  if (cfg.adapt_real.empty()) cfg.adapt_real = data_path("target_train.rsds");
  if (cfg.calibrate_dataset.empty()) cfg.calibrate_dataset = data_path("target_train.rsds");
  if (cfg.eval_dataset.empty()) cfg.eval_dataset = data_path("target_test.rsds");
  if (cfg.render_input.empty()) cfg.render_input = data_path("source_train.rsds");
  if (cfg.render_output.empty()) cfg.render_output = data_path("source_train_rendered.rsds");
}

void validate(const RunConfig& cfg) {
  auto intensity_ok = [](const std::string& s) {
    return s == "none" || s == "analytic" || s == "bimodal";
  };
  if (!intensity_ok(cfg.source_intensity) || !intensity_ok(cfg.target_intensity))
    throw ConfigError("intensity model must be one of none|analytic|bimodal");
  if (cfg.renderer_loss != "hybrid" && cfg.renderer_loss != "l2")
    throw ConfigError("renderer.loss must be hybrid or l2");
  if (cfg.source_p_drop < 0.0 || cfg.source_p_drop > 1.0 || cfg.target_p_drop < 0.0 ||
      cfg.target_p_drop > 1.0)
    throw ConfigError("p_drop must lie in [0,1]");
  if (cfg.data_count_train < 1 || cfg.data_count_test < 1)
    throw ConfigError("dataset counts must be positive");
}

}  // namespace

RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file '" + config_path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      apply_line(cfg, line, "at " + config_path + ":" + std::to_string(lineno));
    }
  }
  for (const std::string& ov : overrides) {
    const std::size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must be key=value, got '" + ov + "'");
    apply_pair(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)), "in --set override");
  }
  resolve_paths(cfg);
  validate(cfg);
  return cfg;
}

std::string resolved_config_text(const RunConfig& cfg) {
  std::ostringstream out;
  const char* base = reinterpret_cast<const char*>(&cfg);
  char buf[64];
  for (const Field& field : kFields) {
    out << field.key << " = ";
    switch (field.type) {
      case FieldType::U64:
        out << *reinterpret_cast<const std::uint64_t*>(base + field.offset);
        break;
      case FieldType::Int:
        out << *reinterpret_cast<const int*>(base + field.offset);
        break;
      case FieldType::Double:
        std::snprintf(buf, sizeof(buf), "%.17g",
                      *reinterpret_cast<const double*>(base + field.offset));
        out << buf;
        break;
      case FieldType::Bool:
        out << (*reinterpret_cast<const bool*>(base + field.offset) ? "true" : "false");
        break;
      case FieldType::String:
        out << *reinterpret_cast<const std::string*>(base + field.offset);
        break;
    }
    out << "\n";
  }
  return out.str();
}

GridConfig grid_from_config(const RunConfig& cfg) {
  GridConfig grid;
  grid.height = cfg.grid_height;
  grid.width = cfg.grid_width;
  grid.elev_min = cfg.grid_elev_min_deg * kDegToRad;
  grid.elev_max = cfg.grid_elev_max_deg * kDegToRad;
  grid.azim_min = cfg.grid_azim_min_deg * kDegToRad;
  grid.azim_max = cfg.grid_azim_max_deg * kDegToRad;
  return grid;
}

namespace {

IntensityModel parse_intensity(const std::string& s) {
  if (s == "none") return IntensityModel::None;
  if (s == "analytic") return IntensityModel::Analytic;
  return IntensityModel::Bimodal;
}

DomainConfig domain_from_config(const RunConfig& cfg, double p_drop,
                                const std::string& intensity, double jitter_deg) {
  DomainConfig d;
  d.seed = cfg.seed;
  d.grid = grid_from_config(cfg);
  d.scene.cars = cfg.scene_cars;
  d.scene.pedestrians = cfg.scene_pedestrians;
  d.scene.cyclists = cfg.scene_cyclists;
  d.scene.range_min = cfg.scene_range_min;
  d.scene.range_max = cfg.scene_range_max;
  d.scene.sensor_height = cfg.scene_sensor_height;
  d.scene.ground_plane = cfg.scene_ground_plane;
  d.p_drop = p_drop;
  d.intensity = parse_intensity(intensity);
  d.jitter = jitter_deg * kDegToRad;
  return d;
}

}  // namespace

DomainConfig source_domain_from_config(const RunConfig& cfg) {
  return domain_from_config(cfg, cfg.source_p_drop, cfg.source_intensity, cfg.source_jitter_deg);
}

DomainConfig target_domain_from_config(const RunConfig& cfg) {
  return domain_from_config(cfg, cfg.target_p_drop, cfg.target_intensity, cfg.target_jitter_deg);
}

}  // namespace rangeseg
