// fame: data generation, frequency masks, training, evaluation and feature dumps.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fame/fame.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kToolVersion = "1.0.0";
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

/// Validation failures detected by the CLI itself (before any output is written).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("FAME_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("FAME_SEED must be an unsigned integer, got '") + s + "'");
  }
}

/// Shell-quoted argv of this process; replaying it (with the recorded FAME_SEED) repeats the run.
std::string g_invocation;

std::string shell_quote(const std::string& arg) {
  std::string out = "'";
  for (char c : arg) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

/// Key/value record of a run, written before any long-running work.
class RunManifest {
 public:
  explicit RunManifest(std::string command) {
    add("tool", "fame");
    add("tool_version", kToolVersion);
    add("command", std::move(command));
    add("invocation", g_invocation);
    const char* env = std::getenv("FAME_SEED");
    add("env.FAME_SEED", env ? env : "");
    add("started_utc", utc_now());
  }
  void add(const std::string& key, const std::string& value) { text_ += key + " = " + value + "\n"; }
  void add_config(const fame::RunConfig& cfg) {
    std::istringstream in(fame::to_string(cfg));
    for (std::string line; std::getline(in, line);) text_ += "config." + line + "\n";
  }
  void write(const fs::path& dir) const {
    fs::create_directories(dir);
    const auto bytes = std::vector<std::uint8_t>(text_.begin(), text_.end());
    fame::write_bytes(dir / "run_manifest.txt", bytes);
  }

 private:
  std::string text_;
};

void require_dir(const fs::path& dir, const char* what) {
  if (!fs::is_directory(dir)) throw UsageError(std::string(what) + " is not a directory: " + dir.string());
}

/// A directory of *.fame pairs, or its `preferred` subdirectory when it holds none itself.
fs::path resolve_data_dir(const fs::path& dir, const char* preferred) {
  require_dir(dir, "--data-dir");
  if (fame::list_containers(dir).empty() && fs::is_directory(dir / preferred)) return dir / preferred;
  if (fame::list_containers(dir).empty()) throw UsageError("no .fame sample files in " + dir.string());
  return dir;
}

std::string pad4(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

// ---------------------------------------------------------------------------------------------
// datagen

struct DatagenArgs {
  std::uint64_t seed = 0;
  std::size_t count = 8, size = 256, factor = 4, patch = 32, stride = 0;
  std::string recipe = "mixed";
  double radius_fraction = 0.1, quantile = 0.5;
  fs::path out_dir;
};

int cmd_datagen(DatagenArgs a, bool seed_given) {
  if (!seed_given)
    if (auto s = env_seed()) a.seed = *s;
  const fame::Recipe recipe = fame::parse_recipe(a.recipe);
  if (a.count == 0) throw UsageError("--count must be positive");
  if (a.size < 128 || a.size % 4 != 0) {
    throw UsageError("--size must be a multiple of 4 and at least 128, got " + std::to_string(a.size));
  }
  if (a.factor != 2 && a.factor != 4) throw UsageError("--factor must be 2 or 4");
  if (a.size % a.factor != 0) throw UsageError("--size must be divisible by --factor");
  if (a.stride == 0) a.stride = a.patch;
  if (a.patch == 0 || a.patch * a.factor > a.size) throw UsageError("--patch does not fit in the scene");
  const fame::MaskLabelParams mp{a.radius_fraction, a.quantile};
  if (!(mp.low_freq_radius_fraction > 0 && mp.low_freq_radius_fraction < 1) ||
      !(mp.magnitude_quantile > 0 && mp.magnitude_quantile < 1)) {
    throw UsageError("--mask-radius and --mask-quantile must lie in (0, 1)");
  }

  RunManifest m("datagen");
  for (auto [k, v] : std::initializer_list<std::pair<const char*, std::string>>{
           {"seed", std::to_string(a.seed)},
           {"count", std::to_string(a.count)},
           {"size", std::to_string(a.size)},
           {"recipe", std::string(fame::to_string(recipe))},
           {"factor", std::to_string(a.factor)},
           {"patch", std::to_string(a.patch)},
           {"stride", std::to_string(a.stride)},
           {"mask_radius_fraction", fame::format_number(a.radius_fraction)},
           {"mask_quantile", fame::format_number(a.quantile)},
           {"out_dir", a.out_dir.string()}})
    m.add(k, v);
  m.write(a.out_dir);

  fs::create_directories(a.out_dir / "scenes");
  fs::create_directories(a.out_dir / "patches");
  std::size_t patches = 0;
  for (std::size_t i = 0; i < a.count; ++i) {
    const std::uint64_t scene_seed = a.seed * 1000003ull + i;
    const auto scene = fame::generate_synthetic_scene(scene_seed, a.size, recipe);
    const auto pair = fame::wald_degrade(scene, a.factor, mp);
    const std::vector<std::pair<std::string, std::string>> meta{
        {"scene_seed", std::to_string(scene_seed)}, {"recipe", std::string(fame::to_string(recipe))}};
    fame::save_pair(a.out_dir / "scenes" / ("scene_" + pad4(i) + ".fame"), pair, meta);
    const auto tiles = fame::extract_patches(pair, a.patch, a.stride);
    for (std::size_t j = 0; j < tiles.size(); ++j) {
      fame::save_pair(a.out_dir / "patches" / ("scene_" + pad4(i) + "_p" + pad4(j) + ".fame"), tiles[j], meta);
      ++patches;
    }
  }
  std::cout << "wrote " << a.count << " scenes and " << patches << " patches to " << a.out_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------------------------
// mask

fame::ImageT<double> band_mean(const fame::Image& img) {
  fame::ImageT<double> g(1, img.h, img.w);
  const std::size_t n = img.h * img.w;
  for (std::size_t b = 0; b < img.bands; ++b)
    for (std::size_t i = 0; i < n; ++i) g.data[i] += img.data[b * n + i] / static_cast<double>(img.bands);
  return g;
}

int cmd_mask(const fs::path& input, double radius, double quantile, const fs::path& out_dir) {
  if (!(radius > 0 && radius < 1) || !(quantile > 0 && quantile < 1)) {
    throw UsageError("--radius-fraction and --quantile must lie in (0, 1)");
  }
  if (!fs::is_regular_file(input)) throw UsageError("--input is not a readable file: " + input.string());
  RunManifest m("mask");
  m.add("input", input.string());
  m.add("radius_fraction", fame::format_number(radius));
  m.add("quantile", fame::format_number(quantile));
  m.add("out_dir", out_dir.string());
  m.write(out_dir);

  fame::Image source;
  if (input.extension() == ".fame") {
    source = fame::load_pair(input).gt;
  } else {
    source = fame::read_png(input);
  }
  const auto gray = band_mean(source);
  const auto split = fame::split_frequencies(gray, radius);
  const auto label = fame::make_mask_label(gray, fame::MaskLabelParams{radius, quantile});

  fame::ImageT<double> magnitude(1, gray.h, gray.w);
  for (std::size_t i = 0; i < magnitude.data.size(); ++i) magnitude.data[i] = std::log1p(std::abs(split.spectrum.coeffs[i]));
  fame::ImageT<double> mask(1, gray.h, gray.w);
  for (std::size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = label.high[i];

  fame::write_png(out_dir / "dct_magnitude.png", fame::minmax_normalize(magnitude));
  fame::write_png(out_dir / "high_frequency.png", fame::minmax_normalize(split.high));
  fame::write_png(out_dir / "low_frequency.png", split.low);
  fame::write_png(out_dir / "mask_high.png", mask);

  double energy = 0;
  for (double v : split.high.data) energy += v * v;
  std::cout << "high-frequency coverage " << label.coverage() << ", high-band energy "
            << energy / static_cast<double>(split.high.data.size()) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------------------------
// train

struct TrainArgs {
  fs::path data_dir, config, out_dir, resume;
  bool no_mask = false, no_mixture = false;
  std::vector<std::string> overrides;
};

fame::RunConfig resolve_config(const fs::path& config_file, const std::vector<std::string>& overrides) {
  std::string text;
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw UsageError("cannot read --config " + config_file.string());
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  for (const auto& kv : overrides) {
    if (kv.find('=') == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    text += "\n" + kv;
  }
  return fame::parse_config(text);
}

int cmd_train(const TrainArgs& a) {
  fame::RunConfig cfg = resolve_config(a.config, a.overrides);
  if (auto s = env_seed()) cfg.train.seed = *s;
  if (a.no_mask) cfg.network.ablation_disable_mask = true;
  if (a.no_mixture) cfg.network.ablation_replace_mixture = true;
  cfg.validate();
  const fs::path data_dir = resolve_data_dir(a.data_dir, "patches");
  std::optional<fame::Container> resume;
  if (!a.resume.empty()) {
    if (!fs::is_regular_file(a.resume)) throw UsageError("--resume is not a file: " + a.resume.string());
    resume = fame::read_container(a.resume);
    const auto stored = fame::checkpoint_config(*resume);
    if (fame::to_string(stored) != fame::to_string(cfg)) {
      throw fame::ConfigError("--resume checkpoint was written with a different configuration");
    }
  }

  std::cout << fame::to_string(cfg);
  RunManifest m("train");
  m.add("data_dir", data_dir.string());
  m.add("out_dir", a.out_dir.string());
  m.add("seed", std::to_string(cfg.train.seed));
  m.add("fingerprint", fame::fingerprint(cfg.network));
  if (!a.resume.empty()) m.add("resume", a.resume.string());
  m.add_config(cfg);
  m.write(a.out_dir);

  const auto data = fame::load_dataset(data_dir);
  fame::Trainer trainer(cfg);
  if (resume) trainer.restore(*resume);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t last_epoch = SIZE_MAX;
  trainer.run(data, a.out_dir, [&](const fame::StepLog& s) {
    if (s.epoch == last_epoch) return;
    last_epoch = s.epoch;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "epoch %zu step %zu rec %.5f total %.5f (%.0fs)\n", s.epoch, s.step, s.loss.rec,
                 s.loss.total, secs);
  });
  fame::write_container(a.out_dir / "final.fame", trainer.checkpoint());
  std::cout << "final checkpoint " << (a.out_dir / "final.fame").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------------------------
// eval

std::unique_ptr<fame::FameNet<float>> load_network(const fs::path& checkpoint, const fs::path& config_file) {
  if (!fs::is_regular_file(checkpoint)) throw UsageError("--checkpoint is not a file: " + checkpoint.string());
  const auto c = fame::read_container(checkpoint);
  fame::RunConfig cfg = fame::checkpoint_config(c);
  if (!config_file.empty()) {
    const auto expected = resolve_config(config_file, {});
    if (fame::fingerprint(expected.network) != c.meta("fingerprint")) {
      throw fame::ConfigError("checkpoint fingerprint " + c.meta("fingerprint") + " does not match --config (" +
                              fame::fingerprint(expected.network) + ")");
    }
  }
  auto net = std::make_unique<fame::FameNet<float>>(cfg.network, 0);
  fame::Trainer::load_parameters(c, *net);
  return net;
}

std::string csv_value(const std::optional<double>& v) { return v ? fame::format_number(*v) : ""; }

int cmd_eval(const fs::path& checkpoint, const fs::path& data_dir_arg, bool full_resolution, const fs::path& out_dir,
             const fs::path& config_file) {
  const fs::path data_dir = resolve_data_dir(data_dir_arg, "scenes");
  auto net = load_network(checkpoint, config_file);
  RunManifest m("eval");
  m.add("checkpoint", checkpoint.string());
  m.add("data_dir", data_dir.string());
  m.add("mode", full_resolution ? "full_resolution" : "reduced_resolution");
  m.add("out_dir", out_dir.string());
  m.write(out_dir);

  const auto files = fame::list_containers(data_dir);
  const auto data = fame::load_dataset(data_dir);
  const auto result = fame::evaluate(*net, data, full_resolution);
  std::string csv = full_resolution ? "id,d_lambda,d_s,qnr\n" : "id,psnr,ssim,sam,ergas\n";
  auto row = [&](const std::string& id, const fame::MetricReport& r) {
    csv += id;
    if (full_resolution) {
      for (const auto* v : {&r.d_lambda, &r.d_s, &r.qnr}) csv += "," + csv_value(*v);
    } else {
      for (const auto* v : {&r.psnr, &r.ssim, &r.sam, &r.ergas}) csv += "," + csv_value(*v);
    }
    csv += "\n";
  };
  for (std::size_t i = 0; i < data.size(); ++i) row(files[i].stem().string(), result.per_sample[i]);
  row("mean", result.mean);
  fame::write_bytes(out_dir / "metrics.csv", std::vector<std::uint8_t>(csv.begin(), csv.end()));

  std::string util = "bank,scv\nhf," + fame::format_number(result.scv_hf) + "\nlf," +
                     fame::format_number(result.scv_lf) + "\nfusion," +
                     (std::isnan(result.scv_fusion) ? std::string("nan") : fame::format_number(result.scv_fusion)) +
                     "\n";
  fame::write_bytes(out_dir / "utilization.csv", std::vector<std::uint8_t>(util.begin(), util.end()));
  std::cout << csv;
  return 0;
}

// ---------------------------------------------------------------------------------------------
// dump-features

fame::ImageT<double> channel_mean(const fame::Tensor<float>& t, std::size_t first = 0, std::size_t count = 0) {
  const fame::Shape s = t.shape();
  if (count == 0) count = s.c - first;
  fame::ImageT<double> img(1, s.h, s.w);
  const std::size_t plane = s.h * s.w;
  for (std::size_t c = first; c < first + count; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      img.data[i] += static_cast<double>(t.values()[c * plane + i]) / static_cast<double>(count);
  return img;
}

int cmd_dump_features(const fs::path& checkpoint, const fs::path& input, const fs::path& out_dir) {
  if (!fs::is_regular_file(input)) throw UsageError("--input-pair is not a file: " + input.string());
  auto net = load_network(checkpoint, {});
  RunManifest m("dump-features");
  m.add("checkpoint", checkpoint.string());
  m.add("input_pair", input.string());
  m.add("out_dir", out_dir.string());
  m.write(out_dir);

  const auto pair = fame::load_pair(input);
  const auto fwd = fame::infer(*net, pair);
  fame::ImageT<double> mask(1, pair.pan.h, pair.pan.w);
  if (fwd.mask.defined()) mask = channel_mean(fwd.mask, 0, 1);
  fame::write_png(out_dir / "f_pan.png", fame::minmax_normalize(channel_mean(fwd.f_pan)));
  fame::write_png(out_dir / "f_ms.png", fame::minmax_normalize(channel_mean(fwd.f_ms)));
  fame::write_png(out_dir / "mask.png", mask);
  fame::write_png(out_dir / "h_f.png", fame::minmax_normalize(channel_mean(fwd.h_f)));
  fame::write_png(out_dir / "l_f.png", fame::minmax_normalize(channel_mean(fwd.l_f)));
  fame::write_png(out_dir / "mixture.png", fame::minmax_normalize(channel_mean(fwd.mixture)));
  std::cout << "wrote 6 feature images to " << out_dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) g_invocation += (i ? " " : "") + shell_quote(argv[i]);
  CLI::App app{"FAME pan-sharpening toolkit"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "Generate synthetic scenes, degrade them and cut patches");
  auto* seed_opt = datagen->add_option("--seed", dg.seed, "Generator seed (FAME_SEED applies when omitted)");
  datagen->add_option("--count", dg.count, "Number of scenes")->capture_default_str();
  datagen->add_option("--size", dg.size, "Scene side length in pixels")->capture_default_str();
  datagen->add_option("--recipe", dg.recipe, "gradients | textures | edges | mixed")->capture_default_str();
  datagen->add_option("--out-dir", dg.out_dir, "Output directory")->required();
  datagen->add_option("--factor", dg.factor, "Resolution ratio")->capture_default_str();
  datagen->add_option("--patch", dg.patch, "LRMS patch side")->capture_default_str();
  datagen->add_option("--stride", dg.stride, "LRMS patch stride (default: patch)");
  datagen->add_option("--mask-radius", dg.radius_fraction, "Low-band radius fraction")->capture_default_str();
  datagen->add_option("--mask-quantile", dg.quantile, "Mask magnitude quantile")->capture_default_str();

  fs::path mask_input, mask_out;
  double mask_radius = 0.1, mask_quantile = 0.5;
  auto* mask = app.add_subcommand("mask", "Frequency decomposition and binary mask of one image");
  mask->add_option("--input", mask_input, "PNG image or .fame pair")->required();
  mask->add_option("--radius-fraction", mask_radius)->capture_default_str();
  mask->add_option("--quantile", mask_quantile)->capture_default_str();
  mask->add_option("--out-dir", mask_out)->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a network");
  train->add_option("--data-dir", ta.data_dir, "Directory of .fame pairs (or a datagen output)")->required();
  train->add_option("--config", ta.config, "key = value configuration file");
  train->add_option("--set", ta.overrides, "Override one config key (key=value)");
  train->add_option("--out-dir", ta.out_dir)->required();
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_flag("--no-mask", ta.no_mask, "Remove the mask predictor");
  train->add_flag("--no-mixture", ta.no_mixture, "Replace the experts mixture with a plain block");

  fs::path ev_ckpt, ev_data, ev_out, ev_config;
  bool ev_full = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ev_ckpt)->required();
  eval->add_option("--data-dir", ev_data, "Directory of .fame pairs (or a datagen output)")->required();
  eval->add_option("--out-dir", ev_out)->required();
  eval->add_option("--config", ev_config, "Expected configuration; its fingerprint must match");
  eval->add_flag("--full-resolution", ev_full, "No-reference metrics (D_lambda, D_s, QNR)");

  fs::path df_ckpt, df_input, df_out;
  auto* dump = app.add_subcommand("dump-features", "Write intermediate feature maps as PNGs");
  dump->add_option("--checkpoint", df_ckpt)->required();
  dump->add_option("--input-pair", df_input)->required();
  dump->add_option("--out-dir", df_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*datagen) return cmd_datagen(dg, seed_opt->count() > 0);
    if (*mask) return cmd_mask(mask_input, mask_radius, mask_quantile, mask_out);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ev_ckpt, ev_data, ev_full, ev_out, ev_config);
    if (*dump) return cmd_dump_features(df_ckpt, df_input, df_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {  // ConfigError, ContractError, ShapeError
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
