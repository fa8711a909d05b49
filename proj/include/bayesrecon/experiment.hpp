#pragma once

// Config-driven experiments and their on-disk artifacts.
//
// Config files are INI (sections of flat key = value pairs).  Every run
// writes a manifest.ini into its output directory that holds the full
// effective configuration and can itself be passed back to `run`.

#include "bayesrecon/domain.hpp"
#include "bayesrecon/estimators.hpp"
#include "bayesrecon/forward_model.hpp"
#include "bayesrecon/io.hpp"
#include "bayesrecon/oracles.hpp"
#include "bayesrecon/phantom.hpp"
#include "bayesrecon/prior_scores.hpp"
#include "bayesrecon/sampler.hpp"
#include "bayesrecon/score_training.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace bayesrecon::experiment {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr const char* kOutputRootEnv = "BAYESRECON_OUTPUT_ROOT";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind { ToyGmm, Unfolding, Multicoil, BurnIn, Map };

inline const std::map<std::string, Kind>& kind_names() {
  static const std::map<std::string, Kind> m = {{"toy-gmm", Kind::ToyGmm},
                                                {"unfolding", Kind::Unfolding},
                                                {"multicoil", Kind::Multicoil},
                                                {"burn-in", Kind::BurnIn},
                                                {"map", Kind::Map}};
  return m;
}

inline std::string kind_name(Kind k) {
  for (const auto& [name, v] : kind_names()) {
    if (v == k) return name;
  }
  return "?";
}

struct ExperimentConfig {
  Kind kind = Kind::Unfolding;
  std::string output = "out";

  // [image]
  std::string image_source = "phantom";  // phantom | file
  std::string phantom = "shepp-logan";
  std::size_t size = 32;
  std::string image_file;

  // [mask]
  std::string mask = "full";  // full | skip-odd-even | variable-density | uniform
  masks::VariableDensity variable_density{};
  masks::UniformRandom uniform{};

  // [coils]
  std::size_t coils = 1;

  // [measurement]
  double noise_sd = 0.01;
  std::uint64_t measurement_seed = 1;

  // [schedule]
  double sigma_min = 0.01;
  double sigma_max = 1.0;
  std::size_t n_scales = 10;

  // [sampler]
  SamplerConfig sampler{};
  std::size_t map_iterations = 200;

  // [prior]
  std::string prior = "gaussian";  // gaussian | gmm | checkpoint
  double support_variance = 0.25;
  double background_variance = 1e-4;
  double support_threshold = 0.05;
  std::string gmm_file;
  std::string checkpoint;

  // [toy]
  Complex toy_y{-0.3, 0.9};
  double toy_noise_var = 0.5;
  double grid_extent = 8.0;
  std::size_t grid_cells = 100;

  // [output]
  double ci_percentile = 90.0;

  // [training]
  std::string dataset = "gmm";  // gmm | patches
  std::size_t dataset_size = 10000;
  std::string network = "mlp";  // mlp | conv
  std::vector<std::size_t> hidden{64, 64, 64};
  std::size_t conv_channels = 8;
  std::size_t conv_layers = 2;
  std::size_t patch_size = 16;
  std::string conditioning = "fourier";
  std::size_t fourier_size = 16;
  double fourier_std = 1.0;
  training::TrainConfig train{};

  NoiseSchedule schedule() const { return geometric_schedule(sigma_min, sigma_max, n_scales); }
};

// ------------------------------------------------------------------ parse --

namespace detail {

using Tree = boost::property_tree::ptree;

inline const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> k = {
      {"experiment", {"kind", "output"}},
      {"image", {"source", "phantom", "size", "file"}},
      {"mask", {"kind", "center", "fraction", "exponent", "min_distance", "probability", "seed"}},
      {"coils", {"count"}},
      {"measurement", {"noise_sd", "seed"}},
      {"schedule", {"sigma_min", "sigma_max", "n"}},
      {"sampler",
       {"steps_per_scale", "start_index", "lambda", "chains", "split", "deterministic", "seed", "likelihood_variance",
        "divergence_norm", "map_iterations"}},
      {"prior", {"kind", "support_variance", "background_variance", "support_threshold", "gmm_file", "checkpoint"}},
      {"toy", {"y_re", "y_im", "noise_var", "grid_extent", "grid_cells"}},
      {"output", {"ci_percentile"}},
      {"training",
       {"dataset", "samples", "network", "hidden", "channels", "layers", "patch_size", "conditioning", "fourier_size",
        "fourier_std", "epochs", "batch_size", "learning_rate", "momentum", "optimizer", "seed"}},
      {"manifest", {"config_hash", "seed", "version", "kind"}},
  };
  return k;
}

template <typename T>
T get(const Tree& t, const std::string& key, const T& fallback) {
  const auto node = t.get_optional<std::string>(key);
  if (!node) return fallback;
  std::istringstream is(*node);
  T value{};
  if constexpr (std::is_same_v<T, std::string>) {
    return *node;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (*node == "true" || *node == "1" || *node == "yes") return true;
    if (*node == "false" || *node == "0" || *node == "no") return false;
    throw ConfigError("config: '" + key + "' expects true or false, got '" + *node + "'");
  } else {
    is >> value;
    if (is.fail() || !(is >> std::ws).eof()) throw ConfigError("config: cannot parse '" + key + "' from '" + *node + "'");
    if constexpr (std::is_unsigned_v<T>) {
      if (node->find('-') != std::string::npos) throw ConfigError("config: '" + key + "' must be non-negative");
    }
    return value;
  }
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    long long v = 0;
    if (!(is >> v) || v <= 0) throw ConfigError("config: '" + key + "' expects positive integers, got '" + text + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("config: '" + key + "' is empty");
  return out;
}

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return p;
  std::filesystem::path path(p);
  if (path.is_relative()) path = base / path;
  return std::filesystem::weakly_canonical(path).string();
}

}  // namespace detail

inline ExperimentConfig parse_config(const detail::Tree& t, const std::filesystem::path& base_dir = ".") {
  using detail::get;
  for (const auto& [section, body] : t) {
    const auto it = detail::known_keys().find(section);
    if (it == detail::known_keys().end()) {
      if (body.empty()) throw ConfigError("config: key '" + section + "' must live in a section");
      throw ConfigError("config: unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
    }
  }

  ExperimentConfig c;
  const auto kind = get<std::string>(t, "experiment.kind", "");
  if (kind.empty()) throw ConfigError("config: [experiment] kind is required");
  const auto k = kind_names().find(kind);
  if (k == kind_names().end()) throw ConfigError("config: unknown experiment kind '" + kind + "'");
  c.kind = k->second;
  c.output = get<std::string>(t, "experiment.output", c.output);

  c.image_source = get<std::string>(t, "image.source", c.image_source);
  c.phantom = get<std::string>(t, "image.phantom", c.phantom);
  c.size = get<std::size_t>(t, "image.size", c.size);
  c.image_file = detail::resolve(base_dir, get<std::string>(t, "image.file", ""));

  c.mask = get<std::string>(t, "mask.kind", c.mask);
  c.variable_density.center = get<std::size_t>(t, "mask.center", c.variable_density.center);
  c.variable_density.target_fraction = get<double>(t, "mask.fraction", c.variable_density.target_fraction);
  c.variable_density.density_exponent = get<double>(t, "mask.exponent", c.variable_density.density_exponent);
  c.variable_density.min_distance = get<double>(t, "mask.min_distance", c.variable_density.min_distance);
  c.uniform.probability = get<double>(t, "mask.probability", c.uniform.probability);
  const auto mask_seed = get<std::uint64_t>(t, "mask.seed", 0);
  c.variable_density.seed = mask_seed;
  c.uniform.seed = mask_seed;

  c.coils = get<std::size_t>(t, "coils.count", c.coils);
  c.noise_sd = get<double>(t, "measurement.noise_sd", c.noise_sd);
  c.measurement_seed = get<std::uint64_t>(t, "measurement.seed", c.measurement_seed);

  c.sigma_min = get<double>(t, "schedule.sigma_min", c.sigma_min);
  c.sigma_max = get<double>(t, "schedule.sigma_max", c.sigma_max);
  c.n_scales = get<std::size_t>(t, "schedule.n", c.n_scales);

  auto& s = c.sampler;
  s.steps_per_scale = get<std::size_t>(t, "sampler.steps_per_scale", s.steps_per_scale);
  s.start_index = get<std::size_t>(t, "sampler.start_index", s.start_index);
  s.lambda = get<double>(t, "sampler.lambda", s.lambda);
  s.n_chains = get<std::size_t>(t, "sampler.chains", s.n_chains);
  if (t.get_optional<std::string>("sampler.split")) s.split_index = get<std::size_t>(t, "sampler.split", 0);
  s.deterministic = get<bool>(t, "sampler.deterministic", s.deterministic);
  s.seed = get<std::uint64_t>(t, "sampler.seed", s.seed);
  s.divergence_norm = get<double>(t, "sampler.divergence_norm", s.divergence_norm);
  const auto lv = get<std::string>(t, "sampler.likelihood_variance", "tau");
  if (lv == "tau") s.likelihood_variance = LikelihoodVariance::TauOverLambda;
  else if (lv == "tau-squared") s.likelihood_variance = LikelihoodVariance::TauSqOverLambda;
  else throw ConfigError("config: likelihood_variance must be 'tau' or 'tau-squared'");
  c.map_iterations = get<std::size_t>(t, "sampler.map_iterations", c.map_iterations);

  c.prior = get<std::string>(t, "prior.kind", c.prior);
  c.support_variance = get<double>(t, "prior.support_variance", c.support_variance);
  c.background_variance = get<double>(t, "prior.background_variance", c.background_variance);
  c.support_threshold = get<double>(t, "prior.support_threshold", c.support_threshold);
  c.gmm_file = detail::resolve(base_dir, get<std::string>(t, "prior.gmm_file", ""));
  c.checkpoint = detail::resolve(base_dir, get<std::string>(t, "prior.checkpoint", ""));

  c.toy_y = {get<double>(t, "toy.y_re", c.toy_y.real()), get<double>(t, "toy.y_im", c.toy_y.imag())};
  c.toy_noise_var = get<double>(t, "toy.noise_var", c.toy_noise_var);
  c.grid_extent = get<double>(t, "toy.grid_extent", c.grid_extent);
  c.grid_cells = get<std::size_t>(t, "toy.grid_cells", c.grid_cells);
  c.ci_percentile = get<double>(t, "output.ci_percentile", c.ci_percentile);

  c.dataset = get<std::string>(t, "training.dataset", c.dataset);
  c.dataset_size = get<std::size_t>(t, "training.samples", c.dataset_size);
  c.network = get<std::string>(t, "training.network", c.network);
  if (auto h = t.get_optional<std::string>("training.hidden")) c.hidden = detail::parse_list("training.hidden", *h);
  c.conv_channels = get<std::size_t>(t, "training.channels", c.conv_channels);
  c.conv_layers = get<std::size_t>(t, "training.layers", c.conv_layers);
  c.patch_size = get<std::size_t>(t, "training.patch_size", c.patch_size);
  c.conditioning = get<std::string>(t, "training.conditioning", c.conditioning);
  c.fourier_size = get<std::size_t>(t, "training.fourier_size", c.fourier_size);
  c.fourier_std = get<double>(t, "training.fourier_std", c.fourier_std);
  c.train.epochs = get<std::size_t>(t, "training.epochs", c.train.epochs);
  c.train.batch_size = get<std::size_t>(t, "training.batch_size", c.train.batch_size);
  c.train.learning_rate = get<double>(t, "training.learning_rate", c.train.learning_rate);
  c.train.momentum = get<double>(t, "training.momentum", c.train.momentum);
  const auto opt = get<std::string>(t, "training.optimizer", "sgd");
  if (opt == "sgd") c.train.optimizer = training::Optimizer::Sgd;
  else if (opt == "adam") c.train.optimizer = training::Optimizer::Adam;
  else throw ConfigError("config: optimizer must be 'sgd' or 'adam'");
  c.train.seed = get<std::uint64_t>(t, "training.seed", c.train.seed);
  return c;
}

/// Cross-field checks; anything that would fail later for config reasons
/// fails here instead.
inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (c.output.empty()) fail("[experiment] output must not be empty");
  if (c.image_source != "phantom" && c.image_source != "file") fail("image source must be 'phantom' or 'file'");
  if (c.image_source == "phantom") {
    const auto kinds = phantom_kinds();
    if (std::find(kinds.begin(), kinds.end(), c.phantom) == kinds.end()) fail("unknown phantom '" + c.phantom + "'");
    if (c.size < 16) fail("phantom size must be at least 16");
  } else if (c.image_file.empty() || !std::filesystem::exists(c.image_file)) {
    fail("image file '" + c.image_file + "' does not exist");
  }
  static const std::set<std::string> masks_ok = {"full", "skip-odd-even", "variable-density", "uniform"};
  if (!masks_ok.count(c.mask)) fail("unknown mask kind '" + c.mask + "'");
  if (!(c.variable_density.target_fraction > 0.0 && c.variable_density.target_fraction <= 1.0)) {
    fail("mask fraction must lie in (0, 1]");
  }
  if (!(c.uniform.probability > 0.0 && c.uniform.probability <= 1.0)) fail("mask probability must lie in (0, 1]");
  if (c.coils < 1) fail("coil count must be positive");
  if (!(c.noise_sd >= 0.0)) fail("noise_sd must be >= 0");
  if (!(c.sigma_min > 0.0) || !(c.sigma_max > c.sigma_min) || c.n_scales < 2) {
    fail("schedule needs 0 < sigma_min < sigma_max and n >= 2");
  }
  try {
    c.sampler.validate(c.schedule());
  } catch (const std::exception& e) {
    fail(e.what());
  }
  if (c.prior != "gaussian" && c.prior != "gmm" && c.prior != "checkpoint") fail("unknown prior kind '" + c.prior + "'");
  if (c.prior == "gaussian" && (!(c.support_variance > 0.0) || !(c.background_variance > 0.0))) {
    fail("prior variances must be positive");
  }
  if (!c.gmm_file.empty() && !std::filesystem::exists(c.gmm_file)) fail("gmm file '" + c.gmm_file + "' does not exist");
  if (c.prior == "gmm" && c.kind != Kind::ToyGmm && c.gmm_file.empty()) fail("prior kind gmm needs gmm_file");
  if (c.prior == "checkpoint" && (c.checkpoint.empty() || !std::filesystem::exists(c.checkpoint))) {
    fail("checkpoint '" + c.checkpoint + "' does not exist");
  }
  if (!(c.toy_noise_var > 0.0)) fail("toy noise_var must be positive");
  if (!(c.grid_extent > 0.0) || c.grid_cells < 2) fail("toy grid needs a positive extent and at least 2 cells");
  if (!(c.ci_percentile >= 0.0 && c.ci_percentile <= 100.0)) fail("ci_percentile must lie in [0, 100]");
  if ((c.kind == Kind::BurnIn) && !c.sampler.split_index) fail("burn-in experiments need [sampler] split");
  if (c.dataset != "gmm" && c.dataset != "patches") fail("training dataset must be 'gmm' or 'patches'");
  if (c.network != "mlp" && c.network != "conv") fail("training network must be 'mlp' or 'conv'");
  if (c.conditioning != "fourier" && c.conditioning != "discrete") fail("conditioning must be 'fourier' or 'discrete'");
  if (c.dataset_size < 1 || c.conv_channels < 1 || c.conv_layers < 1 || c.fourier_size < 1) {
    fail("training sizes must be positive");
  }
  if (!(c.fourier_std > 0.0)) fail("fourier_std must be positive");
  try {
    c.train.validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path + "' does not exist");
  detail::Tree t;
  try {
    boost::property_tree::ini_parser::read_ini(path, t);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  auto c = parse_config(t, std::filesystem::absolute(path).parent_path());
  validate(c);
  return c;
}

// --------------------------------------------------------------- manifest --

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t k = 0; k < v.size(); ++k) out += (k ? "," : "") + std::to_string(v[k]);
  return out;
}

}  // namespace detail

/// Canonical INI text of the effective configuration (no manifest section).
inline std::string to_ini(const ExperimentConfig& c) {
  using detail::fmt;
  std::ostringstream os;
  os << "[experiment]\nkind = " << kind_name(c.kind) << "\noutput = " << c.output << "\n\n";
  os << "[image]\nsource = " << c.image_source << "\nphantom = " << c.phantom << "\nsize = " << c.size << "\n";
  if (!c.image_file.empty()) os << "file = " << c.image_file << "\n";
  os << "\n[mask]\nkind = " << c.mask << "\ncenter = " << c.variable_density.center
     << "\nfraction = " << fmt(c.variable_density.target_fraction)
     << "\nexponent = " << fmt(c.variable_density.density_exponent)
     << "\nmin_distance = " << fmt(c.variable_density.min_distance) << "\nprobability = " << fmt(c.uniform.probability)
     << "\nseed = " << c.variable_density.seed << "\n\n";
  os << "[coils]\ncount = " << c.coils << "\n\n";
  os << "[measurement]\nnoise_sd = " << fmt(c.noise_sd) << "\nseed = " << c.measurement_seed << "\n\n";
  os << "[schedule]\nsigma_min = " << fmt(c.sigma_min) << "\nsigma_max = " << fmt(c.sigma_max) << "\nn = " << c.n_scales
     << "\n\n";
  const auto& s = c.sampler;
  os << "[sampler]\nsteps_per_scale = " << s.steps_per_scale << "\nstart_index = " << s.start_index
     << "\nlambda = " << fmt(s.lambda) << "\nchains = " << s.n_chains << "\n";
  if (s.split_index) os << "split = " << *s.split_index << "\n";
  os << "deterministic = " << (s.deterministic ? "true" : "false") << "\nseed = " << s.seed
     << "\nlikelihood_variance = " << (s.likelihood_variance == LikelihoodVariance::TauOverLambda ? "tau" : "tau-squared")
     << "\ndivergence_norm = " << fmt(s.divergence_norm) << "\nmap_iterations = " << c.map_iterations << "\n\n";
  os << "[prior]\nkind = " << c.prior << "\nsupport_variance = " << fmt(c.support_variance)
     << "\nbackground_variance = " << fmt(c.background_variance)
     << "\nsupport_threshold = " << fmt(c.support_threshold) << "\n";
  if (!c.gmm_file.empty()) os << "gmm_file = " << c.gmm_file << "\n";
  if (!c.checkpoint.empty()) os << "checkpoint = " << c.checkpoint << "\n";
  os << "\n[toy]\ny_re = " << fmt(c.toy_y.real()) << "\ny_im = " << fmt(c.toy_y.imag())
     << "\nnoise_var = " << fmt(c.toy_noise_var) << "\ngrid_extent = " << fmt(c.grid_extent)
     << "\ngrid_cells = " << c.grid_cells << "\n\n";
  os << "[output]\nci_percentile = " << fmt(c.ci_percentile) << "\n\n";
  const auto& tr = c.train;
  os << "[training]\ndataset = " << c.dataset << "\nsamples = " << c.dataset_size << "\nnetwork = " << c.network
     << "\nhidden = " << detail::join(c.hidden) << "\nchannels = " << c.conv_channels << "\nlayers = " << c.conv_layers
     << "\npatch_size = " << c.patch_size << "\nconditioning = " << c.conditioning
     << "\nfourier_size = " << c.fourier_size << "\nfourier_std = " << fmt(c.fourier_std) << "\nepochs = " << tr.epochs
     << "\nbatch_size = " << tr.batch_size << "\nlearning_rate = " << fmt(tr.learning_rate)
     << "\nmomentum = " << fmt(tr.momentum) << "\noptimizer = " << (tr.optimizer == training::Optimizer::Sgd ? "sgd" : "adam")
     << "\nseed = " << tr.seed << "\n";
  return os.str();
}

inline std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_ini(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::filesystem::path output_dir(const ExperimentConfig& c) {
  std::filesystem::path out(c.output);
  if (const char* root = std::getenv(kOutputRootEnv); root && *root && out.is_relative()) out = std::filesystem::path(root) / out;
  return out;
}

inline void write_manifest(const std::filesystem::path& dir, const ExperimentConfig& c) {
  std::ofstream os(dir / "manifest.ini");
  if (!os) throw io::IoError("cannot write manifest in '" + dir.string() + "'");
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash(c)));
  os << to_ini(c) << "\n[manifest]\nconfig_hash = " << hash << "\nseed = " << c.sampler.seed
     << "\nversion = " << kVersion << "\n";
  if (!os) throw io::IoError("cannot write manifest in '" + dir.string() + "'");
}

// ------------------------------------------------------------------ priors --

/// Text format: one component per line, "weight variance re_1 im_1 re_2 im_2 ...".
/// Blank lines and lines starting with '#' are ignored.
inline GmmPrior load_gmm_prior(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io::IoError("cannot open '" + path + "'");
  std::vector<GmmComponent> comps;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    GmmComponent c;
    std::vector<double> coords;
    double v = 0.0;
    if (!(ls >> c.weight >> c.variance)) throw ConfigError("gmm file line " + std::to_string(lineno) + ": bad header");
    while (ls >> v) coords.push_back(v);
    if (!ls.eof() || coords.empty() || coords.size() % 2) {
      throw ConfigError("gmm file line " + std::to_string(lineno) + ": need re/im pairs");
    }
    c.mean.resize(static_cast<Eigen::Index>(coords.size() / 2));
    for (std::size_t k = 0; k < coords.size() / 2; ++k) c.mean(static_cast<Eigen::Index>(k)) = {coords[2 * k], coords[2 * k + 1]};
    comps.push_back(std::move(c));
  }
  try {
    return GmmPrior(std::move(comps));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("gmm file: ") + e.what());
  }
}

/// The toy mixture: three clusters on one complex pixel.
inline GmmPrior toy_gmm_prior() {
  const double w = 1.0 / 3.0;
  auto point = [](Complex z) { return ComplexVector::Constant(1, z); };
  return GmmPrior({{w, point({-0.5, 0.0}), 0.08}, {w, point({0.5, 0.0}), 0.08}, {1.0 - 2.0 * w, point({0.0, 0.6}), 0.08}});
}

/// Zero-mean Gaussian with a large variance on the object support and a
/// small one elsewhere.
inline GaussianPrior support_prior(const ComplexImage& truth, double support_variance, double background_variance,
                                   double threshold) {
  RealVector v(truth.data().size());
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    v(k) = std::abs(truth.data()(k)) > threshold ? support_variance : background_variance;
  }
  return GaussianPrior(ComplexImage(truth.height(), truth.width()), std::move(v));
}

/// Type-erased score field for config-selected priors.
class AnyScore {
 public:
  using Fn = std::function<ComplexImage(const ComplexImage&, std::size_t)>;
  explicit AnyScore(Fn fn) : fn_(std::move(fn)) {}
  ComplexImage score(const ComplexImage& x, std::size_t i) const { return fn_(x, i); }

 private:
  Fn fn_;
};

inline AnyScore make_score(const ExperimentConfig& c, const ComplexImage& truth, const NoiseSchedule& schedule) {
  if (c.prior == "gaussian") {
    auto p = std::make_shared<NoisedPrior<GaussianPrior>>(
        support_prior(truth, c.support_variance, c.background_variance, c.support_threshold), schedule);
    return AnyScore([p](const ComplexImage& x, std::size_t i) { return p->score(x, i); });
  }
  if (c.prior == "gmm") {
    auto p = std::make_shared<NoisedPrior<GmmPrior>>(c.gmm_file.empty() ? toy_gmm_prior() : load_gmm_prior(c.gmm_file),
                                                     schedule);
    if (static_cast<Eigen::Index>(p->prior().dimension()) != truth.data().size()) {
      throw ConfigError("gmm prior dimension does not match the image size");
    }
    return AnyScore([p](const ComplexImage& x, std::size_t i) { return p->score(x, i); });
  }
  const auto kind = training::checkpoint_kind(c.checkpoint);
  try {
    if (kind == 0) {
      auto net = std::make_shared<training::MlpScoreNet>(training::load_mlp_checkpoint(c.checkpoint, schedule));
      auto s = std::make_shared<training::LearnedScore<training::MlpScoreNet>>(*net, truth.height(), truth.width());
      return AnyScore([net, s](const ComplexImage& x, std::size_t i) { return s->score(x, i); });
    }
    auto net = std::make_shared<training::ConvScoreNet>(training::load_conv_checkpoint(c.checkpoint, schedule));
    auto s = std::make_shared<training::LearnedScore<training::ConvScoreNet>>(*net, truth.height(), truth.width());
    return AnyScore([net, s](const ComplexImage& x, std::size_t i) { return s->score(x, i); });
  } catch (const ShapeMismatch& e) {
    throw ConfigError(std::string("checkpoint does not fit the image: ") + e.what());
  } catch (const io::FormatError& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
}

// -------------------------------------------------------------------- run --

struct RunSummary {
  std::filesystem::path output;
  std::size_t samples = 0;
  double mmse_psnr = 0.0;
  double mmse_ssim = 0.0;
  double toy_tv = 0.0;  // toy-gmm only
};

namespace detail {

inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline SamplingMask build_mask(const ExperimentConfig& c, std::size_t h, std::size_t w) {
  if (c.mask == "full") return SamplingMask::full(h, w);
  if (c.mask == "skip-odd-even") return make_mask(h, w, masks::SkipOddEven{});
  if (c.mask == "uniform") return make_mask(h, w, c.uniform);
  auto vd = c.variable_density;
  vd.center = std::min({vd.center, h, w});
  return make_mask(h, w, vd);
}

inline ComplexImage load_truth(const ExperimentConfig& c) {
  if (c.image_source == "phantom") return make_phantom(c.phantom, c.size);
  return io::read_complex_image(c.image_file);
}

struct Trace {
  std::vector<std::string> rows;
};

inline bool has_quality_metrics(const ComplexImage& x) { return x.height() >= kSsimWindow && x.width() >= kSsimWindow; }

inline void write_outputs(const std::filesystem::path& dir, const ExperimentConfig& c, const std::vector<ComplexImage>& samples,
                          const ComplexImage* truth, const std::vector<std::pair<std::string, ComplexImage>>& extra,
                          const Trace& trace, RunSummary& summary) {
  const std::size_t h = samples.front().height(), w = samples.front().width();
  SampleSet set(samples, c.sampler.seed, config_hash(c));
  const ComplexImage mean = mmse(set);
  io::write_complex_images((dir / "samples.bin").string(), samples);
  io::write_complex_image((dir / "mmse.bin").string(), mean);
  io::write_pgm16((dir / "mmse.pgm").string(), mean.magnitude(), h, w);
  if (set.count() >= 2) {
    const UncertaintyMap um = variance_map(set);
    io::write_real_array((dir / "variance.bin").string(), um.variance, {h, w});
    io::write_pgm16((dir / "variance.pgm").string(), um.variance, h, w);
    const auto overlay = ci_overlay(um, c.ci_percentile);
    io::write_u8_array((dir / "ci_overlay.bin").string(), overlay, {h, w});
    io::write_pgm8((dir / "ci_overlay.pgm").string(), overlay, h, w);
  }
  for (const auto& [name, img] : extra) {
    io::write_complex_image((dir / (name + ".bin")).string(), img);
    io::write_pgm16((dir / (name + ".pgm")).string(), img.magnitude(), h, w);
  }

  std::ofstream m(dir / "metrics.csv");
  m << "label,psnr_db,ssim\n";
  auto row = [&](const std::string& label, const ComplexImage& x) {
    double p = std::numeric_limits<double>::quiet_NaN(), s = p;
    if (truth && has_quality_metrics(x)) {
      p = psnr(x, *truth);
      s = ssim(x, *truth);
    }
    m << label << ',' << num(p) << ',' << num(s) << '\n';
    return std::pair{p, s};
  };
  for (std::size_t k = 0; k < samples.size(); ++k) row("sample_" + std::to_string(k), samples[k]);
  const auto [mp, ms] = row("mmse", mean);
  for (const auto& [name, img] : extra) row(name, img);
  if (!m) throw io::IoError("cannot write metrics.csv");
  summary.mmse_psnr = mp;
  summary.mmse_ssim = ms;
  summary.samples = samples.size();

  std::ofstream t(dir / "trace.csv");
  t << "scale,step,psnr_db,ssim,update_norm\n";
  for (const auto& r : trace.rows) t << r << '\n';
  if (!t) throw io::IoError("cannot write trace.csv");
}

template <typename Run>
void attach_trace(Run& run, const ComplexImage* truth, Trace& trace, std::size_t chain = 0) {
  run.observer = [truth, &trace, chain](std::size_t c, std::size_t scale, std::size_t step, const ComplexImage& x,
                                         double norm) {
    if (c != chain) return;
    double p = std::numeric_limits<double>::quiet_NaN(), s = p;
    if (truth && has_quality_metrics(x)) {
      p = psnr(x, *truth);
      s = ssim(x, *truth);
    }
    trace.rows.push_back(std::to_string(scale) + "," + std::to_string(step) + "," + num(p) + "," + num(s) + "," +
                         num(norm));
  };
}

inline RunSummary run_toy(const ExperimentConfig& c, const std::filesystem::path& dir) {
  const NoiseSchedule sched = c.schedule();
  const GmmPrior prior = c.gmm_file.empty() ? toy_gmm_prior() : load_gmm_prior(c.gmm_file);
  if (prior.dimension() != 1) throw ConfigError("toy-gmm needs a one-pixel mixture");
  const ComplexImage one = ComplexImage::point(0.0);
  const AnyScore score = c.prior == "checkpoint"
                             ? make_score(c, one, sched)
                             : AnyScore([p = NoisedPrior<GmmPrior>(prior, sched)](const ComplexImage& x, std::size_t i) {
                                 return p.score(x, i);
                               });
  const auto op = DenseOperator::identity(1, 1);
  KSpaceData y = op.apply(one);
  y.samples(0) = c.toy_y;

  PosteriorRun run(c.sampler, sched, score, op, y);
  Trace trace;
  attach_trace(run, nullptr, trace);
  const auto samples = run_sampler(run);

  const oracles::GridSpec grid{-c.grid_extent, c.grid_extent, -c.grid_extent, c.grid_extent, c.grid_cells, c.grid_cells};
  const auto density = oracles::grid_posterior_2d(
      [&](Complex z) { return prior.log_density(ComplexImage::point(z), 0.0); },
      [&](Complex z) { return -std::norm(c.toy_y - z) / c.toy_noise_var; }, grid);
  std::vector<Complex> pts;
  for (const auto& s : samples) pts.push_back(s(0, 0));
  RunSummary summary;
  summary.toy_tv = oracles::histogram_tv(pts, density);

  const auto exact = gmm_exact_posterior(prior, Eigen::MatrixXcd::Identity(1, 1), ComplexVector::Constant(1, c.toy_y),
                                         c.toy_noise_var);
  std::ofstream os(dir / "toy_summary.csv");
  os << "quantity,value\n";
  os << "tv_distance," << num(summary.toy_tv) << "\n";
  os << "samples," << samples.size() << "\n";
  for (std::size_t k = 0; k < prior.components().size(); ++k) {
    os << "prior_weight_" << k << ',' << num(prior.components()[k].weight) << "\n";
    os << "posterior_weight_" << k << ',' << num(exact.components[k].weight) << "\n";
  }
  os << "posterior_mean_re," << num(exact.mean()(0).real()) << "\nposterior_mean_im," << num(exact.mean()(0).imag())
     << "\n";
  if (!os) throw io::IoError("cannot write toy_summary.csv");
  RealVector dens = Eigen::Map<const RealVector>(density.density.data(), static_cast<Eigen::Index>(density.density.size()));
  io::write_real_array((dir / "toy_density.bin").string(), dens, {c.grid_cells, c.grid_cells});
  write_outputs(dir, c, samples, nullptr, {}, trace, summary);
  return summary;
}

inline RunSummary run_image(const ExperimentConfig& c, const std::filesystem::path& dir) {
  const NoiseSchedule sched = c.schedule();
  const ComplexImage truth = load_truth(c);
  const std::size_t h = truth.height(), w = truth.width();
  const ForwardOperator op(build_mask(c, h, w), synthetic_coil_maps(c.coils, h, w));
  const KSpaceData y = simulate_measurement(op, truth, c.noise_sd, c.measurement_seed);
  const AnyScore score = make_score(c, truth, sched);

  PosteriorRun run(c.sampler, sched, score, op, y);
  Trace trace;
  if (c.kind != Kind::BurnIn) attach_trace(run, &truth, trace);
  RunSummary summary;
  std::vector<std::pair<std::string, ComplexImage>> extra;
  extra.emplace_back("zero_filled", op.adjoint(y));

  std::vector<ComplexImage> samples;
  if (c.kind == Kind::Map) {
    const MapResult map = run_map(run, c.map_iterations);
    std::ofstream os(dir / "map_updates.csv");
    os << "iteration,phase,update_norm\n";
    for (std::size_t k = 0; k < map.update_norms.size(); ++k) {
      os << k << ',' << (k < map.annealing_steps ? "anneal" : "extended") << ',' << num(map.update_norms[k]) << '\n';
    }
    extra.emplace_back("map", map.x);
    run.observer = nullptr;
    samples = run_posterior_sampling(run);
  } else if (c.kind == Kind::BurnIn) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto full = run_posterior_sampling(run);
    attach_trace(run, &truth, trace);
    const auto t1 = std::chrono::steady_clock::now();
    samples = run_with_burn_in(run, *c.sampler.split_index);
    const auto t2 = std::chrono::steady_clock::now();
    const SampleSet fs(full), ss(samples);
    const ComplexImage diff = mmse(ss) - mmse(fs);
    double ratio = std::numeric_limits<double>::quiet_NaN();
    if (fs.count() >= 2 && ss.count() >= 2) {
      const RealVector se2 = complex_variance(fs) / static_cast<double>(fs.count()) +
                             complex_variance(ss) / static_cast<double>(ss.count());
      double acc = 0.0;
      for (Eigen::Index k = 0; k < se2.size(); ++k) acc += se2(k) > 0.0 ? std::norm(diff.data()(k)) / se2(k) : 0.0;
      ratio = std::sqrt(acc / static_cast<double>(se2.size()));
    }
    std::ofstream os(dir / "burnin.csv");
    os << "quantity,value\n";
    os << "full_seconds," << num(std::chrono::duration<double>(t1 - t0).count()) << "\n";
    os << "split_seconds," << num(std::chrono::duration<double>(t2 - t1).count()) << "\n";
    os << "split_index," << *c.sampler.split_index << "\n";
    os << "mmse_difference_rms_in_se," << num(ratio) << "\n";
    extra.emplace_back("mmse_full", mmse(fs));
  } else {
    samples = run_sampler(run);
  }
  write_outputs(dir, c, samples, &truth, extra, trace, summary);
  return summary;
}

}  // namespace detail

/// Runs the configured experiment and writes all artifacts plus the manifest.
inline RunSummary run_experiment(const ExperimentConfig& c) {
  validate(c);
  const auto dir = output_dir(c);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw io::IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  write_manifest(dir, c);
  RunSummary s = c.kind == Kind::ToyGmm ? detail::run_toy(c, dir) : detail::run_image(c, dir);
  s.output = dir;
  return s;
}

// ---------------------------------------------------------------- training --

struct TrainSummary {
  std::filesystem::path checkpoint;
  std::vector<double> loss_trace;
};

inline std::vector<RealVector> training_data(const ExperimentConfig& c) {
  RngStream rng(c.train.seed, 0xda7a);
  std::vector<RealVector> data;
  if (c.dataset == "gmm") {
    const GmmPrior prior = c.gmm_file.empty() ? toy_gmm_prior() : load_gmm_prior(c.gmm_file);
    for (std::size_t k = 0; k < c.dataset_size; ++k) {
      const ComplexVector x = prior.sample(rng);
      data.push_back(training::pack(ComplexImage(1, x.size(), x)));
    }
    return data;
  }
  const ComplexImage img = detail::load_truth(c);
  if (c.patch_size > img.height() || c.patch_size > img.width()) throw ConfigError("patch size exceeds the image");
  for (std::size_t k = 0; k < c.dataset_size; ++k) {
    const auto r0 = static_cast<std::size_t>(rng.uniform() * static_cast<double>(img.height() - c.patch_size + 1));
    const auto c0 = static_cast<std::size_t>(rng.uniform() * static_cast<double>(img.width() - c.patch_size + 1));
    ComplexImage patch(c.patch_size, c.patch_size);
    for (std::size_t r = 0; r < c.patch_size; ++r) {
      for (std::size_t q = 0; q < c.patch_size; ++q) patch(r, q) = img(std::min(r0 + r, img.height() - 1), std::min(c0 + q, img.width() - 1));
    }
    data.push_back(training::pack(patch));
  }
  return data;
}

inline TrainSummary run_training(const ExperimentConfig& c) {
  validate(c);
  const auto dir = output_dir(c);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw io::IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  write_manifest(dir, c);
  const NoiseSchedule sched = c.schedule();
  const auto data = training_data(c);
  const auto cond = c.conditioning == "fourier"
                        ? training::NoiseConditioning::fourier(sched.size(), c.fourier_size, c.fourier_std, c.train.seed)
                        : training::NoiseConditioning::discrete(sched.size());
  TrainSummary out;
  out.checkpoint = dir / "checkpoint.bin";
  const auto input = static_cast<std::size_t>(data.front().size());
  if (c.network == "mlp") {
    auto r = training::train(training::MlpScoreNet(input, c.hidden, cond, sched, training::Activation::Silu, c.train.seed),
                             data, c.train);
    training::save_checkpoint(out.checkpoint.string(), r.net);
    out.loss_trace = std::move(r.loss_trace);
  } else {
    if (c.dataset != "patches") throw ConfigError("the conv network trains on patches");
    auto r = training::train(training::ConvScoreNet(c.patch_size, c.patch_size, c.conv_channels, c.conv_layers, cond,
                                                    sched, training::Activation::Silu, c.train.seed),
                             data, c.train);
    training::save_checkpoint(out.checkpoint.string(), r.net);
    out.loss_trace = std::move(r.loss_trace);
  }
  std::ofstream os(dir / "loss.csv");
  os << "epoch,loss\n";
  for (std::size_t k = 0; k < out.loss_trace.size(); ++k) os << k << ',' << detail::num(out.loss_trace[k]) << '\n';
  if (!os) throw io::IoError("cannot write loss.csv");
  return out;
}

}  // namespace bayesrecon::experiment
