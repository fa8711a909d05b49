// bayesrecon command line: run / train / phantom / metrics.
//
// Exit codes: 0 ok, 1 usage or unexpected error, 2 config error,
// 3 numeric divergence, 4 I/O failure.

#include "bayesrecon/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

template <typename Fn>
int guarded(Fn&& fn) {
  using namespace bayesrecon;
  try {
    fn();
    return kOk;
  } catch (const experiment::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const training::TrainingDivergence& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const io::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace

int main(int argc, char** argv) {
  using namespace bayesrecon;
  CLI::App app{"Bayesian MRI reconstruction with annealed Langevin posterior sampling"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "run an experiment from a config file");
  run->add_option("config", config_path, "INI config (or a manifest.ini from an earlier run)")->required();

  std::string train_path;
  auto* train = app.add_subcommand("train", "train a score network from a config file");
  train->add_option("config", train_path, "INI config with a [training] section")->required();

  std::string kind, out;
  std::size_t size = 0;
  auto* phantom = app.add_subcommand("phantom", "write a synthetic phantom");
  phantom->add_option("kind", kind, "shepp-logan | blobs")->required();
  phantom->add_option("size", size, "side length (>= 16)")->required();
  phantom->add_option("out", out, "output path; .pgm writes the magnitude, anything else a complex array")->required();

  std::string a, b;
  auto* metrics = app.add_subcommand("metrics", "PSNR / SSIM of image a against reference b");
  metrics->add_option("a", a, "complex array file")->required();
  metrics->add_option("b", b, "reference complex array file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  if (*run) {
    return guarded([&] {
      const auto cfg = experiment::load_config(config_path);
      const auto s = experiment::run_experiment(cfg);
      std::cout << "output: " << s.output.string() << "\nsamples: " << s.samples << "\n";
      if (cfg.kind == experiment::Kind::ToyGmm) {
        std::cout << "tv_distance: " << s.toy_tv << "\n";
      } else {
        std::cout << "mmse_psnr_db: " << s.mmse_psnr << "\nmmse_ssim: " << s.mmse_ssim << "\n";
      }
    });
  }
  if (*train) {
    return guarded([&] {
      const auto cfg = experiment::load_config(train_path);
      const auto s = experiment::run_training(cfg);
      std::cout << "checkpoint: " << s.checkpoint.string() << "\n";
      if (!s.loss_trace.empty()) std::cout << "final_loss: " << s.loss_trace.back() << "\n";
    });
  }
  if (*phantom) {
    return guarded([&] {
      const ComplexImage img = make_phantom(kind, size);
      if (std::filesystem::path(out).extension() == ".pgm") {
        io::write_pgm16(out, img.magnitude(), img.height(), img.width(), 1.0);
      } else {
        io::write_complex_image(out, img);
      }
    });
  }
  if (*metrics) {
    return guarded([&] {
      const ComplexImage x = io::read_complex_image(a);
      const ComplexImage ref = io::read_complex_image(b);
      if (!x.same_shape(ref)) throw std::invalid_argument("images differ in shape");
      std::cout << "psnr_db: " << psnr(x, ref) << "\n";
      if (x.height() >= kSsimWindow && x.width() >= kSsimWindow) std::cout << "ssim: " << ssim(x, ref) << "\n";
    });
  }
  return kUsage;
}
