#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "qlab/checkpoint.hpp"
#include "qlab/experiment.hpp"

namespace fs = std::filesystem;
using namespace qlab;

namespace {

// usage problems map to exit code 2, everything else that throws to 1
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void note(const std::string& s) { std::cerr << s << std::endl; }

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment TOML file")->required();
  cmd->add_option("-s,--set", c.overrides, "override, section.key=value (repeatable)");
}

ExperimentConfig load(const Common& c) {
  if (!fs::exists(c.config)) throw UsageError("config file not found: " + c.config);
  auto cfg = load_config(c.config, c.overrides);
  if (cfg.data.source != "synthetic") {
    for (const auto& p : {cfg.data.train_path, cfg.data.test_path})
      if (!fs::exists(p)) throw UsageError("dataset not found: " + p.string());
  }
  return cfg;
}

fs::path prepare_out(const ExperimentConfig& cfg) {
  const fs::path root = output_root(cfg);
  fs::create_directories(root);
  std::ofstream(root / "config.resolved.toml") << config_to_toml(cfg);
  return root;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string stem_for(ModelType type, uint64_t seed) { return to_string(type) + "_seed" + std::to_string(seed); }

Checkpoint need_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

// Re-tokenize with the checkpoint's vocabulary so ids line up with its embedding.
Dataset with_vocab(const Dataset& d, const Checkpoint& ck) { return tokenize_dataset(d, ck.vocab, ck.max_tokens); }

QuantizedModel as_quantized(const Checkpoint& ck) {
  return ck.quantized ? *ck.quantized : make_passthrough(ck.model);
}

Model train_or_load(const ExperimentConfig& cfg, const PreparedData& data, const TrainValSplit& split,
                    ModelType type, uint64_t seed, const std::string& ckpt) {
  if (!ckpt.empty()) {
    auto ck = need_checkpoint(ckpt);
    if (model_type(ck.model) != type) throw UsageError("checkpoint holds a " + to_string(model_type(ck.model)) + " model");
    if (ck.vocab.tokens() != data.vocab.tokens()) throw UsageError("checkpoint vocabulary differs from the config's data");
    return ck.model;
  }
  note("training " + to_string(type) + " seed " + std::to_string(seed));
  return train_model(cfg, type, data, split, seed).model;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qlab: post-training quantization experiments for LSTM text classifiers"};
  app.require_subcommand(1);

  // prep
  Common prep_c;
  std::string synth_dir;
  auto* prep = app.add_subcommand("prep", "build the vocabulary and report dataset statistics");
  add_common(prep, prep_c);
  prep->add_option("--synthetic", synth_dir, "also write the synthetic corpus as train.csv / test.csv here");

  // train
  Common train_c;
  std::string train_type = "disc";
  uint64_t train_seed = 1;
  auto* train_cmd = app.add_subcommand("train", "train a full-precision model");
  add_common(train_cmd, train_c);
  train_cmd->add_option("-m,--model-type", train_type, "disc or gen");
  train_cmd->add_option("--seed", train_seed, "run seed");

  // quantize
  Common quant_c;
  std::string quant_ckpt, quant_calib = "conditional";
  uint64_t quant_seed = 1;
  bool skip_gpfq = false;
  auto* quant_cmd = app.add_subcommand("quantize", "quantize a checkpoint at every configured bitwidth");
  add_common(quant_cmd, quant_c);
  quant_cmd->add_option("--checkpoint", quant_ckpt, "FP checkpoint")->required();
  quant_cmd->add_option("--calib", quant_calib, "conditional, unconditional or coverage:k");
  quant_cmd->add_option("--seed", quant_seed, "run seed (train/val split and calibration draw)");
  quant_cmd->add_flag("--skip-gpfq", skip_gpfq, "stop after calibration");

  // eval
  Common eval_c;
  std::string eval_ckpt;
  double eval_noise = 0.0;
  uint64_t eval_seed = 1;
  auto* eval_cmd = app.add_subcommand("eval", "test accuracy of a checkpoint");
  add_common(eval_cmd, eval_c);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "FP or quantized checkpoint")->required();
  eval_cmd->add_option("--noise", eval_noise, "character noise level on the test text")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--seed", eval_seed, "noise seed");

  // sweep
  Common sweep_c;
  auto* sweep_cmd = app.add_subcommand("sweep", "full grid: model x seed x bitwidth x calibration x noise");
  add_common(sweep_cmd, sweep_c);

  // ks-report
  Common ks_c;
  std::string ks_type = "disc", ks_ckpt, ks_contrast = "unconditional";
  uint64_t ks_seed = 1;
  int ks_bits = 3;
  auto* ks_cmd = app.add_subcommand("ks-report", "KS distances of weights and activations, conditional vs contrast");
  add_common(ks_cmd, ks_c);
  ks_cmd->add_option("-m,--model-type", ks_type, "disc or gen");
  ks_cmd->add_option("--checkpoint", ks_ckpt, "FP checkpoint (trained on demand if omitted)");
  ks_cmd->add_option("--contrast", ks_contrast, "calibration scheme compared with conditional");
  ks_cmd->add_option("--seed", ks_seed, "run seed");
  ks_cmd->add_option("--bits", ks_bits, "bitwidth")->check(CLI::Range(2, 8));

  // kde-report
  Common kde_c;
  std::string kde_ckpt, kde_contrast = "unconditional";
  uint64_t kde_seed = 1;
  auto* kde_cmd = app.add_subcommand("kde-report", "token loss densities of the generative model");
  add_common(kde_cmd, kde_c);
  kde_cmd->add_option("--checkpoint", kde_ckpt, "FP generative checkpoint (trained on demand if omitted)");
  kde_cmd->add_option("--contrast", kde_contrast, "calibration scheme compared with conditional");
  kde_cmd->add_option("--seed", kde_seed, "run seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*prep) {
      const auto cfg = load(prep_c);
      const auto root = prepare_out(cfg);
      const auto data = prepare_data(cfg.data);
      if (!synth_dir.empty()) {
        if (cfg.data.source != "synthetic") throw UsageError("--synthetic needs data.source = \"synthetic\"");
        fs::create_directories(synth_dir);
        write_csv(data.pool, fs::path(synth_dir) / "train.csv");
        write_csv(data.test, fs::path(synth_dir) / "test.csv");
        note("wrote " + (fs::path(synth_dir) / "train.csv").string() + " and test.csv");
      }
      std::ostringstream vocab;
      for (const auto& t : data.vocab.tokens()) vocab << t << "\n";
      write_text(root / "vocab.txt", vocab.str());
      std::ostringstream os;
      os << "vocab " << data.vocab.size() << "\npool " << data.pool.size() << " per class";
      for (auto c : data.pool.class_counts()) os << " " << c;
      os << "\ntest " << data.test.size() << " per class";
      for (auto c : data.test.class_counts()) os << " " << c;
      std::cout << os.str() << std::endl;
      write_text(root / "prep.txt", os.str() + "\n");
      return 0;
    }

    if (*train_cmd) {
      const auto cfg = load(train_c);
      const auto type = parse_model_type(train_type);
      const auto root = prepare_out(cfg);
      const auto data = prepare_data(cfg.data);
      const auto split = seed_split(data, cfg.data.train_fraction, train_seed);
      const auto res = train_model(cfg, type, data, split, train_seed, [](const EpochRecord& e) {
        std::ostringstream os;
        os << "epoch " << e.epoch << " loss " << e.train_loss << " val " << e.val_accuracy;
        note(os.str());
      });
      const auto stem = stem_for(type, train_seed);
      const auto path = root / "checkpoints" / (stem + "_fp32.json");
      save_checkpoint(path, Checkpoint{res.model, data.vocab, data.max_tokens, std::nullopt});
      write_history_csv(root / "curves" / ("history_" + stem + ".csv"), res.history);
      const double acc = evaluate(make_passthrough(res.model), data.test);
      std::cout << path.string() << " best_epoch " << res.history.best_epoch << " val "
                << res.history.best_val_accuracy << " test " << acc << std::endl;
      return 0;
    }

    if (*quant_cmd) {
      const auto cfg = load(quant_c);
      const auto choice = CalibChoice::parse(quant_calib);
      const auto ck = need_checkpoint(quant_ckpt);
      if (ck.quantized) throw UsageError("checkpoint is already quantized");
      const auto root = prepare_out(cfg);
      auto data = prepare_data(cfg.data);
      data.pool = with_vocab(data.pool, ck);
      data.test = with_vocab(data.test, ck);
      const auto split = seed_split(data, cfg.data.train_fraction, quant_seed);
      const std::string stem = fs::path(quant_ckpt).stem().string();
      std::ostringstream audit;
      for (int bits : cfg.bitwidths) {
        PtqOptions opts = cfg.ptq;
        opts.spec.bitwidth = bits;
        opts.gpfq = opts.gpfq && !skip_gpfq;
        const auto res = run_ptq(ck.model, split.train, choice, quant_seed, opts);
        std::string name = stem + "_" + choice.name() + "_b" + std::to_string(bits);
        std::replace(name.begin(), name.end(), ':', '-');
        const auto path = root / "checkpoints" / (name + ".json");
        save_checkpoint(path, Checkpoint{ck.model, ck.vocab, ck.max_tokens, res.model});
        const double acc = evaluate(res.model, data.test);
        audit << "[" << bits << "-bit] " << path.string() << "\n";
        for (const auto& l : res.audit.log) audit << "  " << l << "\n";
        audit << "  test accuracy " << acc << "\n";
        std::cout << path.string() << " test " << acc << std::endl;
      }
      std::string log_name = stem + "_" + choice.name() + "_quantize.log";
      std::replace(log_name.begin(), log_name.end(), ':', '-');
      write_text(root / log_name, audit.str());
      std::cerr << audit.str();
      return 0;
    }

    if (*eval_cmd) {
      const auto cfg = load(eval_c);
      const auto ck = need_checkpoint(eval_ckpt);
      auto data = prepare_data(cfg.data);
      NoiseSpec ns;
      ns.epsilon = eval_noise;
      ns.seed = derive_seed(eval_seed, 100);
      const auto test = corrupt(with_vocab(data.test, ck), ck.vocab, ck.max_tokens, ns);
      const auto q = as_quantized(ck);
      const auto m = accuracy(quantized_predict(q, test), [&] {
        std::vector<int> y;
        for (const auto& s : test.samples) y.push_back(s.label);
        return y;
      }(), test.num_classes);
      std::cout << "accuracy " << m.accuracy << " n " << m.count << "\n";
      for (std::size_t c = 0; c < m.per_class.size(); ++c)
        std::cout << "class " << c << " " << m.per_class[c] << " n " << m.class_counts[c] << "\n";
      return 0;
    }

    if (*sweep_cmd) {
      const auto cfg = load(sweep_c);
      const auto root = prepare_out(cfg);
      const auto data = prepare_data(cfg.data);
      std::size_t failed = 0;
      SweepHooks hooks;
      hooks.log = note;
      hooks.on_row = [&](const ResultRow& r) {
        if (r.status != "ok") ++failed;
        note(to_csv(r));
      };
      const auto rows = run_sweep(cfg, data, hooks);
      write_results_csv(root / "results.csv", rows);
      write_text(root / "summary.md", "# " + cfg.id + "\n\n" + summary_markdown(rows));
      std::cout << (root / "results.csv").string() << " rows " << rows.size() << " failed " << failed << std::endl;
      return failed ? 1 : 0;
    }

    if (*ks_cmd) {
      const auto cfg = load(ks_c);
      const auto type = parse_model_type(ks_type);
      const auto contrast = CalibChoice::parse(ks_contrast);
      const auto root = prepare_out(cfg);
      const auto data = prepare_data(cfg.data);
      const auto split = seed_split(data, cfg.data.train_fraction, ks_seed);
      const Model fp = train_or_load(cfg, data, split, type, ks_seed, ks_ckpt);
      PtqOptions opts = cfg.ptq;
      opts.spec.bitwidth = ks_bits;
      const CalibChoice cc{};
      const auto a = run_ptq(fp, split.train, cc, ks_seed, opts);
      const auto b = run_ptq(fp, split.train, contrast, ks_seed, opts);
      CalibrationPlan pa{cc.scheme, cc.coverage_k, opts.calib_fraction, derive_seed(ks_seed, 5)};
      CalibrationPlan pb{contrast.scheme, contrast.coverage_k, opts.calib_fraction, derive_seed(ks_seed, 5)};
      const auto probe_a = strip_labels(sample_calibration(split.train, pa));
      const auto probe_b = strip_labels(sample_calibration(split.train, pb));
      const auto common = strip_labels(data.test);
      const std::string cname = contrast.name();
      std::ostringstream csv;
      csv << "experiment_id,model_type,comparison,site,statistic,n_a,n_b\n";
      auto row = [&](const std::string& what, const std::string& site, const KsResult& k) {
        csv << cfg.id << "," << to_string(type) << "," << what << "," << site << "," << k.statistic << "," << k.n_a
            << "," << k.n_b << "\n";
      };
      auto head = [](const Model& m) -> const Matrix& {
        if (const auto* d = std::get_if<DiscModel>(&m)) return d->head;
        return std::get<GenModel>(m).decoder;
      };
      // final layer: FP weights against each quantized version
      const std::string wname = gpfq_target(type);
      row("fp_vs_conditional", wname, weight_shift_report(head(fp), head(a.model.model)));
      row("fp_vs_" + cname, wname, weight_shift_report(head(fp), head(b.model.model)));
      // one weight-quantized, uncalibrated model fed the two calibration sets
      const auto raw = make_passthrough(quantize_weights(fp, opts.spec, opts.sites).model);
      for (Site site : {Site::embedding, Site::lstm_hidden})
        row("data_conditional_vs_" + cname, to_string(site),
            activation_shift_report(raw, probe_a, raw, probe_b, site));
      // common test inputs through FP and both quantized models
      const auto fpq = make_passthrough(fp);
      for (Site site : {Site::head_input, Site::head_output}) {
        row("fp_vs_conditional", to_string(site), activation_shift_report(fpq, common, a.model, common, site));
        row("fp_vs_" + cname, to_string(site), activation_shift_report(fpq, common, b.model, common, site));
        row("conditional_vs_" + cname, to_string(site),
            activation_shift_report(a.model, common, b.model, common, site));
      }
      const auto path = root / "curves" / ("ks_" + stem_for(type, ks_seed) + ".csv");
      write_text(path, csv.str());
      std::cout << csv.str();
      return 0;
    }

    if (*kde_cmd) {
      const auto cfg = load(kde_c);
      const auto contrast = CalibChoice::parse(kde_contrast);
      const auto root = prepare_out(cfg);
      const auto data = prepare_data(cfg.data);
      const auto split = seed_split(data, cfg.data.train_fraction, kde_seed);
      const Model fp = train_or_load(cfg, data, split, ModelType::gen, kde_seed, kde_ckpt);
      PtqOptions opts = cfg.ptq;
      opts.spec.bitwidth = cfg.kde_bitwidth;
      const auto cc = run_ptq(fp, split.train, CalibChoice{}, kde_seed, opts).model;
      const auto other = run_ptq(fp, split.train, contrast, kde_seed, opts).model;
      NoiseSpec ns;
      ns.epsilon = cfg.kde_noise;
      ns.seed = derive_seed(kde_seed, 100);
      const auto noisy = corrupt(data.test, data.vocab, data.max_tokens, ns);
      const std::string b = std::to_string(cfg.kde_bitwidth);
      std::string contrast_name = contrast.name();
      std::replace(contrast_name.begin(), contrast_name.end(), ':', '-');
      const std::vector<std::tuple<std::string, const QuantizedModel*, const Dataset*>> curves = {
          {"fp32", nullptr, &data.test},
          {b + "bit_conditional", &cc, &data.test},
          {b + "bit_" + contrast_name, &other, &data.test},
          {b + "bit_conditional_noise", &cc, &noisy},
      };
      const auto pass = make_passthrough(fp);
      std::ostringstream report;
      report << "curve,median_loss,tokens,skipped,bandwidth\n";
      for (const auto& [name, q, d] : curves) {
        const auto samples = token_loss_samples(q ? *q : pass, *d);
        const auto curve = kde(samples.losses);
        write_kde_csv(root / "curves" / ("kde_seed" + std::to_string(kde_seed) + "_" + name + ".csv"), curve);
        report << name << "," << median(samples.losses) << "," << samples.losses.size() << "," << samples.skipped
               << "," << curve.bandwidth << "\n";
      }
      write_text(root / "curves" / ("kde_seed" + std::to_string(kde_seed) + "_summary.csv"), report.str());
      std::cout << report.str();
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
