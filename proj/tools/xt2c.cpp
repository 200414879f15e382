#include "CLI11.hpp"
#include "json.hpp"

#include "xt2c/errors.hpp"
#include "xt2c/grad_suite.hpp"
#include "xt2c/training.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace xt2c;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Key-value configuration file")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "Override a configuration key (key=value, repeatable; wins over --config)");
  app->add_option("--seed", c.seed, "Seed for every random stream (overrides 'seed' and 'data.seed')");
}

KeyValues load_config(const Common& c) {
  KeyValues kv = c.config.empty() ? KeyValues{} : KeyValues::load(c.config);
  for (const auto& o : c.overrides) kv.apply_override(o);
  if (c.seed) {
    kv.set("seed", std::to_string(*c.seed));
    kv.set("data.seed", std::to_string(*c.seed));
  }
  return kv;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct DataDir {
  Vocabulary vocab;
  std::vector<SceneSample> train, val, test;
};

DataDir load_data_dir(const fs::path& dir, bool need_train) {
  if (!fs::is_directory(dir)) throw std::runtime_error("data directory " + dir.string() + " does not exist");
  DataDir d;
  d.vocab = Vocabulary::load(dir / "vocab.txt");
  if (need_train) {
    d.train = read_split(dir / "train.jsonl");
    d.val = read_split(dir / "val.jsonl");
  }
  if (fs::exists(dir / "test.jsonl")) d.test = read_split(dir / "test.jsonl");
  return d;
}

// --- gen-data -------------------------------------------------------------

int cmd_gen_data(const Common& c, const std::string& out, bool strip_2d) {
  const GenConfig cfg = gen_config_from(load_config(c));
  cfg.validate();
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  DatasetSplits splits = generate_dataset(cfg, vocab);
  if (strip_2d) {
    for (auto* split : {&splits.train, &splits.val, &splits.test}) {
      for (auto& s : *split) {
        for (auto& o : s.objects) {
          o.f2d.reset();
          o.b2d.reset();
        }
      }
    }
  }
  write_dataset(splits, vocab, out);
  write_text(fs::path(out) / "data_config.txt", to_key_values(cfg).to_text());
  std::cout << "wrote " << splits.train.size() << "/" << splits.val.size() << "/" << splits.test.size()
            << " train/val/test scenes and " << vocab.size() << " words to " << out << "\n";
  return 0;
}

// --- train ----------------------------------------------------------------

int cmd_train(const Common& c, const std::string& data, const std::string& out) {
  const DataDir d = load_data_dir(data, true);
  RunConfig cfg = RunConfig::from_key_values(load_config(c));
  cfg.model.vocab_size = static_cast<int>(d.vocab.size());
  cfg.validate();
  fs::create_directories(out);
  write_text(fs::path(out) / "config.txt", cfg.to_text());
  std::ofstream log(fs::path(out) / "log.jsonl", std::ios::binary);
  const TrainResult result = train(cfg, d.vocab, d.train, d.val, [&](const EpochLog& e) {
    log << e.to_json() << "\n";
    log.flush();
    std::cerr << "epoch " << e.epoch << " [" << e.phase << "] ce " << std::fixed << std::setprecision(4)
              << e.mean.ce_student << " val CIDEr-D " << e.val_cider << (e.best ? " *" : "") << "\n";
  }, out);
  save_checkpoint(result.best, fs::path(out) / "best.ckpt");
  save_checkpoint(result.last, fs::path(out) / "last.ckpt");
  std::cout << "best epoch " << result.best.epoch << " written to " << (fs::path(out) / "best.ckpt").string() << "\n";
  return 0;
}

// --- eval -----------------------------------------------------------------

std::vector<SceneSample> load_split_arg(const std::string& data, const std::string& split) {
  const fs::path p(data);
  if (fs::is_directory(p)) return read_split(p / (split + ".jsonl"));
  return read_split(p);
}

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& split, const std::string& mode,
             std::optional<double> iou_noise, std::uint64_t seed, std::size_t limit, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto samples = load_split_arg(data, split);
  EvalOptions opts;
  opts.mode = parse_eval_mode(mode);
  opts.iou_noise = iou_noise;
  opts.seed = seed;
  opts.limit = limit;
  const MetricReport report = evaluate(ckpt, samples, opts);
  const std::string json = report_to_json(report);
  if (out.empty()) {
    std::cout << json << "\n";
  } else {
    write_text(out, json + "\n");
    std::cout << "wrote " << out << "\n";
  }
  return 0;
}

// --- ablate ---------------------------------------------------------------

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Variant names may contain commas inside "attr:" lists, so variants are
// separated by ';' when one of them uses attribute toggles.
std::vector<std::string> split_variants(const std::string& s) {
  std::vector<std::string> out;
  const char sep = s.find(';') != std::string::npos ? ';' : ',';
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_ablate(const Common& c, const std::string& data, const std::string& variants, const std::string& seeds,
               int threads, const std::string& out) {
  const DataDir d = load_data_dir(data, true);
  if (d.test.empty()) throw std::runtime_error("ablation needs a non-empty test split");
  RunConfig base = RunConfig::from_key_values(load_config(c));
  base.model.vocab_size = static_cast<int>(d.vocab.size());
  const auto names = split_variants(variants);
  for (const auto& n : names) parse_variant(n);
  std::vector<std::uint64_t> seed_list;
  for (const auto& s : split_commas(seeds)) seed_list.push_back(parse_u64("--seeds", s));
  if (seed_list.empty()) throw ConfigError("--seeds lists no seed");
  AblationData data_refs{&d.vocab, &d.train, &d.val, &d.test};
  const int workers = threads > 0 ? threads : thread_budget();
  const auto rows = ablate(base, names, seed_list, data_refs, workers, [](const AblationRow& r) {
    std::cerr << r.variant << " seed " << r.seed << ": CIDEr-D " << r.report.cider << "\n";
  });
  const std::string csv = ablation_csv(rows);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
    std::cout << "wrote " << out << "\n";
  }
  return 0;
}

// --- grad-check -----------------------------------------------------------

int cmd_grad_check(int seeds, double tol, bool verbose) {
  GradSuiteOptions opts;
  opts.seeds = seeds;
  opts.tol = tol;
  const auto start = std::chrono::steady_clock::now();
  int failed = 0;
  std::size_t count = 0;
  double worst = 0.0;
  run_grad_suite(opts, [&](const GradReport& r) {
    ++count;
    worst = std::max(worst, r.max_rel_error);
    if (!r.passed) ++failed;
    if (verbose || !r.passed) {
      std::cout << (r.passed ? "ok   " : "FAIL ") << r.op_name << " max rel err " << r.max_rel_error;
      if (!r.passed) std::cout << " (" << r.diagnostic << ")";
      std::cout << "\n";
    }
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << count << " checks, " << failed << " failed, worst relative error " << worst << ", " << std::fixed
            << std::setprecision(1) << secs << " s\n";
  return failed == 0 ? 0 : 2;
}

// --- report ---------------------------------------------------------------

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string render_report(const MetricReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "metric" << "value\n";
  os << std::setw(18) << "CIDEr-D" << fmt(r.cider) << "\n";
  os << std::setw(18) << "BLEU-4" << fmt(r.bleu4) << "\n";
  os << std::setw(18) << "ROUGE-L" << fmt(r.rouge_l) << "\n";
  if (r.color_accuracy) os << std::setw(18) << "color accuracy" << fmt(*r.color_accuracy) << "\n";
  for (const auto& [metric, by_k] : r.m_at_iou) {
    for (const auto& [k, v] : by_k) os << std::setw(18) << (metric + "@" + format_value(k) + "IoU") << fmt(v) << "\n";
  }
  os << std::setw(18) << "entries" << r.n_entries << "\n";
  for (const auto& [k, v] : r.metadata) os << std::setw(18) << k << v << "\n";
  return os.str();
}

struct Curve {
  std::vector<double> x, y;
};

std::string svg_plot(const std::vector<std::pair<std::string, Curve>>& curves) {
  const double w = 640, h = 360, pad = 50;
  double xmax = 1, ymin = 0, ymax = 1e-9;
  for (const auto& [_, c] : curves) {
    for (double v : c.x) xmax = std::max(xmax, v);
    for (double v : c.y) ymax = std::max(ymax, v);
  }
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad << "\" y2=\"" << h - pad
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << h - pad
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">epoch</text>\n";
  os << "<text x=\"" << pad << "\" y=\"" << pad - 10 << "\">max " << fmt(ymax, 3) << "</text>\n";
  std::size_t i = 0;
  for (const auto& [name, c] : curves) {
    os << "<polyline fill=\"none\" stroke=\"" << colors[i % 4] << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < c.x.size(); ++k) {
      const double px = pad + (w - 2 * pad) * c.x[k] / xmax;
      const double py = h - pad - (h - 2 * pad) * (c.y[k] - ymin) / (ymax - ymin);
      os << px << "," << py << " ";
    }
    os << "\"/>\n";
    os << "<text x=\"" << w - pad - 150 << "\" y=\"" << pad + 18 * static_cast<double>(i) << "\" fill=\""
       << colors[i % 4] << "\">" << name << "</text>\n";
    ++i;
  }
  os << "</svg>\n";
  return os.str();
}

int cmd_report(const std::string& input, const std::string& plot) {
  const std::string text = read_text(input);
  std::istringstream lines(text);
  std::vector<nlohmann::json> records;
  for (std::string line; std::getline(lines, line);) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception&) {
      records.clear();
      break;
    }
  }
  const bool epoch_log = !records.empty() && records.front().contains("epoch");
  if (!epoch_log) {
    if (!plot.empty()) throw ConfigError("--plot needs a per-epoch log (log.jsonl)");
    std::cout << render_report(report_from_json(text));
    return 0;
  }
  std::cout << std::left << std::setw(7) << "epoch" << std::setw(9) << "phase" << std::setw(11) << "lr"
            << std::setw(10) << "ce_s" << std::setw(10) << "ce_t" << std::setw(10) << "align" << std::setw(10)
            << "val_cider" << std::setw(10) << "val_color" << "best\n";
  Curve ce, val;
  for (const auto& r : records) {
    const double epoch = r.at("epoch").get<double>();
    std::cout << std::setw(7) << r.at("epoch").get<int>() << std::setw(9) << r.at("phase").get<std::string>()
              << std::setw(11) << r.at("lr").get<double>() << std::setw(10) << fmt(r.at("ce_student").get<double>())
              << std::setw(10) << fmt(r.at("ce_teacher").get<double>()) << std::setw(10)
              << fmt(r.at("align").get<double>()) << std::setw(10) << fmt(r.at("val_cider").get<double>())
              << std::setw(10) << fmt(r.at("val_color_accuracy").get<double>())
              << (r.at("best").get<bool>() ? "*" : "") << "\n";
    ce.x.push_back(epoch);
    ce.y.push_back(r.at("ce_student").get<double>());
    val.x.push_back(epoch);
    val.y.push_back(r.at("val_cider").get<double>());
  }
  if (!plot.empty()) {
    write_text(plot, svg_plot({{"student CE", ce}, {"val CIDEr-D", val}}));
    std::cout << "wrote " << plot << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal teacher-student 3D dense captioning on a synthetic benchmark"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Common gen_common, train_common, ablate_common;
  std::string gen_out, train_data, train_out, eval_ckpt, eval_data, eval_split = "test", eval_mode = "student-3d",
                                                                       eval_out, ablate_data, ablate_variants = "full",
                                                                       ablate_seeds = "1", ablate_out, report_input,
                                                                       report_plot;
  std::optional<double> eval_noise;
  std::uint64_t eval_seed = 0;
  std::size_t eval_limit = 0;
  int ablate_threads = 0, grad_seeds = 10;
  double grad_tol = 1e-3;
  bool grad_verbose = false, gen_strip = false;

  auto* gen = app.add_subcommand("gen-data", "Generate train/val/test splits and the vocabulary");
  add_common(gen, gen_common);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_flag("--strip-2d", gen_strip, "Omit f2d/b2d from every object (3D-only splits)");

  auto* tr = app.add_subcommand("train", "Train student and teacher jointly; writes best.ckpt, last.ckpt, log.jsonl");
  add_common(tr, train_common);
  tr->add_option("--data", train_data, "Directory written by gen-data")->required();
  tr->add_option("--out", train_out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and print or write a metric report (JSON)");
  ev->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", eval_data, "Split file (.jsonl) or a gen-data directory")->required();
  ev->add_option("--split", eval_split, "Split name when --data is a directory")->capture_default_str();
  ev->add_option("--mode", eval_mode, "Inference path: student-3d or teacher-multi")
      ->check(CLI::IsMember({"student-3d", "teacher-multi"}))
      ->capture_default_str();
  ev->add_option("--iou-noise", eval_noise, "Sigma of the box perturbation used for m@kIoU");
  ev->add_option("--seed", eval_seed, "Seed of the box perturbation")->capture_default_str();
  ev->add_option("--limit", eval_limit, "Evaluate only the first N scenes (0 = all)")->capture_default_str();
  ev->add_option("--out", eval_out, "Write the report here instead of stdout");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate variants over seeds; writes a comparison CSV");
  add_common(ab, ablate_common);
  ab->add_option("--data", ablate_data, "Directory written by gen-data")->required();
  ab->add_option("--variants", ablate_variants,
                 "Comma-separated variants (full, baseline, no_align, no_cmf, concat, no_mask, attention, "
                 "offline_teacher, variant_c, attr:-f3d,...); use ';' as separator with attr: lists")
      ->capture_default_str();
  ab->add_option("--seeds", ablate_seeds, "Comma-separated seeds")->capture_default_str();
  ab->add_option("--threads", ablate_threads, "Worker count (default: XT2C_THREADS or 1)");
  ab->add_option("--out", ablate_out, "Write the CSV here instead of stdout");

  auto* gc = app.add_subcommand("grad-check", "Run the gradient check suite over every differentiable op");
  gc->add_option("--seeds", grad_seeds, "Number of random seeds")->capture_default_str()->check(CLI::PositiveNumber);
  gc->add_option("--tol", grad_tol, "Relative tolerance")->capture_default_str();
  gc->add_flag("--verbose", grad_verbose, "Print every check, not only failures");

  auto* rp = app.add_subcommand("report", "Render a metric report (JSON) or an epoch log (JSONL) as a table");
  rp->add_option("--input", report_input, "Report or log file")->required()->check(CLI::ExistingFile);
  rp->add_option("--plot", report_plot, "Write per-epoch curves of a log as SVG");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_common, gen_out, gen_strip);
    if (tr->parsed()) return cmd_train(train_common, train_data, train_out);
    if (ev->parsed()) {
      return cmd_eval(eval_ckpt, eval_data, eval_split, eval_mode, eval_noise, eval_seed, eval_limit, eval_out);
    }
    if (ab->parsed()) {
      return cmd_ablate(ablate_common, ablate_data, ablate_variants, ablate_seeds, ablate_threads, ablate_out);
    }
    if (gc->parsed()) return cmd_grad_check(grad_seeds, grad_tol, grad_verbose);
    if (rp->parsed()) return cmd_report(report_input, report_plot);
  } catch (const ModalityError& e) {
    std::cerr << "modality error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
