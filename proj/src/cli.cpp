#include "sbsg/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "sbsg/checkpoint.hpp"
#include "sbsg/data.hpp"
#include "sbsg/decoding.hpp"
#include "sbsg/errors.hpp"
#include "sbsg/evalbench.hpp"
#include "sbsg/training.hpp"

namespace sbsg {

namespace {

// Merged view of every subcommand's settings.
struct RunConfig {
  std::uint64_t seed = 1;

  // make-data
  std::string task = "copy";
  std::size_t count = 1000;
  std::size_t min_len = 2;
  std::size_t max_len_data = 16;
  std::size_t vocab_real = 16;

  // model
  std::string mode = "bidirectional";
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  double lambda = 0.5;
  double dropout = 0.1;
  std::size_t max_positions = 64;
  std::size_t vocab_limit = 10000;

  // training
  std::size_t warmup = 400;
  double label_smoothing = 0.1;
  std::size_t batch_size = 32;
  std::size_t max_steps = 3000;
  std::size_t log_interval = 250;
  double clip_norm = 1.0;
  std::string dev_metric = "exact";
  std::string null_side = "random";

  // decoding
  std::size_t beam = 4;
  double alpha = 0.6;
  std::size_t max_len = 0;  // 0: the model's max_positions
  std::string search = "beam";
  bool dump_halves = false;
  double lambda_override = -1.0;

  // evaluation / bench
  std::size_t bucket_width = 4;
  std::size_t repetitions = 3;
  std::size_t batch = 1;
  std::size_t limit = 0;

  // paths
  std::string out_path, train_path, dev_path, model_path, baseline_path, input_path = "-", output_path = "-",
                                                                          hyp_path, data_path, csv_path, log_path,
                                                                          teacher_path;
};

std::filesystem::path vocab_path_for(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".vocab";
}

std::vector<std::string> read_lines(std::istream& is) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<std::string> read_lines_from(const std::string& path, std::istream& in) {
  if (path == "-") return read_lines(in);
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_lines(is);
}

// Writes to `path`, or to `out` when path is "-".
class Sink {
 public:
  Sink(const std::string& path, std::ostream& out) : os_(&out) {
    if (path != "-") {
      file_.open(path, std::ios::trunc);
      if (!file_) throw IoError("cannot open '" + path + "' for writing");
      os_ = &file_;
      path_ = path;
    }
  }
  std::ostream& stream() { return *os_; }
  void finish() {
    os_->flush();
    if (!*os_) throw IoError("failed writing '" + (path_.empty() ? std::string("<stdout>") : path_) + "'");
  }

 private:
  std::ofstream file_;
  std::ostream* os_;
  std::string path_;
};

ModelConfig model_config(const RunConfig& rc, std::size_t vocab_size) {
  ModelConfig c;
  c.layers = rc.layers;
  c.d_model = rc.d_model;
  c.heads = rc.heads;
  c.d_ff = rc.d_ff;
  c.vocab_size = vocab_size;
  c.lambda = rc.lambda;
  c.dropout = rc.dropout;
  c.max_positions = rc.max_positions;
  c.mode = parse_decoder_mode(rc.mode);
  return c;
}

TrainHyper train_hyper(const RunConfig& rc) {
  TrainHyper h;
  h.warmup_steps = rc.warmup;
  h.label_smoothing = rc.label_smoothing;
  h.batch_size = rc.batch_size;
  h.max_steps = rc.max_steps;
  h.seed = rc.seed;
  h.clip_norm = rc.clip_norm;
  h.log_interval = rc.log_interval;
  if (rc.dev_metric == "exact") {
    h.dev_metric = DevMetric::kExactMatch;
  } else if (rc.dev_metric == "bleu") {
    h.dev_metric = DevMetric::kBleu;
  } else {
    throw ConfigError("unknown dev metric '" + rc.dev_metric + "' (expected exact or bleu)");
  }
  if (rc.null_side == "fwd") {
    h.null_side = NullSide::kFwd;
  } else if (rc.null_side == "bwd") {
    h.null_side = NullSide::kBwd;
  } else if (rc.null_side != "random") {
    throw ConfigError("unknown null side '" + rc.null_side + "' (expected random, fwd or bwd)");
  }
  h.validate();
  return h;
}

DecodeConfig decode_config(const RunConfig& rc, const ModelConfig& model) {
  DecodeConfig d;
  d.beam_size = rc.beam;
  d.alpha = rc.alpha;
  d.max_len = rc.max_len == 0 ? model.max_positions : rc.max_len;
  d.mode = parse_search_mode(rc.search);
  d.validate(model.mode);
  return d;
}

struct LoadedModel {
  Checkpoint checkpoint;
  Vocabulary vocab;
};

LoadedModel load_model(const std::string& path) {
  if (path.empty()) throw ConfigError("missing --model");
  Checkpoint ck = load_checkpoint(path);
  Vocabulary vocab = Vocabulary::load(vocab_path_for(path));
  if (vocab.size() != ck.config.vocab_size) {
    throw ContractError("vocabulary '" + vocab_path_for(path).string() + "' has " + std::to_string(vocab.size()) +
                        " tokens, checkpoint expects " + std::to_string(ck.config.vocab_size));
  }
  return {std::move(ck), std::move(vocab)};
}

// Source side of a line; dataset lines carry the reference after a tab.
std::vector<std::string> source_tokens(const std::string& line) { return tokenize(line.substr(0, line.find('\t'))); }

std::vector<std::string> decode_tokens(const Vocabulary& vocab, const std::vector<int>& ids) {
  return vocab.decode(ids);
}

int cmd_make_data(const RunConfig& rc, std::ostream& out) {
  if (rc.out_path.empty()) throw ConfigError("make-data needs --out");
  const Dataset data = synth_generate(parse_synth_task(rc.task), rc.count, rc.min_len, rc.max_len_data, rc.vocab_real,
                                      rc.seed, rc.max_positions);
  write_dataset(rc.out_path, data);
  out << "wrote " << data.size() << " " << rc.task << " examples to " << rc.out_path << '\n';
  return 0;
}

int cmd_train(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  if (rc.train_path.empty() || rc.dev_path.empty() || rc.out_path.empty()) {
    throw ConfigError("train needs --train, --dev and --out");
  }
  parse_decoder_mode(rc.mode);
  const TrainHyper hyper = train_hyper(rc);
  const Dataset train_data = read_dataset(rc.train_path);
  const Dataset dev_data = read_dataset(rc.dev_path);
  std::vector<std::vector<std::string>> corpus;
  for (const auto& ex : train_data) {
    corpus.push_back(ex.src);
    corpus.push_back(ex.tgt);
  }
  const Vocabulary vocab = build_vocab(corpus, rc.vocab_limit);
  const ModelConfig config = model_config(rc, vocab.size());
  config.validate();
  vocab.save(vocab_path_for(rc.out_path));

  Sink log(rc.log_path.empty() ? "-" : rc.log_path, out);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result =
      train(config, hyper, encode_dataset(train_data, vocab), encode_dataset(dev_data, vocab), rc.out_path, &log.stream());
  log.finish();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  err << "trained " << hyper.max_steps << " steps in " << secs << " s; best dev " << result.best_dev << " at step "
      << result.best_step << "; checkpoint " << rc.out_path << '\n';
  return 0;
}

int cmd_translate(const RunConfig& rc, std::istream& in, std::ostream& out) {
  LoadedModel m = load_model(rc.model_path);
  ModelConfig config = m.checkpoint.config;
  if (rc.lambda_override >= 0.0) config.lambda = rc.lambda_override;
  const DecodeConfig cfg = decode_config(rc, config);
  if (rc.batch < 1) throw ConfigError("--batch must be >= 1");
  const auto lines = read_lines_from(rc.input_path, in);
  Sink sink(rc.output_path, out);
  for (std::size_t start = 0; start < lines.size(); start += rc.batch) {
    const std::size_t end = std::min(lines.size(), start + rc.batch);
    std::vector<std::vector<int>> sources;
    for (std::size_t i = start; i < end; ++i) {
      auto toks = source_tokens(lines[i]);
      if (toks.empty()) throw InputError("line " + std::to_string(i + 1) + ": empty source");
      sources.push_back(m.vocab.encode(toks));
    }
    for (const auto& r : decode_batch(m.checkpoint.params, config, sources, cfg)) {
      sink.stream() << join_tokens(decode_tokens(m.vocab, r.tokens));
      if (rc.dump_halves) {
        sink.stream() << '\t' << join_tokens(decode_tokens(m.vocab, r.fwd)) << '\t'
                      << join_tokens(decode_tokens(m.vocab, r.bwd));
      }
      sink.stream() << '\n';
    }
  }
  sink.finish();
  return 0;
}

int cmd_evaluate(const RunConfig& rc, std::istream& in, std::ostream& out) {
  if (rc.hyp_path.empty() || rc.data_path.empty()) throw ConfigError("evaluate needs --hyp and --data");
  const Dataset data = read_dataset(rc.data_path);
  const auto lines = read_lines_from(rc.hyp_path, in);
  if (lines.size() != data.size()) {
    throw InputError("'" + rc.hyp_path + "' has " + std::to_string(lines.size()) + " lines, '" + rc.data_path +
                     "' has " + std::to_string(data.size()) + " examples");
  }
  TokenCorpus srcs, hyps, refs;
  for (std::size_t i = 0; i < data.size(); ++i) {
    srcs.push_back(data[i].src);
    hyps.push_back(tokenize(lines[i].substr(0, lines[i].find('\t'))));
    refs.push_back(data[i].tgt);
  }
  Sink sink(rc.output_path, out);
  sink.stream() << format_eval_report(evaluate_corpus(srcs, hyps, refs, rc.bucket_width));
  sink.finish();
  return 0;
}

int cmd_bench(const RunConfig& rc, std::ostream& out) {
  if (rc.baseline_path.empty() || rc.data_path.empty()) throw ConfigError("bench needs --model, --baseline and --data");
  LoadedModel cand = load_model(rc.model_path);
  LoadedModel base = load_model(rc.baseline_path);
  if (cand.vocab.tokens() != base.vocab.tokens()) throw ContractError("bench: models use different vocabularies");
  const Dataset data = read_dataset(rc.data_path);
  std::vector<std::vector<int>> sources;
  for (const auto& ex : data) {
    if (rc.limit > 0 && sources.size() >= rc.limit) break;
    sources.push_back(cand.vocab.encode(ex.src));
  }
  DecodeConfig cfg = decode_config(rc, cand.checkpoint.config);
  decode_config(rc, base.checkpoint.config);
  cfg.max_len = std::min({cfg.max_len, cand.checkpoint.config.max_positions, base.checkpoint.config.max_positions});
  const BenchModel c{"sbsg", &cand.checkpoint.params, cand.checkpoint.config};
  const BenchModel b{"baseline", &base.checkpoint.params, base.checkpoint.config};
  const BenchReport report = bench_decode(c, b, sources, cfg, rc.repetitions, rc.batch, rc.bucket_width);
  Sink sink(rc.output_path, out);
  sink.stream() << format_bench_report(report);
  sink.finish();
  if (!rc.csv_path.empty()) {
    Sink csv(rc.csv_path, out);
    csv.stream() << format_bench_csv(report);
    csv.finish();
  }
  return 0;
}

int cmd_distill(const RunConfig& rc, std::ostream& out) {
  if (rc.teacher_path.empty() || rc.train_path.empty() || rc.out_path.empty()) {
    throw ConfigError("distill needs --teacher, --train and --out");
  }
  LoadedModel teacher = load_model(rc.teacher_path);
  const DecodeConfig cfg = decode_config(rc, teacher.checkpoint.config);
  const Dataset data = read_dataset(rc.train_path);
  const Dataset distilled = distill(teacher.checkpoint.config, teacher.checkpoint.params, teacher.vocab, data, cfg);
  write_dataset(rc.out_path, distilled);
  out << "wrote " << distilled.size() << " distilled examples to " << rc.out_path << '\n';
  return 0;
}

// Parses `key=value` lines with `#` comments.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return entries;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  CLI::App app{"Synchronous bidirectional sequence generation", args.empty() ? "sbsg" : args[0]};
  app.require_subcommand(1);
  app.option_defaults()->take_last();
  std::string config_path;

  const auto add_common = [&](CLI::App* sub) {
    sub->option_defaults()->take_last();
    sub->add_option("--config", config_path, "key=value config file; flags given on the command line win");
    sub->add_option("--seed", rc.seed, "seed for all randomness")->capture_default_str();
  };
  const auto add_model = [&](CLI::App* sub) {
    sub->add_option("--mode", rc.mode, "decoder: bidirectional, l2r or r2l")
        ->check(CLI::IsMember({"bidirectional", "l2r", "r2l"}))
        ->capture_default_str();
    sub->add_option("--layers", rc.layers, "encoder and decoder layers")->capture_default_str();
    sub->add_option("--d-model", rc.d_model, "model width")->capture_default_str();
    sub->add_option("--heads", rc.heads, "attention heads")->capture_default_str();
    sub->add_option("--d-ff", rc.d_ff, "feed-forward width")->capture_default_str();
    sub->add_option("--lambda", rc.lambda, "weight of cross-stream attention")->capture_default_str();
    sub->add_option("--dropout", rc.dropout, "dropout rate")->capture_default_str();
    sub->add_option("--max-positions", rc.max_positions, "longest supported sequence")->capture_default_str();
    sub->add_option("--vocab-limit", rc.vocab_limit, "maximum vocabulary size incl. reserved tokens")
        ->capture_default_str();
  };
  const auto add_decode = [&](CLI::App* sub) {
    sub->add_option("--search", rc.search, "beam or greedy")
        ->check(CLI::IsMember({"beam", "greedy"}))
        ->capture_default_str();
    sub->add_option("--beam", rc.beam, "beam size (even for bidirectional models)")->capture_default_str();
    sub->add_option("--alpha", rc.alpha, "length penalty exponent")->capture_default_str();
    sub->add_option("--max-len", rc.max_len, "maximum decoder steps (0: model max_positions)")->capture_default_str();
  };

  auto* make_data = app.add_subcommand("make-data", "generate a synthetic copy/reverse/sort dataset");
  add_common(make_data);
  make_data->add_option("--task", rc.task, "copy, reverse or sort")
      ->check(CLI::IsMember({"copy", "reverse", "sort"}))
      ->capture_default_str();
  make_data->add_option("--count", rc.count, "number of examples")->capture_default_str();
  make_data->add_option("--min-length", rc.min_len, "shortest sequence")->capture_default_str();
  make_data->add_option("--max-length", rc.max_len_data, "longest sequence")->capture_default_str();
  make_data->add_option("--vocab", rc.vocab_real, "number of distinct tokens")->capture_default_str();
  make_data->add_option("--max-positions", rc.max_positions, "model position limit the data must fit")
      ->capture_default_str();
  make_data->add_option("--out", rc.out_path, "output TSV");

  auto* train_cmd = app.add_subcommand("train", "train a model and save the best-dev checkpoint");
  add_common(train_cmd);
  add_model(train_cmd);
  train_cmd->add_option("--train", rc.train_path, "training TSV");
  train_cmd->add_option("--dev", rc.dev_path, "dev TSV");
  train_cmd->add_option("--out", rc.out_path, "checkpoint path (vocabulary goes to PATH.vocab)");
  train_cmd->add_option("--log", rc.log_path, "training log (default: stdout)");
  train_cmd->add_option("--warmup", rc.warmup, "warmup steps")->capture_default_str();
  train_cmd->add_option("--label-smoothing", rc.label_smoothing, "label smoothing")->capture_default_str();
  train_cmd->add_option("--batch-size", rc.batch_size, "examples per step")->capture_default_str();
  train_cmd->add_option("--max-steps", rc.max_steps, "optimizer steps")->capture_default_str();
  train_cmd->add_option("--log-interval", rc.log_interval, "steps between log rows and dev evaluations")
      ->capture_default_str();
  train_cmd->add_option("--clip-norm", rc.clip_norm, "global gradient norm limit (<= 0 disables)")
      ->capture_default_str();
  train_cmd->add_option("--dev-metric", rc.dev_metric, "exact or bleu")
      ->check(CLI::IsMember({"exact", "bleu"}))
      ->capture_default_str();
  train_cmd->add_option("--null-side", rc.null_side, "<null> side for odd-length targets: random, fwd or bwd")
      ->check(CLI::IsMember({"random", "fwd", "bwd"}))
      ->capture_default_str();

  auto* translate = app.add_subcommand("translate", "decode source lines");
  add_common(translate);
  add_decode(translate);
  translate->add_option("--model", rc.model_path, "checkpoint");
  translate->add_option("--input", rc.input_path, "source lines or TSV ('-' for stdin)")->capture_default_str();
  translate->add_option("--output", rc.output_path, "output path ('-' for stdout)")->capture_default_str();
  translate->add_option("--lambda", rc.lambda_override, "override the checkpoint's lambda (< 0 keeps it)")
      ->capture_default_str();
  translate->add_option("--batch", rc.batch, "sentences decoded together (greedy only batches)")
      ->capture_default_str();
  translate->add_flag("--dump-halves", rc.dump_halves, "also print the two generated halves, tab-separated");

  auto* evaluate = app.add_subcommand("evaluate", "score hypotheses against references");
  add_common(evaluate);
  evaluate->add_option("--hyp", rc.hyp_path, "hypothesis lines ('-' for stdin)");
  evaluate->add_option("--data", rc.data_path, "reference TSV");
  evaluate->add_option("--bucket-width", rc.bucket_width, "source-length bucket width")->capture_default_str();
  evaluate->add_option("--output", rc.output_path, "report path ('-' for stdout)")->capture_default_str();

  auto* bench = app.add_subcommand("bench", "time decoding against a baseline");
  add_common(bench);
  add_decode(bench);
  bench->add_option("--model", rc.model_path, "candidate checkpoint");
  bench->add_option("--baseline", rc.baseline_path, "baseline checkpoint");
  bench->add_option("--data", rc.data_path, "test TSV");
  bench->add_option("--limit", rc.limit, "use only the first N sentences (0: all)")->capture_default_str();
  bench->add_option("--repetitions", rc.repetitions, "timed passes")->capture_default_str();
  bench->add_option("--batch", rc.batch, "sentences per decoder call")->capture_default_str();
  bench->add_option("--bucket-width", rc.bucket_width, "source-length bucket width")->capture_default_str();
  bench->add_option("--csv", rc.csv_path, "also write per-bucket CSV here");
  bench->add_option("--output", rc.output_path, "report path ('-' for stdout)")->capture_default_str();

  auto* distill_cmd = app.add_subcommand("distill", "replace targets with a unidirectional teacher's beam output");
  add_common(distill_cmd);
  add_decode(distill_cmd);
  distill_cmd->add_option("--teacher", rc.teacher_path, "teacher checkpoint");
  distill_cmd->add_option("--train", rc.train_path, "input TSV");
  distill_cmd->add_option("--out", rc.out_path, "output TSV");

  // Pull --config out first so file values can be fed in ahead of the
  // command-line flags.
  std::vector<std::string> argv(args.begin() + (args.empty() ? 0 : 1), args.end());
  try {
    std::string file;
    for (std::size_t i = 0; i < argv.size(); ++i) {
      if (argv[i] == "--config" && i + 1 < argv.size()) file = argv[i + 1];
      if (argv[i].rfind("--config=", 0) == 0) file = argv[i].substr(9);
    }
    if (!file.empty() && !argv.empty()) {
      std::set<std::string> known;
      for (auto* sub : app.get_subcommands({})) {
        for (const auto* opt : sub->get_options()) {
          for (const auto& name : opt->get_lnames()) known.insert(name);
        }
      }
      CLI::App* active = nullptr;
      for (auto* sub : app.get_subcommands({})) {
        if (sub->get_name() == argv[0]) active = sub;
      }
      std::vector<std::string> injected;
      for (const auto& [key, value] : read_config_file(file)) {
        if (key == "config" || !known.count(key)) throw ConfigError("unknown config key '" + key + "' in " + file);
        if (active && active->get_option_no_throw("--" + key)) injected.push_back("--" + key + "=" + value);
      }
      argv.insert(argv.begin() + 1, injected.begin(), injected.end());
    }
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*make_data) return cmd_make_data(rc, out);
    if (*train_cmd) return cmd_train(rc, out, err);
    if (*translate) return cmd_translate(rc, in, out);
    if (*evaluate) return cmd_evaluate(rc, in, out);
    if (*bench) return cmd_bench(rc, out);
    if (*distill_cmd) return cmd_distill(rc, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace sbsg
