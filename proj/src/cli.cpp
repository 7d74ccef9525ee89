#include "nmm/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "nmm/checkpoint.hpp"
#include "nmm/corpus.hpp"
#include "nmm/evaluation.hpp"
#include "nmm/mixture.hpp"
#include "nmm/training.hpp"

namespace fs = std::filesystem;

namespace nmm::cli {

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path))
    throw std::invalid_argument(what + " not found: " + path);
}

std::string format_millions(long long nop) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << static_cast<double>(nop) / 1e6 << "M";
  return out.str();
}

// ---------------------------------------------------------------------------
// build-vocab

struct BuildVocabOptions {
  std::string train_path;
  std::string valid_path;
  std::string test_path;
  std::string out_path;
  int cap = 10000;
};

void print_split_stats(const std::string& name, const EncodedCorpus& c) {
  std::cout << "  " << std::left << std::setw(8) << name << std::right << std::setw(10)
            << c.token_count << " words " << std::fixed << std::setprecision(2)
            << std::setw(8) << 100.0 * c.unk_rate() << "% unk\n";
}

int cmd_build_vocab(const BuildVocabOptions& opt) {
  require_file(opt.train_path, "training corpus");
  std::ifstream train(opt.train_path);
  const Vocabulary vocab = Vocabulary::build(train, opt.cap);
  vocab.save(opt.out_path);

  std::cout << "vocabulary: " << vocab.size() << " entries (cap " << opt.cap
            << " + reserved), hash " << std::hex << vocab.hash() << std::dec << "\n";
  std::cout << "written to: " << opt.out_path << "\n";
  print_split_stats("train", encode_file(opt.train_path, vocab));
  if (!opt.valid_path.empty()) {
    require_file(opt.valid_path, "validation corpus");
    print_split_stats("valid", encode_file(opt.valid_path, vocab));
  }
  if (!opt.test_path.empty()) {
    require_file(opt.test_path, "test corpus");
    print_split_stats("test", encode_file(opt.test_path, vocab));
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string train_path;
  std::string valid_path;
  std::string vocab_path;  // load when set, otherwise build at vocab_cap
  int vocab_cap = 10000;
  std::string spec_text;
  int embedding_size = 100;
  int mixture_size = 400;
  TrainConfig config;
  std::string precision = "f32";
  std::string out_dir;
  bool toy_fixture = false;
  bool exclude_eos = false;
};

// Small deterministic corpus for smoke runs: a repeating word cycle, so a
// few epochs of any working configuration visibly reduce the loss.
void write_toy_fixture(const std::string& path, int lines, int offset) {
  std::ofstream out(path);
  for (int l = 0; l < lines; ++l) {
    for (int w = 0; w < 8; ++w) out << "w" << (l + w + offset) % 11 << (w + 1 < 8 ? " " : "");
    out << "\n";
  }
}

template <typename T>
int run_training(const TrainOptions& opt, const Vocabulary& vocab,
                 const EncodedCorpus& train_corpus, const EncodedCorpus& valid_corpus) {
  MixtureSpec spec;
  spec.components = parse_spec(opt.spec_text);
  spec.embedding_size = opt.embedding_size;
  spec.mixture_size = opt.mixture_size;
  spec.vocab_size = vocab.size();

  NmmModel<T> model(spec);
  Rng rng(opt.config.seed);
  model.init_params(rng);
  TrainState<T> state = init_train_state(model, opt.config, rng);

  BatchCursor cursor(train_corpus, opt.config.batch_size, opt.config.bptt_steps);
  EvalOptions eval_opt;
  eval_opt.eos_id = vocab.eos_id();
  eval_opt.context_start_token = vocab.eos_id();
  eval_opt.include_eos = !opt.exclude_eos;

  const fs::path out_dir(opt.out_dir);
  std::ofstream log(out_dir / "train_log.csv");
  log << "epoch,lr,train_ce,valid_ppl,seconds,tokens_per_sec\n";
  log << std::setprecision(17);

  std::cout << "training " << render_spec(spec.components) << ": "
            << format_millions(model.parameter_count()) << " parameters, vocab "
            << vocab.size() << ", precision " << opt.precision << "\n";

  double best_ppl = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= opt.config.max_epochs; ++epoch) {
    const double lr_used = state.lr;
    const EpochStats stats = run_epoch(model, cursor, vocab.eos_id(), opt.config, state);

    NmmPredictor<T> predictor(model, vocab.eos_id());
    const EvalReport valid = perplexity(predictor, valid_corpus, eval_opt);
    const double valid_ll =
        valid.total_log_likelihood / static_cast<double>(valid.token_count);

    log << epoch << ',' << lr_used << ',' << stats.mean_ce << ',' << valid.perplexity << ','
        << stats.seconds << ',' << stats.tokens_per_sec << "\n";
    log.flush();
    std::cout << "epoch " << std::setw(3) << epoch << "  lr " << std::setw(8) << lr_used
              << "  train_ce " << std::fixed << std::setprecision(4) << stats.mean_ce
              << "  valid_ppl " << std::setprecision(3) << valid.perplexity
              << std::defaultfloat << "  (" << static_cast<long long>(stats.tokens_per_sec)
              << " tok/s)\n";

    save_checkpoint((out_dir / "last.ckpt").string(), model, vocab.hash(), &state);
    if (valid.perplexity < best_ppl) {
      best_ppl = valid.perplexity;
      save_checkpoint((out_dir / "best.ckpt").string(), model, vocab.hash(), &state);
    }

    lr_schedule(state, valid_ll, opt.config);
    if (state.stop) {
      std::cout << "stopping: no significant validation gain under the halved rate\n";
      break;
    }
  }
  std::cout << "best validation perplexity: " << best_ppl << "\n";
  return kExitOk;
}

int cmd_train(TrainOptions opt, const std::string& effective_config) {
  fs::create_directories(opt.out_dir);

  if (opt.toy_fixture) {
    opt.train_path = (fs::path(opt.out_dir) / "toy_train.txt").string();
    opt.valid_path = (fs::path(opt.out_dir) / "toy_valid.txt").string();
    write_toy_fixture(opt.train_path, 80, 0);
    write_toy_fixture(opt.valid_path, 16, 3);
  }
  require_file(opt.train_path, "training corpus");
  require_file(opt.valid_path, "validation corpus");
  opt.config.validate();
  if (opt.precision != "f32" && opt.precision != "f64")
    throw std::invalid_argument("precision must be f32 or f64, got " + opt.precision);
  parse_spec(opt.spec_text);  // surface spec errors before any work

  // the effective configuration suffices to rerun the experiment
  std::ofstream echo(fs::path(opt.out_dir) / "config.txt");
  echo << effective_config;
  echo.close();

  Vocabulary vocab = [&] {
    if (!opt.vocab_path.empty()) {
      require_file(opt.vocab_path, "vocabulary");
      return Vocabulary::load(opt.vocab_path);
    }
    std::ifstream train(opt.train_path);
    Vocabulary v = Vocabulary::build(train, opt.vocab_cap);
    v.save((fs::path(opt.out_dir) / "vocab.tsv").string());
    return v;
  }();

  const EncodedCorpus train_corpus = encode_file(opt.train_path, vocab);
  const EncodedCorpus valid_corpus = encode_file(opt.valid_path, vocab);

  if (opt.precision == "f64")
    return run_training<double>(opt, vocab, train_corpus, valid_corpus);
  return run_training<float>(opt, vocab, train_corpus, valid_corpus);
}

// ---------------------------------------------------------------------------
// eval / interp

struct EvalCmdOptions {
  std::vector<std::string> ckpt_paths;
  std::string vocab_path;
  std::string corpus_path;
  std::string precision = "f32";
  bool exclude_eos = false;
  std::vector<double> weights;
  std::string tune_corpus_path;
  double tune_step = 0.05;
  long long baseline_nop = 0;
  std::string csv_path;
};

void print_report_row(const std::string& name, const EvalReport& r) {
  std::cout << std::left << std::setw(28) << name << std::right << "  PPL " << std::fixed
            << std::setprecision(3) << std::setw(10) << r.perplexity << "  NoP "
            << std::setw(9) << format_millions(r.nop);
  if (!std::isnan(r.param_growth))
    std::cout << "  PG " << std::showpos << std::setprecision(2) << r.param_growth << "%"
              << std::noshowpos;
  std::cout << "\n";
}

void append_csv_row(const std::string& path, const std::string& name, const EvalReport& r) {
  if (path.empty()) return;
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (fresh) out << "model,ppl,nop,pg\n";
  out << name << ',' << std::setprecision(17) << r.perplexity << ',' << r.nop << ',';
  if (!std::isnan(r.param_growth)) out << r.param_growth;
  out << "\n";
}

template <typename T>
int run_eval(const EvalCmdOptions& opt) {
  const Vocabulary vocab = Vocabulary::load(opt.vocab_path);
  const EncodedCorpus corpus = encode_file(opt.corpus_path, vocab);

  EvalOptions eval_opt;
  eval_opt.eos_id = vocab.eos_id();
  eval_opt.context_start_token = vocab.eos_id();
  eval_opt.include_eos = !opt.exclude_eos;

  std::vector<Checkpoint<T>> checkpoints;
  for (const std::string& path : opt.ckpt_paths) {
    checkpoints.push_back(load_checkpoint<T>(path));
    if (checkpoints.back().vocab_hash != vocab.hash())
      throw std::runtime_error("checkpoint " + path +
                               " was trained with a different vocabulary");
    if (checkpoints.back().spec.vocab_size != vocab.size())
      throw std::runtime_error("checkpoint " + path + " has vocab size " +
                               std::to_string(checkpoints.back().spec.vocab_size) +
                               ", vocabulary file has " + std::to_string(vocab.size()));
  }

  if (checkpoints.size() == 1) {
    NmmPredictor<T> predictor(checkpoints[0].model, vocab.eos_id());
    EvalReport r = perplexity(predictor, corpus, eval_opt);
    r.nop = count_params(checkpoints[0].spec);
    if (opt.baseline_nop > 0) r.param_growth = param_growth(r.nop, opt.baseline_nop);
    const std::string name = render_spec(checkpoints[0].spec.components);
    print_report_row(name, r);
    append_csv_row(opt.csv_path, name, r);
    return kExitOk;
  }

  // interpolation of separately trained models
  std::vector<std::unique_ptr<NmmPredictor<T>>> predictors;
  std::vector<SequenceModel<T>*> models;
  std::string name = "LI(";
  for (size_t i = 0; i < checkpoints.size(); ++i) {
    predictors.push_back(
        std::make_unique<NmmPredictor<T>>(checkpoints[i].model, vocab.eos_id()));
    models.push_back(predictors.back().get());
    name += (i ? "+" : "") + render_spec(checkpoints[i].spec.components);
  }
  name += ")";

  std::vector<double> weights = opt.weights;
  if (weights.empty()) {
    if (opt.tune_corpus_path.empty())
      throw std::invalid_argument("interp needs either --weights or --tune");
    const EncodedCorpus tune_corpus = encode_file(opt.tune_corpus_path, vocab);
    weights = grid_search_weights(models, tune_corpus, opt.tune_step, eval_opt);
    std::cout << "tuned weights:";
    for (double w : weights) std::cout << " " << w;
    std::cout << "\n";
  }

  EvalReport r = interpolate_ppl(models, weights, corpus, eval_opt);
  r.nop = 0;
  for (const auto& ck : checkpoints) r.nop += count_params(ck.spec);
  if (opt.baseline_nop > 0) r.param_growth = param_growth(r.nop, opt.baseline_nop);
  print_report_row(name, r);
  append_csv_row(opt.csv_path, name, r);
  return kExitOk;
}

int cmd_eval(const EvalCmdOptions& opt) {
  require_file(opt.vocab_path, "vocabulary");
  require_file(opt.corpus_path, "corpus");
  for (const auto& p : opt.ckpt_paths) require_file(p, "checkpoint");
  if (!opt.tune_corpus_path.empty()) require_file(opt.tune_corpus_path, "tuning corpus");
  if (!opt.weights.empty()) check_weights(opt.weights, opt.ckpt_paths.size());
  if (opt.precision == "f64") return run_eval<double>(opt);
  if (opt.precision == "f32") return run_eval<float>(opt);
  throw std::invalid_argument("precision must be f32 or f64, got " + opt.precision);
}

// ---------------------------------------------------------------------------
// params

struct ParamsOptions {
  std::string spec_text;
  int embedding_size = 100;
  int mixture_size = 400;
  int vocab_size = 10000;
  bool no_biases = false;
  int fnn_depth = 1;
  std::string baseline_kind;  // fnn | rnn | lstm; spec-free counting mode
  std::vector<int> hidden_sizes = {400};
  int history = 5;
  long long baseline_nop = 0;
};

int cmd_params(const ParamsOptions& opt) {
  long long nop = 0;
  std::string name;
  if (!opt.baseline_kind.empty()) {
    if (opt.baseline_kind == "fnn") {
      nop = count_params_fnn_baseline(opt.vocab_size, opt.embedding_size, opt.hidden_sizes,
                                      opt.history, !opt.no_biases);
      name = "FNN baseline (N=" + std::to_string(opt.history) + ")";
    } else if (opt.baseline_kind == "rnn") {
      nop = count_params_rnn_baseline(opt.vocab_size, opt.embedding_size,
                                      opt.hidden_sizes.at(0), !opt.no_biases);
      name = "RNN baseline";
    } else if (opt.baseline_kind == "lstm") {
      nop = count_params_lstm_baseline(opt.vocab_size, opt.embedding_size,
                                       opt.hidden_sizes.at(0), !opt.no_biases);
      name = "LSTM baseline";
    } else {
      throw std::invalid_argument("baseline kind must be fnn, rnn or lstm");
    }
  } else {
    if (opt.spec_text.empty())
      throw std::invalid_argument("params needs --spec or --baseline");
    MixtureSpec spec;
    spec.components = parse_spec(opt.spec_text);
    for (auto& c : spec.components)
      if (c.kind == ComponentKind::kFnn) c.depth = opt.fnn_depth;
    spec.embedding_size = opt.embedding_size;
    spec.mixture_size = opt.mixture_size;
    spec.vocab_size = opt.vocab_size;
    nop = count_params(spec, !opt.no_biases);
    name = render_spec(spec.components);
  }

  std::cout << name << ": " << nop << " parameters (" << format_millions(nop) << ")";
  if (opt.baseline_nop > 0)
    std::cout << ", PG " << std::showpos << std::fixed << std::setprecision(2)
              << param_growth(nop, opt.baseline_nop) << "%" << std::noshowpos;
  std::cout << "\n";
  return kExitOk;
}

// Precedence: built-in defaults < preset < config file / explicit flags.
void apply_preset(TrainConfig& config, const std::string& preset, const CLI::App* train) {
  if (preset.empty() || preset == "ptb") return;  // defaults are the PTB setup
  if (preset == "ltcb") {
    const TrainConfig ltcb = TrainConfig::ltcb_preset();
    if (!train->count("--momentum")) config.momentum = ltcb.momentum;
    if (!train->count("--dropout")) config.model_dropout = ltcb.model_dropout;
    if (!train->count("--weight-decay")) config.weight_decay = ltcb.weight_decay;
    if (!train->count("--batch")) config.batch_size = ltcb.batch_size;
    return;
  }
  throw std::invalid_argument("unknown preset: " + preset);
}

}  // namespace

int run(std::vector<std::string> args) {
  CLI::App app{"neural mixture language models"};
  app.require_subcommand(1);

  // build-vocab ------------------------------------------------------------
  BuildVocabOptions bv;
  auto* build_vocab = app.add_subcommand("build-vocab", "build a frequency-capped vocabulary");
  build_vocab->add_option("--train", bv.train_path, "training corpus")->required();
  build_vocab->add_option("--valid", bv.valid_path, "validation corpus (stats only)");
  build_vocab->add_option("--test", bv.test_path, "test corpus (stats only)");
  build_vocab->add_option("--cap", bv.cap, "most-frequent-word cap");
  build_vocab->add_option("--out", bv.out_path, "vocabulary output file")->required();

  // train --------------------------------------------------------------
  TrainOptions tr;
  std::string preset;
  auto* train = app.add_subcommand("train", "train a mixture model");
  train->set_config("--config", "", "flat key=value config file; flags override");
  train->add_option("--train", tr.train_path, "training corpus");
  train->add_option("--valid", tr.valid_path, "validation corpus");
  train->add_option("--vocab", tr.vocab_path, "existing vocabulary file");
  train->add_option("--vocab-cap", tr.vocab_cap, "cap when building the vocabulary");
  train->add_option("--spec", tr.spec_text, "mixture spec, e.g. L100+R100")->required();
  train->add_option("--emb", tr.embedding_size, "shared embedding size");
  train->add_option("--mix", tr.mixture_size, "mixture layer size");
  train->add_option("--preset", preset, "hyperparameter preset: ptb | ltcb");
  train->add_option("--lr", tr.config.learning_rate, "initial learning rate");
  train->add_option("--momentum", tr.config.momentum, "momentum");
  train->add_option("--weight-decay", tr.config.weight_decay, "weight decay");
  train->add_option("--dropout", tr.config.model_dropout, "model dropout probability");
  train->add_option("--batch", tr.config.batch_size, "mini-batch size");
  train->add_option("--bptt", tr.config.bptt_steps, "BPTT unroll length");
  train->add_option("--max-epochs", tr.config.max_epochs, "epoch cap");
  train->add_option("--halving-threshold", tr.config.halving_threshold,
                    "min relative validation log-likelihood gain");
  train->add_option("--seed", tr.config.seed, "random seed");
  train->add_flag("--clip", tr.config.clip_gradients, "clip gradients elementwise");
  train->add_option("--clip-limit", tr.config.clip_limit, "clip threshold");
  train->add_option("--precision", tr.precision, "f32 | f64");
  train->add_option("--out", tr.out_dir, "output directory")->required();
  train->add_flag("--toy-fixture", tr.toy_fixture, "train on a built-in toy corpus");
  train->add_flag("--exclude-eos", tr.exclude_eos, "exclude <eos> from perplexity");

  // eval / interp ------------------------------------------------------
  EvalCmdOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "perplexity of a checkpoint");
  eval_cmd->add_option("--ckpt", ev.ckpt_paths, "checkpoint file")->required();
  eval_cmd->add_option("--vocab", ev.vocab_path, "vocabulary file")->required();
  eval_cmd->add_option("--corpus", ev.corpus_path, "evaluation corpus")->required();
  eval_cmd->add_option("--precision", ev.precision, "f32 | f64");
  eval_cmd->add_flag("--exclude-eos", ev.exclude_eos, "exclude <eos> from perplexity");
  eval_cmd->add_option("--baseline-nop", ev.baseline_nop, "baseline NoP for growth");
  eval_cmd->add_option("--csv", ev.csv_path, "append a machine-readable row here");

  EvalCmdOptions in;
  auto* interp = app.add_subcommand("interp", "linearly interpolate checkpoints");
  interp->add_option("--ckpt", in.ckpt_paths, "checkpoint files (repeat)")
      ->required()
      ->expected(2, 16);
  interp->add_option("--vocab", in.vocab_path, "vocabulary file")->required();
  interp->add_option("--corpus", in.corpus_path, "evaluation corpus")->required();
  interp->add_option("--weights", in.weights, "interpolation weights");
  interp->add_option("--tune", in.tune_corpus_path, "tune weights on this corpus");
  interp->add_option("--step", in.tune_step, "weight grid resolution");
  interp->add_option("--precision", in.precision, "f32 | f64");
  interp->add_flag("--exclude-eos", in.exclude_eos, "exclude <eos> from perplexity");
  interp->add_option("--baseline-nop", in.baseline_nop, "baseline NoP for growth");
  interp->add_option("--csv", in.csv_path, "append a machine-readable row here");

  // params -------------------------------------------------------------
  ParamsOptions pr;
  auto* params = app.add_subcommand("params", "count parameters for a spec");
  params->add_option("--spec", pr.spec_text, "mixture spec");
  params->add_option("--emb", pr.embedding_size, "embedding size");
  params->add_option("--mix", pr.mixture_size, "mixture layer size");
  params->add_option("--vocab", pr.vocab_size, "vocabulary size");
  params->add_flag("--no-biases", pr.no_biases, "count weight matrices only");
  params->add_option("--fnn-depth", pr.fnn_depth, "hidden layers per FNN component");
  params->add_option("--baseline", pr.baseline_kind,
                     "count a mixture-free baseline: fnn | rnn | lstm");
  params->add_option("--hidden", pr.hidden_sizes, "baseline hidden sizes");
  params->add_option("--history", pr.history, "baseline FNN history N");
  params->add_option("--baseline-nop", pr.baseline_nop, "reference NoP for growth");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (build_vocab->parsed()) return cmd_build_vocab(bv);
    if (train->parsed()) {
      apply_preset(tr.config, preset, train);
      return cmd_train(tr, train->config_to_str(true, false));
    }
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (interp->parsed()) return cmd_eval(in);
    if (params->parsed()) return cmd_params(pr);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args));
}

}  // namespace nmm::cli
