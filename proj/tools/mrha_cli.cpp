// mrha: corpus generation, training, evaluation, live streaming and alert
// delivery from one binary.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 config or usage error (including
// unwritable output paths), 3 data or shape error, 4 gateway delivery failure.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "mrha/alert.hpp"
#include "mrha/config.hpp"
#include "mrha/mock_gateway.hpp"

namespace {

using namespace mrha;

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kGateway = 4 };

struct ExitError : std::runtime_error {
  ExitError(int code, const std::string& message) : std::runtime_error(message), code(code) {}
  int code;
};

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

void install_signal_handlers() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
}

AppConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return AppConfig{};
  try {
    return load_app_config(path);
  } catch (const ConfigError& e) {
    throw ExitError(kUsage, std::string("config error: ") + e.what());
  } catch (const ParseError& e) {
    throw ExitError(kUsage, std::string("config error: ") + e.what());
  }
}

std::ofstream open_output(const std::filesystem::path& path, bool append = false) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, append ? std::ios::binary | std::ios::app : std::ios::binary);
  if (!out) throw ExitError(kUsage, "cannot write " + path.string());
  return out;
}

struct Dataset {
  std::vector<LabeledSample> samples;
  std::vector<ManifestEntry> manifest;
};

Dataset load_dataset(const std::string& dir, const PipelineOptions& options) {
  Dataset d;
  try {
    d.manifest = read_manifest(dir);
    for (const ManifestEntry& e : d.manifest) {
      const std::string path = (std::filesystem::path(dir) / e.file).string();
      SkeletonSequence seq = parse_sequence_file(path);
      if (!seq.label) seq.label = e.label;
      if (*seq.label != e.label) throw ParseError(0, path + ": label disagrees with the manifest");
      d.samples.push_back(make_sample(seq, options, e.file));
    }
  } catch (const ExitError&) {
    throw;
  } catch (const std::exception& e) {
    throw ExitError(kData, std::string("data error: ") + e.what());
  }
  if (d.samples.empty()) throw ExitError(kData, "data error: " + dir + " holds no samples");
  return d;
}

struct Partition {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

Partition partition(const Dataset& data, const std::string& split, const AppConfig& config,
                    std::ostream& out) {
  Partition p;
  if (split == "none") {
    for (std::size_t i = 0; i < data.samples.size(); ++i) p.train.push_back(i);
    out << "split mode=none train_samples=" << p.train.size() << " test_samples=0\n";
    return p;
  }
  SplitMode mode;
  try {
    mode = parse_split_mode(split);
  } catch (const ConfigError& e) {
    throw ExitError(kUsage, e.what());
  }
  std::vector<Provenance> provenance;
  for (const LabeledSample& s : data.samples) provenance.push_back(s.provenance);
  SplitResult r;
  try {
    r = split_dataset(provenance, mode, config.train_fraction, config.split_seed);
  } catch (const ContractError& e) {
    throw ExitError(kData, std::string("data error: ") + e.what());
  }
  auto join = [](const std::vector<int>& ids) {
    std::string s;
    for (int id : ids) s += (s.empty() ? "" : ",") + std::to_string(id);
    return s;
  };
  out << "split mode=" << to_string(mode) << " train_samples=" << r.train.size()
      << " test_samples=" << r.test.size() << " train_groups=" << join(r.train_groups)
      << " test_groups=" << join(r.test_groups) << "\n";
  p.train = r.train;
  p.test = r.test;
  return p;
}

std::vector<LabeledSample> pick(const Dataset& data, const std::vector<std::size_t>& indices) {
  std::vector<LabeledSample> out;
  for (std::size_t i : indices) out.push_back(data.samples[i]);
  return out;
}

Checkpoint load_model(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const std::exception& e) {
    throw ExitError(kData, std::string("checkpoint error: ") + e.what());
  }
}

// A config given alongside a checkpoint must describe the same tensors.
void check_against_config(const Checkpoint& ckpt, const std::string& config_path,
                          const AppConfig& config) {
  if (config_path.empty()) return;
  if (auto bad = first_mismatch(config.model, ckpt.params)) {
    throw ExitError(kData, "checkpoint does not match the config model: tensor '" + *bad + "'");
  }
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const std::string& out_dir, std::size_t per_class, std::uint64_t seed) {
  if (per_class == 0) throw ExitError(kUsage, "--per-class must be positive");
  try {
    const auto entries = write_corpus(out_dir, generate_synthetic_corpus(per_class, seed));
    std::cout << "wrote " << entries.size() << " sequences to " << out_dir << "\n";
  } catch (const std::runtime_error& e) {
    throw ExitError(kUsage, e.what());
  }
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string split = "cross-subject";
  std::string checkpoint;
  std::string data;
  std::string history;
  std::string init;
};

int cmd_train(const TrainArgs& args) {
  AppConfig config = load_config_or_default(args.config);
  const std::string data_dir = args.data.empty() ? config.paths.data_dir : args.data;
  const std::string checkpoint = args.checkpoint.empty() ? config.paths.checkpoint : args.checkpoint;
  const std::filesystem::path history =
      args.history.empty() ? std::filesystem::path(config.paths.logs) / "history.csv" : std::filesystem::path(args.history);

  ParameterSet params = init_parameters(config.model, config.init_seed);
  if (!args.init.empty()) {
    Checkpoint start = load_model(args.init);
    if (auto bad = first_mismatch(config.model, start.params)) {
      throw ExitError(kData, "initial checkpoint does not match the model: tensor '" + *bad + "'");
    }
    params = start.params;
  }
  const Dataset data = load_dataset(data_dir, config.pipeline());
  const Partition part = partition(data, args.split, config, std::cout);
  const std::vector<LabeledSample> train_set = pick(data, part.train);
  const std::vector<LabeledSample> test_set = pick(data, part.test);
  try {
    check_samples(config.model, train_set);
  } catch (const ConfigError& e) {
    throw ExitError(kData, std::string("shape error: ") + e.what());
  }
  // Fail on unwritable outputs before spending time on training.
  std::ofstream history_out = open_output(history);
  open_output(checkpoint).close();

  const TrainResult result = train(config.model, params, train_set, config.train, [](const EpochStats& e) {
    std::printf("epoch %zu loss=%.6f accuracy=%.4f\n", e.epoch, e.loss, e.accuracy);
    std::fflush(stdout);
  });
  write_history_csv(history_out, result.history);
  save_checkpoint(checkpoint, config.model, result.params);

  const double train_acc = evaluate(config.model, result.params, train_set).accuracy;
  std::printf("final train_accuracy=%.4f", train_acc);
  if (!test_set.empty()) {
    std::printf(" test_accuracy=%.4f", evaluate(config.model, result.params, test_set).accuracy);
  }
  std::printf("\ncheckpoint=%s history=%s\n", checkpoint.c_str(), history.string().c_str());
  return kOk;
}

struct EvalArgs {
  std::string config;
  std::string checkpoint;
  std::string data;
  std::string split = "cross-subject";
  std::string subset = "test";
  std::string out;
};

int cmd_eval(const EvalArgs& args) {
  AppConfig config = load_config_or_default(args.config);
  const Checkpoint ckpt = load_model(args.checkpoint.empty() ? config.paths.checkpoint : args.checkpoint);
  check_against_config(ckpt, args.config, config);
  PipelineOptions options = config.pipeline();
  options.grid = ckpt.config.input_grid;
  const Dataset data = load_dataset(args.data.empty() ? config.paths.data_dir : args.data, options);
  const Partition part = partition(data, args.split, config, std::cout);
  std::vector<std::size_t> chosen;
  if (args.subset == "train") {
    chosen = part.train;
  } else if (args.subset == "test") {
    chosen = part.test;
  } else {
    for (std::size_t i = 0; i < data.samples.size(); ++i) chosen.push_back(i);
  }
  if (chosen.empty()) throw ExitError(kData, "data error: the " + args.subset + " subset is empty");
  const std::filesystem::path out_dir = args.out.empty() ? config.paths.logs : args.out;
  std::ofstream report_out = open_output(out_dir / "eval_report.txt");
  std::ofstream confusion_out = open_output(out_dir / "confusion.csv");

  const EvalReport report = evaluate(ckpt.config, ckpt.params, pick(data, chosen));
  write_report(report_out, report);
  write_confusion_csv(confusion_out, report);
  write_report(std::cout, report);
  return kOk;
}

struct StreamArgs {
  std::string config;
  std::string checkpoint;
  std::string source = "file";
  std::string input;
  int port = 0;
  std::string bind = "127.0.0.1";
  double fps = 30.0;
  bool pace = false;
  std::string alerts = "off";
  std::string delivery_log;
};

int cmd_stream(const StreamArgs& args) {
  AppConfig config = load_config_or_default(args.config);
  const Checkpoint ckpt = load_model(args.checkpoint.empty() ? config.paths.checkpoint : args.checkpoint);
  check_against_config(ckpt, args.config, config);

  std::unique_ptr<FrameSource> source;
  try {
    if (args.source == "file") {
      if (args.input.empty()) throw ExitError(kUsage, "--input is required for --source file");
      source = std::make_unique<JsonlReplaySource>(args.input, args.pace);
    } else {
      auto socket = std::make_unique<SocketSource>(static_cast<std::uint16_t>(args.port), args.fps, args.bind);
      std::cout << "listening port=" << socket->port() << std::endl;
      source = std::move(socket);
    }
  } catch (const ExitError&) {
    throw;
  } catch (const ConfigError& e) {
    throw ExitError(kUsage, e.what());
  } catch (const std::exception& e) {
    throw ExitError(kData, std::string("source error: ") + e.what());
  }

  std::unique_ptr<DeliveryLog> log;
  std::unique_ptr<AlertDispatcher> dispatcher;
  if (args.alerts == "on") {
    try {
      config.gateway.validate();
    } catch (const ConfigError& e) {
      throw ExitError(kUsage, std::string("config error: ") + e.what());
    }
    const std::filesystem::path log_path = args.delivery_log.empty()
                                               ? std::filesystem::path(config.paths.logs) / "deliveries.jsonl"
                                               : std::filesystem::path(args.delivery_log);
    open_output(log_path, true).close();
    try {
      log = std::make_unique<DeliveryLog>(log_path.string());
    } catch (const std::exception& e) {
      throw ExitError(kUsage, e.what());
    }
    dispatcher = std::make_unique<AlertDispatcher>(config.gateway, *log);
  }

  const StreamSummary summary = run_stream(
      *source, ckpt.config, ckpt.params, config.stream,
      [&](const ActivityEvent& e) {
        std::printf("event id=%llu class=%s name=\"%s\" confidence=%.4f window_start=%.3f window_end=%.3f\n",
                    static_cast<unsigned long long>(e.id), e.label().class_code.c_str(),
                    e.label().display_name.c_str(), e.confidence, e.window_start, e.window_end);
        std::fflush(stdout);
        if (dispatcher) dispatcher->submit(e);
      },
      {}, &g_stop);

  int code = kOk;
  if (dispatcher) {
    dispatcher->close();
    const DispatcherStats s = dispatcher->stats();
    std::printf("alerts critical=%zu sent=%zu skipped=%zu ignored=%zu parked=%zu dropped=%zu\n",
                s.critical, s.sent, s.skipped, s.ignored, s.parked, s.dropped);
    for (const DeliveryResult& r : log->entries()) {
      if (!r.accepted()) code = kGateway;
    }
  }
  std::printf("summary frames=%zu rejected=%zu ticks=%zu events=%zu p95_latency_ms=%.3f\n",
              summary.frames, summary.rejected, summary.ticks, summary.events,
              summary.p95_latency_ms);
  if (summary.error) {
    std::cerr << "source error: " << *summary.error << "\n";
    return kData;
  }
  return code;
}

int cmd_send_test_alert(const std::string& config_path) {
  AppConfig config = load_config_or_default(config_path);
  try {
    config.gateway.validate();
  } catch (const ConfigError& e) {
    throw ExitError(kUsage, std::string("config error: ") + e.what());
  }
  const ActivityEvent event{0, class_index("A43"), 1.0, 0.0, 0.0};
  const std::string body = format_alert(event, config.gateway.patient_label,
                                        std::chrono::system_clock::now(),
                                        config.gateway.utc_offset_minutes, {event.class_index});
  int code = kOk;
  for (const std::string& to : config.gateway.recipients) {
    const DeliveryResult r = send_sms({to, config.gateway.from_number, body}, config.gateway);
    std::cout << to_json_line(r) << "\n";
    if (!r.accepted()) code = kGateway;
  }
  return code;
}

int cmd_mock_gateway(int port, const std::string& script) {
  MockSmsGateway mock;
  std::vector<int> statuses;
  std::stringstream list(script);
  for (std::string item; std::getline(list, item, ',');) {
    if (item.empty()) continue;
    try {
      statuses.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ExitError(kUsage, "--script expects comma-separated status codes");
    }
  }
  mock.script(statuses);
  try {
    mock.start(port);
  } catch (const std::exception& e) {
    throw ExitError(kUsage, e.what());
  }
  std::cout << "mock gateway listening on " << mock.base_url() << std::endl;
  std::size_t shown = 0;
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    const auto requests = mock.requests();
    for (; shown < requests.size(); ++shown) {
      const RecordedRequest& r = requests[shown];
      const auto field = [&](const char* key) {
        auto it = r.form.find(key);
        return it == r.form.end() ? std::string() : it->second;
      };
      std::cout << "request status=" << r.status << " path=" << r.path << " to=" << field("To")
                << " body=\"" << field("Body") << "\"" << std::endl;
    }
  }
  mock.stop();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Medical activity recognition: data, training, streaming and alerts"};
  app.require_subcommand(1);

  std::string out_dir;
  std::size_t per_class = 20;
  std::uint64_t seed = 1;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic labeled corpus");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--per-class", per_class, "Sequences per class");
  gen->add_option("--seed", seed, "Random seed");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a corpus");
  train_cmd->add_option("--config", train_args.config, "Config JSON")->required();
  train_cmd->add_option("--split", train_args.split, "cross-subject, cross-view or none");
  train_cmd->add_option("--checkpoint", train_args.checkpoint, "Checkpoint output path");
  train_cmd->add_option("--data", train_args.data, "Corpus directory (overrides paths.data_dir)");
  train_cmd->add_option("--history", train_args.history, "History CSV output path");
  train_cmd->add_option("--init", train_args.init, "Start from this checkpoint");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--config", eval_args.config, "Config JSON");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint path");
  eval_cmd->add_option("--data", eval_args.data, "Corpus directory");
  eval_cmd->add_option("--split", eval_args.split, "cross-subject, cross-view or none");
  eval_cmd->add_option("--subset", eval_args.subset, "train, test or all")
      ->check(CLI::IsMember({"train", "test", "all"}));
  eval_cmd->add_option("--out", eval_args.out, "Directory for eval_report.txt and confusion.csv");

  StreamArgs stream_args;
  auto* stream_cmd = app.add_subcommand("stream", "Classify a live or replayed skeleton stream");
  stream_cmd->add_option("--config", stream_args.config, "Config JSON");
  stream_cmd->add_option("--checkpoint", stream_args.checkpoint, "Checkpoint path");
  stream_cmd->add_option("--source", stream_args.source, "file or socket")
      ->check(CLI::IsMember({"file", "socket"}));
  stream_cmd->add_option("--input", stream_args.input, "JSONL file for --source file");
  stream_cmd->add_option("--port", stream_args.port, "TCP port for --source socket (0 picks one)");
  stream_cmd->add_option("--bind", stream_args.bind, "Bind address for --source socket");
  stream_cmd->add_option("--fps", stream_args.fps, "Nominal frame rate of the socket source");
  stream_cmd->add_flag("--pace", stream_args.pace, "Replay files in real time");
  stream_cmd->add_option("--alerts", stream_args.alerts, "on or off")
      ->check(CLI::IsMember({"on", "off"}));
  stream_cmd->add_option("--delivery-log", stream_args.delivery_log, "Delivery log JSONL path");

  std::string alert_config;
  auto* alert_cmd = app.add_subcommand("send-test-alert", "Send one test SMS to every recipient");
  alert_cmd->add_option("--config", alert_config, "Config JSON")->required();

  int mock_port = 0;
  std::string mock_script;
  auto* mock_cmd = app.add_subcommand("mock-gateway", "Run a local SMS gateway stand-in");
  mock_cmd->add_option("--port", mock_port, "Port (0 picks one)");
  mock_cmd->add_option("--script", mock_script, "Status codes for the first requests, e.g. 500,201");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  install_signal_handlers();
  try {
    if (*gen) return cmd_gen_data(out_dir, per_class, seed);
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*stream_cmd) return cmd_stream(stream_args);
    if (*alert_cmd) return cmd_send_test_alert(alert_config);
    if (*mock_cmd) return cmd_mock_gateway(mock_port, mock_script);
  } catch (const ExitError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
