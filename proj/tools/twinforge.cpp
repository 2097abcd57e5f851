#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <twinforge/common.hpp>
#include <twinforge/contracts.hpp>
#include <twinforge/evaluation.hpp>
#include <twinforge/ledger.hpp>
#include <twinforge/models.hpp>
#include <twinforge/neural.hpp>
#include <twinforge/telemetry.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace twinforge;

namespace {

bool g_pretty = false;

void emit(const json& j, const std::string& out_path) {
  const std::string text = g_pretty ? j.dump(2) : j.dump();
  if (out_path.empty()) {
    std::cout << text << "\n";
  } else {
    std::ofstream os(out_path);
    if (!os) throw ArgumentError("cannot open " + out_path + " for writing");
    os << text << "\n";
  }
}

std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t parsed) {
  if (opt->count() > 0) return parsed;
  if (const char* env = std::getenv("TWINFORGE_SEED")) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(env, &pos);
      if (pos != std::string(env).size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ArgumentError("TWINFORGE_SEED must be a non-negative integer, got " +
                          std::string(env));
    }
  }
  return 0;
}

telemetry::BehaviouralPattern read_pattern_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ArgumentError("cannot open " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw SchemaError("pattern json: " + std::string(e.what()));
  }
  return telemetry::pattern_from_json(j);
}

ledger::LedgerState load_or_new_ledger(const std::string& path) {
  if (fs::exists(path)) return ledger::LedgerState::load(path);
  return ledger::LedgerState{};
}

std::vector<contracts::TwinBinding> load_bindings(const std::string& path) {
  std::vector<contracts::TwinBinding> out;
  if (!fs::exists(path)) return out;
  std::ifstream is(path);
  if (!is) throw ArgumentError("cannot open " + path);
  json j;
  try {
    j = json::parse(is);
    for (const json& b : j) out.push_back(contracts::TwinBinding::from_json(b));
  } catch (const json::exception& e) {
    throw SchemaError("bindings json: " + std::string(e.what()));
  }
  return out;
}

void save_bindings(const std::string& path, const std::vector<contracts::TwinBinding>& bindings) {
  json j = json::array();
  for (const auto& b : bindings) j.push_back(b.to_json());
  std::ofstream os(path);
  if (!os) throw ArgumentError("cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
}

// Models plus a contract host wired against them; keeps the models alive
// for as long as the host needs them.
struct HostBundle {
  std::unique_ptr<models::DaeModel> dae;
  std::unique_ptr<models::ClassifierModel> clf;
  std::unique_ptr<contracts::ContractHost> host;
  std::optional<telemetry::PatternStream> stream;
};

HostBundle build_host(ledger::LedgerState& state, const std::string& models_dir,
                      const std::string& bindings_path, const std::string& data_dir,
                      std::uint64_t stream_seed, int cycles_per_dt) {
  HostBundle b;
  b.dae = std::make_unique<models::DaeModel>(models::load_dae(fs::path(models_dir) / "dae.twm"));
  b.clf = std::make_unique<models::ClassifierModel>(
      models::load_classifier(fs::path(models_dir) / "clf.twm"));
  b.host = std::make_unique<contracts::ContractHost>(state);
  b.host->register_encoder("dae", b.dae.get());
  b.host->register_classifier("clf", b.clf.get());
  for (const auto& binding : load_bindings(bindings_path)) b.host->bind(binding);
  if (!data_dir.empty()) {
    auto split = telemetry::load_dataset(data_dir);
    b.stream.emplace(split.stats, cycles_per_dt, stream_seed);
    const telemetry::PatternStream* stream = &*b.stream;
    b.host->set_pattern_source(
        [stream](const std::string& source, std::uint64_t tick) { return stream->pull(source, tick); });
  }
  return b;
}

struct EvalInputs {
  models::LabelledEncodings test;
  int n_classes = 0;
};

EvalInputs encode_test_split(const std::string& data_dir, const std::string& models_dir) {
  auto split = telemetry::load_dataset(data_dir);
  auto dae = models::load_dae(fs::path(models_dir) / "dae.twm");
  EvalInputs in;
  in.test = models::encode_all(dae, split.test);
  int max_label = 0;
  for (const auto& p : split.train) max_label = std::max(max_label, p.dt_id);
  for (const auto& p : split.test) max_label = std::max(max_label, p.dt_id);
  in.n_classes = max_label + 1;
  return in;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"counterfeit detection for digital-twin tokens"};
  app.require_subcommand(1);
  app.add_flag("--pretty", g_pretty, "indent JSON output");

  // ---- gen-data
  auto* gen = app.add_subcommand("gen-data", "generate synthetic telemetry and a dataset split");
  int gen_dts = 4, gen_cycles = 132;
  double gen_fraction = 0.8;
  std::uint64_t gen_seed = 0;
  std::string gen_data, gen_csv, gen_out;
  gen->add_option("--dts", gen_dts, "device twin count");
  gen->add_option("--cycles", gen_cycles, "cycles per device twin");
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "generation and split seed");
  gen->add_option("--train-fraction", gen_fraction, "training fraction of the split");
  gen->add_option("--data", gen_data, "dataset directory to write")->required();
  gen->add_option("--csv", gen_csv, "also dump the raw cycles as csv");
  gen->add_option("--out", gen_out, "write the json summary here instead of stdout");
  gen->callback([&] {
    const auto seed = resolve_seed(gen_seed_opt, gen_seed);
    auto cycles = telemetry::generate_synthetic(gen_dts, gen_cycles, seed);
    if (!gen_csv.empty()) telemetry::write_csv(gen_csv, cycles);
    auto raws = telemetry::window_cycles(cycles);
    auto split = telemetry::normalize_and_split(raws, gen_fraction, seed);
    telemetry::save_dataset(gen_data, split);
    emit(json{{"command", "gen-data"},
              {"dts", gen_dts},
              {"cycles_per_dt", gen_cycles},
              {"seed", seed},
              {"total_samples", raws.size()},
              {"train", split.train.size()},
              {"test", split.test.size()},
              {"data", gen_data}},
         gen_out);
  });

  // ---- ingest
  auto* ingest = app.add_subcommand("ingest", "ingest telemetry csv into a dataset split");
  std::string ing_csv, ing_data, ing_out;
  double ing_fraction = 0.8;
  std::uint64_t ing_seed = 0;
  ingest->add_option("--csv", ing_csv, "telemetry csv file")->required();
  ingest->add_option("--data", ing_data, "dataset directory to write")->required();
  ingest->add_option("--train-fraction", ing_fraction, "training fraction of the split");
  auto* ing_seed_opt = ingest->add_option("--seed", ing_seed, "split seed");
  ingest->add_option("--out", ing_out, "write the json summary here instead of stdout");
  ingest->callback([&] {
    const auto seed = resolve_seed(ing_seed_opt, ing_seed);
    auto result = telemetry::ingest_csv(ing_csv);
    for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
    auto raws = telemetry::window_cycles(result.cycles);
    auto split = telemetry::normalize_and_split(raws, ing_fraction, seed);
    telemetry::save_dataset(ing_data, split);
    emit(json{{"command", "ingest"},
              {"cycles", result.cycles.size()},
              {"total_samples", raws.size()},
              {"train", split.train.size()},
              {"test", split.test.size()},
              {"warnings", result.warnings},
              {"data", ing_data}},
         ing_out);
  });

  // ---- train-dae
  auto* tdae = app.add_subcommand("train-dae", "train the denoising autoencoder");
  std::string tdae_data, tdae_models, tdae_out;
  nn::TrainConfig tdae_cfg;
  tdae_cfg.epochs = 60;
  std::uint64_t tdae_seed = 0;
  tdae->add_option("--data", tdae_data, "dataset directory")->required();
  tdae->add_option("--models", tdae_models, "model directory to write")->required();
  tdae->add_option("--epochs", tdae_cfg.epochs, "training epochs");
  tdae->add_option("--batch", tdae_cfg.batch_size, "batch size");
  tdae->add_option("--lr", tdae_cfg.learning_rate, "learning rate");
  tdae->add_option("--noise", tdae_cfg.input_noise_sigma, "input corruption sigma");
  tdae->add_option("--dropout", tdae_cfg.dropout_rate, "dropout rate");
  auto* tdae_seed_opt = tdae->add_option("--seed", tdae_seed, "training seed");
  tdae->add_option("--out", tdae_out, "write the json report here instead of stdout");
  tdae->callback([&] {
    tdae_cfg.seed = resolve_seed(tdae_seed_opt, tdae_seed);
    auto split = telemetry::load_dataset(tdae_data);
    models::DaeTrainReport report;
    auto model = models::train_dae(split, tdae_cfg, &report);
    fs::create_directories(tdae_models);
    models::save_dae(fs::path(tdae_models) / "dae.twm", model);
    json j = report.to_json();
    j["command"] = "train-dae";
    j["model"] = (fs::path(tdae_models) / "dae.twm").string();
    std::ofstream rep(fs::path(tdae_models) / "dae_report.json");
    rep << report.to_json().dump(2) << "\n";
    emit(j, tdae_out);
  });

  // ---- train-clf
  auto* tclf = app.add_subcommand("train-clf", "train the twin classifier on encoded patterns");
  std::string tclf_data, tclf_models, tclf_out;
  nn::TrainConfig tclf_cfg;
  tclf_cfg.epochs = 40;
  int tclf_hidden = 32;
  std::uint64_t tclf_seed = 0;
  tclf->add_option("--data", tclf_data, "dataset directory")->required();
  tclf->add_option("--models", tclf_models, "model directory (reads dae.twm, writes clf.twm)")
      ->required();
  tclf->add_option("--epochs", tclf_cfg.epochs, "training epochs");
  tclf->add_option("--batch", tclf_cfg.batch_size, "batch size");
  tclf->add_option("--lr", tclf_cfg.learning_rate, "learning rate");
  tclf->add_option("--hidden", tclf_hidden, "recurrent state size per direction");
  auto* tclf_seed_opt = tclf->add_option("--seed", tclf_seed, "training seed");
  tclf->add_option("--out", tclf_out, "write the json report here instead of stdout");
  tclf->callback([&] {
    tclf_cfg.seed = resolve_seed(tclf_seed_opt, tclf_seed);
    auto split = telemetry::load_dataset(tclf_data);
    auto dae = models::load_dae(fs::path(tclf_models) / "dae.twm");
    auto train = models::encode_all(dae, split.train);
    auto test = models::encode_all(dae, split.test);
    int n_classes = 0;
    for (int y : train.labels) n_classes = std::max(n_classes, y + 1);
    for (int y : test.labels) n_classes = std::max(n_classes, y + 1);
    models::ClassifierTrainReport report;
    auto model = models::train_classifier(train, test, tclf_cfg, n_classes, tclf_hidden, &report);
    models::save_classifier(fs::path(tclf_models) / "clf.twm", model);
    json j = report.to_json();
    j["command"] = "train-clf";
    j["n_classes"] = n_classes;
    j["model"] = (fs::path(tclf_models) / "clf.twm").string();
    std::ofstream rep(fs::path(tclf_models) / "clf_report.json");
    rep << report.to_json().dump(2) << "\n";
    emit(j, tclf_out);
  });

  // ---- evaluate
  auto* eval = app.add_subcommand("evaluate", "score the test split at a threshold");
  std::string ev_data, ev_models, ev_out, ev_csv;
  double ev_tau = 0.695, ev_step = 0.01;
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--models", ev_models, "model directory")->required();
  eval->add_option("--tau", ev_tau, "confidence threshold");
  eval->add_option("--sweep-step", ev_step, "threshold sweep grid step");
  eval->add_option("--out", ev_out, "write the json report here instead of stdout");
  eval->add_option("--csv", ev_csv, "also export the sweep curve as csv");
  eval->callback([&] {
    auto in = encode_test_split(ev_data, ev_models);
    auto clf = models::load_classifier(fs::path(ev_models) / "clf.twm");
    auto preds = evaluation::labelled_predictions(clf, in.test);
    json j = evaluation::evaluation_report(preds, ev_tau, in.n_classes, ev_step);
    j["command"] = "evaluate";
    j["tau"] = ev_tau;
    if (!ev_csv.empty())
      evaluation::write_curve_csv(ev_csv,
                                  evaluation::sweep_tau(preds, evaluation::uniform_grid(ev_step)));
    emit(j, ev_out);
  });

  // ---- sweep-tau
  auto* sweep = app.add_subcommand("sweep-tau", "sweep the confidence threshold grid");
  std::string sw_data, sw_models, sw_out, sw_csv;
  double sw_step = 0.01;
  sweep->add_option("--data", sw_data, "dataset directory")->required();
  sweep->add_option("--models", sw_models, "model directory")->required();
  sweep->add_option("--step", sw_step, "grid step");
  sweep->add_option("--out", sw_out, "write the json report here instead of stdout");
  sweep->add_option("--csv", sw_csv, "also export the curve as csv");
  sweep->callback([&] {
    auto in = encode_test_split(sw_data, sw_models);
    auto clf = models::load_classifier(fs::path(sw_models) / "clf.twm");
    auto preds = evaluation::labelled_predictions(clf, in.test);
    auto result = evaluation::sweep_tau(preds, evaluation::uniform_grid(sw_step));
    if (!sw_csv.empty()) evaluation::write_curve_csv(sw_csv, result);
    json curve = json::array();
    for (const auto& c : result.curve) curve.push_back(c.to_json());
    emit(json{{"command", "sweep-tau"},
              {"step", sw_step},
              {"optimal_tau", result.optimal_tau},
              {"curve", std::move(curve)}},
         sw_out);
  });

  // ---- mint
  auto* mint = app.add_subcommand("mint", "mint a twin token");
  std::string mint_ledger, mint_owner, mint_name, mint_desc, mint_image, mint_source;
  std::string mint_bindings, mint_out, mint_encoder = "dae", mint_classifier = "clf";
  std::vector<std::string> mint_traits;
  int mint_interval = 1;
  mint->add_option("--ledger", mint_ledger, "ledger json file")->required();
  mint->add_option("--owner", mint_owner, "owner identity")->required();
  mint->add_option("--name", mint_name, "token name")->required();
  mint->add_option("--description", mint_desc, "token description");
  mint->add_option("--image", mint_image, "image reference");
  mint->add_option("--trait", mint_traits, "writable trait as key=value (repeatable)");
  mint->add_option("--source", mint_source, "bind the token to a data source (dt:<id>)");
  mint->add_option("--bindings", mint_bindings, "bindings json file (with --source)");
  mint->add_option("--encoder-ref", mint_encoder, "encoder registry key for the binding");
  mint->add_option("--classifier-ref", mint_classifier, "classifier registry key for the binding");
  mint->add_option("--interval", mint_interval, "update interval in ticks");
  mint->add_option("--out", mint_out, "write the json result here instead of stdout");
  mint->callback([&] {
    auto state = load_or_new_ledger(mint_ledger);
    ledger::DynamicMetadata doc;
    doc.name = mint_name;
    doc.description = mint_desc;
    doc.image_ref = mint_image;
    for (const auto& t : mint_traits) {
      const auto eq = t.find('=');
      if (eq == std::string::npos || eq == 0)
        throw ArgumentError("trait must look like key=value, got " + t);
      doc.writable[t.substr(0, eq)] = t.substr(eq + 1);
    }
    const auto id = state.mint(mint_owner, doc);
    if (!mint_source.empty()) {
      if (mint_bindings.empty())
        throw ArgumentError("--bindings is required when --source is given");
      telemetry::parse_dt_source(mint_source);
      if (mint_interval < 1) throw ArgumentError("update interval must be at least 1");
      auto bindings = load_bindings(mint_bindings);
      for (const auto& b : bindings)
        if (b.token_id == id) throw StateError("token already bound");
      bindings.push_back({id, mint_source, mint_encoder, mint_classifier, mint_interval});
      save_bindings(mint_bindings, bindings);
    }
    state.save(mint_ledger);
    emit(json{{"command", "mint"},
              {"token_id", id},
              {"uri", state.token(id).uri},
              {"owner", mint_owner}},
         mint_out);
  });

  // ---- clone
  auto* clone = app.add_subcommand("clone", "clone a token (by uri, by token id, or at random)");
  std::string cl_ledger, cl_owner, cl_mode, cl_uri, cl_out;
  ledger::TokenId cl_token = 0;
  int cl_fields = 6;
  std::uint64_t cl_seed = 0;
  clone->add_option("--ledger", cl_ledger, "ledger json file")->required();
  clone->add_option("--owner", cl_owner, "owner identity")->required();
  clone->add_option("--mode", cl_mode, "uri | token | random")->required();
  clone->add_option("--uri", cl_uri, "source metadata uri (mode uri)");
  clone->add_option("--token", cl_token, "source token id (mode token)");
  clone->add_option("--fields", cl_fields, "writable field count (mode random)");
  auto* cl_seed_opt = clone->add_option("--seed", cl_seed, "metadata seed (mode random)");
  clone->add_option("--out", cl_out, "write the json result here instead of stdout");
  clone->callback([&] {
    auto state = ledger::LedgerState::load(cl_ledger);
    ledger::TokenId id = 0;
    if (cl_mode == "uri") {
      if (cl_uri.empty()) throw ArgumentError("--uri is required for mode uri");
      id = state.clone_by_uri(cl_owner, cl_uri);
    } else if (cl_mode == "token") {
      if (cl_token == 0) throw ArgumentError("--token is required for mode token");
      id = state.clone_by_token_id(cl_owner, cl_token);
    } else if (cl_mode == "random") {
      id = state.clone_random(cl_owner, cl_fields, resolve_seed(cl_seed_opt, cl_seed));
    } else {
      throw ArgumentError("mode must be uri, token or random");
    }
    state.save(cl_ledger);
    const auto& rec = state.token(id);
    json j{{"command", "clone"},
           {"token_id", id},
           {"uri", rec.uri},
           {"provenance", ledger::provenance_name(rec.provenance)}};
    if (rec.source_token) j["source_token"] = *rec.source_token;
    emit(j, cl_out);
  });

  // ---- compare
  auto* cmp = app.add_subcommand("compare", "metadata similarity between two tokens");
  std::string cmp_ledger, cmp_out;
  ledger::TokenId cmp_a = 0, cmp_b = 0;
  bool cmp_full = false;
  cmp->add_option("--ledger", cmp_ledger, "ledger json file")->required();
  cmp->add_option("--a", cmp_a, "first token id")->required();
  cmp->add_option("--b", cmp_b, "second token id")->required();
  cmp->add_flag("--full", cmp_full, "also report similarity including readOnly attributes");
  cmp->add_option("--out", cmp_out, "write the json result here instead of stdout");
  cmp->callback([&] {
    auto state = ledger::LedgerState::load(cmp_ledger);
    json j{{"similarity", state.similarity(cmp_a, cmp_b)}};
    if (cmp_full)
      j["full_similarity"] =
          ledger::document_similarity(state.metadata_of(cmp_a), state.metadata_of(cmp_b), true);
    emit(j, cmp_out);
  });

  // ---- update-meta
  auto* upd = app.add_subcommand("update-meta", "refresh a token's pattern encoding");
  std::string up_ledger, up_bindings, up_models, up_data, up_pattern, up_out;
  ledger::TokenId up_token = 0;
  std::uint64_t up_tick = 0, up_stream_seed = 0;
  int up_cycles = 132;
  upd->add_option("--ledger", up_ledger, "ledger json file")->required();
  upd->add_option("--bindings", up_bindings, "bindings json file")->required();
  upd->add_option("--models", up_models, "model directory")->required();
  upd->add_option("--token", up_token, "token id")->required();
  upd->add_option("--pattern", up_pattern, "behavioural pattern json file");
  auto* up_tick_opt = upd->add_option("--tick", up_tick, "pull the pattern from the bound source");
  upd->add_option("--data", up_data, "dataset directory (required with --tick)");
  auto* up_seed_opt = upd->add_option("--stream-seed", up_stream_seed, "live stream seed");
  upd->add_option("--cycles-per-dt", up_cycles, "cycle range for the live stream");
  upd->add_option("--out", up_out, "write the json result here instead of stdout");
  upd->callback([&] {
    const bool use_tick = up_tick_opt->count() > 0;
    if (use_tick == !up_pattern.empty())
      throw ArgumentError("pass exactly one of --pattern or --tick");
    if (use_tick && up_data.empty()) throw ArgumentError("--data is required with --tick");
    auto state = ledger::LedgerState::load(up_ledger);
    auto bundle = build_host(state, up_models, up_bindings, use_tick ? up_data : "",
                             resolve_seed(up_seed_opt, up_stream_seed), up_cycles);
    telemetry::BehaviouralPattern pattern =
        use_tick ? bundle.stream->pull(bundle.host->binding_of(up_token).data_source, up_tick)
                 : read_pattern_file(up_pattern);
    const auto updated_at = bundle.host->update_metadata(up_token, pattern);
    state.save(up_ledger);
    emit(json{{"command", "update-meta"}, {"token_id", up_token}, {"updated_at", updated_at}},
         up_out);
  });

  // ---- verify
  auto* ver = app.add_subcommand("verify", "verify a token against a cached pattern");
  std::string ve_ledger, ve_bindings, ve_models, ve_cached, ve_out;
  ledger::TokenId ve_token = 0;
  double ve_tau = 0.695;
  ver->add_option("--ledger", ve_ledger, "ledger json file")->required();
  ver->add_option("--bindings", ve_bindings, "bindings json file")->required();
  ver->add_option("--models", ve_models, "model directory")->required();
  ver->add_option("--token", ve_token, "token id")->required();
  ver->add_option("--cached", ve_cached, "cached behavioural pattern json file")->required();
  ver->add_option("--tau", ve_tau, "confidence threshold");
  ver->add_option("--out", ve_out, "write the json verdict here instead of stdout");
  ver->callback([&] {
    auto state = ledger::LedgerState::load(ve_ledger);
    auto bundle = build_host(state, ve_models, ve_bindings, "", 0, 132);
    auto verdict = bundle.host->verify(ve_token, read_pattern_file(ve_cached),
                                       models::ThresholdConfig{ve_tau});
    emit(verdict.to_json(), ve_out);
  });

  // ---- demo-divergence
  auto* demo = app.add_subcommand("demo-divergence",
                                  "clone a bound token twice and show how the documents diverge");
  std::string de_ledger, de_bindings, de_models, de_data, de_fake, de_out;
  ledger::TokenId de_token = 0;
  int de_ticks = 3, de_cycles = 132;
  double de_tau = 0.695;
  std::uint64_t de_stream_seed = 0;
  demo->add_option("--ledger", de_ledger, "ledger json file")->required();
  demo->add_option("--bindings", de_bindings, "bindings json file")->required();
  demo->add_option("--models", de_models, "model directory")->required();
  demo->add_option("--data", de_data, "dataset directory (for the live streams)")->required();
  demo->add_option("--token", de_token, "original token id")->required();
  demo->add_option("--ticks", de_ticks, "update cycles to run");
  demo->add_option("--fake-source", de_fake, "data source feeding the counterfeit");
  demo->add_option("--tau", de_tau, "confidence threshold for the verdicts");
  auto* de_seed_opt = demo->add_option("--stream-seed", de_stream_seed, "live stream seed");
  demo->add_option("--cycles-per-dt", de_cycles, "cycle range for the live stream");
  demo->add_option("--out", de_out, "write the json report here instead of stdout");
  demo->callback([&] {
    auto state = ledger::LedgerState::load(de_ledger);
    auto bundle = build_host(state, de_models, de_bindings, de_data,
                             resolve_seed(de_seed_opt, de_stream_seed), de_cycles);
    std::string fake_source = de_fake;
    if (fake_source.empty()) {
      const auto& binding = bundle.host->binding_of(de_token);
      const int orig_dt = telemetry::parse_dt_source(binding.data_source);
      fake_source = "dt:" + std::to_string(orig_dt + 1);
    }
    auto report = bundle.host->divergence_demo(de_token, fake_source, de_ticks,
                                               models::ThresholdConfig{de_tau});
    state.save(de_ledger);
    emit(report.to_json(), de_out);
  });

  // ---- replay
  auto* rep = app.add_subcommand("replay", "rebuild the ledger state from its event log");
  std::string rp_ledger, rp_out, rp_save;
  rep->add_option("--ledger", rp_ledger, "ledger json file")->required();
  rep->add_option("--save", rp_save, "re-serialize the replayed ledger here");
  rep->add_option("--out", rp_out, "write the json summary here instead of stdout");
  rep->callback([&] {
    auto state = ledger::LedgerState::load(rp_ledger);
    auto replayed = ledger::LedgerState::replay(state.event_log());
    const bool ok = replayed == state;
    if (!rp_save.empty()) replayed.save(rp_save);
    emit(json{{"command", "replay"},
              {"events", state.event_log().size()},
              {"tokens", state.tokens().size()},
              {"metadata_docs", state.metadata_store().size()},
              {"next_id", state.next_id()},
              {"roundtrip_ok", ok}},
         rp_out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    std::cerr << "run '" << (argv[0] ? argv[0] : "twinforge") << " --help' for usage\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
