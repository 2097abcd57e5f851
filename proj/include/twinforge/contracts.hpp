#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "ledger.hpp"
#include "models.hpp"
#include "telemetry.hpp"

// Contract-side logic: periodic metadata updates through the privileged
// updater role, and the two-sided verification that compares the ledger's
// current encoding against a caller-supplied cached pattern.

namespace twinforge::contracts {

using nlohmann::json;
using telemetry::BehaviouralPattern;

struct TwinBinding {
  ledger::TokenId token_id = 0;
  std::string data_source;     // "dt:<id>"
  std::string encoder_ref;     // registry key of the encoder model
  std::string classifier_ref;  // registry key of the classifier model
  int update_interval = 1;     // ticks between metadata refreshes

  json to_json() const {
    return json{{"token_id", token_id},
                {"data_source", data_source},
                {"encoder_ref", encoder_ref},
                {"classifier_ref", classifier_ref},
                {"update_interval", update_interval}};
  }

  static TwinBinding from_json(const json& j) {
    TwinBinding b;
    try {
      b.token_id = j.at("token_id").get<ledger::TokenId>();
      b.data_source = j.at("data_source").get<std::string>();
      b.encoder_ref = j.at("encoder_ref").get<std::string>();
      b.classifier_ref = j.at("classifier_ref").get<std::string>();
      b.update_interval = j.at("update_interval").get<int>();
    } catch (const json::exception& e) {
      throw SchemaError("binding json: " + std::string(e.what()));
    }
    return b;
  }
};

enum class Outcome { Genuine, Fake, OocUnknown };

inline const char* outcome_name(Outcome o) {
  switch (o) {
    case Outcome::Genuine: return "GENUINE";
    case Outcome::Fake: return "FAKE";
    case Outcome::OocUnknown: return "OOC_UNKNOWN";
  }
  return "?";
}

struct VerificationVerdict {
  Outcome outcome = Outcome::OocUnknown;
  models::Prediction ledger_prediction;   // scores the encoding stored on the ledger
  models::Prediction cached_prediction;  // scores the caller's cached pattern
  std::string detail;
  double tau = 0.0;
  std::uint64_t updated_at = 0;

  json to_json() const {
    auto pred_json = [](const models::Prediction& p) {
      std::vector<double> scores(p.scores.data(), p.scores.data() + p.scores.size());
      return json{{"scores", scores},
                  {"best_class", p.best_class},
                  {"confidence", p.confidence},
                  {"accepted", p.verdict == models::Verdict::Accept}};
    };
    return json{{"outcome", outcome_name(outcome)},
                {"ledger_encoding", pred_json(ledger_prediction)},
                {"cached_pattern", pred_json(cached_prediction)},
                {"detail", detail},
                {"tau", tau},
                {"updated_at", updated_at}};
  }
};

struct DivergenceReport {
  ledger::TokenId original_token = 0, genuine_token = 0, fake_token = 0;
  int ticks = 0;
  bool identical_at_creation = false;
  double creation_similarity_fake = 0.0;      // full document, fake vs original
  double post_similarity_genuine = 0.0;       // full document, genuine vs original
  double post_similarity_fake = 0.0;          // full document, fake vs original
  double post_static_similarity_fake = 0.0;   // readOnly excluded
  bool fake_diverged = false;                 // documents unequal after the run
  std::optional<VerificationVerdict> verdict_genuine, verdict_fake;

  json to_json() const {
    json j{{"original_token", original_token},
           {"genuine_token", genuine_token},
           {"fake_token", fake_token},
           {"ticks", ticks},
           {"identical_at_creation", identical_at_creation},
           {"creation_similarity_fake", creation_similarity_fake},
           {"post_similarity_genuine", post_similarity_genuine},
           {"post_similarity_fake", post_similarity_fake},
           {"post_static_similarity_fake", post_static_similarity_fake},
           {"fake_diverged", fake_diverged}};
    j["verdict_genuine"] = verdict_genuine ? verdict_genuine->to_json() : json(nullptr);
    j["verdict_fake"] = verdict_fake ? verdict_fake->to_json() : json(nullptr);
    return j;
  }
};

class ContractHost {
 public:
  using PatternSource = std::function<BehaviouralPattern(const std::string&, std::uint64_t)>;

  explicit ContractHost(ledger::LedgerState& state) : ledger_(&state) {}

  void register_encoder(const std::string& ref, const models::DaeModel* model) {
    if (!model) throw ArgumentError("encoder model must not be null");
    encoders_[ref] = model;
  }

  void register_classifier(const std::string& ref, const models::ClassifierModel* model) {
    if (!model) throw ArgumentError("classifier model must not be null");
    classifiers_[ref] = model;
  }

  void set_pattern_source(PatternSource source) { pattern_source_ = std::move(source); }

  void bind(const TwinBinding& binding) {
    ledger_->token(binding.token_id);
    if (bindings_.count(binding.token_id))
      throw StateError("token " + std::to_string(binding.token_id) + " already bound");
    telemetry::parse_dt_source(binding.data_source);
    if (binding.update_interval < 1) throw ArgumentError("update_interval must be at least 1");
    encoder(binding.encoder_ref);
    classifier(binding.classifier_ref);
    bindings_[binding.token_id] = binding;
  }

  const TwinBinding& binding_of(ledger::TokenId token) const {
    auto it = bindings_.find(token);
    if (it == bindings_.end())
      throw NotFoundError("token " + std::to_string(token) + " has no twin binding");
    return it->second;
  }

  const std::map<ledger::TokenId, TwinBinding>& bindings() const { return bindings_; }

  // Refresh the token's readOnly encoding from a live pattern. Only this
  // host carries the updater identity; direct ledger writes are refused.
  std::uint64_t update_metadata(ledger::TokenId token, const BehaviouralPattern& live_pattern) {
    const TwinBinding& b = binding_of(token);
    const models::DaeModel& enc = *encoder(b.encoder_ref);
    models::EncodedPattern code = models::encode(enc, live_pattern);
    std::vector<double> values(code.values.data(), code.values.data() + code.values.size());
    const std::string& uri = ledger_->token(token).uri;
    ledger_->set_pattern_encoding(uri, values, ledger::kContractUpdater);
    return ledger_->metadata_at(uri).updated_at;
  }

  // One scheduler tick: every binding whose interval divides the tick pulls
  // a fresh pattern from its data source and refreshes its metadata.
  void run_update_cycle(std::uint64_t tick) {
    if (!pattern_source_) throw StateError("no pattern source installed");
    for (const auto& [token, b] : bindings_)
      if (tick % static_cast<std::uint64_t>(b.update_interval) == 0)
        update_metadata(token, pattern_source_(b.data_source, tick));
  }

  VerificationVerdict verify(ledger::TokenId token, const BehaviouralPattern& cached_pattern,
                             const models::ThresholdConfig& thr) const {
    thr.validate();
    const TwinBinding& b = binding_of(token);
    const ledger::DynamicMetadata& doc = ledger_->metadata_of(token);
    if (!doc.pattern_encoding)
      throw StateError("token " + std::to_string(token) + " metadata never updated");

    const models::DaeModel& enc = *encoder(b.encoder_ref);
    const models::ClassifierModel& clf = *classifier(b.classifier_ref);

    models::EncodedPattern ledger_code;
    ledger_code.values =
        Eigen::Map<const Vector>(doc.pattern_encoding->data(),
                                 static_cast<Eigen::Index>(doc.pattern_encoding->size()));
    models::EncodedPattern cached_code = models::encode(enc, cached_pattern);

    VerificationVerdict v;
    v.tau = thr.tau;
    v.updated_at = doc.updated_at;
    v.ledger_prediction = models::predict(clf, ledger_code, thr);
    v.cached_prediction = models::predict(clf, cached_code, thr);

    const bool ledger_ok = v.ledger_prediction.verdict == models::Verdict::Accept;
    const bool cached_ok = v.cached_prediction.verdict == models::Verdict::Accept;
    if (!ledger_ok || !cached_ok) {
      v.outcome = Outcome::OocUnknown;
      v.detail = std::string("confidence below threshold on ") +
                 (!ledger_ok && !cached_ok ? "both sides"
                  : !ledger_ok             ? "the ledger encoding"
                                          : "the cached pattern");
    } else if (v.ledger_prediction.best_class == v.cached_prediction.best_class) {
      v.outcome = Outcome::Genuine;
      v.detail = "both sides attribute class " + std::to_string(v.ledger_prediction.best_class);
    } else {
      v.outcome = Outcome::Fake;
      v.detail = "ledger encoding attributes class " + std::to_string(v.ledger_prediction.best_class) +
                 ", cached pattern attributes class " + std::to_string(v.cached_prediction.best_class);
    }
    return v;
  }

  // Mints a genuine clone (shared URI, same data source) and a counterfeit
  // clone (copied document, different data source) of an already-bound
  // token, runs `ticks` update cycles and reports how the documents moved.
  DivergenceReport divergence_demo(ledger::TokenId original, const std::string& fake_source,
                                   int ticks, const models::ThresholdConfig& thr) {
    if (ticks < 0) throw ArgumentError("ticks must be non-negative");
    const TwinBinding orig_binding = binding_of(original);
    if (fake_source == orig_binding.data_source)
      throw ArgumentError("the counterfeit's data source must differ from the original's");
    telemetry::parse_dt_source(fake_source);
    if (!pattern_source_) throw StateError("no pattern source installed");

    DivergenceReport rep;
    rep.original_token = original;
    rep.ticks = ticks;

    const std::string& orig_uri = ledger_->token(original).uri;
    rep.genuine_token = ledger_->mint_linked("demo:owner", orig_uri);
    rep.fake_token = ledger_->clone_by_uri("demo:attacker", orig_uri);

    TwinBinding genuine_binding = orig_binding;
    genuine_binding.token_id = rep.genuine_token;
    bind(genuine_binding);
    TwinBinding fake_binding = orig_binding;
    fake_binding.token_id = rep.fake_token;
    fake_binding.data_source = fake_source;
    bind(fake_binding);

    const ledger::DynamicMetadata& orig_doc = ledger_->metadata_of(original);
    const ledger::DynamicMetadata& fake_doc = ledger_->metadata_of(rep.fake_token);
    rep.identical_at_creation =
        ledger_->metadata_of(rep.genuine_token) == orig_doc && fake_doc == orig_doc;
    rep.creation_similarity_fake = ledger::document_similarity(orig_doc, fake_doc, true);

    BehaviouralPattern cached = pattern_source_(orig_binding.data_source, 0);
    for (int t = 1; t <= ticks; ++t) run_update_cycle(static_cast<std::uint64_t>(t));

    rep.post_similarity_genuine =
        ledger::document_similarity(orig_doc, ledger_->metadata_of(rep.genuine_token), true);
    rep.post_similarity_fake = ledger::document_similarity(orig_doc, fake_doc, true);
    rep.post_static_similarity_fake = ledger::document_similarity(orig_doc, fake_doc, false);
    rep.fake_diverged = !(fake_doc == orig_doc);

    if (ticks > 0) {
      rep.verdict_genuine = verify(rep.genuine_token, cached, thr);
      rep.verdict_fake = verify(rep.fake_token, cached, thr);
    }
    return rep;
  }

 private:
  ledger::LedgerState* ledger_;
  std::map<ledger::TokenId, TwinBinding> bindings_;
  std::map<std::string, const models::DaeModel*> encoders_;
  std::map<std::string, const models::ClassifierModel*> classifiers_;
  PatternSource pattern_source_;

  const models::DaeModel* encoder(const std::string& ref) const {
    auto it = encoders_.find(ref);
    if (it == encoders_.end()) throw NotFoundError("encoder " + ref + " not registered");
    return it->second;
  }

  const models::ClassifierModel* classifier(const std::string& ref) const {
    auto it = classifiers_.find(ref);
    if (it == classifiers_.end()) throw NotFoundError("classifier " + ref + " not registered");
    return it->second;
  }
};

}  // namespace twinforge::contracts
