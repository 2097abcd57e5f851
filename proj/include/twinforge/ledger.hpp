#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"

// Simulated token ledger. Every mutation is an event; the serialized ledger
// is the event log alone, and replaying it reconstructs the full state.

namespace twinforge::ledger {

using nlohmann::json;
using TokenId = std::uint64_t;

inline constexpr const char* kContractUpdater = "contract:metadata-updater";

enum class Provenance { Mint, CloneByUri, CloneByTokenId, CloneRandom };

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::Mint: return "MINT";
    case Provenance::CloneByUri: return "CLONE_BY_URI";
    case Provenance::CloneByTokenId: return "CLONE_BY_TOKEN_ID";
    case Provenance::CloneRandom: return "CLONE_RANDOM";
  }
  return "?";
}

inline Provenance provenance_from_name(const std::string& s) {
  if (s == "MINT") return Provenance::Mint;
  if (s == "CLONE_BY_URI") return Provenance::CloneByUri;
  if (s == "CLONE_BY_TOKEN_ID") return Provenance::CloneByTokenId;
  if (s == "CLONE_RANDOM") return Provenance::CloneRandom;
  throw FormatError("unknown provenance " + s);
}

// Metadata document. The readOnly_attributes block (pattern encoding plus
// its update stamp) is written only through the contract updater role;
// everything else is ordinary writable content.
struct DynamicMetadata {
  std::string name, description, image_ref;
  std::optional<std::vector<double>> pattern_encoding;
  std::uint64_t updated_at = 0;
  std::map<std::string, std::string> writable;

  bool operator==(const DynamicMetadata&) const = default;

  json to_json() const {
    json read_only = json::object();
    if (pattern_encoding) read_only["pattern_encoding"] = *pattern_encoding;
    read_only["updated_at"] = updated_at;
    json traits = json::array();
    for (const auto& [k, v] : writable) traits.push_back(json{{"trait_type", k}, {"value", v}});
    return json{{"name", name},
                {"description", description},
                {"image", image_ref},
                {"readOnly_attributes", std::move(read_only)},
                {"writable_attributes", std::move(traits)}};
  }

  static DynamicMetadata from_json(const json& j) {
    DynamicMetadata m;
    try {
      m.name = j.at("name").get<std::string>();
      m.description = j.at("description").get<std::string>();
      m.image_ref = j.at("image").get<std::string>();
      const json& ro = j.at("readOnly_attributes");
      if (ro.contains("pattern_encoding"))
        m.pattern_encoding = ro.at("pattern_encoding").get<std::vector<double>>();
      m.updated_at = ro.at("updated_at").get<std::uint64_t>();
      for (const json& t : j.at("writable_attributes")) {
        auto key = t.at("trait_type").get<std::string>();
        if (m.writable.count(key)) throw ValidationError("duplicate trait " + key);
        m.writable[key] = t.at("value").get<std::string>();
      }
    } catch (const json::exception& e) {
      throw SchemaError("metadata json: " + std::string(e.what()));
    }
    return m;
  }
};

struct TokenRecord {
  TokenId token_id = 0;
  std::string owner;
  std::string uri;
  std::uint64_t created_at = 0;
  Provenance provenance = Provenance::Mint;
  std::optional<TokenId> source_token;

  bool operator==(const TokenRecord&) const = default;
};

struct Event {
  std::uint64_t timestamp = 0;
  std::string kind;
  json payload;

  json to_json() const { return json{{"timestamp", timestamp}, {"kind", kind}, {"payload", payload}}; }

  static Event from_json(const json& j) {
    Event e;
    try {
      e.timestamp = j.at("timestamp").get<std::uint64_t>();
      e.kind = j.at("kind").get<std::string>();
      e.payload = j.at("payload");
    } catch (const json::exception& ex) {
      throw FormatError("event json: " + std::string(ex.what()));
    }
    return e;
  }
};

// Flatten the comparable projection of a document: the three fixed fields
// plus every writable trait. readOnly attributes join only when requested.
inline std::map<std::string, std::string> flatten_document(const DynamicMetadata& doc,
                                                           bool include_readonly) {
  std::map<std::string, std::string> flat;
  flat["name"] = doc.name;
  flat["description"] = doc.description;
  flat["image"] = doc.image_ref;
  for (const auto& [k, v] : doc.writable) flat["trait:" + k] = v;
  if (include_readonly) {
    flat["readOnly:updated_at"] = std::to_string(doc.updated_at);
    flat["readOnly:pattern_encoding"] =
        doc.pattern_encoding ? json(*doc.pattern_encoding).dump() : "";
  }
  return flat;
}

inline double document_similarity(const DynamicMetadata& a, const DynamicMetadata& b,
                                  bool include_readonly = false) {
  auto fa = flatten_document(a, include_readonly);
  auto fb = flatten_document(b, include_readonly);
  std::set<std::string> keys;
  for (const auto& [k, _] : fa) keys.insert(k);
  for (const auto& [k, _] : fb) keys.insert(k);
  std::size_t matching = 0;
  for (const auto& k : keys) {
    auto ia = fa.find(k);
    auto ib = fb.find(k);
    if (ia != fa.end() && ib != fb.end() && ia->second == ib->second) ++matching;
  }
  const double pct = 100.0 * static_cast<double>(matching) / static_cast<double>(keys.size());
  return std::round(pct * 100.0) / 100.0;
}

class LedgerState {
 public:
  // ----- queries

  const TokenRecord& token(TokenId id) const {
    auto it = tokens_.find(id);
    if (it == tokens_.end()) throw NotFoundError("token " + std::to_string(id) + " unknown");
    return it->second;
  }

  bool has_token(TokenId id) const { return tokens_.count(id) > 0; }

  const DynamicMetadata& metadata_at(const std::string& uri) const {
    auto it = metadata_store_.find(uri);
    if (it == metadata_store_.end()) throw NotFoundError("metadata uri " + uri + " unknown");
    return it->second;
  }

  const DynamicMetadata& metadata_of(TokenId id) const { return metadata_at(token(id).uri); }

  const std::map<TokenId, TokenRecord>& tokens() const { return tokens_; }
  const std::map<std::string, DynamicMetadata>& metadata_store() const { return metadata_store_; }
  const std::vector<Event>& event_log() const { return event_log_; }
  TokenId next_id() const { return next_id_; }

  bool operator==(const LedgerState& other) const {
    if (tokens_ != other.tokens_ || next_id_ != other.next_id_ || clock_ != other.clock_ ||
        metadata_store_ != other.metadata_store_ ||
        event_log_.size() != other.event_log_.size())
      return false;
    for (std::size_t i = 0; i < event_log_.size(); ++i) {
      if (event_log_[i].timestamp != other.event_log_[i].timestamp ||
          event_log_[i].kind != other.event_log_[i].kind ||
          event_log_[i].payload != other.event_log_[i].payload)
        return false;
    }
    return true;
  }

  // ----- mutations (validate, build the event, apply it, log it)

  TokenId mint(const std::string& owner, const DynamicMetadata& metadata) {
    require_owner(owner);
    if (metadata.pattern_encoding && metadata.pattern_encoding->size() != 62)
      throw ValidationError("pattern_encoding must have 62 values");
    Event e;
    e.timestamp = clock_;
    e.kind = "mint";
    const TokenId id = next_id_;
    e.payload = json{{"token_id", id},
                     {"owner", owner},
                     {"uri", uri_for(id)},
                     {"metadata", metadata.to_json()}};
    commit(e);
    return id;
  }

  // Sanctioned duplicate: a fresh token registered against an existing
  // metadata URI, so it shares the original document identically.
  TokenId mint_linked(const std::string& owner, const std::string& existing_uri) {
    require_owner(owner);
    metadata_at(existing_uri);
    Event e;
    e.timestamp = clock_;
    e.kind = "mint_linked";
    const TokenId id = next_id_;
    e.payload = json{{"token_id", id}, {"owner", owner}, {"uri", existing_uri}};
    commit(e);
    return id;
  }

  TokenId clone_by_uri(const std::string& owner, const std::string& source_uri) {
    require_owner(owner);
    metadata_at(source_uri);
    Event e;
    e.timestamp = clock_;
    e.kind = "clone_by_uri";
    const TokenId id = next_id_;
    e.payload = json{{"token_id", id},
                     {"owner", owner},
                     {"uri", uri_for(id)},
                     {"source_uri", source_uri},
                     {"source_token", lowest_token_at(source_uri)}};
    commit(e);
    return id;
  }

  TokenId clone_by_token_id(const std::string& owner, TokenId source) {
    require_owner(owner);
    const TokenRecord& src = token(source);
    Event e;
    e.timestamp = clock_;
    e.kind = "clone_by_token_id";
    const TokenId id = next_id_;
    e.payload = json{{"token_id", id},
                     {"owner", owner},
                     {"uri", uri_for(id)},
                     {"source_uri", src.uri},
                     {"source_token", source}};
    commit(e);
    return id;
  }

  TokenId clone_random(const std::string& owner, int field_count, std::uint64_t seed) {
    require_owner(owner);
    if (field_count < 0) throw ArgumentError("field_count must be non-negative");
    std::mt19937_64 rng(mix_seed(seed, 0xc10e));
    DynamicMetadata doc;
    doc.name = "dt-" + hex_token(rng);
    doc.description = "fabricated twin " + hex_token(rng);
    doc.image_ref = "ipfs://" + hex_token(rng);
    for (int i = 0; i < field_count; ++i)
      doc.writable["trait_" + std::to_string(i)] = hex_token(rng);
    Event e;
    e.timestamp = clock_;
    e.kind = "clone_random";
    const TokenId id = next_id_;
    e.payload = json{{"token_id", id},
                     {"owner", owner},
                     {"uri", uri_for(id)},
                     {"metadata", doc.to_json()}};
    commit(e);
    return id;
  }

  // The only write path into readOnly_attributes.
  void set_pattern_encoding(const std::string& uri, const std::vector<double>& encoding,
                            const std::string& caller_identity) {
    if (caller_identity != kContractUpdater)
      throw AuthorizationError("identity " + caller_identity +
                               " may not write readOnly_attributes");
    metadata_at(uri);
    if (encoding.size() != 62) throw DimensionError("pattern_encoding must have 62 values");
    Event e;
    e.timestamp = clock_;
    e.kind = "set_pattern_encoding";
    e.payload = json{{"uri", uri}, {"pattern_encoding", encoding}, {"updated_at", clock_}};
    commit(e);
  }

  double similarity(TokenId a, TokenId b) const {
    return document_similarity(metadata_of(a), metadata_of(b), false);
  }

  // ----- event sourcing

  static LedgerState replay(const std::vector<Event>& events) {
    LedgerState state;
    for (const Event& e : events) {
      state.apply(e);
      state.event_log_.push_back(e);
    }
    return state;
  }

  json to_json() const {
    json events = json::array();
    for (const Event& e : event_log_) events.push_back(e.to_json());
    return json{{"events", std::move(events)}};
  }

  static LedgerState from_json(const json& j) {
    std::vector<Event> events;
    try {
      for (const json& e : j.at("events")) events.push_back(Event::from_json(e));
    } catch (const json::exception& e) {
      throw FormatError("ledger json: " + std::string(e.what()));
    }
    return replay(events);
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw ArgumentError("cannot open " + path.string() + " for writing");
    os << to_json().dump(2) << "\n";
  }

  static LedgerState load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ArgumentError("cannot open " + path.string());
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw FormatError("ledger json: " + std::string(e.what()));
    }
    return from_json(j);
  }

 private:
  std::map<TokenId, TokenRecord> tokens_;
  std::map<std::string, DynamicMetadata> metadata_store_;
  TokenId next_id_ = 1;
  std::uint64_t clock_ = 0;
  std::vector<Event> event_log_;

  static void require_owner(const std::string& owner) {
    if (owner.empty()) throw ArgumentError("owner must be non-empty");
  }

  static std::string uri_for(TokenId id) { return "twdt://meta/" + std::to_string(id); }

  static std::string hex_token(std::mt19937_64& rng) {
    static const char* digits = "0123456789abcdef";
    std::string s(12, '0');
    std::uint64_t v = rng();
    for (char& c : s) {
      c = digits[v & 0xf];
      v >>= 4;
    }
    return s;
  }

  TokenId lowest_token_at(const std::string& uri) const {
    for (const auto& [id, rec] : tokens_)
      if (rec.uri == uri) return id;
    throw NotFoundError("no token carries uri " + uri);
  }

  void commit(const Event& e) {
    apply(e);
    event_log_.push_back(e);
  }

  void insert_token(const json& p, Provenance prov, bool with_source,
                    std::uint64_t timestamp) {
    TokenRecord rec;
    rec.token_id = p.at("token_id").get<TokenId>();
    rec.owner = p.at("owner").get<std::string>();
    rec.uri = p.at("uri").get<std::string>();
    rec.created_at = timestamp;
    rec.provenance = prov;
    if (with_source) rec.source_token = p.at("source_token").get<TokenId>();
    if (tokens_.count(rec.token_id))
      throw FormatError("duplicate token id " + std::to_string(rec.token_id) + " in event log");
    tokens_[rec.token_id] = rec;
    next_id_ = std::max(next_id_, rec.token_id + 1);
  }

  void apply(const Event& e) {
    const json& p = e.payload;
    try {
      if (e.kind == "mint") {
        insert_token(p, Provenance::Mint, false, e.timestamp);
        metadata_store_[p.at("uri").get<std::string>()] =
            DynamicMetadata::from_json(p.at("metadata"));
      } else if (e.kind == "mint_linked") {
        if (!metadata_store_.count(p.at("uri").get<std::string>()))
          throw FormatError("mint_linked event references unknown uri");
        insert_token(p, Provenance::Mint, false, e.timestamp);
      } else if (e.kind == "clone_by_uri" || e.kind == "clone_by_token_id") {
        const auto source_uri = p.at("source_uri").get<std::string>();
        auto it = metadata_store_.find(source_uri);
        if (it == metadata_store_.end())
          throw FormatError("clone event references unknown uri " + source_uri);
        insert_token(p,
                     e.kind == "clone_by_uri" ? Provenance::CloneByUri
                                              : Provenance::CloneByTokenId,
                     true, e.timestamp);
        metadata_store_[p.at("uri").get<std::string>()] = it->second;
      } else if (e.kind == "clone_random") {
        insert_token(p, Provenance::CloneRandom, false, e.timestamp);
        metadata_store_[p.at("uri").get<std::string>()] =
            DynamicMetadata::from_json(p.at("metadata"));
      } else if (e.kind == "set_pattern_encoding") {
        auto it = metadata_store_.find(p.at("uri").get<std::string>());
        if (it == metadata_store_.end())
          throw FormatError("set_pattern_encoding event references unknown uri");
        it->second.pattern_encoding = p.at("pattern_encoding").get<std::vector<double>>();
        it->second.updated_at = p.at("updated_at").get<std::uint64_t>();
      } else {
        throw FormatError("unknown event kind " + e.kind);
      }
    } catch (const json::exception& ex) {
      throw FormatError("event payload for " + e.kind + ": " + std::string(ex.what()));
    }
    clock_ = std::max(clock_, e.timestamp + 1);
  }
};

}  // namespace twinforge::ledger
