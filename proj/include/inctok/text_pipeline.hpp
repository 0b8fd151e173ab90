#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "inctok/backbone.hpp"
#include "inctok/taxonomy.hpp"

namespace inctok {

// Where a placeholder word landed in a tokenized prompt. `rows` are the
// consecutive token positions its reserved ids occupy (one per expansion
// slot), counted with the leading begin-of-sequence token.
struct PlaceholderSite {
  AttributeId attribute = AttributeId::gender;
  std::string placeholder;
  std::vector<int> rows;
};

// Token-level layout of one prompt: ids, every placeholder site, and the
// rows holding the concept (occupation) tokens.
struct PromptLayout {
  std::string prompt;
  std::string occupation;
  std::vector<int> token_ids;
  std::vector<PlaceholderSite> sites;
  std::vector<int> concept_rows;

  const PlaceholderSite& site_for(AttributeId id) const {
    for (const auto& s : sites)
      if (s.attribute == id) return s;
    fail(Errc::span_resolution,
         std::string("prompt has no site for attribute ") + attribute_name(id));
  }

  bool has_site(AttributeId id) const {
    for (const auto& s : sites)
      if (s.attribute == id) return true;
    return false;
  }
};

namespace detail_text {

// First index where `needle` occurs contiguously in `hay`, or -1.
inline int find_subsequence(const std::vector<int>& hay, const std::vector<int>& needle,
                            int from = 0) {
  if (needle.empty() || hay.size() < needle.size()) return -1;
  for (size_t i = size_t(from); i + needle.size() <= hay.size(); ++i) {
    bool ok = true;
    for (size_t j = 0; j < needle.size(); ++j) {
      if (hay[i + j] != needle[j]) {
        ok = false;
        break;
      }
    }
    if (ok) return int(i);
  }
  return -1;
}

}  // namespace detail_text

// Resolves token spans for every placeholder occurrence and for the concept
// word. The concept must tokenize to a non-empty id sequence that appears in
// the prompt; the first occurrence wins, so the layout is deterministic.
inline PromptLayout analyze_prompt(const Backbone& bb, const Taxonomy& tax,
                                   const std::string& prompt, const std::string& occupation) {
  PromptLayout layout;
  layout.prompt = prompt;
  layout.occupation = occupation;
  layout.token_ids = bb.tokenize(prompt);

  for (const auto& attr : tax.attributes) {
    std::vector<int> ph_ids = bb.tokenize_fragment(attr.placeholder);
    require(!ph_ids.empty(), Errc::span_resolution,
            "placeholder does not tokenize: " + attr.placeholder);
    int from = 0;
    while (true) {
      int pos = detail_text::find_subsequence(layout.token_ids, ph_ids, from);
      if (pos < 0) break;
      PlaceholderSite site;
      site.attribute = attr.id;
      site.placeholder = attr.placeholder;
      for (size_t k = 0; k < ph_ids.size(); ++k) site.rows.push_back(pos + int(k));
      layout.sites.push_back(std::move(site));
      from = pos + int(ph_ids.size());
    }
  }
  std::sort(layout.sites.begin(), layout.sites.end(),
            [](const PlaceholderSite& a, const PlaceholderSite& b) {
              return a.rows.front() < b.rows.front();
            });

  std::vector<int> occ_ids = bb.tokenize_fragment(occupation);
  require(!occ_ids.empty(), Errc::span_resolution,
          "occupation does not tokenize: " + occupation);
  int pos = detail_text::find_subsequence(layout.token_ids, occ_ids);
  require(pos >= 0, Errc::span_resolution,
          "occupation '" + occupation + "' not found in prompt: " + prompt);
  for (size_t k = 0; k < occ_ids.size(); ++k) layout.concept_rows.push_back(pos + int(k));
  return layout;
}

// Frozen text encoding of a prompt: raw embedding lookup, then the
// backbone's text transformer. No adaptation involved.
inline Mat encode_plain(const Backbone& bb, const std::string& prompt) {
  return bb.text_transform_plain(bb.embedding_rows(bb.tokenize(prompt)));
}

// Raw (pre-transform) embedding rows for a layout's ids.
inline Mat raw_embedding_rows(const Backbone& bb, const PromptLayout& layout) {
  return bb.embedding_rows(layout.token_ids);
}

// Substitution of learned rows happens before the text transformer: take the
// raw embedding matrix, overwrite each requested site's rows with the given
// block, then run the frozen transformer on the result. Gradients flow only
// through the substituted blocks.
//
// `substitutions` maps attribute -> replacement rows; every attribute listed
// must have at least one site in the layout, and each of its sites receives
// the same block (the replacement is per concept, not per occurrence).
inline Var encode_with_substitution(Tape& tape, const Backbone& bb, const PromptLayout& layout,
                                    const std::map<AttributeId, Var>& substitutions) {
  Var x = tape.constant(raw_embedding_rows(bb, layout));
  for (const auto& [attr_id, rows] : substitutions) {
    require(layout.has_site(attr_id), Errc::span_resolution,
            std::string("no placeholder site for attribute ") + attribute_name(attr_id));
    for (const auto& site : layout.sites) {
      if (site.attribute != attr_id) continue;
      require(tape.val(rows).rows == int(site.rows.size()) &&
                  tape.val(rows).cols == bb.embed_dim(),
              Errc::contract, "replacement block shape mismatch");
      x = tape.replace_rows(x, site.rows.front(), rows);
    }
  }
  return bb.text_transform(tape, x);
}

// Concept embedding rows (the occupation tokens' raw embeddings), the
// conditioning input of the adaptive mapping.
inline Mat concept_embedding(const Backbone& bb, const PromptLayout& layout) {
  std::vector<int> ids;
  for (int r : layout.concept_rows) ids.push_back(layout.token_ids[size_t(r)]);
  return bb.embedding_rows(ids);
}

}  // namespace inctok
