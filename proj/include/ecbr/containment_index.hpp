#pragma once

// Subscription store organized as a covering DAG.
//
// Nodes are distinct filter shapes ordered by covers(); edges are kept as
// the transitive reduction of that partial order, so matching can walk from
// the maximal (most general) filters downward and prune an entire sub-DAG
// as soon as one node fails: anything covered by a failing filter fails too.
// Structurally equal filters from different subscribers share one node and
// are tracked as separate subscription entries.
//
// The index also carries a deterministic byte-cost account (64-byte lines)
// and hands out per-entry page spans; the enclave simulator charges paging
// costs against those spans.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ecbr/common.hpp"
#include "ecbr/filter.hpp"

namespace ecbr {

struct Subscription {
  Filter filter;
  Id16 subscriber_id{};
  Id16 filter_id{};

  static Subscription make(Filter filter, Id16 subscriber_id) {
    Id16 fid = filter.filter_id();
    return Subscription{std::move(filter), subscriber_id, fid};
  }
};

struct MatchStats {
  std::uint64_t evaluations = 0;  // match() calls, one per evaluated node
  std::uint64_t matched = 0;      // matching subscription entries
  std::uint64_t pruned = 0;       // nodes never evaluated thanks to containment
};

struct MatchPair {
  Id16 subscriber_id{};
  Id16 filter_id{};

  friend bool operator==(const MatchPair& a, const MatchPair& b) {
    return a.subscriber_id == b.subscriber_id && a.filter_id == b.filter_id;
  }
  friend bool operator<(const MatchPair& a, const MatchPair& b) {
    return a.subscriber_id != b.subscriber_id ? a.subscriber_id < b.subscriber_id
                                              : a.filter_id < b.filter_id;
  }
};

struct PageSpan {
  std::uint64_t first = 0;
  std::uint32_t count = 0;
};

// Byte cost of one stored subscription: fixed node overhead plus a per
// constraint charge and the raw string payloads, rounded up to 64-byte
// lines. Deterministic by construction; it is a cost model, not an
// allocator measurement.
inline std::uint64_t subscription_cost_bytes(const Filter& f) {
  std::uint64_t bytes = 128;
  for (const auto& [name, c] : f.constraints()) {
    (void)name;
    bytes += 64;
    if (c.is_string_kind()) bytes += c.s.size();
  }
  return (bytes + 63) / 64 * 64;
}

class ContainmentIndex {
 public:
  using Handle = std::uint64_t;

  explicit ContainmentIndex(std::uint64_t page_size = 4096) : page_size_(page_size) {}

  // Visitor invoked once per evaluated node during match_all / insert with
  // the page spans of that node's entries, in entry order.
  using PageVisitor = std::function<void(const std::vector<PageSpan>&)>;

  Result<void> insert(const Subscription& sub) {
    if (by_filter_id_.count(sub.filter_id))
      return make_error(errc::duplicate_filter_id, to_hex(sub.filter_id));

    Entry entry;
    entry.subscriber_id = sub.subscriber_id;
    entry.filter_id = sub.filter_id;
    entry.bytes = subscription_cost_bytes(sub.filter);
    entry.pages.count = static_cast<std::uint32_t>((entry.bytes + page_size_ - 1) / page_size_);
    entry.pages.first = next_page_;
    next_page_ += entry.pages.count;
    resident_bytes_ += entry.bytes;

    const std::string text = render_filter(sub.filter);
    if (auto it = by_text_.find(text); it != by_text_.end()) {
      Node& node = nodes_.at(it->second);
      attach_entry(node, std::move(entry));
      by_filter_id_.emplace(sub.filter_id, it->second);
      return {};
    }

    Handle h = next_handle_++;
    Node node;
    node.filter = sub.filter;
    node.text = text;
    attach_entry(node, std::move(entry));

    auto parents = find_parents(sub.filter);
    auto children = find_children(sub.filter);

    // Edges from a parent straight to a child are now redundant: the new
    // node sits in between.
    for (Handle p : parents)
      for (Handle c : children)
        if (nodes_.at(p).children.erase(c)) nodes_.at(c).parents.erase(p);

    for (Handle p : parents) {
      nodes_.at(p).children.insert(h);
      node.parents.insert(p);
    }
    for (Handle c : children) {
      Node& child = nodes_.at(c);
      child.parents.insert(h);
      node.children.insert(c);
      roots_.erase(c);
    }
    if (parents.empty()) roots_.insert(h);

    nodes_.emplace(h, std::move(node));
    by_text_.emplace(text, h);
    by_filter_id_.emplace(sub.filter_id, h);
    return {};
  }

  Result<void> remove(const Id16& filter_id, std::vector<PageSpan>* freed = nullptr) {
    auto it = by_filter_id_.find(filter_id);
    if (it == by_filter_id_.end())
      return make_error(errc::unknown_filter_id, to_hex(filter_id));
    Handle h = it->second;
    Node& node = nodes_.at(h);

    for (auto eit = node.entries.begin(); eit != node.entries.end(); ++eit) {
      if (eit->filter_id == filter_id) {
        resident_bytes_ -= eit->bytes;
        if (freed) freed->push_back(eit->pages);
        node.entries.erase(eit);
        break;
      }
    }
    by_filter_id_.erase(it);
    if (!node.entries.empty()) {
      node.rep_id = node.entries.front().filter_id;
      return {};
    }

    // Last entry gone: unlink the node and restore the transitive
    // reduction by bridging parents to children where no other path
    // survives.
    auto parents = node.parents;
    auto children = node.children;
    for (Handle p : parents) nodes_.at(p).children.erase(h);
    for (Handle c : children) nodes_.at(c).parents.erase(h);
    by_text_.erase(node.text);
    roots_.erase(h);
    nodes_.erase(h);

    for (Handle c : children) {
      for (Handle p : parents) {
        if (!reachable(p, c)) {
          nodes_.at(p).children.insert(c);
          nodes_.at(c).parents.insert(p);
        }
      }
      if (nodes_.at(c).parents.empty()) roots_.insert(c);
    }
    return {};
  }

  // Depth-first traversal from the maximal filters. A node is evaluated
  // when reached from a root or from a matched parent, at most once; a
  // failing node stops the descent below it. Roots and children are walked
  // in ascending filter_id byte order (each node is keyed by the smallest
  // filter_id among its entries), so the page-touch sequence is
  // reproducible.
  std::pair<std::vector<MatchPair>, MatchStats> match_all(
      const Publication& pub, const PageVisitor& visit = {}) const {
    std::vector<MatchPair> out;
    MatchStats stats;
    std::unordered_set<Handle> evaluated;
    std::vector<Handle> stack = sorted_by_rep(roots_);
    std::reverse(stack.begin(), stack.end());

    while (!stack.empty()) {
      Handle h = stack.back();
      stack.pop_back();
      if (!evaluated.insert(h).second) continue;
      const Node& node = nodes_.at(h);
      ++stats.evaluations;
      if (visit) visit(node.page_spans());
      if (!match(node.filter, pub)) continue;
      for (const Entry& e : node.entries) out.push_back({e.subscriber_id, e.filter_id});
      stats.matched += node.entries.size();
      auto kids = sorted_by_rep(node.children);
      for (auto rit = kids.rbegin(); rit != kids.rend(); ++rit)
        if (!evaluated.count(*rit)) stack.push_back(*rit);
    }
    stats.pruned = nodes_.size() - stats.evaluations;
    return {std::move(out), stats};
  }

  // Page spans of all entries stored under `filter_id`'s node. Used by the
  // enclave to charge insert-time page touches.
  std::vector<PageSpan> spans_of(const Id16& filter_id) const {
    auto it = by_filter_id_.find(filter_id);
    if (it == by_filter_id_.end()) return {};
    return nodes_.at(it->second).page_spans();
  }

  std::uint64_t resident_bytes() const { return resident_bytes_; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t subscription_count() const { return by_filter_id_.size(); }
  std::uint64_t page_size() const { return page_size_; }

  bool contains(const Id16& filter_id) const { return by_filter_id_.count(filter_id) > 0; }

  std::optional<Id16> owner_of(const Id16& filter_id) const {
    auto it = by_filter_id_.find(filter_id);
    if (it == by_filter_id_.end()) return std::nullopt;
    for (const Entry& e : nodes_.at(it->second).entries)
      if (e.filter_id == filter_id) return e.subscriber_id;
    return std::nullopt;
  }

  std::vector<Id16> subscriber_filters(const Id16& subscriber_id) const {
    std::vector<Id16> out;
    for (const auto& [fid, h] : by_filter_id_) {
      const Node& node = nodes_.at(h);
      for (const Entry& e : node.entries)
        if (e.filter_id == fid && e.subscriber_id == subscriber_id) out.push_back(fid);
    }
    return out;
  }

  // --- structure inspection (tests, DOT dump) ---

  std::vector<Filter> stored_filters() const {
    std::vector<Filter> out;
    out.reserve(nodes_.size());
    for (const auto& [h, node] : nodes_) {
      (void)h;
      out.push_back(node.filter);
    }
    return out;
  }

  // Edge set as (parent text, child text) pairs, sorted.
  std::vector<std::pair<std::string, std::string>> edges() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [h, node] : nodes_) {
      (void)h;
      for (Handle c : node.children) out.emplace_back(node.text, nodes_.at(c).text);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<std::string> root_texts() const {
    std::vector<std::string> out;
    for (Handle h : sorted_by_rep(roots_)) out.push_back(nodes_.at(h).text);
    return out;
  }

  std::string to_dot() const {
    std::string dot = "digraph poset {\n";
    std::vector<std::string> nodes;
    for (const auto& [h, node] : nodes_) {
      (void)h;
      nodes.push_back("  \"" + escape(node.text) + "\" [subs=" +
                      std::to_string(node.entries.size()) + "];\n");
    }
    std::sort(nodes.begin(), nodes.end());
    for (const auto& line : nodes) dot += line;
    for (const auto& [from, to] : edges())
      dot += "  \"" + escape(from) + "\" -> \"" + escape(to) + "\";\n";
    dot += "}\n";
    return dot;
  }

 private:
  struct Entry {
    Id16 subscriber_id{};
    Id16 filter_id{};
    std::uint64_t bytes = 0;
    PageSpan pages;
  };

  struct Node {
    Filter filter;
    std::string text;
    std::vector<Entry> entries;  // sorted by filter_id
    Id16 rep_id{};               // smallest entry filter_id, traversal key
    std::set<Handle> parents;
    std::set<Handle> children;

    std::vector<PageSpan> page_spans() const {
      std::vector<PageSpan> spans;
      spans.reserve(entries.size());
      for (const Entry& e : entries) spans.push_back(e.pages);
      return spans;
    }
  };

  static void attach_entry_sorted(std::vector<Entry>& entries, Entry entry) {
    auto pos = std::lower_bound(
        entries.begin(), entries.end(), entry,
        [](const Entry& a, const Entry& b) { return a.filter_id < b.filter_id; });
    entries.insert(pos, std::move(entry));
  }

  void attach_entry(Node& node, Entry entry) {
    attach_entry_sorted(node.entries, std::move(entry));
    node.rep_id = node.entries.front().filter_id;
  }

  std::vector<Handle> sorted_by_rep(const std::set<Handle>& handles) const {
    std::vector<Handle> out(handles.begin(), handles.end());
    std::sort(out.begin(), out.end(), [this](Handle a, Handle b) {
      return nodes_.at(a).rep_id < nodes_.at(b).rep_id;
    });
    return out;
  }

  // Minimal existing covers of f: walk down from the roots through nodes
  // that cover f; the frontier (covering nodes with no covering child) is
  // the parent set. Covering nodes are pairwise ordered along paths, so the
  // frontier is automatically an antichain.
  std::vector<Handle> find_parents(const Filter& f) const {
    std::unordered_map<Handle, bool> covering;
    auto covers_f = [&](Handle h) {
      auto it = covering.find(h);
      if (it != covering.end()) return it->second;
      bool c = covers(nodes_.at(h).filter, f);
      covering.emplace(h, c);
      return c;
    };
    std::vector<Handle> result;
    std::unordered_set<Handle> visited;
    std::vector<Handle> stack;
    for (Handle r : roots_)
      if (covers_f(r)) stack.push_back(r);
    while (!stack.empty()) {
      Handle h = stack.back();
      stack.pop_back();
      if (!visited.insert(h).second) continue;
      bool any_child_covers = false;
      for (Handle c : nodes_.at(h).children) {
        if (covers_f(c)) {
          any_child_covers = true;
          if (!visited.count(c)) stack.push_back(c);
        }
      }
      if (!any_child_covers) result.push_back(h);
    }
    return result;
  }

  // Maximal existing filters covered by f. The walk stops at the first
  // covered node on each path; a candidate reached around another covered
  // node is filtered out afterwards.
  std::vector<Handle> find_children(const Filter& f) const {
    std::vector<Handle> candidates;
    std::unordered_set<Handle> visited;
    std::vector<Handle> stack(roots_.begin(), roots_.end());
    while (!stack.empty()) {
      Handle h = stack.back();
      stack.pop_back();
      if (!visited.insert(h).second) continue;
      if (covers(f, nodes_.at(h).filter)) {
        candidates.push_back(h);
        continue;
      }
      for (Handle c : nodes_.at(h).children)
        if (!visited.count(c)) stack.push_back(c);
    }
    std::vector<Handle> out;
    for (Handle c1 : candidates) {
      bool maximal = true;
      for (Handle c2 : candidates) {
        if (c1 != c2 && covers(nodes_.at(c2).filter, nodes_.at(c1).filter)) {
          maximal = false;
          break;
        }
      }
      if (maximal) out.push_back(c1);
    }
    return out;
  }

  bool reachable(Handle from, Handle to) const {
    std::unordered_set<Handle> visited;
    std::vector<Handle> stack{from};
    while (!stack.empty()) {
      Handle h = stack.back();
      stack.pop_back();
      if (h == to) return true;
      if (!visited.insert(h).second) continue;
      for (Handle c : nodes_.at(h).children) stack.push_back(c);
    }
    return false;
  }

  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '"' || c == '\\') out.push_back('\\');
      out.push_back(c);
    }
    return out;
  }

  std::uint64_t page_size_;
  Handle next_handle_ = 1;
  std::uint64_t next_page_ = 0;
  std::uint64_t resident_bytes_ = 0;
  std::unordered_map<Handle, Node> nodes_;
  std::unordered_map<std::string, Handle> by_text_;
  std::map<Id16, Handle> by_filter_id_;
  std::set<Handle> roots_;
};

}  // namespace ecbr
