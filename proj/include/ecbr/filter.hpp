#pragma once

// Content filters and publications.
//
// A publication is a set of typed attribute/value pairs. A filter is a
// conjunction of per-attribute constraints drawn from a deliberately small
// algebra: integer ranges, exact string equality, and string byte-prefixes.
// The algebra is closed under conjunction and admits a per-attribute
// containment (covering) decision, which the subscription index relies on.
//
// Semantics are closed-world per constraint: a constrained attribute that is
// missing from a publication, or present with the wrong type, fails the
// match.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ecbr/common.hpp"

namespace ecbr {

inline constexpr std::size_t kMaxAttrNameLen = 64;
inline constexpr std::size_t kMaxStrValueLen = 255;
inline constexpr std::size_t kMaxPubAttrs = 64;

inline bool is_valid_attr_name(std::string_view name) {
  if (name.empty() || name.size() > kMaxAttrNameLen) return false;
  auto head = name[0];
  if (!(head == '_' || (head >= 'A' && head <= 'Z') || (head >= 'a' && head <= 'z')))
    return false;
  return std::all_of(name.begin() + 1, name.end(), [](char c) {
    return c == '_' || (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
           (c >= '0' && c <= '9');
  });
}

// ---------------------------------------------------------------------------
// Values

struct AttrValue {
  enum class Kind : std::uint8_t { int_val = 0, str_val = 1 };

  Kind kind = Kind::int_val;
  std::int64_t i = 0;
  std::string s;

  static AttrValue of_int(std::int64_t v) { return AttrValue{Kind::int_val, v, {}}; }
  static AttrValue of_str(std::string v) { return AttrValue{Kind::str_val, 0, std::move(v)}; }

  bool valid() const {
    if (kind == Kind::int_val) return s.empty();
    return s.size() <= kMaxStrValueLen && is_valid_utf8(s);
  }

  friend bool operator==(const AttrValue& a, const AttrValue& b) {
    if (a.kind != b.kind) return false;
    return a.kind == Kind::int_val ? a.i == b.i : a.s == b.s;
  }
};

struct Publication {
  std::map<std::string, AttrValue> attrs;
  Id16 pub_id{};

  static Result<Publication> make(std::map<std::string, AttrValue> attrs, Id16 pub_id) {
    if (attrs.empty() || attrs.size() > kMaxPubAttrs)
      return make_error(errc::invalid_argument, "publication must carry 1..64 attributes");
    for (const auto& [name, value] : attrs) {
      if (!is_valid_attr_name(name))
        return make_error(errc::invalid_argument, "bad attribute name '" + name + "'");
      if (!value.valid())
        return make_error(errc::invalid_argument, "bad value for attribute '" + name + "'");
    }
    return Publication{std::move(attrs), pub_id};
  }

  friend bool operator==(const Publication& a, const Publication& b) {
    return a.attrs == b.attrs && a.pub_id == b.pub_id;
  }
};

// ---------------------------------------------------------------------------
// Constraints
//
// Integer bounds use explicit infinity sentinels so that an interval pinned
// at the int64 extremes stays distinguishable from a half-open one.

struct IntBound {
  enum class Kind : std::uint8_t { neg_inf, finite, pos_inf };

  Kind kind = Kind::finite;
  std::int64_t value = 0;

  static IntBound neg_inf() { return {Kind::neg_inf, 0}; }
  static IntBound pos_inf() { return {Kind::pos_inf, 0}; }
  static IntBound finite(std::int64_t v) { return {Kind::finite, v}; }

  bool is_finite() const { return kind == Kind::finite; }

  friend bool operator==(const IntBound& a, const IntBound& b) {
    if (a.kind != b.kind) return false;
    return a.kind != Kind::finite || a.value == b.value;
  }
};

// Order on bounds with -inf < any finite < +inf.
inline int bound_cmp(const IntBound& a, const IntBound& b) {
  auto rank = [](const IntBound& x) {
    return x.kind == IntBound::Kind::neg_inf ? -1 : x.kind == IntBound::Kind::pos_inf ? 1 : 0;
  };
  const int ra = rank(a), rb = rank(b);
  if (ra != rb) return ra < rb ? -1 : 1;
  if (ra != 0) return 0;
  return a.value < b.value ? -1 : a.value > b.value ? 1 : 0;
}

struct Constraint {
  enum class Kind : std::uint8_t { int_range, str_eq, str_prefix };

  Kind kind = Kind::int_range;
  IntBound lo = IntBound::neg_inf();
  IntBound hi = IntBound::pos_inf();
  std::string s;

  static Constraint int_range(IntBound lo, IntBound hi) {
    return Constraint{Kind::int_range, lo, hi, {}};
  }
  static Constraint str_eq(std::string v) {
    return Constraint{Kind::str_eq, {}, {}, std::move(v)};
  }
  // An empty prefix is the string-typed presence constraint: it matches any
  // string value and covers every string constraint on the attribute.
  static Constraint str_prefix(std::string v) {
    return Constraint{Kind::str_prefix, {}, {}, std::move(v)};
  }

  bool is_string_kind() const { return kind != Kind::int_range; }

  bool satisfied_by(const AttrValue& v) const {
    switch (kind) {
      case Kind::int_range:
        return v.kind == AttrValue::Kind::int_val &&
               (lo.kind == IntBound::Kind::neg_inf || v.i >= lo.value) &&
               (hi.kind == IntBound::Kind::pos_inf || v.i <= hi.value);
      case Kind::str_eq:
        return v.kind == AttrValue::Kind::str_val && v.s == s;
      case Kind::str_prefix:
        return v.kind == AttrValue::Kind::str_val && v.s.size() >= this->s.size() &&
               v.s.compare(0, this->s.size(), this->s) == 0;
    }
    return false;
  }

  friend bool operator==(const Constraint& a, const Constraint& b) {
    if (a.kind != b.kind) return false;
    if (a.kind == Kind::int_range) return a.lo == b.lo && a.hi == b.hi;
    return a.s == b.s;
  }
};

inline bool is_byte_prefix(std::string_view prefix, std::string_view full) {
  return full.size() >= prefix.size() && full.compare(0, prefix.size(), prefix) == 0;
}

// True iff every value satisfying `specific` also satisfies `general`.
inline bool constraint_subsumes(const Constraint& general, const Constraint& specific) {
  using K = Constraint::Kind;
  switch (general.kind) {
    case K::int_range:
      return specific.kind == K::int_range && bound_cmp(general.lo, specific.lo) <= 0 &&
             bound_cmp(specific.hi, general.hi) <= 0;
    case K::str_prefix:
      if (specific.kind == K::str_prefix) return is_byte_prefix(general.s, specific.s);
      if (specific.kind == K::str_eq) return is_byte_prefix(general.s, specific.s);
      return false;
    case K::str_eq:
      return specific.kind == K::str_eq && general.s == specific.s;
  }
  return false;
}

// Conjunction of two constraints on the same attribute. Empty intersections
// surface as unsatisfiable_filter so they never reach the index.
inline Result<Constraint> merge_constraints(const Constraint& a, const Constraint& b) {
  using K = Constraint::Kind;
  if (a.is_string_kind() != b.is_string_kind())
    return make_error(errc::unsatisfiable_filter,
                      "integer and string constraints on one attribute");
  if (a.kind == K::int_range) {
    IntBound lo = bound_cmp(a.lo, b.lo) >= 0 ? a.lo : b.lo;
    IntBound hi = bound_cmp(a.hi, b.hi) <= 0 ? a.hi : b.hi;
    if (lo.is_finite() && hi.is_finite() && lo.value > hi.value)
      return make_error(errc::unsatisfiable_filter, "empty integer range");
    return Constraint::int_range(lo, hi);
  }
  if (a.kind == K::str_eq && b.kind == K::str_eq) {
    if (a.s != b.s) return make_error(errc::unsatisfiable_filter, "conflicting string equalities");
    return a;
  }
  if (a.kind == K::str_prefix && b.kind == K::str_prefix) {
    if (is_byte_prefix(a.s, b.s)) return b;
    if (is_byte_prefix(b.s, a.s)) return a;
    return make_error(errc::unsatisfiable_filter, "incompatible prefixes");
  }
  // one eq, one prefix: the equality wins when consistent
  const Constraint& eq = a.kind == K::str_eq ? a : b;
  const Constraint& pre = a.kind == K::str_prefix ? a : b;
  if (is_byte_prefix(pre.s, eq.s)) return eq;
  return make_error(errc::unsatisfiable_filter, "prefix excludes the required equality");
}

// ---------------------------------------------------------------------------
// Filters

class Filter {
 public:
  Filter() = default;

  // Builds a normalized filter from raw (attribute, constraint) atoms,
  // merging repeated attributes. Rejects unsatisfiable conjunctions and
  // integer ranges unbounded on both sides (the grammar cannot express
  // those, so admitting them would break render/parse round-trips).
  static Result<Filter> from_parts(
      const std::vector<std::pair<std::string, Constraint>>& parts, Id16 filter_id = {}) {
    if (parts.empty())
      return make_error(errc::invalid_argument, "filter needs at least one constraint");
    Filter f;
    f.filter_id_ = filter_id;
    for (const auto& [name, constraint] : parts) {
      if (!is_valid_attr_name(name))
        return make_error(errc::invalid_argument, "bad attribute name '" + name + "'");
      if (constraint.is_string_kind() &&
          (constraint.s.size() > kMaxStrValueLen || !is_valid_utf8(constraint.s)))
        return make_error(errc::invalid_argument, "bad string literal for '" + name + "'");
      if (constraint.kind == Constraint::Kind::int_range &&
          bound_cmp(constraint.lo, constraint.hi) > 0)
        return make_error(errc::unsatisfiable_filter, "empty integer range on '" + name + "'");
      auto it = f.constraints_.find(name);
      if (it == f.constraints_.end()) {
        f.constraints_.emplace(name, constraint);
      } else {
        auto merged = merge_constraints(it->second, constraint);
        if (!merged) return merged.error();
        it->second = std::move(merged).value();
      }
    }
    for (const auto& [name, c] : f.constraints_) {
      if (c.kind == Constraint::Kind::int_range && !c.lo.is_finite() && !c.hi.is_finite())
        return make_error(errc::invalid_argument,
                          "integer range on '" + name + "' must be bounded on one side");
    }
    return f;
  }

  const std::map<std::string, Constraint>& constraints() const { return constraints_; }
  const Id16& filter_id() const { return filter_id_; }

  Filter with_id(Id16 id) const {
    Filter f = *this;
    f.filter_id_ = id;
    return f;
  }

  bool same_constraints(const Filter& other) const { return constraints_ == other.constraints_; }

 private:
  std::map<std::string, Constraint> constraints_;
  Id16 filter_id_{};
};

inline bool match(const Filter& f, const Publication& p) {
  for (const auto& [name, constraint] : f.constraints()) {
    auto it = p.attrs.find(name);
    if (it == p.attrs.end() || !constraint.satisfied_by(it->second)) return false;
  }
  return true;
}

// covers(general, specific): every publication matching `specific` also
// matches `general`. Decided per attribute; every attribute constrained in
// the general filter must be constrained at least as tightly in the
// specific one.
inline bool covers(const Filter& general, const Filter& specific) {
  const auto& spec = specific.constraints();
  for (const auto& [name, gc] : general.constraints()) {
    auto it = spec.find(name);
    if (it == spec.end() || !constraint_subsumes(gc, it->second)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Text grammar
//
//   filter  := term ( '&&' term )*
//   term    := name op literal
//   ops     := == < <= > >=        on integer literals
//              == | 'prefix'       on quoted string literals
//
// '!=' is recognized and rejected as unsupported: it would make containment
// undecidable per attribute.

namespace detail {

struct Token {
  enum class Kind { ident, integer, string, op, and_and, end };
  Kind kind = Kind::end;
  std::string text;     // ident name, op spelling, or string payload
  std::int64_t value = 0;
  std::size_t pos = 0;
};

class Lexer {
 public:
  explicit Lexer(std::string_view input) : in_(input) {}

  Result<Token> next() {
    while (pos_ < in_.size() && (in_[pos_] == ' ' || in_[pos_] == '\t' || in_[pos_] == '\n' ||
                                 in_[pos_] == '\r'))
      ++pos_;
    Token t;
    t.pos = pos_;
    if (pos_ >= in_.size()) return t;

    char c = in_[pos_];
    if (c == '&') {
      if (pos_ + 1 < in_.size() && in_[pos_ + 1] == '&') {
        pos_ += 2;
        t.kind = Token::Kind::and_and;
        return t;
      }
      return err("expected '&&'");
    }
    if (c == '=' || c == '!' || c == '<' || c == '>') {
      t.kind = Token::Kind::op;
      if (pos_ + 1 < in_.size() && in_[pos_ + 1] == '=') {
        t.text = in_.substr(pos_, 2);
        pos_ += 2;
      } else if (c == '<' || c == '>') {
        t.text = in_.substr(pos_, 1);
        pos_ += 1;
      } else {
        return err("expected '==' or '!='");
      }
      return t;
    }
    if (c == '"') return lex_string();
    if (c == '-' || (c >= '0' && c <= '9')) return lex_int();
    if (c == '_' || (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z')) {
      std::size_t start = pos_;
      while (pos_ < in_.size() &&
             (in_[pos_] == '_' || (in_[pos_] >= 'A' && in_[pos_] <= 'Z') ||
              (in_[pos_] >= 'a' && in_[pos_] <= 'z') || (in_[pos_] >= '0' && in_[pos_] <= '9')))
        ++pos_;
      t.kind = Token::Kind::ident;
      t.text = in_.substr(start, pos_ - start);
      return t;
    }
    return err(std::string("unexpected character '") + c + "'");
  }

 private:
  Result<Token> lex_string() {
    Token t;
    t.pos = pos_;
    t.kind = Token::Kind::string;
    ++pos_;  // opening quote
    std::string out;
    while (pos_ < in_.size()) {
      char c = in_[pos_];
      if (c == '"') {
        ++pos_;
        t.text = std::move(out);
        return t;
      }
      if (c == '\\') {
        if (pos_ + 1 >= in_.size()) return err("unterminated escape");
        char e = in_[pos_ + 1];
        if (e != '"' && e != '\\') return err("unsupported escape sequence");
        out.push_back(e);
        pos_ += 2;
        continue;
      }
      out.push_back(c);
      ++pos_;
    }
    return err("unterminated string literal");
  }

  Result<Token> lex_int() {
    Token t;
    t.pos = pos_;
    t.kind = Token::Kind::integer;
    std::size_t start = pos_;
    if (in_[pos_] == '-') ++pos_;
    std::size_t digits = 0;
    while (pos_ < in_.size() && in_[pos_] >= '0' && in_[pos_] <= '9') {
      ++pos_;
      ++digits;
    }
    if (digits == 0) return err("expected digits after '-'");
    // overflow-safe accumulate
    bool neg = in_[start] == '-';
    std::uint64_t acc = 0;
    for (std::size_t i = start + (neg ? 1 : 0); i < pos_; ++i) {
      acc = acc * 10 + static_cast<std::uint64_t>(in_[i] - '0');
      std::uint64_t limit = neg ? (1ull << 63) : (1ull << 63) - 1;
      if (acc > limit) return err("integer literal out of range");
    }
    t.value = neg ? -static_cast<std::int64_t>(acc) : static_cast<std::int64_t>(acc);
    return t;
  }

  Error err(std::string msg) const {
    Error e = make_error(errc::syntax_error, std::move(msg));
    e.position = pos_;
    return e;
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Result<Filter> parse_filter(std::string_view text, Id16 filter_id = {}) {
  detail::Lexer lexer(text);
  using TK = detail::Token::Kind;
  std::vector<std::pair<std::string, Constraint>> parts;

  auto syntax = [](std::size_t pos, std::string msg) {
    Error e = make_error(errc::syntax_error, std::move(msg));
    e.position = pos;
    return e;
  };

  for (;;) {
    auto name_tok = lexer.next();
    if (!name_tok) return name_tok.error();
    if (name_tok.value().kind != TK::ident)
      return syntax(name_tok.value().pos, "expected attribute name");
    std::string name = name_tok.value().text;
    if (!is_valid_attr_name(name))
      return syntax(name_tok.value().pos, "attribute name too long");

    auto op_tok = lexer.next();
    if (!op_tok) return op_tok.error();
    const auto& op = op_tok.value();
    bool is_prefix_op = op.kind == TK::ident && op.text == "prefix";
    if (op.kind != TK::op && !is_prefix_op)
      return syntax(op.pos, "expected operator (==, <, <=, >, >= or prefix)");
    if (op.kind == TK::op && op.text == "!=") {
      Error e = make_error(errc::unsupported_operator, "'!=' is not supported");
      e.position = op.pos;
      return e;
    }

    auto lit_tok = lexer.next();
    if (!lit_tok) return lit_tok.error();
    const auto& lit = lit_tok.value();

    if (lit.kind == TK::integer) {
      if (is_prefix_op || op.text == "prefix") {
        Error e = make_error(errc::unsupported_operator, "'prefix' requires a string literal");
        e.position = lit.pos;
        return e;
      }
      std::int64_t v = lit.value;
      constexpr auto kMin = std::numeric_limits<std::int64_t>::min();
      constexpr auto kMax = std::numeric_limits<std::int64_t>::max();
      Constraint c;
      if (op.text == "==") {
        c = Constraint::int_range(IntBound::finite(v), IntBound::finite(v));
      } else if (op.text == "<=") {
        c = Constraint::int_range(IntBound::neg_inf(), IntBound::finite(v));
      } else if (op.text == ">=") {
        c = Constraint::int_range(IntBound::finite(v), IntBound::pos_inf());
      } else if (op.text == "<") {
        if (v == kMin)
          return make_error(errc::unsatisfiable_filter, "'" + name + " < INT64_MIN' is empty");
        c = Constraint::int_range(IntBound::neg_inf(), IntBound::finite(v - 1));
      } else if (op.text == ">") {
        if (v == kMax)
          return make_error(errc::unsatisfiable_filter, "'" + name + " > INT64_MAX' is empty");
        c = Constraint::int_range(IntBound::finite(v + 1), IntBound::pos_inf());
      } else {
        return syntax(op.pos, "operator '" + op.text + "' not valid for integers");
      }
      parts.emplace_back(name, c);
    } else if (lit.kind == TK::string) {
      if (is_prefix_op) {
        parts.emplace_back(name, Constraint::str_prefix(lit.text));
      } else if (op.text == "==") {
        parts.emplace_back(name, Constraint::str_eq(lit.text));
      } else {
        Error e = make_error(errc::unsupported_operator,
                             "operator '" + op.text + "' not supported for strings");
        e.position = op.pos;
        return e;
      }
      if (!is_valid_utf8(lit.text) || lit.text.size() > kMaxStrValueLen)
        return syntax(lit.pos, "string literal too long or not valid UTF-8");
    } else {
      return syntax(lit.pos, "expected integer or quoted string literal");
    }

    auto sep = lexer.next();
    if (!sep) return sep.error();
    if (sep.value().kind == TK::end) break;
    if (sep.value().kind != TK::and_and)
      return syntax(sep.value().pos, "expected '&&' or end of input");
  }

  return Filter::from_parts(parts, filter_id);
}

namespace detail {

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace detail

// Canonical text: attributes in lexicographic order, ranges rendered as the
// pair of bounds that produced them. parse_filter(render_filter(f)) is
// structurally identical to f.
inline std::string render_filter(const Filter& f) {
  std::string out;
  bool first = true;
  auto emit = [&](const std::string& term) {
    if (!first) out += " && ";
    out += term;
    first = false;
  };
  for (const auto& [name, c] : f.constraints()) {
    switch (c.kind) {
      case Constraint::Kind::int_range:
        if (c.lo.is_finite()) emit(name + " >= " + std::to_string(c.lo.value));
        if (c.hi.is_finite()) emit(name + " <= " + std::to_string(c.hi.value));
        break;
      case Constraint::Kind::str_eq:
        emit(name + " == " + detail::quote(c.s));
        break;
      case Constraint::Kind::str_prefix:
        emit(name + " prefix " + detail::quote(c.s));
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Publication binary encoding (big-endian):
//   u16 attr_count
//   per attribute, sorted by name bytes:
//     u8 name_len, name, u8 tag (0=Int, 1=Str), i64 | (u8 len, bytes)
//   16-byte pub_id
// Decode accepts exactly the canonical form and rejects trailing bytes.

inline Bytes encode_publication(const Publication& p) {
  ByteWriter w;
  w.u16(static_cast<std::uint16_t>(p.attrs.size()));
  for (const auto& [name, value] : p.attrs) {
    w.u8(static_cast<std::uint8_t>(name.size()));
    w.raw(name);
    w.u8(static_cast<std::uint8_t>(value.kind));
    if (value.kind == AttrValue::Kind::int_val) {
      w.i64(value.i);
    } else {
      w.u8(static_cast<std::uint8_t>(value.s.size()));
      w.raw(value.s);
    }
  }
  w.raw(p.pub_id);
  return w.take();
}

inline Result<Publication> decode_publication(ByteSpan bytes) {
  ByteReader r(bytes);
  auto malformed = [](std::string msg) { return make_error(errc::malformed_encoding, std::move(msg)); };

  std::uint16_t count = 0;
  if (!r.u16(count)) return malformed("truncated attribute count");
  if (count == 0 || count > kMaxPubAttrs) return malformed("attribute count out of range");

  Publication p;
  std::string prev_name;
  for (std::uint16_t i = 0; i < count; ++i) {
    std::uint8_t name_len = 0;
    if (!r.u8(name_len)) return malformed("truncated attribute name length");
    std::string name;
    if (!r.str(name, name_len)) return malformed("truncated attribute name");
    if (!is_valid_attr_name(name)) return malformed("invalid attribute name");
    if (i > 0 && !(prev_name < name))
      return malformed(prev_name == name ? "duplicate attribute" : "attributes not sorted");
    prev_name = name;

    std::uint8_t tag = 0;
    if (!r.u8(tag)) return malformed("truncated tag");
    if (tag == 0) {
      std::int64_t v = 0;
      if (!r.i64(v)) return malformed("truncated integer value");
      p.attrs.emplace(std::move(name), AttrValue::of_int(v));
    } else if (tag == 1) {
      std::uint8_t len = 0;
      if (!r.u8(len)) return malformed("truncated string length");
      std::string s;
      if (!r.str(s, len)) return malformed("truncated string value");
      if (!is_valid_utf8(s)) return malformed("string value is not valid UTF-8");
      p.attrs.emplace(std::move(name), AttrValue::of_str(std::move(s)));
    } else {
      return malformed("bad value tag");
    }
  }
  if (!r.raw(p.pub_id)) return malformed("truncated pub_id");
  if (!r.at_end()) return malformed("trailing bytes");
  return p;
}

}  // namespace ecbr
