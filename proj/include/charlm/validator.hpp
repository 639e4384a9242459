#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "charlm/error.hpp"

// Structural checker for LaTeX: a single-pass lexer feeding a pushdown check
// of environment nesting, brace balance and math-mode parity.

namespace charlm::latex {

enum class TokenKind { begin_env, end_env, open_brace, close_brace, math_dollar, display_dollar, command, text };

inline const char* to_string(TokenKind k) {
  switch (k) {
    case TokenKind::begin_env: return "begin_env";
    case TokenKind::end_env: return "end_env";
    case TokenKind::open_brace: return "open_brace";
    case TokenKind::close_brace: return "close_brace";
    case TokenKind::math_dollar: return "math_dollar";
    case TokenKind::display_dollar: return "display_dollar";
    case TokenKind::command: return "command";
    case TokenKind::text: return "text";
  }
  return "?";
}

struct TokenEvent {
  TokenKind kind = TokenKind::text;
  std::string name;  // environment or command name
  std::size_t byte_offset = 0;
  std::size_t length = 0;
  std::size_t line = 1;

  friend bool operator==(const TokenEvent&, const TokenEvent&) = default;
};

// Environments whose bodies are not LaTeX.
inline bool is_verbatim_env(std::string_view name) {
  return name == "verbatim" || name == "verbatim*" || name == "Verbatim" || name == "lstlisting" ||
         name == "minted" || name == "comment";
}

namespace detail {

inline bool is_letter(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

class Lexer {
 public:
  explicit Lexer(std::string_view text) : s_(text) {}

  std::vector<TokenEvent> run() {
    while (i_ < s_.size()) step();
    flush_text();
    return std::move(events_);
  }

 private:
  void step() {
    const char c = s_[i_];
    if (c == '\\') return backslash();
    if (c == '%') {
      std::size_t j = i_;
      while (j < s_.size() && s_[j] != '\n') ++j;
      return text_to(j);
    }
    if (c == '{') return emit(TokenKind::open_brace, "", 1);
    if (c == '}') return emit(TokenKind::close_brace, "", 1);
    if (c == '$') {
      if (i_ + 1 < s_.size() && s_[i_ + 1] == '$') return emit(TokenKind::display_dollar, "", 2);
      return emit(TokenKind::math_dollar, "", 1);
    }
    text_to(i_ + 1);
  }

  void backslash() {
    if (i_ + 1 >= s_.size()) return text_to(i_ + 1);
    if (!is_letter(s_[i_ + 1])) return text_to(i_ + 2);  // control symbol: \{ \$ \% \\ ...
    std::size_t j = i_ + 1;
    while (j < s_.size() && is_letter(s_[j])) ++j;
    const std::string name(s_.substr(i_ + 1, j - i_ - 1));
    if (name == "begin" || name == "end") {
      if (j < s_.size() && s_[j] == '{') {
        std::size_t k = j + 1;
        while (k < s_.size() && s_[k] != '}' && s_[k] != '{' && s_[k] != '\n' && s_[k] != '\\') ++k;
        if (k < s_.size() && s_[k] == '}' && k > j + 1) {
          const std::string env(s_.substr(j + 1, k - j - 1));
          const auto kind = name == "begin" ? TokenKind::begin_env : TokenKind::end_env;
          emit(kind, env, k + 1 - i_);
          if (kind == TokenKind::begin_env && is_verbatim_env(env)) verbatim_body(env);
          return;
        }
      }
    }
    if (name == "verb") {
      std::size_t k = j;
      if (k < s_.size() && s_[k] == '*') ++k;
      if (k < s_.size() && s_[k] != '\n' && !is_letter(s_[k])) {
        const char delim = s_[k];
        const auto close = s_.find(delim, k + 1);
        const auto eol = s_.find('\n', k + 1);
        if (close != std::string_view::npos && (eol == std::string_view::npos || close < eol)) return text_to(close + 1);
      }
    }
    emit(TokenKind::command, name, j - i_);
  }

  // Body up to the matching \end{env} is opaque text; the \end is lexed
  // normally on the next step.
  void verbatim_body(const std::string& env) {
    const std::string closing = "\\end{" + env + "}";
    const auto at = s_.find(closing, i_);
    text_to(at == std::string_view::npos ? s_.size() : at);
  }

  void text_to(std::size_t end) {
    if (text_start_ == npos) {
      text_start_ = i_;
      text_line_ = line_;
    }
    advance_to(end);
  }

  void flush_text() {
    if (text_start_ == npos) return;
    events_.push_back({TokenKind::text, "", text_start_, i_ - text_start_, text_line_});
    text_start_ = npos;
  }

  void emit(TokenKind kind, std::string name, std::size_t length) {
    flush_text();
    events_.push_back({kind, std::move(name), i_, length, line_});
    advance_to(i_ + length);
  }

  void advance_to(std::size_t end) {
    for (; i_ < end; ++i_) {
      if (s_[i_] == '\n') ++line_;
    }
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::string_view s_;
  std::size_t i_ = 0;
  std::size_t line_ = 1;
  std::size_t text_start_ = npos;
  std::size_t text_line_ = 1;
  std::vector<TokenEvent> events_;
};

}  // namespace detail

// Every input byte belongs to exactly one event; adjacent plain bytes,
// escaped characters, comments and verbatim bodies merge into text events.
inline std::vector<TokenEvent> lex(std::string_view text) { return detail::Lexer(text).run(); }

// ---- structure check -------------------------------------------------------

enum class DefectCode { UnclosedEnvironment, UnopenedEnd, MismatchedEnvironment, BraceImbalance, MathParity };

inline const char* to_string(DefectCode c) {
  switch (c) {
    case DefectCode::UnclosedEnvironment: return "UnclosedEnvironment";
    case DefectCode::UnopenedEnd: return "UnopenedEnd";
    case DefectCode::MismatchedEnvironment: return "MismatchedEnvironment";
    case DefectCode::BraceImbalance: return "BraceImbalance";
    case DefectCode::MathParity: return "MathParity";
  }
  return "?";
}

struct Defect {
  DefectCode code;
  std::string detail;
  std::size_t byte_offset = 0;

  friend bool operator==(const Defect&, const Defect&) = default;
};

struct ValidationStats {
  std::size_t env_opens = 0;
  std::size_t env_closes = 0;
  std::size_t max_brace_depth = 0;
  std::size_t chars_scanned = 0;  // bytes
  std::size_t sentences = 0;
  std::size_t well_formed_sentences = 0;
};

struct ValidationReport {
  std::vector<Defect> defects;  // sorted by byte offset
  ValidationStats stats;

  bool clean() const { return defects.empty(); }
  std::size_t count(DefectCode code) const {
    return static_cast<std::size_t>(std::count_if(defects.begin(), defects.end(), [code](const Defect& d) { return d.code == code; }));
  }
};

// Pushdown check over lexer events. Environments must close in LIFO order.
// An \end{x} that skips over an open y is a crossing (MismatchedEnvironment)
// when a later \end{y} still comes before any new \begin{y}; otherwise the
// skipped environments are reported unclosed. Braces are tracked on their own
// stack. `$` and `$$` toggle inline and display math; a toggle of the wrong
// kind is a MathParity defect and closes the open mode.
inline ValidationReport check_structure(const std::vector<TokenEvent>& events) {
  ValidationReport report;
  auto& stats = report.stats;
  struct Frame {
    std::string name;
    std::size_t offset;
  };
  std::vector<Frame> envs;
  std::vector<std::size_t> braces;
  enum class Math { none, inline_math, display } math = Math::none;
  std::size_t math_offset = 0;
  auto defect = [&](DefectCode code, std::string detail, std::size_t offset) {
    report.defects.push_back({code, std::move(detail), offset});
  };
  auto closes_later = [&](std::size_t from, const std::string& name) {
    for (std::size_t k = from + 1; k < events.size(); ++k) {
      if (events[k].name != name) continue;
      if (events[k].kind == TokenKind::end_env) return true;
      if (events[k].kind == TokenKind::begin_env) return false;
    }
    return false;
  };

  for (std::size_t idx = 0; idx < events.size(); ++idx) {
    const auto& e = events[idx];
    stats.chars_scanned += e.length;
    switch (e.kind) {
      case TokenKind::begin_env:
        ++stats.env_opens;
        envs.push_back({e.name, e.byte_offset});
        break;
      case TokenKind::end_env: {
        ++stats.env_closes;
        if (!envs.empty() && envs.back().name == e.name) {
          envs.pop_back();
          break;
        }
        auto it = std::find_if(envs.rbegin(), envs.rend(), [&](const Frame& f) { return f.name == e.name; });
        if (it == envs.rend()) {
          defect(DefectCode::UnopenedEnd, e.name, e.byte_offset);
          break;
        }
        const std::size_t match = static_cast<std::size_t>(envs.rend() - it) - 1;
        if (closes_later(idx, envs.back().name)) {
          defect(DefectCode::MismatchedEnvironment, "\\end{" + e.name + "} while " + envs.back().name + " is open",
                 e.byte_offset);
          envs.erase(envs.begin() + static_cast<std::ptrdiff_t>(match));
        } else {
          for (std::size_t k = match + 1; k < envs.size(); ++k) {
            defect(DefectCode::UnclosedEnvironment, envs[k].name, envs[k].offset);
          }
          envs.resize(match);
        }
        break;
      }
      case TokenKind::open_brace:
        braces.push_back(e.byte_offset);
        stats.max_brace_depth = std::max(stats.max_brace_depth, braces.size());
        break;
      case TokenKind::close_brace:
        if (braces.empty()) {
          defect(DefectCode::BraceImbalance, "unmatched }", e.byte_offset);
        } else {
          braces.pop_back();
        }
        break;
      case TokenKind::math_dollar:
        if (math == Math::none) {
          math = Math::inline_math;
          math_offset = e.byte_offset;
        } else {
          if (math == Math::display) defect(DefectCode::MathParity, "$ closes display math", e.byte_offset);
          math = Math::none;
        }
        break;
      case TokenKind::display_dollar:
        if (math == Math::none) {
          math = Math::display;
          math_offset = e.byte_offset;
        } else {
          if (math == Math::inline_math) defect(DefectCode::MathParity, "$$ closes inline math", e.byte_offset);
          math = Math::none;
        }
        break;
      case TokenKind::command:
      case TokenKind::text:
        break;
    }
  }
  for (const auto& f : envs) defect(DefectCode::UnclosedEnvironment, f.name, f.offset);
  for (const auto offset : braces) defect(DefectCode::BraceImbalance, "unclosed {", offset);
  if (math != Math::none) {
    defect(DefectCode::MathParity, math == Math::display ? "unclosed $$" : "unclosed $", math_offset);
  }
  std::stable_sort(report.defects.begin(), report.defects.end(),
                   [](const Defect& a, const Defect& b) { return a.byte_offset < b.byte_offset; });
  return report;
}

// ---- surface heuristics ------------------------------------------------------

struct SentenceStats {
  std::size_t sentences = 0;
  std::size_t well_formed = 0;
};

// Prose is the text outside math with command names dropped. Paragraphs split
// at blank lines, sentences after . ! or ? followed by whitespace. A sentence
// is well formed when it starts with a capital letter and ends with . ! or ?.
inline SentenceStats sentence_stats(std::string_view source, const std::vector<TokenEvent>& events) {
  std::string prose;
  bool in_math = false;
  for (const auto& e : events) {
    switch (e.kind) {
      case TokenKind::math_dollar:
      case TokenKind::display_dollar:
        in_math = !in_math;
        prose += ' ';
        break;
      case TokenKind::text:
        if (!in_math) prose.append(source.substr(e.byte_offset, e.length));
        break;
      default:
        prose += ' ';
        break;
    }
  }
  SentenceStats stats;
  std::string current;
  auto finish = [&] {
    std::size_t a = current.find_first_not_of(" \t\n");
    if (a == std::string::npos) {
      current.clear();
      return;
    }
    std::size_t b = current.find_last_not_of(" \t\n");
    const std::string_view s(current.data() + a, b - a + 1);
    if (std::any_of(s.begin(), s.end(), [](char c) { return detail::is_letter(c); })) {
      ++stats.sentences;
      const bool capital = s.front() >= 'A' && s.front() <= 'Z';
      const bool punct = s.back() == '.' || s.back() == '!' || s.back() == '?';
      if (capital && punct) ++stats.well_formed;
    }
    current.clear();
  };
  for (std::size_t i = 0; i < prose.size(); ++i) {
    const char c = prose[i];
    if (c == '\n' && i + 1 < prose.size() && prose[i + 1] == '\n') {
      finish();
      continue;
    }
    current.push_back(c == '\n' ? ' ' : c);
    if ((c == '.' || c == '!' || c == '?') && (i + 1 == prose.size() || std::isspace(static_cast<unsigned char>(prose[i + 1])))) {
      finish();
    }
  }
  finish();
  return stats;
}

inline ValidationReport validate(std::string_view text) {
  const auto events = lex(text);
  auto report = check_structure(events);
  const auto sentences = sentence_stats(text, events);
  report.stats.sentences = sentences.sentences;
  report.stats.well_formed_sentences = sentences.well_formed;
  return report;
}

// ---- aggregation ---------------------------------------------------------------

struct ValidationSummary {
  std::size_t samples = 0;
  std::size_t total_bytes = 0;
  std::size_t total_defects = 0;
  double defects_per_kb = 0.0;  // per 1024 bytes
  double clean_fraction = 0.0;
  std::map<std::string, std::size_t> histogram;
  std::size_t sentences = 0;
  double well_formed_sentence_fraction = 0.0;  // 0 when no sentences were found
};

inline ValidationSummary score(const std::vector<ValidationReport>& reports) {
  if (reports.empty()) throw EmptyInput("score() needs at least one report");
  ValidationSummary s;
  s.samples = reports.size();
  std::size_t clean = 0, well = 0;
  for (const auto& r : reports) {
    s.total_bytes += r.stats.chars_scanned;
    s.total_defects += r.defects.size();
    if (r.clean()) ++clean;
    for (const auto& d : r.defects) ++s.histogram[to_string(d.code)];
    s.sentences += r.stats.sentences;
    well += r.stats.well_formed_sentences;
  }
  s.defects_per_kb = s.total_bytes == 0 ? 0.0 : static_cast<double>(s.total_defects) / (static_cast<double>(s.total_bytes) / 1024.0);
  s.clean_fraction = static_cast<double>(clean) / static_cast<double>(reports.size());
  s.well_formed_sentence_fraction = s.sentences == 0 ? 0.0 : static_cast<double>(well) / static_cast<double>(s.sentences);
  return s;
}

inline nlohmann::json to_json(const ValidationReport& r) {
  nlohmann::json defects = nlohmann::json::array();
  for (const auto& d : r.defects) {
    defects.push_back({{"code", to_string(d.code)}, {"detail", d.detail}, {"byte_offset", d.byte_offset}});
  }
  return {{"defects", defects},
          {"stats",
           {{"env_opens", r.stats.env_opens},
            {"env_closes", r.stats.env_closes},
            {"max_brace_depth", r.stats.max_brace_depth},
            {"chars_scanned", r.stats.chars_scanned},
            {"sentences", r.stats.sentences},
            {"well_formed_sentences", r.stats.well_formed_sentences}}}};
}

inline nlohmann::json to_json(const ValidationSummary& s) {
  return {{"samples", s.samples},
          {"total_bytes", s.total_bytes},
          {"total_defects", s.total_defects},
          {"defects_per_kb", s.defects_per_kb},
          {"clean_fraction", s.clean_fraction},
          {"histogram", s.histogram},
          {"sentences", s.sentences},
          {"well_formed_sentence_fraction", s.well_formed_sentence_fraction}};
}

}  // namespace charlm::latex
