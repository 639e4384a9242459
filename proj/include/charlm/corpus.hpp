#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "charlm/error.hpp"
#include "charlm/rng.hpp"
#include "charlm/utf8.hpp"

namespace charlm {

// ---- comment stripping and include flattening ----------------------------

namespace detail {

// True when the byte at `pos` is preceded by an odd run of backslashes, i.e.
// it is an escaped character like \% rather than the second half of \\.
inline bool is_escaped(std::string_view text, std::size_t pos) {
  std::size_t run = 0;
  while (pos > run && text[pos - run - 1] == '\\') ++run;
  return run % 2 == 1;
}

}  // namespace detail

// Removes every unescaped % through end of line, keeping the newline.
inline std::string strip_comments(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '%' && !detail::is_escaped(text, i)) {
      while (i < text.size() && text[i] != '\n') ++i;
      continue;
    }
    out.push_back(text[i++]);
  }
  return out;
}

// Supplies file text for a path, or nullopt when it does not exist.
using IncludeResolver = std::function<std::optional<std::string>(const std::string&)>;

struct IncludeDirective {
  std::size_t begin = 0;  // offset of the backslash
  std::size_t end = 0;    // one past the closing brace
  std::string target;
};

// \input{p} and \include{p} directives in textual order. Longer command names
// sharing the prefix (\includegraphics, \inputencoding) do not match.
inline std::vector<IncludeDirective> find_includes(std::string_view text) {
  std::vector<IncludeDirective> found;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '\\' || detail::is_escaped(text, i)) continue;
    for (std::string_view cmd : {std::string_view("input"), std::string_view("include")}) {
      if (text.substr(i + 1, cmd.size()) != cmd) continue;
      std::size_t j = i + 1 + cmd.size();
      if (j >= text.size() || text[j] != '{') continue;
      const auto close = text.find('}', j + 1);
      if (close == std::string_view::npos) continue;
      std::string target(text.substr(j + 1, close - j - 1));
      const auto first = target.find_first_not_of(" \t");
      const auto last = target.find_last_not_of(" \t");
      target = first == std::string::npos ? std::string() : target.substr(first, last - first + 1);
      found.push_back({i, close + 1, std::move(target)});
      i = close;
      break;
    }
  }
  return found;
}

namespace detail {

inline std::pair<std::string, std::string> resolve_include(const std::string& target, const IncludeResolver& resolver) {
  if (auto text = resolver(target)) return {target, std::move(*text)};
  const std::string with_ext = target + ".tex";
  if (auto text = resolver(with_ext)) return {with_ext, std::move(*text)};
  throw MissingInclude(target);
}

inline std::string flatten_into(const std::string& name, const std::string& text, const IncludeResolver& resolver,
                                std::vector<std::string>& chain) {
  chain.push_back(name);
  std::string out;
  std::size_t cursor = 0;
  for (const auto& inc : find_includes(text)) {
    out.append(text, cursor, inc.begin - cursor);
    auto [resolved, body] = resolve_include(inc.target, resolver);
    if (std::find(chain.begin(), chain.end(), resolved) != chain.end()) {
      std::string path;
      for (const auto& c : chain) path += c + " -> ";
      throw CyclicInclude(path + resolved);
    }
    out += flatten_into(resolved, body, resolver, chain);
    cursor = inc.end;
  }
  out.append(text, cursor, std::string::npos);
  chain.pop_back();
  return out;
}

}  // namespace detail

// Inlines every \input / \include reachable from root, depth first in textual
// order. Each target is tried as written, then with ".tex" appended.
inline std::string flatten_document(const std::string& root, const IncludeResolver& resolver) {
  auto text = resolver(root);
  if (!text) throw MissingInclude(root);
  std::vector<std::string> chain;
  return detail::flatten_into(root, *text, resolver, chain);
}

// ---- character statistics and filtering ----------------------------------

using CharCounts = std::map<char32_t, std::uint64_t>;

inline CharCounts count_chars(std::u32string_view text) {
  CharCounts counts;
  for (const char32_t c : text) ++counts[c];
  return counts;
}

inline std::set<char32_t> infrequent_chars(const CharCounts& counts, std::uint64_t threshold) {
  std::set<char32_t> rare;
  for (const auto& [c, n] : counts) {
    if (n < threshold) rare.insert(c);
  }
  return rare;
}

inline std::u32string remove_chars(std::u32string_view text, const std::set<char32_t>& removed) {
  std::u32string out;
  out.reserve(text.size());
  for (const char32_t c : text) {
    if (!removed.contains(c)) out.push_back(c);
  }
  return out;
}

struct FilterResult {
  std::u32string text;
  std::set<char32_t> removed;
};

// Deletes every character occurring fewer than `threshold` times. Counts are
// taken once over the whole input, then a single deletion pass runs.
inline FilterResult filter_infrequent(std::u32string_view text, std::uint64_t threshold) {
  auto removed = infrequent_chars(count_chars(text), threshold);
  return {remove_chars(text, removed), std::move(removed)};
}

// ---- vocabulary ------------------------------------------------------------

// Character <-> id bijection, ids assigned in code point order.
class Vocabulary {
 public:
  Vocabulary() = default;

  static Vocabulary build(std::u32string_view text) {
    if (text.empty()) throw EmptyCorpus("cannot build a vocabulary from empty text");
    Vocabulary v;
    for (const auto& [c, n] : count_chars(text)) {
      v.chars_.push_back(c);
      v.counts_.push_back(n);
    }
    v.reindex();
    return v;
  }

  // chars must be strictly increasing; counts may be empty (all zero).
  static Vocabulary from_chars(std::vector<char32_t> chars, std::vector<std::uint64_t> counts = {}) {
    if (chars.empty()) throw EmptyCorpus("empty vocabulary");
    if (!std::is_sorted(chars.begin(), chars.end()) ||
        std::adjacent_find(chars.begin(), chars.end()) != chars.end()) {
      throw InvalidConfig("vocabulary characters must be strictly increasing");
    }
    if (counts.empty()) counts.assign(chars.size(), 0);
    if (counts.size() != chars.size()) throw InvalidConfig("vocabulary counts do not match characters");
    Vocabulary v;
    v.chars_ = std::move(chars);
    v.counts_ = std::move(counts);
    v.reindex();
    return v;
  }

  std::size_t size() const noexcept { return chars_.size(); }
  const std::vector<char32_t>& chars() const noexcept { return chars_; }
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }

  char32_t char_at(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= chars_.size()) throw IndexOutOfRange("vocabulary id " + std::to_string(id));
    return chars_[static_cast<std::size_t>(id)];
  }

  std::optional<std::int32_t> id_of(char32_t c) const {
    auto it = index_.find(c);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(char32_t c) const { return index_.contains(c); }

  std::vector<std::int32_t> encode(std::u32string_view text) const {
    std::vector<std::int32_t> ids;
    ids.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      auto it = index_.find(text[i]);
      if (it == index_.end()) throw UnknownChar(text[i], i);
      ids.push_back(it->second);
    }
    return ids;
  }

  std::vector<std::int32_t> encode_utf8(std::string_view text) const { return encode(utf8::decode(text)); }

  std::u32string decode(std::span<const std::int32_t> ids) const {
    std::u32string out;
    out.reserve(ids.size());
    for (const auto id : ids) out.push_back(char_at(id));
    return out;
  }

  std::string decode_utf8(std::span<const std::int32_t> ids) const { return utf8::encode(decode(ids)); }

  // FNV-1a over the code points in id order. Counts are not part of identity.
  std::uint64_t digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char32_t c : chars_) {
      for (int shift = 0; shift < 32; shift += 8) {
        h ^= (static_cast<std::uint32_t>(c) >> shift) & 0xFF;
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.chars_ == b.chars_ && a.counts_ == b.counts_;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < chars_.size(); ++i) index_[chars_[i]] = static_cast<std::int32_t>(i);
  }

  std::vector<char32_t> chars_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<char32_t, std::int32_t> index_;
};

// ---- corpus stream and batching --------------------------------------------

struct ManifestEntry {
  std::string path;
  std::size_t byte_begin = 0, byte_end = 0;  // span in the UTF-8 stream
  std::size_t char_begin = 0, char_end = 0;  // span in the id stream
};

struct CorpusStream {
  std::vector<std::int32_t> ids;
  Vocabulary vocab;
  std::vector<ManifestEntry> manifest;
};

// Row-major id matrix.
struct IdMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::int32_t> data;

  std::int32_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const std::int32_t> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

struct SegmentBatch {
  IdMatrix inputs;
  IdMatrix targets;
  std::size_t segment_index = 0;
};

namespace detail {

inline SegmentBatch lane_batch(std::span<const std::int32_t> ids, std::size_t lanes, std::size_t lane_len,
                               std::size_t offset, std::size_t len, std::size_t index) {
  SegmentBatch batch;
  batch.segment_index = index;
  batch.inputs = {lanes, len, std::vector<std::int32_t>(lanes * len)};
  batch.targets = {lanes, len, std::vector<std::int32_t>(lanes * len)};
  for (std::size_t b = 0; b < lanes; ++b) {
    const std::int32_t* lane = ids.data() + b * lane_len + offset;
    std::copy_n(lane, len, batch.inputs.data.begin() + b * len);
    std::copy_n(lane + 1, len, batch.targets.data.begin() + b * len);
  }
  return batch;
}

}  // namespace detail

// Splits the stream into batch_size contiguous lanes (remainder dropped) and
// walks them in steps of seq_len, so batch k row b continues batch k-1 row b.
inline std::vector<SegmentBatch> segment_stream(std::span<const std::int32_t> ids, std::size_t seq_len,
                                                std::size_t batch_size) {
  if (seq_len == 0 || batch_size == 0) throw InvalidConfig("seq_len and batch_size must be positive");
  if (ids.size() < batch_size * (seq_len + 1)) {
    throw CorpusTooSmall(std::to_string(ids.size()) + " ids cannot fill " + std::to_string(batch_size) +
                         " lanes of " + std::to_string(seq_len + 1));
  }
  const std::size_t lane_len = ids.size() / batch_size;
  const std::size_t count = (lane_len - 1) / seq_len;
  std::vector<SegmentBatch> batches;
  batches.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    batches.push_back(detail::lane_batch(ids, batch_size, lane_len, k * seq_len, seq_len, k));
  }
  return batches;
}

// Lane layout as above, but each batch draws its length uniformly from
// [ceil(base_len / 2), base_len]; the final batch is clipped to what is left.
inline std::vector<SegmentBatch> segment_stream_variable(std::span<const std::int32_t> ids, std::size_t base_len,
                                                         std::size_t batch_size, Rng& rng) {
  if (base_len == 0 || batch_size == 0) throw InvalidConfig("base_len and batch_size must be positive");
  const std::size_t min_len = (base_len + 1) / 2;
  if (ids.size() < batch_size * (min_len + 1)) {
    throw CorpusTooSmall(std::to_string(ids.size()) + " ids cannot fill " + std::to_string(batch_size) +
                         " lanes of " + std::to_string(min_len + 1));
  }
  const std::size_t lane_len = ids.size() / batch_size;
  std::vector<SegmentBatch> batches;
  std::size_t offset = 0;
  while (offset + 1 < lane_len) {
    auto len = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(base_len)));
    len = std::min(len, lane_len - 1 - offset);
    batches.push_back(detail::lane_batch(ids, batch_size, lane_len, offset, len, batches.size()));
    offset += len;
  }
  return batches;
}

struct StreamSplit {
  std::span<const std::int32_t> train;
  std::span<const std::int32_t> validation;
};

// The final floor(n * val_fraction) ids are validation.
inline StreamSplit split_stream(std::span<const std::int32_t> ids, double val_fraction) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw InvalidConfig("val_fraction must be in [0, 1)");
  const auto n_val = static_cast<std::size_t>(static_cast<double>(ids.size()) * val_fraction);
  return {ids.first(ids.size() - n_val), ids.last(n_val)};
}

// ---- directory build -------------------------------------------------------

struct CorpusOptions {
  std::uint64_t min_count = 100;
  std::u32string separator = U"\n";
  double val_fraction = 0.05;
};

struct CorpusBuild {
  CorpusStream stream;
  std::u32string text;
  std::set<char32_t> removed;
  std::vector<std::string> roots;
  CorpusOptions options;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

// Collects every .tex file under `dir`, strips comments, flattens each root
// document (files not pulled in by another file's \input/\include), joins the
// roots in lexicographic path order with the separator, filters infrequent
// characters and encodes the result.
inline CorpusBuild build_corpus(const std::filesystem::path& dir, const CorpusOptions& options = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");

  std::map<std::string, std::string> files;  // relative path -> stripped text
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".tex") continue;
    files.emplace(fs::relative(entry.path(), dir).generic_string(), strip_comments(read_file(entry.path())));
  }
  if (files.empty()) throw EmptyCorpus("no .tex files under " + dir.string());

  const IncludeResolver resolver = [&files](const std::string& p) -> std::optional<std::string> {
    auto it = files.find(fs::path(p).lexically_normal().generic_string());
    if (it == files.end()) return std::nullopt;
    return it->second;
  };

  std::set<std::string> included;
  for (const auto& [path, text] : files) {
    for (const auto& inc : find_includes(text)) {
      for (const auto& candidate : {inc.target, inc.target + ".tex"}) {
        auto key = fs::path(candidate).lexically_normal().generic_string();
        if (files.contains(key)) {
          included.insert(key);
          break;
        }
      }
    }
  }

  CorpusBuild build;
  build.options = options;
  std::vector<std::u32string> documents;
  for (const auto& [path, text] : files) {
    if (included.contains(path)) continue;
    build.roots.push_back(path);
    documents.push_back(utf8::decode(flatten_document(path, resolver)));
  }
  if (build.roots.empty()) {
    // Every file includes another: a cycle, which flatten reports.
    flatten_document(files.begin()->first, resolver);
  }

  std::u32string joined;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    if (i) joined += options.separator;
    joined += documents[i];
  }
  build.removed = infrequent_chars(count_chars(joined), options.min_count);

  std::size_t bytes = 0;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    if (i) {
      for (const char32_t c : remove_chars(options.separator, build.removed)) {
        build.text.push_back(c);
        bytes += utf8::encoded_size(c);
      }
    }
    ManifestEntry entry{build.roots[i], bytes, bytes, build.text.size(), build.text.size()};
    for (const char32_t c : remove_chars(documents[i], build.removed)) {
      build.text.push_back(c);
      bytes += utf8::encoded_size(c);
    }
    entry.byte_end = bytes;
    entry.char_end = build.text.size();
    build.stream.manifest.push_back(std::move(entry));
  }
  if (build.text.empty()) throw EmptyCorpus("corpus is empty after filtering");
  build.stream.vocab = Vocabulary::build(build.text);
  build.stream.ids = build.stream.vocab.encode(build.text);
  return build;
}

}  // namespace charlm
