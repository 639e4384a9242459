#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "charlm/corpus.hpp"

// On-disk corpus directory: corpus.txt (cleaned UTF-8 stream), vocab.json and
// manifest.json.

namespace charlm {

struct CorpusFiles {
  Vocabulary vocab;
  std::vector<std::int32_t> ids;
  std::size_t train_size = 0;  // ids[0, train_size) train, the rest validation
  std::uint64_t min_count = 0;
  std::string separator;
  std::vector<ManifestEntry> manifest;

  std::span<const std::int32_t> train() const { return std::span<const std::int32_t>(ids).first(train_size); }
  std::span<const std::int32_t> validation() const { return std::span<const std::int32_t>(ids).subspan(train_size); }
};

inline nlohmann::json vocab_json(const Vocabulary& vocab, std::uint64_t threshold, std::u32string_view separator) {
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    std::string ch;
    utf8::append(ch, vocab.chars()[i]);
    entries.push_back({{"char", ch}, {"id", i}, {"count", vocab.counts()[i]}});
  }
  return {{"vocab", entries}, {"threshold", threshold}, {"separator", utf8::encode(separator)}};
}

inline Vocabulary vocab_from_file_json(const nlohmann::json& j) {
  std::vector<char32_t> chars;
  std::vector<std::uint64_t> counts;
  for (const auto& e : j.at("vocab")) {
    const auto cps = utf8::decode(e.at("char").get<std::string>());
    if (cps.size() != 1) throw InvalidConfig("vocab entry is not a single character");
    if (e.at("id").get<std::size_t>() != chars.size()) throw InvalidConfig("vocab ids are not in order");
    chars.push_back(cps[0]);
    counts.push_back(e.at("count").get<std::uint64_t>());
  }
  return Vocabulary::from_chars(std::move(chars), std::move(counts));
}

inline void write_corpus_dir(const CorpusBuild& build, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  const auto text = utf8::encode(build.text);
  write_file(out / "corpus.txt", text);
  write_file(out / "vocab.json", vocab_json(build.stream.vocab, build.options.min_count, build.options.separator).dump(2) + "\n");

  const auto split = split_stream(build.stream.ids, build.options.val_fraction);
  nlohmann::json docs = nlohmann::json::array();
  for (const auto& m : build.stream.manifest) {
    docs.push_back({{"path", m.path},
                    {"byte_begin", m.byte_begin},
                    {"byte_end", m.byte_end},
                    {"char_begin", m.char_begin},
                    {"char_end", m.char_end}});
  }
  nlohmann::json removed = nlohmann::json::array();
  for (const char32_t c : build.removed) removed.push_back(static_cast<std::uint32_t>(c));
  const nlohmann::json manifest = {{"documents", docs},
                                   {"total_chars", build.stream.ids.size()},
                                   {"total_bytes", text.size()},
                                   {"train_chars", split.train.size()},
                                   {"validation_chars", split.validation.size()},
                                   {"val_fraction", build.options.val_fraction},
                                   {"min_count", build.options.min_count},
                                   {"removed_code_points", removed},
                                   {"vocab_digest", build.stream.vocab.digest()}};
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
}

inline CorpusFiles load_corpus_dir(const std::filesystem::path& dir) {
  CorpusFiles files;
  try {
    const auto vj = nlohmann::json::parse(read_file(dir / "vocab.json"));
    const auto mj = nlohmann::json::parse(read_file(dir / "manifest.json"));
    files.vocab = vocab_from_file_json(vj);
    files.min_count = vj.at("threshold").get<std::uint64_t>();
    files.separator = vj.at("separator").get<std::string>();
    files.ids = files.vocab.encode_utf8(read_file(dir / "corpus.txt"));
    files.train_size = mj.at("train_chars").get<std::size_t>();
    for (const auto& d : mj.at("documents")) {
      files.manifest.push_back({d.at("path").get<std::string>(), d.at("byte_begin").get<std::size_t>(),
                                d.at("byte_end").get<std::size_t>(), d.at("char_begin").get<std::size_t>(),
                                d.at("char_end").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed corpus directory " + dir.string() + ": " + e.what());
  }
  if (files.train_size > files.ids.size()) throw IoError("manifest train_chars exceeds corpus length");
  return files;
}

}  // namespace charlm
