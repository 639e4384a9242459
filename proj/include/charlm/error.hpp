#pragma once

#include <stdexcept>
#include <string>

namespace charlm {

// Base of every error the library raises. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CHARLM_DEFINE_ERROR(Name)                       \
  class Name : public Error {                           \
   public:                                              \
    explicit Name(const std::string& what)              \
        : Error(std::string(#Name ": ") + what) {}      \
  }

CHARLM_DEFINE_ERROR(ShapeMismatch);
CHARLM_DEFINE_ERROR(IndexOutOfRange);
CHARLM_DEFINE_ERROR(NotScalar);
CHARLM_DEFINE_ERROR(NonFiniteValue);
CHARLM_DEFINE_ERROR(NonFiniteGradient);
CHARLM_DEFINE_ERROR(InvalidConfig);
CHARLM_DEFINE_ERROR(LayerCountMismatch);
CHARLM_DEFINE_ERROR(EmptyCorpus);
CHARLM_DEFINE_ERROR(CorpusTooSmall);
CHARLM_DEFINE_ERROR(MissingInclude);
CHARLM_DEFINE_ERROR(CyclicInclude);
CHARLM_DEFINE_ERROR(EmptySplit);
CHARLM_DEFINE_ERROR(NegativeInput);
CHARLM_DEFINE_ERROR(NonPositiveTemperature);
CHARLM_DEFINE_ERROR(InvalidDistribution);
CHARLM_DEFINE_ERROR(UnknownPreset);
CHARLM_DEFINE_ERROR(CorruptCheckpoint);
CHARLM_DEFINE_ERROR(VocabularyMismatch);
CHARLM_DEFINE_ERROR(EmptyInput);
CHARLM_DEFINE_ERROR(IoError);

#undef CHARLM_DEFINE_ERROR

// Out-of-vocabulary character; carries the code point and its offset in the
// input (in characters, not bytes).
class UnknownChar : public Error {
 public:
  UnknownChar(char32_t ch, std::size_t offset)
      : Error("UnknownChar: U+" + hex(ch) + " at offset " + std::to_string(offset)),
        ch_(ch),
        offset_(offset) {}

  char32_t character() const noexcept { return ch_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  static std::string hex(char32_t c) {
    static const char* digits = "0123456789ABCDEF";
    std::string out;
    for (int shift = 20; shift >= 0; shift -= 4) {
      out.push_back(digits[(c >> shift) & 0xF]);
    }
    while (out.size() > 4 && out.front() == '0') out.erase(out.begin());
    return out;
  }

  char32_t ch_;
  std::size_t offset_;
};

}  // namespace charlm
