#include <cctype>
#include <sstream>

#include "ebnet/arch/arch.hpp"

namespace ebnet::arch {

namespace {

class Cursor {
 public:
  explicit Cursor(std::string_view text) : text_(text) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("arch '" + std::string(text_) + "': " + what, pos_);
  }

  int digit() {
    if (pos_ >= text_.size() || !std::isdigit(static_cast<unsigned char>(text_[pos_]))) fail("expected a digit");
    return text_[pos_++] - '0';
  }

  int integer() {
    if (pos_ >= text_.size() || !std::isdigit(static_cast<unsigned char>(text_[pos_]))) fail("expected an integer");
    long v = 0;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      v = v * 10 + (text_[pos_++] - '0');
      if (v > 1'000'000) fail("integer too large");
    }
    return static_cast<int>(v);
  }

  void expect(char c) {
    if (pos_ >= text_.size() || text_[pos_] != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  bool done() const { return pos_ == text_.size(); }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

void ArchSpec::validate() const {
  for (int i = 0; i < 4; ++i) {
    if (blocks[i] < 1) throw ConfigError("stage " + std::to_string(i) + " needs at least one block");
    if (groups[i] < 1) throw ConfigError("stage " + std::to_string(i) + " group count must be >= 1");
  }
  if (expansion < 1) throw ConfigError("width expansion must be >= 1");
  if (n_experts < 1) throw ConfigError("at least one expert required");
  if (base_width < 1 || classes < 1 || in_channels < 1) throw ConfigError("widths and class count must be positive");
  if (input_resolution < 8) throw ConfigError("input resolution too small");
  for (int i = 0; i < 4; ++i)
    if (stage_width(i) % groups[i] != 0)
      throw ConfigError("stage " + std::to_string(i) + " width " + std::to_string(stage_width(i)) +
                        " not divisible by groups " + std::to_string(groups[i]));
  if (stem_width() % groups[0] != 0)
    throw ConfigError("stem width " + std::to_string(stem_width()) + " not divisible by stage-0 groups " +
                      std::to_string(groups[0]));
  if (downsample_ratio() > 1) {
    Index ci = stem_width();
    for (int i = 0; i < 4; ++i) {
      if (ci != stage_width(i) && ci % downsample_ratio() != 0)
        throw ConfigError("downsample input width " + std::to_string(ci) + " not divisible by reduction ratio " +
                          std::to_string(downsample_ratio()));
      ci = stage_width(i);
    }
  }
}

ArchSpec parse_arch(std::string_view text) {
  Cursor cur(text);
  ArchSpec spec;
  for (int i = 0; i < 4; ++i) spec.blocks[i] = cur.digit();
  cur.expect('-');
  spec.expansion = cur.integer();
  cur.expect('-');
  for (int i = 0; i < 4; ++i) {
    if (i > 0) cur.expect(':');
    spec.groups[i] = cur.integer();
  }
  if (!cur.done()) cur.fail("trailing characters");
  spec.validate();
  return spec;
}

std::string format_arch(const ArchSpec& spec) {
  std::ostringstream os;
  for (int b : spec.blocks) os << b;
  os << '-' << spec.expansion << '-';
  for (int i = 0; i < 4; ++i) os << (i ? ":" : "") << spec.groups[i];
  return os.str();
}

std::string_view to_string(Stem s) { return s == Stem::imagenet7x7 ? "imagenet7x7" : "cifar3x3"; }

std::string_view to_string(GroupMix g) {
  switch (g) {
    case GroupMix::off: return "off";
    case GroupMix::automatic: return "auto";
    case GroupMix::all: return "all";
  }
  return "auto";
}

std::string_view to_string(DownsampleVariant v) {
  switch (v) {
    case DownsampleVariant::vanilla: return "vanilla";
    case DownsampleVariant::linear: return "linear";
    case DownsampleVariant::relu: return "relu";
    case DownsampleVariant::prelu: return "prelu";
  }
  return "prelu";
}

Stem parse_stem(std::string_view s) {
  if (s == "imagenet7x7" || s == "imagenet") return Stem::imagenet7x7;
  if (s == "cifar3x3" || s == "cifar") return Stem::cifar3x3;
  throw ConfigError("unknown stem '" + std::string(s) + "'");
}

GroupMix parse_group_mix(std::string_view s) {
  if (s == "off" || s == "false" || s == "0") return GroupMix::off;
  if (s == "auto") return GroupMix::automatic;
  if (s == "all" || s == "on" || s == "true" || s == "1") return GroupMix::all;
  throw ConfigError("unknown group-mix mode '" + std::string(s) + "'");
}

DownsampleVariant parse_downsample(std::string_view s) {
  if (s == "vanilla") return DownsampleVariant::vanilla;
  if (s == "linear") return DownsampleVariant::linear;
  if (s == "relu") return DownsampleVariant::relu;
  if (s == "prelu") return DownsampleVariant::prelu;
  throw ConfigError("unknown downsample variant '" + std::string(s) + "'");
}

}  // namespace ebnet::arch
