#include "aslip/wav.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "aslip/error.hpp"

namespace aslip::dsp {

static_assert(std::endian::native == std::endian::little, "WAV I/O assumes a little-endian host");

namespace {

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_u16(std::ostream& out, std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); }

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("truncated WAV header");
  return v;
}

constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

}  // namespace

void write_wav(std::ostream& out, const AudioBuffer& buffer) {
  const auto channels = static_cast<std::uint32_t>(buffer.channel_count());
  const auto frames = static_cast<std::uint32_t>(buffer.length());
  const std::uint32_t data_bytes = frames * channels * 4;
  const auto rate = static_cast<std::uint32_t>(buffer.sample_rate);

  out.write("RIFF", 4);
  put_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(out, 16);
  put_u16(out, kFormatFloat);
  put_u16(out, static_cast<std::uint16_t>(channels));
  put_u32(out, rate);
  put_u32(out, rate * channels * 4);
  put_u16(out, static_cast<std::uint16_t>(channels * 4));
  put_u16(out, 32);
  out.write("data", 4);
  put_u32(out, data_bytes);

  std::vector<float> interleaved(static_cast<std::size_t>(frames) * channels);
  for (std::uint32_t i = 0; i < frames; ++i) {
    for (std::uint32_t c = 0; c < channels; ++c) interleaved[i * channels + c] = buffer.samples(i, c);
  }
  out.write(reinterpret_cast<const char*>(interleaved.data()),
            static_cast<std::streamsize>(interleaved.size() * sizeof(float)));
  if (!out) throw EnvironmentError("failed writing WAV data");
}

void write_wav(const std::filesystem::path& path, const AudioBuffer& buffer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw EnvironmentError("cannot open " + path.string() + " for writing");
  write_wav(out, buffer);
}

AudioBuffer read_wav(std::istream& in) {
  std::array<char, 4> tag{};
  in.read(tag.data(), 4);
  if (!in || std::memcmp(tag.data(), "RIFF", 4) != 0) throw FormatError("not a RIFF file");
  (void)get<std::uint32_t>(in);
  in.read(tag.data(), 4);
  if (!in || std::memcmp(tag.data(), "WAVE", 4) != 0) throw FormatError("not a WAVE file");

  std::uint16_t channels = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (true) {
    in.read(tag.data(), 4);
    if (!in) throw FormatError("WAV file has no data chunk");
    const auto size = get<std::uint32_t>(in);
    if (std::memcmp(tag.data(), "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("short fmt chunk");
      auto format = get<std::uint16_t>(in);
      channels = get<std::uint16_t>(in);
      rate = get<std::uint32_t>(in);
      (void)get<std::uint32_t>(in);
      (void)get<std::uint16_t>(in);
      const auto bits = get<std::uint16_t>(in);
      std::uint32_t consumed = 16;
      if (format == kFormatExtensible && size >= 40) {
        (void)get<std::uint16_t>(in);  // cbSize
        (void)get<std::uint16_t>(in);  // valid bits
        (void)get<std::uint32_t>(in);  // channel mask
        format = get<std::uint16_t>(in);  // first two bytes of the subformat GUID
        consumed = 26;
      }
      if (format != kFormatFloat || bits != 32) {
        throw FormatError("only 32-bit IEEE float WAV is supported");
      }
      if (channels == 0) throw FormatError("WAV declares zero channels");
      in.ignore(size - consumed + (size & 1u));
      have_fmt = true;
    } else if (std::memcmp(tag.data(), "data", 4) == 0) {
      if (!have_fmt) throw FormatError("data chunk before fmt chunk");
      const std::uint32_t frames = size / (4u * channels);
      std::vector<float> interleaved(static_cast<std::size_t>(frames) * channels);
      in.read(reinterpret_cast<char*>(interleaved.data()),
              static_cast<std::streamsize>(interleaved.size() * sizeof(float)));
      if (!in) throw FormatError("truncated WAV data");
      AudioBuffer buffer = AudioBuffer::zeros(channels, frames, rate);
      for (std::uint32_t i = 0; i < frames; ++i) {
        for (std::uint32_t c = 0; c < channels; ++c) buffer.samples(i, c) = interleaved[i * channels + c];
      }
      return buffer;
    } else {
      in.ignore(size + (size & 1u));
    }
  }
}

AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EnvironmentError("cannot open " + path.string());
  return read_wav(in);
}

}  // namespace aslip::dsp
