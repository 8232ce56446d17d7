#pragma once

#include <filesystem>
#include <iosfwd>

#include "aslip/dsp.hpp"

namespace aslip::dsp {

/// RIFF/WAVE, IEEE float 32-bit little-endian, interleaved channels.
void write_wav(const std::filesystem::path& path, const AudioBuffer& buffer);
void write_wav(std::ostream& out, const AudioBuffer& buffer);

/// Accepts format tag 3 (IEEE float) or WAVE_FORMAT_EXTENSIBLE with a float subformat.
AudioBuffer read_wav(const std::filesystem::path& path);
AudioBuffer read_wav(std::istream& in);

}  // namespace aslip::dsp
