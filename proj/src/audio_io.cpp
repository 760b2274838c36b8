#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sb/audio.hpp"

namespace sb::audio {

namespace {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

constexpr std::array<char, 8> kPerturbationMagic = {'S', 'B', 'P', 'E', 'R', 'T', '0', '1'};

template <typename T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw AudioError("unexpected end of file");
  return value;
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError("cannot open " + path.string());
  char riff[4];
  in.read(riff, 4);
  (void)get<std::uint32_t>(in);
  char wave[4];
  in.read(wave, 4);
  if (!in || std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0) {
    throw AudioError(path.string() + ": not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  while (true) {
    char id[4];
    in.read(id, 4);
    if (!in) throw AudioError(path.string() + ": no data chunk");
    const auto size = get<std::uint32_t>(in);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      format = get<std::uint16_t>(in);
      channels = get<std::uint16_t>(in);
      rate = get<std::uint32_t>(in);
      (void)get<std::uint32_t>(in);
      (void)get<std::uint16_t>(in);
      bits = get<std::uint16_t>(in);
      if (size > 16) in.seekg(size - 16 + (size & 1U), std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw AudioError(path.string() + ": data chunk before fmt chunk");
      if (format != 1 || channels != 1 || bits != 16 || rate != kSampleRate) {
        throw AudioError(path.string() + ": expected 16-bit PCM mono at 16 kHz");
      }
      Waveform w;
      w.samples.resize(size / 2);
      for (double& s : w.samples) s = static_cast<double>(get<std::int16_t>(in)) / kPcmScale;
      return w;
    } else {
      in.seekg(size + (size & 1U), std::ios::cur);
    }
  }
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AudioError("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  out.write("RIFF", 4);
  put<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put<std::uint32_t>(out, 16);
  put<std::uint16_t>(out, 1);
  put<std::uint16_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  put<std::uint16_t>(out, 2);
  put<std::uint16_t>(out, 16);
  out.write("data", 4);
  put<std::uint32_t>(out, data_bytes);
  for (double s : w.samples) {
    const double q = std::clamp(std::round(s * kPcmScale), -32768.0, 32767.0);
    put<std::int16_t>(out, static_cast<std::int16_t>(q));
  }
}

void write_perturbation(const std::filesystem::path& path, const Perturbation& delta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AudioError("cannot write " + path.string());
  out.write(kPerturbationMagic.data(), kPerturbationMagic.size());
  put<std::uint64_t>(out, delta.values.size());
  out.write(reinterpret_cast<const char*>(delta.values.data()),
            static_cast<std::streamsize>(delta.values.size() * sizeof(double)));
  if (!out) throw AudioError("failed writing " + path.string());
}

Perturbation read_perturbation(const std::filesystem::path& path, double budget) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError("cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kPerturbationMagic) throw AudioError(path.string() + ": bad perturbation magic");
  const auto length = get<std::uint64_t>(in);
  Perturbation p(std::vector<double>(length), budget);
  in.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(length * sizeof(double)));
  if (!in) throw AudioError(path.string() + ": truncated perturbation");
  return p;
}

}  // namespace sb::audio
