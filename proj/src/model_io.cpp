#include <array>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

#include "sb/model.hpp"

namespace sb::model {

namespace {

constexpr std::array<char, 8> kMagic = {'S', 'B', 'P', 'A', 'R', 'A', 'M', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ValidationError("params file truncated");
  return v;
}

}  // namespace

void save_params(const std::filesystem::path& path, const ModelParams& params, std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kFormatVersion);
  std::uint32_t count = 0;
  params.visit([&](const std::string&, const Mat&) { ++count; });
  put<std::uint32_t>(out, count);
  params.visit([&](const std::string& name, const Mat& m) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
  if (!out) throw ValidationError("failed writing " + path.string());

  nlohmann::ordered_json side;
  side["format_version"] = kFormatVersion;
  side["layers"] = kLayers;
  side["heads"] = kHeads;
  side["model_dim"] = kModelDim;
  side["ffn_dim"] = kFfnDim;
  side["vocab"] = kVocab;
  side["pool_factor"] = kPoolFactor;
  side["encoder_hidden"] = kEncoderHidden;
  side["encoder_dim"] = kEncoderDim;
  side["video_dim"] = kVideoDim;
  side["max_positions"] = kMaxPositions;
  side["mel_bins"] = audio::kMelBins;
  side["seed"] = seed;
  side["parameter_count"] = params.parameter_count();
  std::ofstream js(path.string() + ".json");
  js << side.dump(2) << '\n';
}

ModelParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open params file " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ValidationError(path.string() + ": not a params file");
  if (get<std::uint32_t>(in) != kFormatVersion) throw ValidationError(path.string() + ": unsupported version");
  const auto count = get<std::uint32_t>(in);
  std::map<std::string, Mat> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rows = get<std::uint32_t>(in);
    const auto cols = get<std::uint32_t>(in);
    Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw ValidationError(path.string() + ": truncated tensor " + name);
    tensors.emplace(std::move(name), std::move(m));
  }
  ModelParams p = ModelParams::initialize(0);
  p.visit([&](const std::string& name, Mat& m) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError(path.string() + ": missing tensor " + name);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) {
      throw ValidationError(path.string() + ": shape mismatch for " + name);
    }
    m = std::move(it->second);
  });
  if (!p.all_finite()) throw ValidationError(path.string() + ": non-finite weights");
  return p;
}

}  // namespace sb::model
