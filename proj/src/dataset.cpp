#include "sb/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace sb::data {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

constexpr std::uint64_t kPrototypeStream = 0x766964656fULL;
constexpr std::uint64_t kVideoNoiseStream = 0x766e6f697365ULL;

enum Word : int { kWhat = 1, kDo, kYou, kHear, kSee, kAnd, kQuestionMark };

ordered_json descriptor_json(const ExampleDescriptor& d) {
  return {{"id", d.id},
          {"question", to_string(d.question)},
          {"audio_class", d.audio_class},
          {"video_class", d.video_class},
          {"amplitude", d.amplitude},
          {"phase", d.phase},
          {"noise_seed", d.noise_seed}};
}

ExampleDescriptor descriptor_from_json(const json& j) {
  ExampleDescriptor d;
  d.id = j.at("id").get<std::string>();
  d.question = parse_template(j.at("question").get<std::string>());
  d.audio_class = j.at("audio_class").get<std::size_t>();
  d.video_class = j.at("video_class").get<std::size_t>();
  d.amplitude = j.at("amplitude").get<double>();
  d.phase = j.at("phase").get<double>();
  d.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  return d;
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::string to_string(Template t) {
  switch (t) {
    case Template::ask_audio: return "ask-audio";
    case Template::ask_video: return "ask-video";
    case Template::ask_both: return "ask-both";
  }
  return "unknown";
}

Template parse_template(const std::string& name) {
  for (Template t : {Template::ask_audio, Template::ask_video, Template::ask_both}) {
    if (to_string(t) == name) return t;
  }
  throw ValidationError("unknown question template '" + name + "'");
}

void DatasetSpec::validate() const {
  if (n_examples < 10) throw ValidationError("n_examples must be >= 10");
  if (audio_classes() < 2 || video_classes < 2) throw ValidationError("need at least two audio and two video classes");
  const std::size_t answers = audio_classes() + video_classes + audio_classes() * video_classes;
  if (kAnswerBase + answers > model::kVocab) throw ValidationError("answer tokens do not fit the vocabulary");
  for (double f : tone_frequencies) {
    if (!(f > 0.0 && f < audio::kSampleRate / 2.0)) throw ValidationError("tone frequency outside (0, 8000) Hz");
  }
  if (!(audio_duration_s > 0.0) || audio_duration_s * audio::kSampleRate < audio::kFrameLength) {
    throw ValidationError("audio_duration_s too short for one frame");
  }
  if (video_tokens < 1) throw ValidationError("video_tokens must be >= 1");
  if (!(tone_amplitude_min > 0.0 && tone_amplitude_min <= tone_amplitude_max)) {
    throw ValidationError("bad tone amplitude range");
  }
}

ordered_json to_json(const DatasetSpec& s) {
  return {{"n_examples", s.n_examples},
          {"tone_frequencies", s.tone_frequencies},
          {"video_classes", s.video_classes},
          {"video_tokens", s.video_tokens},
          {"audio_duration_s", s.audio_duration_s},
          {"tone_amplitude_min", s.tone_amplitude_min},
          {"tone_amplitude_max", s.tone_amplitude_max},
          {"audio_noise", s.audio_noise},
          {"video_noise", s.video_noise},
          {"seed", s.seed}};
}

DatasetSpec spec_from_json(const json& j) {
  DatasetSpec s;
  try {
    s.n_examples = j.value("n_examples", s.n_examples);
    s.tone_frequencies = j.value("tone_frequencies", s.tone_frequencies);
    s.video_classes = j.value("video_classes", s.video_classes);
    s.video_tokens = j.value("video_tokens", s.video_tokens);
    s.audio_duration_s = j.value("audio_duration_s", s.audio_duration_s);
    s.tone_amplitude_min = j.value("tone_amplitude_min", s.tone_amplitude_min);
    s.tone_amplitude_max = j.value("tone_amplitude_max", s.tone_amplitude_max);
    s.audio_noise = j.value("audio_noise", s.audio_noise);
    s.video_noise = j.value("video_noise", s.video_noise);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("dataset spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<int> question_tokens(Template t) {
  switch (t) {
    case Template::ask_audio: return {kWhat, kDo, kYou, kHear, kQuestionMark};
    case Template::ask_video: return {kWhat, kDo, kYou, kSee, kQuestionMark};
    case Template::ask_both: return {kWhat, kDo, kYou, kHear, kAnd, kSee, kQuestionMark};
  }
  return {};
}

int answer_token(const DatasetSpec& spec, Template t, std::size_t audio_class, std::size_t video_class) {
  const int ka = static_cast<int>(spec.audio_classes());
  const int kv = static_cast<int>(spec.video_classes);
  const int a = static_cast<int>(audio_class);
  const int v = static_cast<int>(video_class);
  switch (t) {
    case Template::ask_audio: return kAnswerBase + a;
    case Template::ask_video: return kAnswerBase + ka + v;
    case Template::ask_both: return kAnswerBase + ka + kv + a * kv + v;
  }
  return -1;
}

Splits generate(const DatasetSpec& spec) {
  spec.validate();
  const std::size_t ka = spec.audio_classes();
  const std::size_t kv = spec.video_classes;
  std::vector<ExampleDescriptor> all(spec.n_examples);
  for (std::size_t i = 0; i < spec.n_examples; ++i) {
    all[i].question = static_cast<Template>(i % 3);
    all[i].audio_class = (i / 3) % ka;
    all[i].video_class = (i / (3 * ka)) % kv;
  }
  std::mt19937_64 rng(mix(spec.seed, 1));
  std::shuffle(all.begin(), all.end(), rng);
  for (std::size_t i = 0; i < all.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "ex%05zu", i);
    all[i].id = id;
    all[i].amplitude = spec.tone_amplitude_min + (spec.tone_amplitude_max - spec.tone_amplitude_min) * unit(rng);
    all[i].phase = 2.0 * std::numbers::pi * unit(rng);
    all[i].noise_seed = rng();
  }
  const std::size_t n_train = spec.n_examples * 8 / 10;
  const std::size_t n_val = spec.n_examples / 10;
  Splits s;
  s.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
               all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), all.end());
  return s;
}

Mat video_prototype(const DatasetSpec& spec, std::size_t video_class) {
  std::mt19937_64 rng(mix(mix(spec.seed, kPrototypeStream), video_class));
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat m(static_cast<Eigen::Index>(spec.video_tokens), static_cast<Eigen::Index>(model::kVideoDim));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

audio::Waveform synthesize_audio(const DatasetSpec& spec, const ExampleDescriptor& d) {
  const auto n = static_cast<std::size_t>(std::llround(spec.audio_duration_s * audio::kSampleRate));
  const double freq = spec.tone_frequencies.at(d.audio_class);
  std::mt19937_64 rng(d.noise_seed);
  std::vector<double> x(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double phase = 2.0 * std::numbers::pi * freq * static_cast<double>(t) / audio::kSampleRate + d.phase;
    x[t] = d.amplitude * std::sin(phase) + spec.audio_noise * (2.0 * unit(rng) - 1.0);
  }
  return audio::Waveform(std::move(x));
}

model::TrimodalExample materialize(const DatasetSpec& spec, const ExampleDescriptor& d) {
  model::TrimodalExample ex;
  ex.id = d.id;
  ex.audio = synthesize_audio(spec, d);
  ex.video_features = video_prototype(spec, d.video_class);
  std::mt19937_64 rng(mix(d.noise_seed, kVideoNoiseStream));
  std::normal_distribution<double> dist(0.0, spec.video_noise);
  for (Eigen::Index i = 0; i < ex.video_features.size(); ++i) ex.video_features.data()[i] += dist(rng);
  ex.question_tokens = question_tokens(d.question);
  ex.answer_tokens = {answer_token(spec, d.question, d.audio_class, d.video_class)};
  return ex;
}

std::vector<model::TrimodalExample> materialize(const DatasetSpec& spec, const std::vector<ExampleDescriptor>& ds) {
  std::vector<model::TrimodalExample> out;
  out.reserve(ds.size());
  for (const auto& d : ds) out.push_back(materialize(spec, d));
  return out;
}

void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, const Splits& splits) {
  std::filesystem::create_directories(dir);
  write_json(dir / "spec.json", to_json(spec));
  auto dump = [&](const char* name, const std::vector<ExampleDescriptor>& ds) {
    ordered_json arr = ordered_json::array();
    for (const auto& d : ds) arr.push_back(descriptor_json(d));
    write_json(dir / name, arr);
  };
  dump("train.json", splits.train);
  dump("val.json", splits.val);
  dump("test.json", splits.test);
}

LoadedDataset read_dataset(const std::filesystem::path& dir) {
  LoadedDataset out;
  out.spec = spec_from_json(read_json(dir / "spec.json"));
  auto load = [&](const char* name) {
    std::vector<ExampleDescriptor> ds;
    try {
      for (const auto& j : read_json(dir / name)) {
        ExampleDescriptor d = descriptor_from_json(j);
        if (d.audio_class >= out.spec.audio_classes() || d.video_class >= out.spec.video_classes) {
          throw ValidationError("class index out of range in " + std::string(name));
        }
        ds.push_back(std::move(d));
      }
    } catch (const json::exception& e) {
      throw ValidationError(std::string(name) + ": " + e.what());
    }
    return ds;
  };
  out.splits.train = load("train.json");
  out.splits.val = load("val.json");
  out.splits.test = load("test.json");
  return out;
}

}  // namespace sb::data
