#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sb/model.hpp"

namespace sb::data {

enum class Template { ask_audio, ask_video, ask_both };

std::string to_string(Template t);
Template parse_template(const std::string& name);

// Fixed vocabulary layout: question words below kAnswerBase, answers at or above it.
inline constexpr int kAnswerBase = 32;

struct DatasetSpec {
  std::size_t n_examples = 2000;
  std::vector<double> tone_frequencies = {400.0, 800.0, 1600.0, 3200.0};  // one audio class per entry
  std::size_t video_classes = 4;
  std::size_t video_tokens = 4;
  double audio_duration_s = 2.0;
  double tone_amplitude_min = 0.4;
  double tone_amplitude_max = 0.8;
  double audio_noise = 0.02;  // uniform noise amplitude
  double video_noise = 0.3;   // gaussian std around the prototype
  std::uint64_t seed = 42;

  std::size_t audio_classes() const { return tone_frequencies.size(); }
  void validate() const;
};

nlohmann::ordered_json to_json(const DatasetSpec& s);
DatasetSpec spec_from_json(const nlohmann::json& j);

/// Compact, regenerable description of one example.
struct ExampleDescriptor {
  std::string id;
  Template question = Template::ask_audio;
  std::size_t audio_class = 0;
  std::size_t video_class = 0;
  double amplitude = 0.5;
  double phase = 0.0;
  std::uint64_t noise_seed = 0;
};

std::vector<int> question_tokens(Template t);
int answer_token(const DatasetSpec& spec, Template t, std::size_t audio_class, std::size_t video_class);

struct Splits {
  std::vector<ExampleDescriptor> train, val, test;
};

/// Balanced class/template assignment, seeded shuffle, 80/10/10 split.
Splits generate(const DatasetSpec& spec);

/// Class prototype rows for the video features, (video_tokens, kVideoDim).
Mat video_prototype(const DatasetSpec& spec, std::size_t video_class);

audio::Waveform synthesize_audio(const DatasetSpec& spec, const ExampleDescriptor& d);
model::TrimodalExample materialize(const DatasetSpec& spec, const ExampleDescriptor& d);
std::vector<model::TrimodalExample> materialize(const DatasetSpec& spec, const std::vector<ExampleDescriptor>& ds);

/// Writes spec.json, train.json, val.json, test.json into dir.
void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, const Splits& splits);

struct LoadedDataset {
  DatasetSpec spec;
  Splits splits;
};
LoadedDataset read_dataset(const std::filesystem::path& dir);

}  // namespace sb::data
