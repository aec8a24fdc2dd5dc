#include "komet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "komet/errors.hpp"
#include "komet/log.hpp"
#include "komet/run_config.hpp"

namespace komet {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "komet-checkpoint/1";
constexpr char kOptimizerMagic[8] = {'K', 'O', 'M', 'E', 'T', 'O', 'P', 'T'};

std::uint32_t swap32(std::uint32_t v) {
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

std::uint64_t swap64(std::uint64_t v) {
  return (static_cast<std::uint64_t>(swap32(static_cast<std::uint32_t>(v))) << 32) | swap32(static_cast<std::uint32_t>(v >> 32));
}

void write_floats(std::ostream& out, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t bits = swap32(std::bit_cast<std::uint32_t>(data[i]));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

void read_floats(std::istream& in, float* data, std::size_t n, const fs::path& file) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw IoError("truncated data in " + file.string());
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(swap32(std::bit_cast<std::uint32_t>(data[i])));
  }
}

void write_u64(std::ostream& out, std::uint64_t v) {
  if constexpr (std::endian::native != std::endian::little) v = swap64(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& in, const fs::path& file) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("truncated data in " + file.string());
  if constexpr (std::endian::native != std::endian::little) v = swap64(v);
  return v;
}

std::vector<NamedTensor<float>> ordered_tensors(const Checkpoint& ckpt) {
  auto tensors = ckpt.model.named_parameters();
  if (ckpt.projection) tensors.push_back({"projection.weight", ckpt.projection->weight});
  for (const auto& e : ckpt.extra) tensors.push_back(e);
  return tensors;
}

Json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + file.string() + ": " + e.what());
  }
}

void write_checkpoint_files(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  const auto tensors = ordered_tensors(ckpt);
  Json manifest;
  manifest["format"] = kFormat;
  manifest["epoch"] = ckpt.epoch;
  manifest["step"] = ckpt.step;
  manifest["eval_loss"] = ckpt.eval_loss;
  manifest["model"] = to_json(ckpt.model.config);
  if (ckpt.projection) {
    manifest["projection"] = {{"student_length", ckpt.projection->student_length},
                              {"teacher_length", ckpt.projection->teacher_length}};
  }
  if (ckpt.optimizer) {
    const auto& c = ckpt.optimizer->config;
    manifest["optimizer"] = {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
  }
  if (ckpt.vocab) manifest["vocab"] = {{"mode", to_string(ckpt.vocab->mode())}, {"tokens", ckpt.vocab->tokens()}};
  Json entries = Json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    entries.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.tensor.size()) * sizeof(float);
  }
  manifest["tensors"] = std::move(entries);
  {
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "weights.bin", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "weights.bin").string());
    for (const auto& t : tensors) write_floats(out, t.tensor.values().data(), static_cast<std::size_t>(t.tensor.size()));
    if (!out) throw IoError("write failed for " + (dir / "weights.bin").string());
  }
  if (ckpt.optimizer) {
    std::ofstream out(dir / "optimizer.bin", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "optimizer.bin").string());
    const auto& s = *ckpt.optimizer;
    out.write(kOptimizerMagic, sizeof kOptimizerMagic);
    write_u64(out, static_cast<std::uint64_t>(s.t));
    write_u64(out, s.m.size());
    for (std::size_t i = 0; i < s.m.size(); ++i) {
      write_u64(out, static_cast<std::uint64_t>(s.m[i].size()));
      write_floats(out, s.m[i].data(), static_cast<std::size_t>(s.m[i].size()));
      write_floats(out, s.v[i].data(), static_cast<std::size_t>(s.v[i].size()));
    }
    if (!out) throw IoError("write failed for " + (dir / "optimizer.bin").string());
  }
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  // Write next to the target then swap in, so a crash never leaves a
  // half-written checkpoint under the final name.
  fs::path staging = dir;
  staging += ".partial";
  fs::remove_all(staging);
  write_checkpoint_files(staging, ckpt);
  fs::remove_all(dir);
  fs::rename(staging, dir);
}

std::vector<ManifestEntry> read_manifest_entries(const fs::path& dir) {
  const Json manifest = read_json(dir / "manifest.json");
  std::vector<ManifestEntry> out;
  try {
    for (const auto& e : manifest.at("tensors")) {
      out.push_back({e.at("name").get<std::string>(), e.at("shape").get<Shape>(), e.at("offset").get<std::uint64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return out;
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const Json manifest = read_json(dir / "manifest.json");
  if (manifest.value("format", std::string()) != kFormat) {
    throw IoError("unsupported checkpoint format in " + dir.string());
  }
  Checkpoint ckpt;
  const auto entries = read_manifest_entries(dir);
  try {
    ckpt.epoch = manifest.at("epoch").get<int>();
    ckpt.step = manifest.at("step").get<std::int64_t>();
    ckpt.eval_loss = manifest.at("eval_loss").is_null() ? 0.0 : manifest.at("eval_loss").get<double>();
    ckpt.model = build_model<float>(model_config_from_json(manifest.at("model"), "manifest.model"));
    if (manifest.contains("projection")) {
      const auto& p = manifest["projection"];
      ProjectionLayer<float> proj;
      proj.student_length = p.at("student_length").get<Index>();
      proj.teacher_length = p.at("teacher_length").get<Index>();
      ckpt.projection = proj;
    }
    if (manifest.contains("vocab")) {
      const auto& v = manifest["vocab"];
      ckpt.vocab = Vocab::from_tokens(v.at("tokens").get<std::vector<std::string>>(),
                                      parse_token_mode(v.at("mode").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }

  const fs::path weights = dir / "weights.bin";
  std::ifstream in(weights, std::ios::binary);
  if (!in) throw IoError("cannot open " + weights.string());
  auto params = ckpt.model.named_parameters();
  std::set<std::string> seen;
  std::uint64_t expected_offset = 0;
  for (const auto& e : entries) {
    if (e.offset != expected_offset) throw IoError("non-contiguous tensor offsets in " + dir.string());
    const auto n = static_cast<std::size_t>(numel(e.shape));
    Tensor<float> target;
    auto it = std::find_if(params.begin(), params.end(), [&](const auto& p) { return p.name == e.name; });
    if (it != params.end()) {
      if (it->tensor.shape() != e.shape) {
        throw IoError("tensor " + e.name + " has shape " + to_string(e.shape) + " but the model expects " +
                      to_string(it->tensor.shape()));
      }
      target = it->tensor;
    } else if (e.name == "projection.weight" && ckpt.projection) {
      ckpt.projection->weight = Tensor<float>::zeros(e.shape, true);
      target = ckpt.projection->weight;
    } else {
      NamedTensor<float> extra{e.name, Tensor<float>::zeros(e.shape, true)};
      ckpt.extra.push_back(extra);
      target = extra.tensor;
    }
    read_floats(in, target.mutable_values().data(), n, weights);
    seen.insert(e.name);
    expected_offset += n * sizeof(float);
  }
  for (const auto& p : params) {
    if (!seen.count(p.name)) throw IoError("checkpoint " + dir.string() + " lacks tensor " + p.name);
  }
  if (ckpt.projection && !ckpt.projection->weight.defined()) {
    throw IoError("checkpoint " + dir.string() + " lacks tensor projection.weight");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in " + weights.string());

  const fs::path opt = dir / "optimizer.bin";
  if (fs::exists(opt)) {
    std::ifstream oin(opt, std::ios::binary);
    char magic[8];
    oin.read(magic, sizeof magic);
    if (!oin || std::memcmp(magic, kOptimizerMagic, sizeof magic) != 0) throw IoError("bad header in " + opt.string());
    AdamWState state;
    if (manifest.contains("optimizer")) {
      const auto& c = manifest["optimizer"];
      state.config = {c.at("beta1").get<double>(), c.at("beta2").get<double>(), c.at("eps").get<double>(),
                      c.at("weight_decay").get<double>()};
    }
    state.t = static_cast<std::int64_t>(read_u64(oin, opt));
    const auto count = read_u64(oin, opt);
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto n = read_u64(oin, opt);
      Tensor<float>::Array m(static_cast<Index>(n)), v(static_cast<Index>(n));
      read_floats(oin, m.data(), n, opt);
      read_floats(oin, v.data(), n, opt);
      state.m.push_back(std::move(m));
      state.v.push_back(std::move(v));
    }
    ckpt.optimizer = std::move(state);
  }
  return ckpt;
}

CheckpointManager::CheckpointManager(fs::path root, int limit) : root_(std::move(root)), limit_(limit) {
  if (limit_ < 1) throw ConfigError("trainer.save_total_limit must be >= 1");
  fs::create_directories(root_);
}

fs::path CheckpointManager::path_for(int epoch) const { return root_ / ("ckpt-" + std::to_string(epoch)); }

fs::path CheckpointManager::save(const Checkpoint& ckpt, bool is_best) {
  const auto dir = path_for(ckpt.epoch);
  save_checkpoint(dir, ckpt);
  if (is_best) {
    const fs::path staging = root_ / "best.partial";
    {
      std::ofstream out(staging);
      if (!out) throw IoError("cannot write " + staging.string());
      out << "ckpt-" << ckpt.epoch << '\n';
    }
    fs::rename(staging, root_ / "best");
  }
  prune();
  return dir;
}

std::optional<int> CheckpointManager::best_epoch() const {
  std::ifstream in(root_ / "best");
  std::string name;
  if (!in || !(in >> name) || name.rfind("ckpt-", 0) != 0) return std::nullopt;
  try {
    return std::stoi(name.substr(5));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::vector<int> CheckpointManager::retained_epochs() const {
  std::vector<int> out;
  for (const auto& entry : fs::directory_iterator(root_)) {
    if (!entry.is_directory()) continue;
    const auto name = entry.path().filename().string();
    if (name.rfind("ckpt-", 0) != 0 || name.find('.') != std::string::npos) continue;
    try {
      out.push_back(std::stoi(name.substr(5)));
    } catch (const std::exception&) {
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void CheckpointManager::prune() {
  auto epochs = retained_epochs();
  const auto best = best_epoch();
  std::size_t i = 0;
  while (epochs.size() > static_cast<std::size_t>(limit_) && i < epochs.size()) {
    if (best && epochs[i] == *best) {
      ++i;
      continue;
    }
    log::debug("removing checkpoint ", path_for(epochs[i]).string());
    fs::remove_all(path_for(epochs[i]));
    epochs.erase(epochs.begin() + static_cast<std::ptrdiff_t>(i));
  }
}

}  // namespace komet
