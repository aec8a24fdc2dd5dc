#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "komet/adamw.hpp"
#include "komet/data.hpp"
#include "komet/distillation.hpp"
#include "komet/encoder.hpp"

namespace komet {

// One checkpoint directory:
//   manifest.json  tensor names, shapes, byte offsets into weights.bin, plus
//                  model config, epoch, step, eval loss and optional vocab
//   weights.bin    little-endian float32 values in manifest order
//   optimizer.bin  AdamW step count and moments (when present)
struct Checkpoint {
  int epoch = 0;
  std::int64_t step = 0;
  double eval_loss = 0.0;
  EncoderModel<float> model;
  std::optional<ProjectionLayer<float>> projection;
  std::optional<AdamWState> optimizer;
  std::optional<Vocab> vocab;
  // Additional named tensors stored after the model, e.g. a classifier head.
  std::vector<NamedTensor<float>> extra;
};

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // bytes into weights.bin
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);
std::vector<ManifestEntry> read_manifest_entries(const std::filesystem::path& dir);

// Owns the ckpt-<epoch> directories under one root and the `best` marker.
// After every save at most `limit` checkpoints remain; the oldest go first
// and the one named by `best` is never removed.
class CheckpointManager {
 public:
  CheckpointManager(std::filesystem::path root, int limit);

  std::filesystem::path save(const Checkpoint& ckpt, bool is_best);
  std::optional<int> best_epoch() const;
  std::vector<int> retained_epochs() const;
  std::filesystem::path path_for(int epoch) const;

 private:
  void prune();

  std::filesystem::path root_;
  int limit_;
};

}  // namespace komet
