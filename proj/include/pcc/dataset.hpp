#pragma once

#include "pcc/pseudo_labeling.hpp"
#include "pcc/vit_encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace pcc::data {

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::set<std::string> labels;
  std::optional<std::filesystem::path> mask;
};

/// Images of one split with their image-level labels and, when available,
/// dense ground-truth masks (evaluation only).
struct DatasetManifest {
  std::string split = "train";
  std::vector<std::string> categories;  // foreground, in class-index order from 1
  std::vector<ManifestEntry> entries;

  /// Every label is a known category and every referenced file exists.
  void validate() const;
  [[nodiscard]] bool has_masks() const;

  /// Paths are stored relative to the manifest's directory.
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
};

struct SyntheticSpec {
  int image_side = 64;
  int num_images = 200;
  std::vector<std::string> classes{"disk", "square"};
  int colors_per_class = 2;
  double clutter = 0.1;
  int max_objects = 2;
  std::uint64_t seed = 7;
  std::string split = "train";

  void validate() const;
  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);
SyntheticSpec load_synthetic_spec(const std::filesystem::path& path);

/// Shape names understood by the generator.
const std::vector<std::string>& synthetic_shapes();

/// Writes images/<id>.png, masks/<id>.png and manifest.json under out_dir.
/// Image-level labels are read back from the drawn mask.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// Reads a VOC-style tree:
///   JPEGImages/<id>.jpg, ImageSets/Segmentation/<split>.txt,
///   ImageSets/Labels/<split>.txt ("<id> <class> ..."),
///   optional SegmentationClass/<id>.png and classes.txt.
/// Throws FormatError naming the offending path or class.
DatasetManifest ingest_voc_style(const std::filesystem::path& root, const std::string& split = "train");

/// The 20 PASCAL VOC foreground classes.
const std::vector<std::string>& voc_categories();

/// Records every dense-mask read together with the phase that was active, so
/// tests can prove the training path never touches masks.
class MaskAccessAudit {
 public:
  static MaskAccessAudit& global();

  void record(const std::filesystem::path& path);
  [[nodiscard]] std::size_t reads_in_phase(const std::string& phase) const;
  [[nodiscard]] std::size_t total_reads() const;
  [[nodiscard]] std::string phase() const;
  void reset();

  /// Sets the active phase for its lifetime.
  class Phase {
   public:
    explicit Phase(std::string name);
    ~Phase();
    Phase(const Phase&) = delete;
    Phase& operator=(const Phase&) = delete;

   private:
    std::string previous_;
  };

 private:
  mutable std::mutex mutex_;
  std::string phase_ = "idle";
  std::vector<std::pair<std::string, std::string>> reads_;  // (phase, path)
};

inline constexpr const char* kTrainStepPhase = "train_step";

/// Reads a ground-truth mask through the audit hook.
pseudo::PseudoLabelMap load_mask(const std::filesystem::path& path, std::optional<int> side = std::nullopt);

/// Loads every image resized to `side`, carrying labels and ids.
std::vector<vit::ImageSample> load_images(const DatasetManifest& manifest, int side);

}  // namespace pcc::data
