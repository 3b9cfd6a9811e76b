#include "pcc/dataset.hpp"

#include "pcc/errors.hpp"
#include "pcc/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

namespace pcc::data {

namespace fs = std::filesystem;
using nlohmann::json;

// --- manifest -----------------------------------------------------------------

void DatasetManifest::validate() const {
  const std::set<std::string> known(categories.begin(), categories.end());
  for (const auto& e : entries) {
    for (const auto& l : e.labels) {
      if (!known.contains(l)) throw FormatError("entry " + e.id + " has unknown class " + l);
    }
    if (!fs::exists(e.image)) throw FormatError("missing image " + e.image.string());
    if (e.mask && !fs::exists(*e.mask)) throw FormatError("missing mask " + e.mask->string());
  }
}

bool DatasetManifest::has_masks() const {
  return !entries.empty() &&
         std::all_of(entries.begin(), entries.end(), [](const ManifestEntry& e) { return e.mask.has_value(); });
}

void DatasetManifest::save(const fs::path& path) const {
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  json list = json::array();
  for (const auto& e : entries) {
    json j = {{"id", e.id},
              {"image", fs::relative(e.image, base).generic_string()},
              {"labels", std::vector<std::string>(e.labels.begin(), e.labels.end())}};
    if (e.mask) j["mask"] = fs::relative(*e.mask, base).generic_string();
    list.push_back(std::move(j));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IOError("cannot write manifest " + path.string());
  out << json{{"split", split}, {"categories", categories}, {"entries", list}}.dump(1) << '\n';
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IOError("cannot open manifest " + path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  DatasetManifest m;
  try {
    const json j = json::parse(in);
    m.split = j.value("split", "train");
    m.categories = j.at("categories").get<std::vector<std::string>>();
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.id = e.at("id").get<std::string>();
      entry.image = base / e.at("image").get<std::string>();
      auto labels = e.value("labels", std::vector<std::string>{});
      entry.labels = {labels.begin(), labels.end()};
      if (e.contains("mask")) entry.mask = base / e.at("mask").get<std::string>();
      m.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& ex) {
    throw FormatError("malformed manifest " + path.string() + ": " + ex.what());
  }
  m.validate();
  return m;
}

// --- synthetic generator --------------------------------------------------------

const std::vector<std::string>& synthetic_shapes() {
  static const std::vector<std::string> shapes{"disk", "square", "triangle", "ring", "cross"};
  return shapes;
}

void SyntheticSpec::validate() const {
  if (classes.size() < 2) throw ConfigError("synthetic spec needs at least 2 classes");
  std::set<std::string> seen;
  for (const auto& c : classes) {
    if (std::find(synthetic_shapes().begin(), synthetic_shapes().end(), c) == synthetic_shapes().end()) {
      throw ConfigError("unknown synthetic shape class: " + c);
    }
    if (!seen.insert(c).second) throw ConfigError("duplicate synthetic class: " + c);
  }
  if (image_side < 16) throw ConfigError("synthetic image_side must be >= 16");
  if (num_images < 1) throw ConfigError("synthetic num_images must be >= 1");
  if (colors_per_class < 1) throw ConfigError("colors_per_class must be >= 1");
  if (clutter < 0.0 || clutter > 1.0) throw ConfigError("clutter must be in [0, 1]");
  if (max_objects < 1) throw ConfigError("max_objects must be >= 1");
}

void to_json(json& j, const SyntheticSpec& s) {
  j = {{"image_side", s.image_side}, {"num_images", s.num_images},
       {"classes", s.classes},       {"colors_per_class", s.colors_per_class},
       {"clutter", s.clutter},       {"max_objects", s.max_objects},
       {"seed", s.seed},             {"split", s.split}};
}

void from_json(const json& j, SyntheticSpec& s) {
  SyntheticSpec d;
  s.image_side = j.value("image_side", d.image_side);
  s.num_images = j.value("num_images", d.num_images);
  s.classes = j.value("classes", d.classes);
  s.colors_per_class = j.value("colors_per_class", d.colors_per_class);
  s.clutter = j.value("clutter", d.clutter);
  s.max_objects = j.value("max_objects", d.max_objects);
  s.seed = j.value("seed", d.seed);
  s.split = j.value("split", d.split);
}

SyntheticSpec load_synthetic_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IOError("cannot open synthetic spec " + path.string());
  try {
    SyntheticSpec s = json::parse(in).get<SyntheticSpec>();
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw ConfigError("malformed synthetic spec " + path.string() + ": " + e.what());
  }
}

namespace {

using Rgb = std::array<double, 3>;

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

/// Class k, variant j: hue band k / K, variants differ in brightness.
Rgb class_color(int k, int classes, int variant, int variants) {
  const double hue = (k + 0.15 * variant / std::max(1, variants)) / classes;
  const double value = 0.95 - 0.3 * variant / std::max(1, variants);
  return hsv_to_rgb(hue, 0.85, value);
}

struct Shape {
  std::string kind;
  double cx, cy, radius, angle;

  /// Point-in-shape test in pixel-centre coordinates.
  [[nodiscard]] bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    const double dist = std::hypot(dx, dy);
    if (kind == "disk") return dist <= radius;
    if (kind == "ring") return dist <= radius && dist >= 0.55 * radius;
    if (kind == "square") return std::abs(u) <= 0.8 * radius && std::abs(v) <= 0.8 * radius;
    if (kind == "cross") {
      const double arm = 0.3 * radius;
      return (std::abs(u) <= radius && std::abs(v) <= arm) || (std::abs(v) <= radius && std::abs(u) <= arm);
    }
    // Triangle with vertices on the circumscribed circle.
    std::array<std::pair<double, double>, 3> p{};
    for (int i = 0; i < 3; ++i) {
      const double a = -std::numbers::pi / 2 + i * 2 * std::numbers::pi / 3;
      p[static_cast<std::size_t>(i)] = {radius * std::cos(a), radius * std::sin(a)};
    }
    auto cross = [](std::pair<double, double> a, std::pair<double, double> b, double px, double py) {
      return (b.first - a.first) * (py - a.second) - (b.second - a.second) * (px - a.first);
    };
    const double d0 = cross(p[0], p[1], u, v), d1 = cross(p[1], p[2], u, v), d2 = cross(p[2], p[0], u, v);
    const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
    const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
    return !(has_neg && has_pos);
  }
};

std::string synthetic_id(int i) {
  std::ostringstream ss;
  ss << "synth_" << std::setw(5) << std::setfill('0') << i;
  return ss.str();
}

}  // namespace

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec) throw IOError("cannot create " + out_dir.string() + ": " + ec.message());

  std::mt19937_64 rng(spec.seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::normal_distribution<double> noise(0.0, 1.0);

  const int n = spec.image_side;
  const int classes = static_cast<int>(spec.classes.size());
  DatasetManifest manifest;
  manifest.split = spec.split;
  manifest.categories = spec.classes;

  for (int i = 0; i < spec.num_images; ++i) {
    vit::ImageSample img;
    img.identifier = synthetic_id(i);
    img.pixels.resize(n, static_cast<Eigen::Index>(n) * 3);
    pseudo::PseudoLabelMap mask(n, n, img.identifier);

    // Greyish background with a slight tint and per-pixel noise.
    const double base = uniform(0.3, 0.6);
    const Rgb tint{uniform(-0.05, 0.05), uniform(-0.05, 0.05), uniform(-0.05, 0.05)};
    const double sigma = 0.15 * spec.clutter;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        for (int c = 0; c < 3; ++c) img.pixels(y, x * 3 + c) = base + tint[static_cast<std::size_t>(c)];
      }
    }
    // Grey distractor blobs, never part of the mask.
    const int blobs = static_cast<int>(std::lround(spec.clutter * 10));
    for (int b = 0; b < blobs; ++b) {
      const int size = pick(2, std::max(2, n / 16));
      const int bx = pick(0, n - size), by = pick(0, n - size);
      const double level = uniform(0.1, 0.9);
      for (int y = by; y < by + size; ++y) {
        for (int x = bx; x < bx + size; ++x) {
          for (int c = 0; c < 3; ++c) img.pixels(y, x * 3 + c) = level;
        }
      }
    }

    const int objects = pick(1, spec.max_objects);
    for (int o = 0; o < objects; ++o) {
      const int k = pick(0, classes - 1);
      const Rgb color = class_color(k, classes, pick(0, spec.colors_per_class - 1), spec.colors_per_class);
      const double radius = uniform(0.14, 0.26) * n;
      Shape shape{spec.classes[static_cast<std::size_t>(k)], uniform(radius, n - radius),
                  uniform(radius, n - radius), radius, uniform(0.0, 2 * std::numbers::pi)};
      const double jitter = uniform(-0.05, 0.05);
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          if (!shape.contains(x + 0.5, y + 0.5)) continue;
          for (int c = 0; c < 3; ++c) img.pixels(y, x * 3 + c) = color[static_cast<std::size_t>(c)] + jitter;
          mask.at(y, x) = k + 1;
        }
      }
    }
    if (sigma > 0) {
      for (Eigen::Index p = 0; p < img.pixels.size(); ++p) img.pixels.data()[p] += sigma * noise(rng);
    }
    img.pixels = img.pixels.cwiseMax(0.0).cwiseMin(1.0);

    ManifestEntry entry;
    entry.id = img.identifier;
    entry.image = out_dir / "images" / (entry.id + ".png");
    entry.mask = out_dir / "masks" / (entry.id + ".png");
    for (int v : mask.labels) {
      if (v > 0) entry.labels.insert(spec.classes[static_cast<std::size_t>(v - 1)]);
    }
    io::save_rgb_png(entry.image, img);
    io::write_label_png(*entry.mask, mask);
    manifest.entries.push_back(std::move(entry));
  }
  manifest.save(out_dir / "manifest.json");
  return manifest;
}

// --- VOC-style ingestion ----------------------------------------------------------

const std::vector<std::string>& voc_categories() {
  static const std::vector<std::string> names{
      "aeroplane", "bicycle", "bird",  "boat",        "bottle", "bus",         "car",
      "cat",       "chair",   "cow",   "diningtable", "dog",    "horse",       "motorbike",
      "person",    "pottedplant", "sheep", "sofa",    "train",  "tvmonitor"};
  return names;
}

namespace {

std::vector<std::string> read_tokens(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  for (std::string t; ss >> t;) out.push_back(t);
  return out;
}

}  // namespace

DatasetManifest ingest_voc_style(const fs::path& root, const std::string& split) {
  DatasetManifest m;
  m.split = split;
  const fs::path classes_file = root / "classes.txt";
  if (fs::exists(classes_file)) {
    std::ifstream in(classes_file);
    for (std::string line; std::getline(in, line);) {
      auto tokens = read_tokens(line);
      if (!tokens.empty() && tokens.front() != "background") m.categories.push_back(tokens.front());
    }
  } else {
    m.categories = voc_categories();
  }
  const std::set<std::string> known(m.categories.begin(), m.categories.end());

  const fs::path list = root / "ImageSets" / "Segmentation" / (split + ".txt");
  std::ifstream ids_in(list);
  if (!ids_in) throw FormatError("missing split list " + list.string());

  const fs::path label_file = root / "ImageSets" / "Labels" / (split + ".txt");
  std::ifstream labels_in(label_file);
  if (!labels_in) throw FormatError("missing image-level label file " + label_file.string());
  std::map<std::string, std::set<std::string>> labels;
  for (std::string line; std::getline(labels_in, line);) {
    auto tokens = read_tokens(line);
    if (tokens.empty()) continue;
    auto& set = labels[tokens.front()];
    for (std::size_t i = 1; i < tokens.size(); ++i) {
      if (!known.contains(tokens[i])) {
        throw FormatError("unknown class '" + tokens[i] + "' in " + label_file.string());
      }
      set.insert(tokens[i]);
    }
  }

  for (std::string line; std::getline(ids_in, line);) {
    auto tokens = read_tokens(line);
    if (tokens.empty()) continue;
    const std::string& id = tokens.front();
    ManifestEntry e;
    e.id = id;
    e.image = root / "JPEGImages" / (id + ".jpg");
    if (!fs::exists(e.image)) throw FormatError("missing image " + e.image.string());
    auto it = labels.find(id);
    if (it == labels.end()) throw FormatError("no image-level labels for " + id + " in " + label_file.string());
    e.labels = it->second;
    const fs::path mask = root / "SegmentationClass" / (id + ".png");
    if (fs::exists(mask)) {
      e.mask = mask;
    } else if (split != "train") {
      throw FormatError("missing mask " + mask.string());
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

// --- mask audit ------------------------------------------------------------------

MaskAccessAudit& MaskAccessAudit::global() {
  static MaskAccessAudit audit;
  return audit;
}

void MaskAccessAudit::record(const fs::path& path) {
  std::lock_guard lock(mutex_);
  reads_.emplace_back(phase_, path.string());
}

std::size_t MaskAccessAudit::reads_in_phase(const std::string& phase) const {
  std::lock_guard lock(mutex_);
  return static_cast<std::size_t>(
      std::count_if(reads_.begin(), reads_.end(), [&](const auto& r) { return r.first == phase; }));
}

std::size_t MaskAccessAudit::total_reads() const {
  std::lock_guard lock(mutex_);
  return reads_.size();
}

std::string MaskAccessAudit::phase() const {
  std::lock_guard lock(mutex_);
  return phase_;
}

void MaskAccessAudit::reset() {
  std::lock_guard lock(mutex_);
  reads_.clear();
}

MaskAccessAudit::Phase::Phase(std::string name) {
  auto& audit = global();
  std::lock_guard lock(audit.mutex_);
  previous_ = std::exchange(audit.phase_, std::move(name));
}

MaskAccessAudit::Phase::~Phase() {
  auto& audit = global();
  std::lock_guard lock(audit.mutex_);
  audit.phase_ = std::move(previous_);
}

pseudo::PseudoLabelMap load_mask(const fs::path& path, std::optional<int> side) {
  MaskAccessAudit::global().record(path);
  return io::read_label_png(path, side);
}

std::vector<vit::ImageSample> load_images(const DatasetManifest& manifest, int side) {
  std::vector<vit::ImageSample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    vit::ImageSample s = io::load_rgb(e.image, side);
    s.identifier = e.id;
    s.labels = e.labels;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pcc::data
