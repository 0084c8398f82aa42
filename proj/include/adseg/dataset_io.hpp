#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "adseg/dataset.hpp"
#include "adseg/image_io.hpp"

namespace adseg {

namespace fs = std::filesystem;

namespace detail {

inline std::map<std::string, fs::path> png_stems(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png") out.emplace(e.path().stem().string(), e.path());
  }
  return out;
}

/// Masks must be mostly saturated: at most 1% of pixels strictly inside (32, 223).
inline void require_binary_like(const Raster& gray, const std::string& what) {
  std::size_t mid = 0;
  for (auto v : gray.pixels) mid += (v > 32 && v < 223);
  if (mid * 100 > gray.pixels.size()) throw DomainError("mask " + what + " is not binary-like");
}

}  // namespace detail

/// Reads DIR/images/NAME.png with DIR/masks/NAME.png (optional DIR/others/NAME.png),
/// resized to H x W. Samples are ordered by name.
inline Dataset load_dataset(const std::string& directory, std::size_t H, std::size_t W) {
  const fs::path root(directory);
  if (!fs::is_directory(root)) throw IoError("not a directory: " + directory);
  const auto images = detail::png_stems(root / "images");
  const auto masks = detail::png_stems(root / "masks");
  const auto others = detail::png_stems(root / "others");
  if (images.empty() && masks.empty()) throw IoError("no images found under " + directory);
  for (const auto& [name, _] : images)
    if (!masks.count(name)) throw IoError("image '" + name + "' has no mask");
  for (const auto& [name, _] : masks)
    if (!images.count(name)) throw IoError("mask '" + name + "' has no image");

  Dataset ds{root.filename().string(), {}};
  if (ds.domain.empty()) ds.domain = root.parent_path().filename().string();
  for (const auto& [name, path] : images) {
    Sample s;
    s.id = name;
    s.image = resize_bilinear(to_tensor(read_png(path.string())), H, W);
    for (auto& v : s.image.data()) v = std::clamp(v, Real{0}, Real{1});
    const Raster m = read_png(masks.at(name).string(), true);
    detail::require_binary_like(m, name);
    s.mask = resize_nearest(binarize(m), H, W);
    if (auto it = others.find(name); it != others.end()) {
      const Raster o = read_png(it->second.string(), true);
      Tensor om = resize_nearest(binarize(o), H, W);
      for (std::size_t k = 0; k < om.size(); ++k)
        if (s.mask[k] != 0) om[k] = 0;
      s.other_objects = std::move(om);
    }
    ds.samples.push_back(std::move(s));
  }
  validate(ds);
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& directory) {
  const fs::path root(directory);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "masks", ec);
  if (ec) throw IoError("cannot create " + directory + ": " + ec.message());
  bool has_others = false;
  for (const Sample& s : ds.samples) has_others = has_others || s.other_objects.has_value();
  if (has_others) fs::create_directories(root / "others", ec);
  for (const Sample& s : ds.samples) {
    write_png((root / "images" / (s.id + ".png")).string(), to_raster(s.image));
    write_png((root / "masks" / (s.id + ".png")).string(), to_raster(s.mask));
    if (s.other_objects) write_png((root / "others" / (s.id + ".png")).string(), to_raster(*s.other_objects));
  }
}

}  // namespace adseg
