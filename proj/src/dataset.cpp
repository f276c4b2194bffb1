#include "rap/dataset.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace rap {

void Dataset::validate() const {
  cam.validate();
  if (poses.size() != images.size() || poses.size() != sequence.size())
    throw ShapeMismatch("dataset arrays inconsistent");
  if (!depth.empty() && depth.size() != poses.size())
    throw ShapeMismatch("dataset depth count inconsistent");
  for (const Pose& p : poses)
    if (!p.is_valid()) throw SpecOutOfRange("dataset contains an invalid pose");
  for (const Image& im : images)
    if (im.height != cam.height || im.width != cam.width)
      throw ShapeMismatch("dataset image dims differ from camera");
}

void save_camera_json(const Camera& cam, const std::string& path) {
  json j{{"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx},
         {"cy", cam.cy}, {"width", cam.width}, {"height", cam.height}};
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << "\n";
}

Camera load_camera_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw CorruptFile("camera.json: " + std::string(e.what()));
  }
  Camera cam;
  try {
    cam.fx = j.at("fx");
    cam.fy = j.at("fy");
    cam.cx = j.at("cx");
    cam.cy = j.at("cy");
    cam.width = j.at("width");
    cam.height = j.at("height");
  } catch (const json::exception& e) {
    throw CorruptFile("camera.json fields: " + std::string(e.what()));
  }
  cam.validate();
  return cam;
}

namespace {
std::string index_name(int i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d%s", i, ext);
  return buf;
}
}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  if (ds.has_depth()) fs::create_directories(fs::path(dir) / "depth");
  save_camera_json(ds.cam, (fs::path(dir) / "camera.json").string());
  std::ofstream pf(fs::path(dir) / "poses.txt");
  if (!pf) throw IoError("cannot write poses.txt");
  for (const Pose& p : ds.poses) pf << pose_to_line(p) << "\n";
  std::ofstream sf(fs::path(dir) / "sequences.txt");
  for (int s : ds.sequence) sf << s << "\n";
  for (size_t i = 0; i < ds.images.size(); ++i) {
    save_ppm(ds.images[i], (fs::path(dir) / "images" / index_name(int(i), ".ppm")).string());
    if (ds.has_depth())
      save_pfm(ds.depth[i], (fs::path(dir) / "depth" / index_name(int(i), ".pfm")).string());
  }
}

Dataset load_dataset(const std::string& dir, bool load_depth) {
  Dataset ds;
  ds.cam = load_camera_json((fs::path(dir) / "camera.json").string());
  std::ifstream pf(fs::path(dir) / "poses.txt");
  if (!pf) throw IoError("missing poses.txt in " + dir);
  std::string line;
  while (std::getline(pf, line)) {
    if (line.empty()) continue;
    ds.poses.push_back(pose_from_line(line));
  }
  std::ifstream sf(fs::path(dir) / "sequences.txt");
  if (sf) {
    int s;
    while (sf >> s) ds.sequence.push_back(s);
  }
  if (ds.sequence.size() != ds.poses.size()) ds.sequence.assign(ds.poses.size(), 0);
  for (size_t i = 0; i < ds.poses.size(); ++i) {
    ds.images.push_back(load_ppm((fs::path(dir) / "images" / index_name(int(i), ".ppm")).string()));
    fs::path dp = fs::path(dir) / "depth" / index_name(int(i), ".pfm");
    if (load_depth && fs::exists(dp)) ds.depth.push_back(load_pfm(dp.string()));
  }
  if (!ds.depth.empty() && ds.depth.size() != ds.poses.size())
    throw CorruptFile("partial depth directory in " + dir);
  ds.validate();
  return ds;
}

namespace {

// Per-image conditioning image: the sequence tint with a small seeded drift,
// applied to the canonical intrinsic render.
Image sequence_reference(const Image& canonical, uint64_t seed, int seq, int image_idx) {
  Vec3 gain, bias;
  appearance_tint(seed * 1000003ULL + uint64_t(seq), &gain, &bias);
  Rng drift(seed * 7919ULL + uint64_t(seq) * 131ULL + uint64_t(image_idx) + 5);
  for (int c = 0; c < 3; ++c) gain[c] *= drift.uniform(0.96, 1.04);
  return apply_tint(canonical, gain, bias);
}

}  // namespace

ToyDataset make_toy_dataset(const ToyDatasetSpec& spec) {
  ToyDataset toy;
  Rng rng(spec.seed);
  Rng world_rng = rng.fork(1);
  toy.world = generate_scene(spec.world, world_rng);

  Camera cam;
  cam.fx = cam.fy = spec.focal;
  cam.width = spec.width;
  cam.height = spec.height;
  cam.cx = spec.width / 2.0;
  cam.cy = spec.height / 2.0;

  Rng traj_rng = rng.fork(2);
  std::vector<Pose> train_poses =
      generate_trajectory(toy.world, TrajectoryPattern::kOrbit, spec.train_count, traj_rng);
  // Validation/test poses leave the training ring by a bounded jitter.
  Rng jitter_rng = rng.fork(3);
  auto offring = [&](int count) {
    std::vector<Pose> out;
    for (int i = 0; i < count; ++i) {
      const Pose& base = train_poses[size_t(jitter_rng.uniform_int(int(train_poses.size())))];
      out.push_back(perturb_pose(base, spec.offring_jitter_t, spec.offring_jitter_r, jitter_rng));
    }
    return out;
  };
  std::vector<Pose> val_poses = offring(spec.val_count);
  std::vector<Pose> test_poses = offring(spec.test_count);

  RenderOptions opts;
  opts.threads = default_threads();
  Image neutral(cam.height, cam.width, 0.5);
  RenderOutput canon = render(toy.world, cam, canonical_view(toy.world), 0.0, neutral, opts);

  Rng blur_rng = rng.fork(4);
  auto build = [&](const std::vector<Pose>& poses, Dataset& ds, bool allow_blur, int split_salt) {
    ds.cam = cam;
    ds.poses = poses;
    for (size_t i = 0; i < poses.size(); ++i) {
      int seq = int(i) % std::max(1, spec.variants);
      ds.sequence.push_back(seq);
      Image ref = sequence_reference(canon.color, spec.seed, seq, split_salt * 10000 + int(i));
      if (allow_blur && spec.blur_targets) {
        BlurParams bp;
        bp.phi_logits.assign(size_t(toy.world.blur_samples), 0.0);
        for (int a = 0; a < 3; ++a) {
          bp.twist_start[a] = deg_to_rad(blur_rng.uniform(-spec.blur_rot_deg, spec.blur_rot_deg));
          bp.twist_end[a] = deg_to_rad(blur_rng.uniform(-spec.blur_rot_deg, spec.blur_rot_deg));
          bp.twist_start[3 + a] = blur_rng.uniform(-spec.blur_trans, spec.blur_trans);
          bp.twist_end[3 + a] = blur_rng.uniform(-spec.blur_trans, spec.blur_trans);
        }
        BlurRenderPass bp_pass =
            render_blurred_fwd(toy.world, cam, poses[i], bp, 1.0, ref, opts);
        ds.images.push_back(bp_pass.color);
        if (spec.write_depth) {
          RenderOutput sharp = render(toy.world, cam, poses[i], 1.0, ref, opts);
          ds.depth.push_back(sharp.depth);
        }
      } else {
        RenderOutput out = render(toy.world, cam, poses[i], 1.0, ref, opts);
        ds.images.push_back(out.color);
        if (spec.write_depth) ds.depth.push_back(out.depth);
      }
    }
    ds.validate();
  };
  build(train_poses, toy.train, /*allow_blur=*/true, 0);
  build(val_poses, toy.val, false, 1);
  build(test_poses, toy.test, false, 2);
  return toy;
}

void save_toy_dataset(const ToyDataset& toy, const std::string& dir) {
  fs::create_directories(dir);
  save_scene(toy.world, (fs::path(dir) / "world.rscn").string());
  save_dataset(toy.train, (fs::path(dir) / "train").string());
  save_dataset(toy.val, (fs::path(dir) / "val").string());
  save_dataset(toy.test, (fs::path(dir) / "test").string());
}

}  // namespace rap
