#include "vpd/serialize.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace vpd {

namespace {

constexpr char kVolumeMagic[7] = {'V', 'P', 'D', 'V', 'O', 'L', '1'};
constexpr char kCkptMagic[8] = {'V', 'P', 'D', 'C', 'K', 'P', 'T', '1'};

void check_little_endian() {
  require(std::endian::native == std::endian::little,
          "serialization requires a little-endian host");
}

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(is), "unexpected end of file");
  return v;
}

void write_tensor_payload(std::ofstream& os, const Tensorf& t) {
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(sizeof(float) * t.data().size()));
}

std::vector<float> read_payload(std::ifstream& is, int64_t count) {
  std::vector<float> v(static_cast<size_t>(count));
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(sizeof(float) * v.size()));
  require(static_cast<bool>(is), "unexpected end of file in payload");
  return v;
}

}  // namespace

void write_volume_file(const std::string& path, const Tensorf& t) {
  check_little_endian();
  require(t.defined() && t.rank() == 4, "write_volume_file: tensor must have 4 extents, got " +
                                            (t.defined() ? shape_str(t.shape()) : "(undefined)"));
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), "write_volume_file: cannot open " + path);
  os.write(kVolumeMagic, sizeof(kVolumeMagic));
  put<uint8_t>(os, 0);  // dtype 0: float32
  for (int i = 0; i < 4; ++i) put<uint32_t>(os, static_cast<uint32_t>(t.dim(i)));
  write_tensor_payload(os, t);
  require(static_cast<bool>(os), "write_volume_file: write failed for " + path);
}

Tensorf read_volume_file(const std::string& path) {
  check_little_endian();
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "read_volume_file: cannot open " + path);
  char magic[sizeof(kVolumeMagic)];
  is.read(magic, sizeof(magic));
  require(static_cast<bool>(is) && std::memcmp(magic, kVolumeMagic, sizeof(magic)) == 0,
          "read_volume_file: bad magic in " + path);
  uint8_t dtype = get<uint8_t>(is);
  require(dtype == 0, "read_volume_file: unsupported dtype code " + std::to_string(dtype));
  Shape shape(4);
  for (int i = 0; i < 4; ++i) shape[i] = static_cast<int64_t>(get<uint32_t>(is));
  auto payload = read_payload(is, numel(shape));
  return Tensorf::from(std::move(shape), std::move(payload));
}

nlohmann::json unet_config_to_json(const UNetConfig& c) {
  return {{"base_channels", c.base_channels},
          {"channel_mult", {c.channel_mult[0], c.channel_mult[1], c.channel_mult[2]}},
          {"depth", c.depth},
          {"height", c.height},
          {"width", c.width},
          {"in_channels", c.in_channels},
          {"time_embed_width", c.time_embed_width},
          {"groups", c.groups},
          {"context_channels", c.context_channels},
          {"deform_k", c.deform_k}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.base_channels = j.at("base_channels").get<int64_t>();
  auto m = j.at("channel_mult");
  c.channel_mult = {m.at(0).get<int64_t>(), m.at(1).get<int64_t>(), m.at(2).get<int64_t>()};
  c.depth = j.at("depth").get<int64_t>();
  c.height = j.at("height").get<int64_t>();
  c.width = j.at("width").get<int64_t>();
  c.in_channels = j.at("in_channels").get<int64_t>();
  c.time_embed_width = j.at("time_embed_width").get<int64_t>();
  c.groups = j.at("groups").get<int64_t>();
  c.context_channels = j.at("context_channels").get<int64_t>();
  c.deform_k = j.at("deform_k").get<int>();
  return c;
}

nlohmann::json scene_config_to_json(const SceneConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"num_planes", c.num_planes},
          {"d_min", c.d_min},
          {"d_max", c.d_max},
          {"num_tilted", c.num_tilted},
          {"num_spheres", c.num_spheres},
          {"num_boxes", c.num_boxes},
          {"invalid_fraction", c.invalid_fraction},
          {"semantic", c.semantic},
          {"corruption",
           {{"occlusion_blocks", c.corruption.occlusion_blocks},
            {"block_min", c.corruption.block_min},
            {"block_max", c.corruption.block_max},
            {"flatten_prob", c.corruption.flatten_prob},
            {"cost_noise_sigma", c.corruption.cost_noise_sigma}}}};
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.height = j.at("height").get<int64_t>();
  c.width = j.at("width").get<int64_t>();
  c.num_planes = j.at("num_planes").get<int64_t>();
  c.d_min = j.at("d_min").get<double>();
  c.d_max = j.at("d_max").get<double>();
  c.num_tilted = j.at("num_tilted").get<int64_t>();
  c.num_spheres = j.at("num_spheres").get<int64_t>();
  c.num_boxes = j.at("num_boxes").get<int64_t>();
  c.invalid_fraction = j.at("invalid_fraction").get<double>();
  c.semantic = j.at("semantic").get<bool>();
  const auto& k = j.at("corruption");
  c.corruption.occlusion_blocks = k.at("occlusion_blocks").get<int>();
  c.corruption.block_min = k.at("block_min").get<int64_t>();
  c.corruption.block_max = k.at("block_max").get<int64_t>();
  c.corruption.flatten_prob = k.at("flatten_prob").get<double>();
  c.corruption.cost_noise_sigma = k.at("cost_noise_sigma").get<double>();
  return c;
}

void write_checkpoint(const std::string& path, const UNetConfig& cfg,
                      const std::vector<std::pair<std::string, Tensorf>>& params,
                      const nlohmann::json& extra) {
  check_little_endian();
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), "write_checkpoint: cannot open " + path);
  os.write(kCkptMagic, sizeof(kCkptMagic));
  nlohmann::json header{{"config", unet_config_to_json(cfg)}, {"extra", extra}};
  std::string hs = header.dump();
  put<uint32_t>(os, static_cast<uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  put<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    require(name.size() < 65536, "write_checkpoint: name too long");
    put<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put<uint32_t>(os, static_cast<uint32_t>(t.dim(i)));
    write_tensor_payload(os, t);
  }
  require(static_cast<bool>(os), "write_checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  check_little_endian();
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "read_checkpoint: cannot open " + path);
  char magic[sizeof(kCkptMagic)];
  is.read(magic, sizeof(magic));
  require(static_cast<bool>(is) && std::memcmp(magic, kCkptMagic, sizeof(magic)) == 0,
          "read_checkpoint: bad magic in " + path);
  uint32_t hlen = get<uint32_t>(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  require(static_cast<bool>(is), "read_checkpoint: truncated header");
  auto header = nlohmann::json::parse(hs);
  Checkpoint c;
  c.config = unet_config_from_json(header.at("config"));
  c.extra = header.value("extra", nlohmann::json::object());
  uint32_t count = get<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t nlen = get<uint16_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    uint8_t rank = get<uint8_t>(is);
    Shape shape(rank);
    for (uint8_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(get<uint32_t>(is));
    auto payload = read_payload(is, numel(shape));
    c.params.emplace_back(std::move(name), Tensorf::from(std::move(shape), std::move(payload)));
  }
  return c;
}

std::string scene_config_hash(const SceneConfig& cfg) {
  // FNV-1a over the canonical JSON encoding
  std::string s = scene_config_to_json(cfg).dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
  nlohmann::json j{{"scene", scene_config_to_json(m.scene)},
                   {"config_hash", m.config_hash},
                   {"seeds", m.seeds}};
  write_text_file(path, j.dump(2) + "\n");
}

DatasetManifest read_manifest(const std::string& path) {
  auto j = nlohmann::json::parse(read_text_file(path));
  DatasetManifest m;
  m.scene = scene_config_from_json(j.at("scene"));
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  require(m.config_hash == scene_config_hash(m.scene),
          "read_manifest: config hash mismatch in " + path);
  return m;
}

namespace {
std::string sample_path(const std::string& dir, uint64_t seed, const char* part) {
  return dir + "/scene_" + std::to_string(seed) + "_" + part + ".vpdvol";
}
}  // namespace

void write_scene_sample(const std::string& dir, const SceneSample& s) {
  std::filesystem::create_directories(dir);
  const int64_t H = s.gt_depth.height(), W = s.gt_depth.width();
  write_volume_file(sample_path(dir, s.seed, "depth"),
                    reshape(s.gt_depth.depths, Shape{1, 1, H, W}));
  std::vector<float> mk(s.gt_depth.mask.begin(), s.gt_depth.mask.end());
  write_volume_file(sample_path(dir, s.seed, "mask"), Tensorf::from({1, 1, H, W}, std::move(mk)));
  write_volume_file(sample_path(dir, s.seed, "cost"), s.coarse_cost.values);
  for (int l = 0; l < 3; ++l) {
    const auto& c = s.contexts[l].values;
    write_volume_file(sample_path(dir, s.seed, ("ctx" + std::to_string(l)).c_str()),
                      reshape(c, Shape{c.dim(0), 1, c.dim(1), c.dim(2)}));
  }
  if (!s.semantic_grid.empty()) {
    const int64_t D = s.coarse_cost.values.dim(1);
    std::vector<float> g(s.semantic_grid.begin(), s.semantic_grid.end());
    write_volume_file(sample_path(dir, s.seed, "sem"), Tensorf::from({1, D, H, W}, std::move(g)));
  }
}

SceneSample read_scene_sample(const std::string& dir, const SceneConfig& cfg, uint64_t seed) {
  SceneSample s;
  s.seed = seed;
  auto depth = read_volume_file(sample_path(dir, seed, "depth"));
  const int64_t H = depth.dim(2), W = depth.dim(3);
  s.gt_depth.depths = reshape(depth, Shape{H, W});
  auto mask = read_volume_file(sample_path(dir, seed, "mask"));
  s.gt_depth.mask.resize(static_cast<size_t>(H * W));
  for (int64_t i = 0; i < H * W; ++i) s.gt_depth.mask[i] = mask.data()[i] != 0.0f ? 1 : 0;
  s.coarse_cost.values = read_volume_file(sample_path(dir, seed, "cost"));
  for (int l = 0; l < 3; ++l) {
    auto c = read_volume_file(sample_path(dir, seed, ("ctx" + std::to_string(l)).c_str()));
    s.contexts.push_back({reshape(c, Shape{c.dim(0), c.dim(2), c.dim(3)}), l});
  }
  if (cfg.semantic) {
    auto g = read_volume_file(sample_path(dir, seed, "sem"));
    s.semantic_grid.resize(g.data().size());
    for (size_t i = 0; i < g.data().size(); ++i)
      s.semantic_grid[i] = static_cast<int32_t>(std::lround(g.data()[i]));
  }
  return s;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), "write_text_file: cannot open " + path);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  require(static_cast<bool>(os), "write_text_file: write failed for " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "read_text_file: cannot open " + path);
  std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace vpd
