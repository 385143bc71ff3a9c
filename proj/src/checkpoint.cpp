#include "tsrm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

namespace tsrm {
namespace fs = std::filesystem;
namespace {

static_assert(sizeof(float) == 4);

void put_le(std::vector<char>& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  char b[4];
  std::memcpy(b, &u, 4);
  out.insert(out.end(), b, b + 4);
}

float get_le(const char* p) {
  std::uint32_t u;
  std::memcpy(&u, p, 4);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace

void save_checkpoint(const TsrmModel<float>& model, const std::string& dir,
                     const Json& extras) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::Io,
          "cannot create checkpoint directory '" + dir + "': " + ec.message());

  Json table = Json::array();
  std::vector<char> blob;
  std::size_t offset = 0;
  for (const auto& p : model.params().all()) {
    const auto n = static_cast<std::size_t>(p.tensor.size());
    table.push_back({{"name", p.name},
                     {"shape", p.tensor.shape()},
                     {"offset", offset},
                     {"length", n},
                     {"frozen", p.frozen}});
    for (Index i = 0; i < p.tensor.size(); ++i) put_le(blob, p.tensor.value()(i));
    offset += n;
  }
  Json manifest{{"format_version", kCheckpointFormatVersion},
                {"config", to_json(model.config())},
                {"parameters", table},
                {"extras", extras}};

  std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
  require(bin.good(), ErrorKind::Io, "cannot write '" + dir + "/params.bin'");
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::ofstream man(fs::path(dir) / "manifest.json");
  require(man.good(), ErrorKind::Io, "cannot write '" + dir + "/manifest.json'");
  man << manifest.dump(2) << '\n';
  require(bin.good() && man.good(), ErrorKind::Io,
          "write to checkpoint directory '" + dir + "' failed");
}

Checkpoint load_checkpoint(const std::string& dir) {
  const auto man_path = fs::path(dir) / "manifest.json";
  const auto bin_path = fs::path(dir) / "params.bin";
  require(fs::exists(man_path), ErrorKind::Io,
          "checkpoint manifest missing: " + man_path.string());
  require(fs::exists(bin_path), ErrorKind::Io,
          "checkpoint blob missing: " + bin_path.string());

  Json manifest;
  {
    std::ifstream in(man_path);
    try {
      manifest = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::CorruptCheckpoint,
           "unparseable manifest " + man_path.string() + ": " + e.what());
    }
  }
  if (!manifest.is_object() || !manifest.contains("format_version") ||
      !manifest["format_version"].is_number_integer())
    fail(ErrorKind::CorruptCheckpoint,
         "manifest " + man_path.string() + " has no integer format_version");
  const int version = manifest["format_version"].get<int>();
  require(version == kCheckpointFormatVersion, ErrorKind::UnsupportedVersion,
          "checkpoint format_version " + std::to_string(version) +
              " is not supported (expected " +
              std::to_string(kCheckpointFormatVersion) + ")");

  struct Entry {
    Shape shape;
    std::size_t offset = 0, length = 0;
    bool frozen = false;
  };
  std::map<std::string, Entry> entries;
  ModelConfig config;
  try {
    config = model_config_from_json(manifest.at("config"));
    for (const auto& e : manifest.at("parameters")) {
      Entry en{e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>(),
               e.at("length").get<std::size_t>(),
               e.value("frozen", false)};
      entries[e.at("name").get<std::string>()] = en;
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::CorruptCheckpoint,
         "malformed manifest " + man_path.string() + ": " + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::CorruptCheckpoint,
         "manifest " + man_path.string() + " holds an invalid config: " +
             e.what());
  }

  TsrmModel<float> model(config);
  for (const auto& p : model.params().all()) {
    auto it = entries.find(p.name);
    require(it != entries.end(), ErrorKind::ShapeMismatch,
            "checkpoint lacks parameter '" + p.name + "'");
    require(it->second.shape == p.tensor.shape() &&
                it->second.length == static_cast<std::size_t>(p.tensor.size()),
            ErrorKind::ShapeMismatch,
            "parameter '" + p.name + "': manifest shape " +
                shape_str(it->second.shape) + " vs configured " +
                shape_str(p.tensor.shape()));
  }
  require(entries.size() == model.params().all().size(),
          ErrorKind::ShapeMismatch,
          "checkpoint holds " + std::to_string(entries.size()) +
              " parameters, configured model has " +
              std::to_string(model.params().all().size()));

  std::ifstream bin(bin_path, std::ios::binary);
  std::vector<char> blob((std::istreambuf_iterator<char>(bin)),
                         std::istreambuf_iterator<char>());
  std::size_t total = 0;
  for (const auto& [name, e] : entries) total += e.length;
  require(blob.size() == total * 4, ErrorKind::CorruptCheckpoint,
          "params.bin holds " + std::to_string(blob.size()) +
              " bytes, manifest describes " + std::to_string(total * 4));

  for (auto& p : model.params().all()) {
    const auto& e = entries.at(p.name);
    require((e.offset + e.length) * 4 <= blob.size(),
            ErrorKind::CorruptCheckpoint,
            "parameter '" + p.name + "' extends past the end of params.bin");
    auto& v = p.tensor.value();
    for (std::size_t i = 0; i < e.length; ++i)
      v(Index(i)) = get_le(blob.data() + (e.offset + i) * 4);
  }
  for (const auto& [name, e] : entries) model.params().set_frozen(name, e.frozen);
  return {std::move(model),
          manifest.contains("extras") ? manifest["extras"] : Json::object()};
}

}  // namespace tsrm
