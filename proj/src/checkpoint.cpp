#include "circuitscope/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <regex>

#include "circuitscope/error.hpp"

namespace circuitscope {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

constexpr std::size_t kMagicLen = 8;
constexpr std::size_t kPrefixLen = kMagicLen + 8;

std::size_t align_up(std::size_t n) { return (n + kCheckpointAlignment - 1) / kCheckpointAlignment * kCheckpointAlignment; }

struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};

std::vector<NamedTensor> collect(const Checkpoint& c) {
  std::vector<NamedTensor> out;
  c.weights.visit([&](const std::string& n, const Tensor& t) { out.push_back({n, &t}); });
  if (c.optimizer) {
    c.optimizer->m.visit([&](const std::string& n, const Tensor& t) { out.push_back({"optimizer.m." + n, &t}); });
    c.optimizer->v.visit([&](const std::string& n, const Tensor& t) { out.push_back({"optimizer.v." + n, &t}); });
  }
  return out;
}

std::span<const std::uint8_t> bytes_of(const Tensor& t) {
  return {reinterpret_cast<const std::uint8_t*>(t.ptr()), t.numel() * sizeof(float)};
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  const auto tensors = collect(ckpt);
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& nt : tensors) {
    const auto bytes = bytes_of(*nt.tensor);
    entries.push_back({{"name", nt.name},
                       {"shape", nt.tensor->shape()},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"nbytes", bytes.size()},
                       {"crc32", crc32_of(bytes)}});
    offset = align_up(offset + bytes.size());
  }
  nlohmann::json header = {{"format", kCheckpointMagic},
                           {"step", ckpt.step},
                           {"train_loss", ckpt.train_loss},
                           {"model_config", ckpt.model_config},
                           {"run_config", ckpt.run_config},
                           {"optimizer_step", ckpt.optimizer ? nlohmann::json(ckpt.optimizer->t) : nlohmann::json()},
                           {"tensors", entries}};
  const std::string text = header.dump();
  const std::size_t data_start = align_up(kPrefixLen + text.size());

  std::vector<std::uint8_t> out(data_start + offset, 0);
  std::memcpy(out.data(), kCheckpointMagic, kMagicLen);
  const std::uint64_t hlen = text.size();
  std::memcpy(out.data() + kMagicLen, &hlen, 8);
  std::memcpy(out.data() + kPrefixLen, text.data(), text.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto bytes = bytes_of(*tensors[i].tensor);
    const auto off = entries[i]["offset"].get<std::size_t>();
    std::memcpy(out.data() + data_start + off, bytes.data(), bytes.size());
  }
  // The payload section ends exactly at the last tensor; trailing pad is
  // dropped so a truncated final tensor is always detectable.
  if (!tensors.empty()) {
    const auto& last = entries.back();
    out.resize(data_start + last["offset"].get<std::size_t>() + last["nbytes"].get<std::size_t>());
  }
  return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  auto fail = [&](const std::string& msg) { return FormatError(source + ": " + msg); };
  if (bytes.size() < kPrefixLen) throw fail("file too short for checkpoint prefix");
  if (std::memcmp(bytes.data(), "CKPTv", 5) != 0) throw fail("bad magic (not a checkpoint file)");
  if (std::memcmp(bytes.data(), kCheckpointMagic, kMagicLen) != 0) {
    throw fail("unsupported checkpoint version '" + std::string(reinterpret_cast<const char*>(bytes.data()), kMagicLen) +
               "'");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + kMagicLen, 8);
  if (hlen > bytes.size() - kPrefixLen) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPrefixLen, bytes.begin() + kPrefixLen + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("header is not valid JSON: ") + e.what());
  }
  const std::size_t data_start = align_up(kPrefixLen + hlen);
  auto require_zero_pad = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < std::min(end, bytes.size()); ++i) {
      if (bytes[i] != 0) throw fail("nonzero alignment padding at byte " + std::to_string(i));
    }
  };
  require_zero_pad(kPrefixLen + hlen, data_start);

  Checkpoint c;
  std::map<std::string, Tensor> tensors;
  try {
    if (header.at("format").get<std::string>() != kCheckpointMagic) throw fail("header format tag mismatch");
    c.step = header.at("step").get<int>();
    c.train_loss = header.at("train_loss").get<double>();
    c.model_config = header.at("model_config").get<ModelConfig>();
    c.run_config = header.at("run_config");
    std::size_t prev_end = 0;
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (e.at("dtype").get<std::string>() != "f32") throw fail("tensor " + name + " has unsupported dtype");
      if (shape.empty() || std::find(shape.begin(), shape.end(), 0u) != shape.end()) {
        throw fail("tensor " + name + " has an invalid shape");
      }
      if (nbytes != shape_numel(shape) * sizeof(float)) {
        throw fail("tensor " + name + " byte count " + std::to_string(nbytes) + " inconsistent with shape " +
                   shape_to_string(shape));
      }
      if (offset % kCheckpointAlignment != 0 || offset < prev_end) {
        throw fail("tensor " + name + " offset " + std::to_string(offset) + " is misaligned or overlaps");
      }
      if (data_start + offset + nbytes > bytes.size()) throw fail("tensor " + name + " payload is truncated");
      require_zero_pad(data_start + prev_end, data_start + offset);
      const auto payload = bytes.subspan(data_start + offset, nbytes);
      if (crc32_of(payload) != e.at("crc32").get<std::uint32_t>()) throw fail("tensor " + name + " failed its CRC32 check");
      std::vector<float> data(shape_numel(shape));
      std::memcpy(data.data(), payload.data(), nbytes);
      if (!tensors.emplace(name, Tensor(shape, std::move(data))).second) throw fail("duplicate tensor " + name);
      prev_end = offset + nbytes;
    }
    if (data_start + prev_end != bytes.size()) throw fail("unexpected trailing bytes after the last tensor");
    c.model_config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw fail(std::string("invalid model config: ") + e.what());
  }

  auto take_into = [&](Weights& w, const std::string& prefix, bool required) {
    w = Weights::zeros(c.model_config);
    bool any = false;
    w.visit([&](const std::string& name, Tensor& t) {
      auto it = tensors.find(prefix + name);
      if (it == tensors.end()) {
        if (required || any) throw fail("missing tensor " + prefix + name);
        return;
      }
      if (it->second.shape() != t.shape()) {
        throw fail("tensor " + prefix + name + " has shape " + shape_to_string(it->second.shape()) + ", expected " +
                   shape_to_string(t.shape()));
      }
      any = true;
      t = std::move(it->second);
      tensors.erase(it);
    });
    return any;
  };
  take_into(c.weights, "", true);
  OptimizerState opt;
  const bool has_m = take_into(opt.m, "optimizer.m.", false);
  const bool has_v = take_into(opt.v, "optimizer.v.", false);
  if (has_m != has_v) throw fail("optimizer state is incomplete");
  if (has_m) {
    if (!header.at("optimizer_step").is_number_integer()) throw fail("optimizer_step missing");
    opt.t = header.at("optimizer_step").get<std::int64_t>();
    c.optimizer = std::move(opt);
  }
  if (!tensors.empty()) throw fail("unexpected tensor " + tensors.begin()->first);
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string());
}

std::vector<CheckpointFile> list_checkpoints(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("checkpoint directory " + dir.string() + " does not exist");
  static const std::regex pattern(R"(ckpt_(\d+)\.bin)");
  std::vector<CheckpointFile> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && std::regex_match(name, m, pattern)) {
      out.push_back({std::stoi(m[1].str()), entry.path()});
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
  return out;
}

}  // namespace circuitscope
