#include "lla/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "lla/errors.hpp"

namespace lla {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kTensorMagic[4] = {'L', 'L', 'A', 'T'};
constexpr std::uint32_t kTensorVersion = 1;
constexpr std::uint32_t kMaxDims = 8;

void put_u32(std::vector<unsigned char> &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
}

void put_u64(std::vector<unsigned char> &out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
}

class Reader {
public:
  explicit Reader(const std::vector<unsigned char> &bytes) : bytes_(bytes) {}

  std::uint64_t take(std::size_t width) {
    if (bytes_.size() - pos_ < width) {
      throw FormatError("LLAT: truncated file");
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += width;
    return v;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

private:
  const std::vector<unsigned char> &bytes_;
  std::size_t pos_ = 0;
};

std::string tensor_name(const std::string &role) { return role + ".llat"; }

json ffn_entry(const FfnBlock &ffn, const std::string &prefix,
               const fs::path &dir) {
  json j;
  j["kind"] = to_string(ffn.kind);
  j["activation"] = to_string(ffn.activation);
  j["w_up"] = tensor_name(prefix + ".w_up");
  save_tensor(ffn.w_up, dir / j["w_up"].get<std::string>());
  if (ffn.w_gate) {
    j["w_gate"] = tensor_name(prefix + ".w_gate");
    save_tensor(*ffn.w_gate, dir / j["w_gate"].get<std::string>());
  }
  j["w_down"] = tensor_name(prefix + ".w_down");
  save_tensor(ffn.w_down, dir / j["w_down"].get<std::string>());
  return j;
}

const json &field(const json &j, const char *key) {
  if (!j.contains(key)) {
    throw FormatError(std::string("model manifest: missing field '") + key + "'");
  }
  return j.at(key);
}

} // namespace

std::vector<unsigned char> encode_tensor(const DenseMatrix &m) {
  std::vector<unsigned char> out;
  out.reserve(12 + 16 + 4 * m.size());
  out.insert(out.end(), std::begin(kTensorMagic), std::end(kTensorMagic));
  put_u32(out, kTensorVersion);
  put_u32(out, 2);
  put_u64(out, m.rows());
  put_u64(out, m.cols());
  for (float v : m.values()) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

DenseMatrix decode_tensor(const std::vector<unsigned char> &bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw FormatError("LLAT: bad magic");
  }
  Reader in(bytes);
  in.take(4);
  const auto version = in.take(4);
  if (version != kTensorVersion) {
    throw FormatError("LLAT: unsupported version " + std::to_string(version));
  }
  const auto ndims = in.take(4);
  if (ndims == 0 || ndims > kMaxDims) {
    throw FormatError("LLAT: unsupported dimension count " + std::to_string(ndims));
  }
  std::vector<std::uint64_t> dims(ndims);
  std::uint64_t count = 1;
  for (auto &d : dims) {
    d = in.take(8);
    if (d != 0 && count > std::numeric_limits<std::uint64_t>::max() / 4 / d) {
      throw FormatError("LLAT: dimension overflow");
    }
    count *= d;
  }
  if (ndims > 2) {
    throw FormatError("LLAT: only 1-D and 2-D tensors load as matrices");
  }
  if (in.remaining() < count * 4) {
    throw FormatError("LLAT: truncated payload");
  }
  if (in.remaining() > count * 4) {
    throw FormatError("LLAT: trailing bytes after payload");
  }
  const std::size_t rows = ndims == 2 ? dims[0] : 1;
  const std::size_t cols = ndims == 2 ? dims[1] : dims[0];
  std::vector<float> data(count);
  for (auto &v : data) {
    v = std::bit_cast<float>(static_cast<std::uint32_t>(in.take(4)));
  }
  return DenseMatrix(rows, cols, std::move(data));
}

void save_tensor(const DenseMatrix &m, const fs::path &path) {
  write_binary_file(path, encode_tensor(m));
}

DenseMatrix load_tensor(const fs::path &path) { return decode_tensor(read_binary_file(path)); }

void write_binary_file(const fs::path &path, const std::vector<unsigned char> &bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw InputError("cannot write " + path.string());
  }
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw InputError("write failed for " + path.string());
  }
}

std::vector<unsigned char> read_binary_file(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw InputError("cannot read " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text_file(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw InputError("cannot write " + path.string());
  }
  out << text;
}

std::string read_text_file(const fs::path &path) {
  std::ifstream in(path);
  if (!in) {
    throw InputError("cannot read " + path.string());
  }
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void save_model_dir(const ToyModel &model, const fs::path &dir, const json &extra) {
  model.validate();
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "lla-model";
  manifest["version"] = 1;
  manifest["vocab"] = model.vocab;
  manifest["d_model"] = model.d_model;
  manifest["embed"] = tensor_name("embed");
  save_tensor(model.embed, dir / tensor_name("embed"));
  manifest["unembed"] = tensor_name("unembed");
  save_tensor(model.unembed, dir / tensor_name("unembed"));
  json blocks = json::array();
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b);
    json jb;
    jb["mix"] = tensor_name(prefix + ".mix");
    save_tensor(model.blocks[b].mix, dir / jb["mix"].get<std::string>());
    jb["ffn"] = ffn_entry(model.blocks[b].ffn, prefix, dir);
    blocks.push_back(std::move(jb));
  }
  manifest["blocks"] = std::move(blocks);
  for (const auto &[key, value] : extra.items()) {
    manifest[key] = value;
  }
  write_text_file(dir / "model.json", manifest.dump(2) + "\n");
}

ToyModel load_model_dir(const fs::path &dir, json *manifest_out) {
  json manifest;
  try {
    manifest = json::parse(read_text_file(dir / "model.json"));
  } catch (const json::exception &e) {
    throw FormatError("model manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "lla-model") {
    throw FormatError("model manifest: not an lla-model directory");
  }
  try {
    ToyModel model;
    model.vocab = field(manifest, "vocab").get<std::size_t>();
    model.d_model = field(manifest, "d_model").get<std::size_t>();
    model.embed = load_tensor(dir / field(manifest, "embed").get<std::string>());
    model.unembed = load_tensor(dir / field(manifest, "unembed").get<std::string>());
    for (const auto &jb : field(manifest, "blocks")) {
      Block block;
      block.mix = load_tensor(dir / field(jb, "mix").get<std::string>());
      const auto &jf = field(jb, "ffn");
      block.ffn.kind = parse_ffn_kind(field(jf, "kind").get<std::string>());
      block.ffn.activation = parse_activation(field(jf, "activation").get<std::string>());
      block.ffn.w_up = load_tensor(dir / field(jf, "w_up").get<std::string>());
      if (jf.contains("w_gate")) {
        block.ffn.w_gate = load_tensor(dir / jf.at("w_gate").get<std::string>());
      }
      block.ffn.w_down = load_tensor(dir / field(jf, "w_down").get<std::string>());
      model.blocks.push_back(std::move(block));
    }
    model.validate();
    if (manifest_out) {
      *manifest_out = manifest;
    }
    return model;
  } catch (const json::exception &e) {
    throw FormatError("model manifest: " + std::string(e.what()));
  }
}

std::vector<TokenSeq> read_token_file(const fs::path &path) {
  std::istringstream in(read_text_file(path));
  std::vector<TokenSeq> seqs;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    TokenSeq seq;
    long long v = 0;
    while (ls >> v) {
      if (v < 0 || v > std::numeric_limits<Token>::max()) {
        throw FormatError("token file: id out of range in " + path.string());
      }
      seq.push_back(static_cast<Token>(v));
    }
    if (!ls.eof()) {
      throw FormatError("token file: non-numeric entry in " + path.string());
    }
    if (!seq.empty()) {
      seqs.push_back(std::move(seq));
    }
  }
  return seqs;
}

void write_token_file(const fs::path &path, const std::vector<TokenSeq> &seqs) {
  std::ostringstream os;
  for (const auto &seq : seqs) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      os << (i ? " " : "") << seq[i];
    }
    os << "\n";
  }
  write_text_file(path, os.str());
}

} // namespace lla
