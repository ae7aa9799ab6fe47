#include "cemformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "cemformer/error.hpp"

namespace cem::checkpoint {
namespace {

constexpr const char* kMagic = "cemformer-checkpoint";
constexpr int kVersion = 1;

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t pos, std::string where)
      : bytes_(bytes), pos_(pos), where_(std::move(where)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(where_, "truncated tensor payload");
  }
  const std::string& bytes_;
  std::size_t pos_;
  std::string where_;
};

}  // namespace

std::string to_bytes(const encoder::Model& model) {
  const auto& c = model.config();
  std::ostringstream head;
  head << kMagic << ' ' << kVersion << '\n'
       << "layers " << c.encoder.layers << '\n'
       << "d_model " << c.encoder.d_model << '\n'
       << "heads " << c.encoder.heads << '\n'
       << "memory_tokens " << c.encoder.memory_tokens << '\n'
       << "mlp_ratio " << c.encoder.mlp_ratio << '\n'
       << "n_classes " << c.encoder.n_classes << '\n'
       << "patch " << c.patch.patch << '\n'
       << "carry_memory " << (c.carry_memory ? 1 : 0) << '\n';
  head << "classes";
  for (const auto& n : c.class_names) head << ' ' << n;
  head << '\n';
  for (std::size_t v = 0; v < c.views.size(); ++v)
    head << "view " << c.views[v].channels << ' ' << c.views[v].height << ' ' << c.views[v].width << '\n';
  head << "end\n";

  std::string out = head.str();
  const auto named = model.weights().named();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint64_t>(out, e);
    for (double v : t.values()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

encoder::Model from_bytes(const std::string& bytes, const std::string& where) {
  encoder::ModelConfig c;
  c.views.clear();
  std::size_t pos = 0;
  bool ended = false;
  bool first = true;
  while (!ended) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError(where, "header not terminated");
    const std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    auto bad = [&] { throw FormatError(where, "bad header line '" + line + "'"); };
    if (first) {
      int version = 0;
      if (key != kMagic || !(ls >> version)) throw FormatError(where, "not a checkpoint");
      if (version != kVersion) throw FormatError(where, "unsupported checkpoint version " + std::to_string(version));
      first = false;
      continue;
    }
    if (key == "end") {
      ended = true;
    } else if (key == "layers") {
      if (!(ls >> c.encoder.layers)) bad();
    } else if (key == "d_model") {
      if (!(ls >> c.encoder.d_model)) bad();
    } else if (key == "heads") {
      if (!(ls >> c.encoder.heads)) bad();
    } else if (key == "memory_tokens") {
      if (!(ls >> c.encoder.memory_tokens)) bad();
    } else if (key == "mlp_ratio") {
      if (!(ls >> c.encoder.mlp_ratio)) bad();
    } else if (key == "n_classes") {
      if (!(ls >> c.encoder.n_classes)) bad();
    } else if (key == "patch") {
      if (!(ls >> c.patch.patch)) bad();
    } else if (key == "carry_memory") {
      int flag = 0;
      if (!(ls >> flag)) bad();
      c.carry_memory = flag != 0;
    } else if (key == "classes") {
      std::string n;
      while (ls >> n) c.class_names.push_back(n);
    } else if (key == "view") {
      embed::ViewGeometry g;
      if (!(ls >> g.channels >> g.height >> g.width)) bad();
      c.views.push_back(g);
    } else {
      bad();
    }
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw FormatError(where, std::string("invalid model config: ") + e.what());
  }

  std::mt19937_64 rng(0);
  encoder::Weights w = encoder::initialize_weights(c, rng);
  std::map<std::string, kernel::Tensor> slots;
  for (auto& [name, t] : w.named()) slots.emplace(name, t);

  Reader r(bytes, pos, where);
  const auto count = r.get<std::uint32_t>();
  if (count != slots.size())
    throw FormatError(where, "expected " + std::to_string(slots.size()) + " tensors, found " + std::to_string(count));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.text(r.get<std::uint32_t>());
    const auto it = slots.find(name);
    if (it == slots.end()) throw FormatError(where, "unknown tensor '" + name + "'");
    kernel::Shape shape(r.get<std::uint32_t>());
    for (auto& e : shape) e = r.get<std::uint64_t>();
    if (shape != it->second.shape())
      throw FormatError(where, "tensor '" + name + "' has shape " + kernel::to_string(shape) + ", model expects " +
                                   kernel::to_string(it->second.shape()));
    for (auto& v : it->second.mutable_values()) v = std::bit_cast<double>(r.get<std::uint64_t>());
    slots.erase(it);
  }
  if (!r.done()) throw FormatError(where, "trailing bytes after tensors");
  return encoder::Model(std::move(c), std::move(w));
}

void save(const encoder::Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string(), "cannot open for writing");
  const std::string bytes = to_bytes(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(path.string(), "write failed");
}

encoder::Model load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), "cannot open checkpoint");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_bytes(bytes, path.string());
}

}  // namespace cem::checkpoint
