#include "dgpo/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "dgpo/error.hpp"

namespace dgpo {
namespace {

constexpr std::array<char, 8> kMagic = {'D', 'G', 'P', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& os, T value) {
  static_assert(std::is_integral_v<T>);
  std::array<unsigned char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

template <typename T>
T get_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw FileError("truncated checkpoint");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void save_checkpoint(const PolicyModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FileError("cannot open checkpoint for writing: " + path.string());
  const ModelShape& s = model.shape();
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(os, kVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.kind));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.vocab.size));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.vocab.eos));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.context_window));
  const bool mlp = s.kind == ModelKind::mlp;
  put_le<std::uint32_t>(os, mlp ? static_cast<std::uint32_t>(s.hidden_width) : 0U);
  put_le<std::uint32_t>(os, mlp ? static_cast<std::uint32_t>(s.embed_dim) : 0U);
  put_le<std::uint32_t>(os, mlp ? 0U : static_cast<std::uint32_t>(s.buckets));
  put_le<std::uint64_t>(os, model.param_count());
  for (double p : model.params()) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(p));
  if (!os) throw FileError("failed writing checkpoint: " + path.string());
}

PolicyModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot open checkpoint: " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw FileError("not a checkpoint file: " + path.string());
  if (get_le<std::uint32_t>(is) != kVersion) throw FileError("unsupported checkpoint version");
  ModelShape s;
  const auto kind = get_le<std::uint32_t>(is);
  if (kind > 1) throw FileError("unknown model kind in checkpoint");
  s.kind = static_cast<ModelKind>(kind);
  s.vocab.size = static_cast<int>(get_le<std::uint32_t>(is));
  s.vocab.eos = static_cast<TokenId>(get_le<std::uint32_t>(is));
  s.context_window = static_cast<int>(get_le<std::uint32_t>(is));
  s.hidden_width = static_cast<int>(get_le<std::uint32_t>(is));
  s.embed_dim = static_cast<int>(get_le<std::uint32_t>(is));
  s.buckets = static_cast<int>(get_le<std::uint32_t>(is));
  const auto n = get_le<std::uint64_t>(is);
  PolicyModel model(s);
  if (n != model.param_count()) throw FileError("checkpoint parameter count does not match header shape");
  for (double& p : model.params()) p = std::bit_cast<double>(get_le<std::uint64_t>(is));
  return model;
}

}  // namespace dgpo
