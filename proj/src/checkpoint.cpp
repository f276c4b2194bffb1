#include <cstring>
#include <fstream>

#include "rap/trainer.hpp"

namespace rap {

namespace {

void write_u32(std::ostream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
uint32_t read_u32(std::istream& f) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  if (!f) throw CorruptFile("checkpoint truncated");
  return v;
}
void write_str(std::ostream& f, const std::string& s) {
  write_u32(f, uint32_t(s.size()));
  f.write(s.data(), std::streamsize(s.size()));
}
std::string read_str(std::istream& f) {
  uint32_t n = read_u32(f);
  if (n > 4096) throw CorruptFile("implausible string length");
  std::string s(n, '\0');
  f.read(s.data(), std::streamsize(n));
  if (!f) throw CorruptFile("checkpoint truncated");
  return s;
}

void write_store(std::ostream& f, const nn::ParamStore<Real>& store) {
  write_u32(f, uint32_t(store.entries.size()));
  for (const auto& e : store.entries) {
    write_str(f, e.name);
    write_u32(f, e.trainable ? 1 : 0);
    write_u32(f, uint32_t(e.value.shape.size()));
    for (int d : e.value.shape) write_u32(f, uint32_t(d));
    std::vector<float> tmp(e.value.data.begin(), e.value.data.end());
    f.write(reinterpret_cast<const char*>(tmp.data()), std::streamsize(tmp.size() * 4));
  }
}

void read_store_into(std::istream& f, nn::ParamStore<Real>& store) {
  uint32_t n = read_u32(f);
  if (n != store.entries.size()) throw CorruptFile("checkpoint entry count mismatch");
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = read_str(f);
    uint32_t trainable = read_u32(f);
    (void)trainable;
    uint32_t rank = read_u32(f);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = int(read_u32(f));
    int id = store.find(name);
    if (id < 0) throw CorruptFile("unknown parameter block: " + name);
    auto& entry = store[id];
    if (entry.shape != shape) throw CorruptFile("shape mismatch for " + name);
    std::vector<float> tmp(entry.numel());
    f.read(reinterpret_cast<char*>(tmp.data()), std::streamsize(tmp.size() * 4));
    if (!f) throw CorruptFile("checkpoint truncated");
    std::copy(tmp.begin(), tmp.end(), entry.data.begin());
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const PoseRegressor<Real>& model,
                     const Adversary<Real>* adversary) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write("RAPW", 4);
  write_u32(f, 1);  // version
  write_u32(f, uint32_t(model.cfg.in_h));
  write_u32(f, uint32_t(model.cfg.in_w));
  write_u32(f, model.cfg.transformer_decoder ? 1 : 0);
  write_u32(f, uint32_t(model.cfg.head_hidden));
  write_u32(f, adversary ? 1 : 0);
  write_store(f, model.params);
  if (adversary) write_store(f, adversary->params);
  if (!f) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "RAPW", 4) != 0) throw CorruptFile("bad checkpoint magic");
  if (read_u32(f) != 1) throw CorruptFile("unsupported checkpoint version");
  Checkpoint ck;
  RegressorConfig rc;
  rc.in_h = int(read_u32(f));
  rc.in_w = int(read_u32(f));
  rc.transformer_decoder = read_u32(f) != 0;
  rc.head_hidden = int(read_u32(f));
  bool has_adv = read_u32(f) != 0;
  Rng zero(0);
  ck.model.build(rc, zero);
  read_store_into(f, ck.model.params);
  ck.has_adversary = has_adv;
  if (has_adv) {
    Rng z2(0);
    ck.adversary.build(ck.model.ft_h, ck.model.ft_w, ck.model.fr_h, ck.model.fr_w, z2);
    read_store_into(f, ck.adversary.params);
  }
  f.peek();
  if (!f.eof()) throw CorruptFile("trailing bytes in checkpoint");
  return ck;
}

}  // namespace rap
