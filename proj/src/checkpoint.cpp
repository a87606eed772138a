#include "masv/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <limits>

#include "masv/kvconfig.hpp"

namespace masv {
namespace io {

namespace {
constexpr char kMagic[6] = {'M', 'A', 'S', 'V', '1', '\n'};

template <typename W>
void put_u32(W& w, uint32_t v) { w.write(reinterpret_cast<const char*>(&v), 4); }
template <typename W>
void put_u64(W& w, uint64_t v) { w.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t get_u32(std::istream& s, const std::string& path) {
  uint32_t v = 0;
  s.read(reinterpret_cast<char*>(&v), 4);
  MASV_CHECK(s.good(), ParseError, path, ": truncated checkpoint");
  return v;
}
uint64_t get_u64(std::istream& s, const std::string& path) {
  uint64_t v = 0;
  s.read(reinterpret_cast<char*>(&v), 8);
  MASV_CHECK(s.good(), ParseError, path, ": truncated checkpoint");
  return v;
}
}  // namespace

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, e] : tensors)
    if (n == name) return &e;
  return nullptr;
}

template <typename T>
void Checkpoint::add_tensor(const std::string& name, const Shape& shape, const T* data) {
  Entry e;
  e.shape = shape;
  e.dtype = std::is_same_v<T, double> ? 1 : 0;
  const size_t n = static_cast<size_t>(shape_numel(shape));
  e.bytes.resize(n * sizeof(T));
  std::memcpy(e.bytes.data(), data, e.bytes.size());
  tensors.emplace_back(name, std::move(e));
}

template <typename T>
std::vector<T> Checkpoint::tensor_as(const std::string& name) const {
  const Entry* e = find(name);
  MASV_CHECK(e != nullptr, StateError, "checkpoint is missing tensor `", name, "`");
  const size_t n = static_cast<size_t>(shape_numel(e->shape));
  std::vector<T> out(n);
  if (e->dtype == (std::is_same_v<T, double> ? 1 : 0)) {
    std::memcpy(out.data(), e->bytes.data(), n * sizeof(T));
  } else if (e->dtype == 0) {
    const float* p = reinterpret_cast<const float*>(e->bytes.data());
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<T>(p[i]);
  } else {
    const double* p = reinterpret_cast<const double*>(e->bytes.data());
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<T>(p[i]);
  }
  return out;
}

void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream fs(path, std::ios::binary);
  MASV_CHECK(fs.good(), IoError, "cannot write checkpoint: ", path);
  fs.write(kMagic, 6);
  const std::string cfg = kv_to_text(ck.config);
  put_u32(fs, static_cast<uint32_t>(cfg.size()));
  fs.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put_u32(fs, static_cast<uint32_t>(ck.tensors.size()));
  uint64_t offset = 0;
  for (const auto& [name, e] : ck.tensors) {
    put_u32(fs, static_cast<uint32_t>(name.size()));
    fs.write(name.data(), static_cast<std::streamsize>(name.size()));
    const uint8_t dtype = static_cast<uint8_t>(e.dtype);
    const uint8_t ndim = static_cast<uint8_t>(e.shape.size());
    fs.write(reinterpret_cast<const char*>(&dtype), 1);
    fs.write(reinterpret_cast<const char*>(&ndim), 1);
    for (int64_t d : e.shape) put_u64(fs, static_cast<uint64_t>(d));
    put_u64(fs, offset);
    offset += e.bytes.size();
  }
  put_u64(fs, offset);
  for (const auto& [name, e] : ck.tensors)
    fs.write(reinterpret_cast<const char*>(e.bytes.data()),
             static_cast<std::streamsize>(e.bytes.size()));
  MASV_CHECK(fs.good(), IoError, "short write to ", path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream fs(path, std::ios::binary);
  MASV_CHECK(fs.good(), IoError, "cannot open checkpoint: ", path);
  char magic[6];
  fs.read(magic, 6);
  MASV_CHECK(fs.good() && std::memcmp(magic, kMagic, 6) == 0, ParseError, path,
             ": bad checkpoint magic at byte 0");
  Checkpoint ck;
  const uint32_t cfg_len = get_u32(fs, path);
  std::string cfg(cfg_len, '\0');
  fs.read(cfg.data(), cfg_len);
  MASV_CHECK(fs.good(), ParseError, path, ": truncated config block");
  ck.config = parse_kv_text(cfg);
  const uint32_t n_tensors = get_u32(fs, path);
  struct Meta {
    std::string name;
    Checkpoint::Entry entry;
    uint64_t offset;
  };
  std::vector<Meta> metas(n_tensors);
  for (auto& m : metas) {
    const uint32_t name_len = get_u32(fs, path);
    m.name.resize(name_len);
    fs.read(m.name.data(), name_len);
    uint8_t dtype = 0, ndim = 0;
    fs.read(reinterpret_cast<char*>(&dtype), 1);
    fs.read(reinterpret_cast<char*>(&ndim), 1);
    MASV_CHECK(fs.good() && dtype <= 1, ParseError, path, ": bad tensor header for `", m.name,
               "`");
    m.entry.dtype = dtype;
    m.entry.shape.resize(ndim);
    for (auto& d : m.entry.shape) d = static_cast<int64_t>(get_u64(fs, path));
    m.offset = get_u64(fs, path);
  }
  const uint64_t payload_len = get_u64(fs, path);
  std::vector<unsigned char> payload(payload_len);
  fs.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_len));
  MASV_CHECK(fs.good(), ParseError, path, ": truncated payload");
  for (auto& m : metas) {
    const size_t bytes =
        static_cast<size_t>(shape_numel(m.entry.shape)) * (m.entry.dtype == 1 ? 8 : 4);
    MASV_CHECK(m.offset + bytes <= payload_len, ParseError, path, ": tensor `", m.name,
               "` overruns payload");
    m.entry.bytes.assign(payload.begin() + static_cast<int64_t>(m.offset),
                         payload.begin() + static_cast<int64_t>(m.offset + bytes));
    ck.tensors.emplace_back(std::move(m.name), std::move(m.entry));
  }
  return ck;
}

template <typename T>
Checkpoint snapshot_model(model::MasvModel<T>& m,
                          const std::map<std::string, std::string>& extra_config,
                          train::Adam<T>* opt) {
  Checkpoint ck;
  for (const auto& [k, v] : m.config().to_kv()) ck.config["model." + k] = v;
  for (const auto& [k, v] : extra_config) ck.config[k] = v;
  ck.config["precision"] = std::is_same_v<T, double> ? "f64" : "f32";
  std::vector<std::pair<std::string, Tensor<T>*>> params;
  m.visit_params("", [&](const std::string& name, Tensor<T>& p) {
    ck.add_tensor(name, p.shape(), p.data().data());
    params.emplace_back(name, &p);
  });
  m.visit_stats("", [&](const std::string& name, ops::RunningStats<T>& st) {
    const Shape s{static_cast<int64_t>(st.mean.size())};
    ck.add_tensor(name + ".mean", s, st.mean.data());
    ck.add_tensor(name + ".var", s, st.var.data());
    const T flag = st.initialized ? T(1) : T(0);
    ck.add_tensor(name + ".init", Shape{1}, &flag);
  });
  if (opt) {
    ck.config["opt.step"] = std::to_string(opt->steps_taken());
    for (size_t i = 0; i < params.size(); ++i) {
      const Shape& s = params[i].second->shape();
      ck.add_tensor("opt.m." + params[i].first, s, opt->moment1()[i].data());
      ck.add_tensor("opt.v." + params[i].first, s, opt->moment2()[i].data());
    }
  }
  return ck;
}

template <typename T>
void restore_model(const Checkpoint& ck, model::MasvModel<T>& m, train::Adam<T>* opt) {
  size_t idx = 0;
  m.visit_params("", [&](const std::string& name, Tensor<T>& p) {
    auto v = ck.tensor_as<T>(name);
    MASV_CHECK(static_cast<int64_t>(v.size()) == p.numel(), StateError, "checkpoint tensor `",
               name, "` has ", v.size(), " values, model expects ", p.numel());
    std::copy(v.begin(), v.end(), p.mutable_data().begin());
    if (opt) {
      auto mm = ck.tensor_as<T>("opt.m." + name);
      auto vv = ck.tensor_as<T>("opt.v." + name);
      MASV_CHECK(mm.size() == v.size() && vv.size() == v.size(), StateError,
                 "optimizer state size mismatch for `", name, "`");
      opt->moment1()[idx] = std::move(mm);
      opt->moment2()[idx] = std::move(vv);
    }
    ++idx;
  });
  m.visit_stats("", [&](const std::string& name, ops::RunningStats<T>& st) {
    st.mean = ck.tensor_as<T>(name + ".mean");
    st.var = ck.tensor_as<T>(name + ".var");
    st.initialized = ck.tensor_as<T>(name + ".init")[0] != T(0);
  });
  if (opt) {
    auto it = ck.config.find("opt.step");
    MASV_CHECK(it != ck.config.end(), StateError, "checkpoint has no optimizer step");
    opt->set_steps_taken(std::stoll(it->second));
  }
}

model::ModelConfig checkpoint_model_config(const Checkpoint& ck) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : ck.config)
    if (k.rfind("model.", 0) == 0) kv[k.substr(6)] = v;
  MASV_CHECK(!kv.empty(), ParseError, "checkpoint has no model config block");
  return model::ModelConfig::from_kv(kv);
}

template <typename T>
Checkpoint snapshot_stream(const model::StreamState<T>& st) {
  Checkpoint ck;
  ck.config["kind"] = "stream_state";
  ck.config["buffers_seen"] = std::to_string(st.buffers_seen);
  ck.config["frames_seen"] = std::to_string(st.frames_seen);
  ck.config["cmn_frames"] = std::to_string(st.cmn_frames);
  ck.config["num_blocks"] = std::to_string(st.global_states.size());
  ck.config["initialized"] = st.initialized ? "1" : "0";
  auto vec1 = [&](const std::string& name, const std::vector<T>& v) {
    if (v.empty()) {
      const T zero = T(0);
      ck.add_tensor(name, Shape{1}, &zero);
    } else {
      ck.add_tensor(name, Shape{static_cast<int64_t>(v.size())}, v.data());
    }
  };
  vec1("asp.max", st.asp_max);
  vec1("asp.s0", st.asp_s0);
  vec1("asp.s1", st.asp_s1);
  vec1("asp.s2", st.asp_s2);
  vec1("cmn.sum", st.cmn_sum);
  for (size_t i = 0; i < st.global_states.size(); ++i) {
    const auto& gs = st.global_states[i];
    const std::string p = "global." + std::to_string(i) + ".";
    ck.config[p + "init"] = gs.initialized ? "1" : "0";
    if (gs.initialized) {
      ck.add_tensor(p + "h", gs.h.shape(), gs.h.data().data());
      if (gs.conv_tail.defined())
        ck.add_tensor(p + "tail", gs.conv_tail.shape(), gs.conv_tail.data().data());
    }
  }
  return ck;
}

template <typename T>
model::StreamState<T> restore_stream(const Checkpoint& ck) {
  auto cfg = [&](const char* k) {
    auto it = ck.config.find(k);
    MASV_CHECK(it != ck.config.end(), StateError, "stream state missing key `", k, "`");
    return it->second;
  };
  MASV_CHECK(cfg("kind") == "stream_state", StateError, "checkpoint is not a stream state");
  model::StreamState<T> st;
  st.buffers_seen = std::stoll(cfg("buffers_seen"));
  st.frames_seen = std::stoll(cfg("frames_seen"));
  st.cmn_frames = std::stoll(cfg("cmn_frames"));
  st.initialized = cfg("initialized") == "1";
  st.asp_max = ck.tensor_as<T>("asp.max");
  st.asp_s0 = ck.tensor_as<T>("asp.s0");
  st.asp_s1 = ck.tensor_as<T>("asp.s1");
  st.asp_s2 = ck.tensor_as<T>("asp.s2");
  st.cmn_sum = ck.tensor_as<T>("cmn.sum");
  const int64_t nb = std::stoll(cfg("num_blocks"));
  st.global_states.resize(static_cast<size_t>(nb));
  for (int64_t i = 0; i < nb; ++i) {
    const std::string p = "global." + std::to_string(i) + ".";
    auto& gs = st.global_states[static_cast<size_t>(i)];
    gs.initialized = cfg((p + "init").c_str()) == "1";
    if (gs.initialized) {
      const auto* eh = ck.find(p + "h");
      MASV_CHECK(eh, StateError, "stream state missing tensor `", p + "h", "`");
      gs.h = Tensor<T>::from_data(eh->shape, ck.tensor_as<T>(p + "h"));
      if (const auto* et = ck.find(p + "tail"))
        gs.conv_tail = Tensor<T>::from_data(et->shape, ck.tensor_as<T>(p + "tail"));
    }
  }
  return st;
}

uint64_t file_hash(const std::string& path) {
  std::ifstream fs(path, std::ios::binary);
  MASV_CHECK(fs.good(), IoError, "cannot hash file: ", path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (fs.read(buf, sizeof(buf)) || fs.gcount() > 0) {
    const std::streamsize n = fs.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
    if (!fs) break;
  }
  return h;
}

// ---- instantiations ----
template void Checkpoint::add_tensor(const std::string&, const Shape&, const float*);
template void Checkpoint::add_tensor(const std::string&, const Shape&, const double*);
template std::vector<float> Checkpoint::tensor_as(const std::string&) const;
template std::vector<double> Checkpoint::tensor_as(const std::string&) const;
template Checkpoint snapshot_model(model::MasvModel<float>&,
                                   const std::map<std::string, std::string>&,
                                   train::Adam<float>*);
template Checkpoint snapshot_model(model::MasvModel<double>&,
                                   const std::map<std::string, std::string>&,
                                   train::Adam<double>*);
template void restore_model(const Checkpoint&, model::MasvModel<float>&, train::Adam<float>*);
template void restore_model(const Checkpoint&, model::MasvModel<double>&, train::Adam<double>*);
template Checkpoint snapshot_stream(const model::StreamState<float>&);
template Checkpoint snapshot_stream(const model::StreamState<double>&);
template model::StreamState<float> restore_stream(const Checkpoint&);
template model::StreamState<double> restore_stream(const Checkpoint&);

}  // namespace io
}  // namespace masv
