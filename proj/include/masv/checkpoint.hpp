#pragma once

#include <map>
#include <string>
#include <vector>

#include "masv/blocks.hpp"
#include "masv/optim.hpp"

namespace masv {
namespace io {

// Single-file container: "MASV1" magic, key=value config text, tensor
// manifest (name/dtype/shape/offset), then raw little-endian payloads.
struct Checkpoint {
  struct Entry {
    Shape shape;
    int dtype = 0;  // 0 = f32, 1 = f64
    std::vector<unsigned char> bytes;
  };
  std::map<std::string, std::string> config;
  std::vector<std::pair<std::string, Entry>> tensors;  // manifest order

  const Entry* find(const std::string& name) const;
  template <typename T>
  void add_tensor(const std::string& name, const Shape& shape, const T* data);
  template <typename T>
  std::vector<T> tensor_as(const std::string& name) const;  // converts dtype if needed
};

void write_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::string& path);

// Model (+ optional optimizer) round trips. Parameter and BN-stat tensors
// are keyed by their visit names; Adam moments as opt.m.* / opt.v.*.
template <typename T>
Checkpoint snapshot_model(model::MasvModel<T>& m,
                          const std::map<std::string, std::string>& extra_config,
                          train::Adam<T>* opt = nullptr);
template <typename T>
void restore_model(const Checkpoint& ck, model::MasvModel<T>& m, train::Adam<T>* opt = nullptr);

model::ModelConfig checkpoint_model_config(const Checkpoint& ck);

// Stream state round trip (streaming resume / handoff).
template <typename T>
Checkpoint snapshot_stream(const model::StreamState<T>& st);
template <typename T>
model::StreamState<T> restore_stream(const Checkpoint& ck);

uint64_t file_hash(const std::string& path);

}  // namespace io
}  // namespace masv
