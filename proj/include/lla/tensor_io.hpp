#pragma once

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "lla/linalg.hpp"
#include "lla/model.hpp"

namespace lla {

// LLAT tensor file, all fields little-endian:
//   "LLAT" | u32 version = 1 | u32 ndims | ndims x u64 dims | f32 payload
// Matrices are written with ndims = 2; one-dimensional files load as 1 x d.
void save_tensor(const DenseMatrix &m, const std::filesystem::path &path);
DenseMatrix load_tensor(const std::filesystem::path &path);

std::vector<unsigned char> encode_tensor(const DenseMatrix &m);
DenseMatrix decode_tensor(const std::vector<unsigned char> &bytes);

// Model directory: model.json manifest naming one LLAT file per role.
// `extra` is merged into the manifest (used for lock metadata).
void save_model_dir(const ToyModel &model, const std::filesystem::path &dir,
                    const nlohmann::json &extra = nlohmann::json::object());
ToyModel load_model_dir(const std::filesystem::path &dir, nlohmann::json *manifest = nullptr);

void write_text_file(const std::filesystem::path &path, const std::string &text);
std::string read_text_file(const std::filesystem::path &path);
void write_binary_file(const std::filesystem::path &path, const std::vector<unsigned char> &bytes);
std::vector<unsigned char> read_binary_file(const std::filesystem::path &path);

// One sequence per line, space-separated decimal token ids.
std::vector<TokenSeq> read_token_file(const std::filesystem::path &path);
void write_token_file(const std::filesystem::path &path, const std::vector<TokenSeq> &seqs);

} // namespace lla
