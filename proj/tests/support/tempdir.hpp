#pragma once

#include <filesystem>
#include <random>
#include <string>

namespace l2ae::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("l2ae-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string data_root() { return L2AE_DATA_ROOT; }
inline std::string mnist5k_images() { return data_root() + "/mnist5k/mnist5k-images-idx3-ubyte.gz"; }
inline std::string mnist5k_labels() { return data_root() + "/mnist5k/mnist5k-labels-idx1-ubyte.gz"; }

}  // namespace l2ae::testing
