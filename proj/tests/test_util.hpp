#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include "hdca/gradcheck.hpp"
#include "hdca/graph.hpp"
#include "hdca/ops.hpp"

namespace hdca::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            DType dtype = DType::Float64) {
  Tensor t(std::move(shape), dtype);
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, u(rng));
  return t;
}

/// Worst relative error between autodiff and central differences for `body`
/// over every input.
inline double check_op_gradient(const std::vector<Tensor>& inputs, const GraphBody& body,
                                std::uint64_t seed = 99, double eps = 1e-5) {
  GradientCheckOptions opts;
  opts.eps = eps;
  opts.probe_seed = seed;
  return check_graph_gradients(inputs, {}, body, opts);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("hdca_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace hdca::test
