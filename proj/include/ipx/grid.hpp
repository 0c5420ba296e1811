#pragma once

#include <cstddef>
#include <vector>

namespace ipx {

/// Row-major 2-D array used for block grids and float image planes.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int cols, int rows, T fill = T{})
      : cols_(cols), rows_(rows), data_(static_cast<std::size_t>(cols) * rows, fill) {}

  int cols() const noexcept { return cols_; }
  int rows() const noexcept { return rows_; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t size() const noexcept { return data_.size(); }

  T& at(int c, int r) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  const T& at(int c, int r) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  bool contains(int c, int r) const noexcept { return c >= 0 && r >= 0 && c < cols_ && r < rows_; }

  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  bool operator==(const Grid&) const = default;

 private:
  int cols_ = 0;
  int rows_ = 0;
  std::vector<T> data_;
};

}  // namespace ipx
