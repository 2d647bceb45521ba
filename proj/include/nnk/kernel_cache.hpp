// Tiled kernel assembly with a resumable on-disk cache.
//
// Tile file format ("NKWB"): a 64-byte header
//   magic "NKWB" | version u32 | dtype u8 (4=single, 8=double) |
//   rows u64 | cols u64 | architecture hash u64 | zero padding to 64 bytes
// followed by the row-major little-endian matrix payload. A JSON manifest
// per assembly lists the tile extents and file names.
//
// Tiles are computed independently with a fixed within-tile reduction
// order, so the assembled matrix is bitwise identical for any worker count
// and any tile evaluation order.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nnk/common.hpp"
#include "nnk/kernels.hpp"

namespace nnk {

struct TileExtent {
  Eigen::Index row_begin = 0, row_end = 0;
  Eigen::Index col_begin = 0, col_end = 0;
};

struct KernelFileHeader {
  std::uint32_t version = 1;
  std::uint8_t dtype = 8;
  std::uint64_t rows = 0, cols = 0;
  std::uint64_t arch_hash = 0;
};

void write_kernel_file(const std::string& path, const Matrix& m, Precision prec,
                       std::uint64_t arch_hash);
Matrix read_kernel_file(const std::string& path, KernelFileHeader* header = nullptr);

// Regular tiling of an m1 x m2 grid. With `symmetric`, only tiles with
// col block >= row block are listed (the mirror is filled on assembly).
std::vector<TileExtent> make_tiles(Eigen::Index rows, Eigen::Index cols, Eigen::Index tile,
                                   bool symmetric);

using BlockKernelFn = std::function<KernelPair(const TileExtent&)>;

struct TiledAssemblyResult {
  KernelPair pair;
  int computed = 0;  // tiles evaluated this run
  int reused = 0;    // tiles loaded from cache
};

// Evaluates `fn` over the worklist (validated to partition the grid),
// optionally persisting/reusing per-tile files under `cache_dir` (empty
// string disables caching). `workers` bounds the parallelism.
TiledAssemblyResult assemble_tiled(Eigen::Index rows, Eigen::Index cols,
                                   const std::vector<TileExtent>& worklist, bool symmetric,
                                   const BlockKernelFn& fn, const ArchitectureSpec& arch,
                                   Precision prec, const std::string& cache_dir, int workers);

// Writes/reads a full KernelPair (train or cross block) through the cache
// format; `stem` names the pair of files `<stem>_nngp.nkwb`, `<stem>_ntk.nkwb`.
void save_kernel_pair(const std::string& dir, const std::string& stem, const KernelPair& pair);
KernelPair load_kernel_pair(const std::string& dir, const std::string& stem);

}  // namespace nnk
