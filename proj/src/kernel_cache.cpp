#include "nnk/kernel_cache.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

namespace nnk {

namespace {

constexpr char kMagic[4] = {'N', 'K', 'W', 'B'};
constexpr std::size_t kHeaderSize = 64;

void pack_header(const KernelFileHeader& h, unsigned char* buf) {
  std::memset(buf, 0, kHeaderSize);
  std::memcpy(buf, kMagic, 4);
  std::memcpy(buf + 4, &h.version, 4);
  buf[8] = h.dtype;
  std::memcpy(buf + 9, &h.rows, 8);
  std::memcpy(buf + 17, &h.cols, 8);
  std::memcpy(buf + 25, &h.arch_hash, 8);
}

KernelFileHeader unpack_header(const unsigned char* buf, const std::string& path) {
  if (std::memcmp(buf, kMagic, 4) != 0)
    throw IngestError("kernel cache file has bad magic: " + path);
  KernelFileHeader h;
  std::memcpy(&h.version, buf + 4, 4);
  h.dtype = buf[8];
  std::memcpy(&h.rows, buf + 9, 8);
  std::memcpy(&h.cols, buf + 17, 8);
  std::memcpy(&h.arch_hash, buf + 25, 8);
  if (h.version != 1) throw IngestError("unsupported kernel cache version in " + path);
  if (h.dtype != 4 && h.dtype != 8) throw IngestError("bad dtype code in " + path);
  return h;
}

}  // namespace

void write_kernel_file(const std::string& path, const Matrix& m, Precision prec,
                       std::uint64_t arch_hash) {
  KernelFileHeader h;
  h.dtype = prec == Precision::Single ? 4 : 8;
  h.rows = static_cast<std::uint64_t>(m.rows());
  h.cols = static_cast<std::uint64_t>(m.cols());
  h.arch_hash = arch_hash;
  unsigned char buf[kHeaderSize];
  pack_header(h, buf);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("cannot write kernel cache file: " + path);
    out.write(reinterpret_cast<const char*>(buf), kHeaderSize);
    if (prec == Precision::Single) {
      std::vector<float> row(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j)
          row[static_cast<std::size_t>(j)] = static_cast<float>(m(i, j));
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
      }
    } else {
      std::vector<double> row(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(double)));
      }
    }
    if (!out) throw IngestError("write failed for kernel cache file: " + path);
  }
  std::filesystem::rename(tmp, path);
}

Matrix read_kernel_file(const std::string& path, KernelFileHeader* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open kernel cache file: " + path);
  unsigned char buf[kHeaderSize];
  in.read(reinterpret_cast<char*>(buf), kHeaderSize);
  if (!in) throw IngestError("short header in kernel cache file: " + path);
  const KernelFileHeader h = unpack_header(buf, path);
  if (header) *header = h;
  Matrix m(static_cast<Eigen::Index>(h.rows), static_cast<Eigen::Index>(h.cols));
  if (h.dtype == 4) {
    std::vector<float> row(h.cols);
    for (std::uint64_t i = 0; i < h.rows; ++i) {
      in.read(reinterpret_cast<char*>(row.data()),
              static_cast<std::streamsize>(h.cols * sizeof(float)));
      for (std::uint64_t j = 0; j < h.cols; ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
    }
  } else {
    std::vector<double> row(h.cols);
    for (std::uint64_t i = 0; i < h.rows; ++i) {
      in.read(reinterpret_cast<char*>(row.data()),
              static_cast<std::streamsize>(h.cols * sizeof(double)));
      for (std::uint64_t j = 0; j < h.cols; ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
    }
  }
  if (!in) throw IngestError("truncated kernel cache payload: " + path);
  return m;
}

std::vector<TileExtent> make_tiles(Eigen::Index rows, Eigen::Index cols, Eigen::Index tile,
                                   bool symmetric) {
  if (tile <= 0) throw ConfigError("make_tiles: tile size must be positive");
  std::vector<TileExtent> out;
  for (Eigen::Index r = 0; r < rows; r += tile)
    for (Eigen::Index c = symmetric ? r : 0; c < cols; c += tile)
      out.push_back({r, std::min(rows, r + tile), c, std::min(cols, c + tile)});
  return out;
}

namespace {

// Tiles must exactly cover the grid (upper wedge when symmetric): both cut
// sets must be consistent and every grid cell covered exactly once.
void validate_worklist(Eigen::Index rows, Eigen::Index cols,
                       const std::vector<TileExtent>& tiles, bool symmetric) {
  std::set<Eigen::Index> rcuts{0, rows}, ccuts{0, cols};
  for (const auto& t : tiles) {
    if (t.row_begin < 0 || t.row_end > rows || t.col_begin < 0 || t.col_end > cols ||
        t.row_begin >= t.row_end || t.col_begin >= t.col_end)
      throw ConfigError("assemble_tiled: tile extent out of range");
    rcuts.insert(t.row_begin);
    rcuts.insert(t.row_end);
    ccuts.insert(t.col_begin);
    ccuts.insert(t.col_end);
  }
  std::vector<Eigen::Index> rs(rcuts.begin(), rcuts.end()), cs(ccuts.begin(), ccuts.end());
  // occupancy per refined cell
  std::map<std::pair<std::size_t, std::size_t>, int> cover;
  auto cell = [](const std::vector<Eigen::Index>& cuts, Eigen::Index v) {
    return static_cast<std::size_t>(
        std::lower_bound(cuts.begin(), cuts.end(), v) - cuts.begin());
  };
  for (const auto& t : tiles) {
    for (std::size_t i = cell(rs, t.row_begin); rs[i] < t.row_end; ++i)
      for (std::size_t j = cell(cs, t.col_begin); cs[j] < t.col_end; ++j)
        if (++cover[{i, j}] > 1) throw ConfigError("assemble_tiled: overlapping tiles");
  }
  for (std::size_t i = 0; i + 1 < rs.size(); ++i)
    for (std::size_t j = 0; j + 1 < cs.size(); ++j) {
      if (symmetric && cs[j] < rs[i]) continue;  // mirrored from the upper wedge
      if (!cover.count({i, j}))
        throw ConfigError("assemble_tiled: tiles do not cover the index grid");
    }
}

std::string tile_stem(const TileExtent& t) {
  return "tile_r" + std::to_string(t.row_begin) + "_" + std::to_string(t.row_end) + "_c" +
         std::to_string(t.col_begin) + "_" + std::to_string(t.col_end);
}

}  // namespace

TiledAssemblyResult assemble_tiled(Eigen::Index rows, Eigen::Index cols,
                                   const std::vector<TileExtent>& worklist, bool symmetric,
                                   const BlockKernelFn& fn, const ArchitectureSpec& arch,
                                   Precision prec, const std::string& cache_dir, int workers) {
  validate_worklist(rows, cols, worklist, symmetric);
  const std::uint64_t arch_hash = arch.hash();
  const bool cache = !cache_dir.empty();
  if (cache) std::filesystem::create_directories(cache_dir);

  TiledAssemblyResult res;
  res.pair.nngp.setZero(rows, cols);
  res.pair.ntk.setZero(rows, cols);
  res.pair.precision = prec;
  res.pair.symmetric = symmetric;
  res.pair.arch = arch;

  int computed = 0, reused = 0;
  std::exception_ptr error;
  const int n = static_cast<int>(worklist.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, workers)) \
    reduction(+ : computed, reused) shared(error)
  for (int idx = 0; idx < n; ++idx) {
    try {
      const TileExtent& t = worklist[static_cast<std::size_t>(idx)];
      const std::string stem = cache ? cache_dir + "/" + tile_stem(t) : "";
      Matrix nngp, ntk;
      bool loaded = false;
      if (cache && std::filesystem::exists(stem + "_nngp.nkwb") &&
          std::filesystem::exists(stem + "_ntk.nkwb")) {
        KernelFileHeader h1, h2;
        nngp = read_kernel_file(stem + "_nngp.nkwb", &h1);
        ntk = read_kernel_file(stem + "_ntk.nkwb", &h2);
        if (h1.arch_hash != arch_hash || h2.arch_hash != arch_hash)
          throw IngestError("kernel cache header mismatch (architecture changed?) at " + stem);
        if (static_cast<Eigen::Index>(h1.rows) != t.row_end - t.row_begin ||
            static_cast<Eigen::Index>(h1.cols) != t.col_end - t.col_begin)
          throw IngestError("kernel cache header mismatch (tile extent) at " + stem);
        loaded = true;
        ++reused;
      }
      if (!loaded) {
        KernelPair block = fn(t);
        nngp = std::move(block.nngp);
        ntk = std::move(block.ntk);
        if (nngp.rows() != t.row_end - t.row_begin || nngp.cols() != t.col_end - t.col_begin)
          throw DimensionError("assemble_tiled: kernel op returned a block of the wrong shape");
        if (cache) {
          write_kernel_file(stem + "_nngp.nkwb", nngp, prec, arch_hash);
          write_kernel_file(stem + "_ntk.nkwb", ntk, prec, arch_hash);
        }
        ++computed;
      }
      res.pair.nngp.block(t.row_begin, t.col_begin, nngp.rows(), nngp.cols()) = nngp;
      res.pair.ntk.block(t.row_begin, t.col_begin, ntk.rows(), ntk.cols()) = ntk;
      if (symmetric && t.col_begin > t.row_begin) {
        res.pair.nngp.block(t.col_begin, t.row_begin, nngp.cols(), nngp.rows()) =
            nngp.transpose();
        res.pair.ntk.block(t.col_begin, t.row_begin, ntk.cols(), ntk.rows()) = ntk.transpose();
      }
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  res.computed = computed;
  res.reused = reused;

  if (cache) {
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["rows"] = rows;
    manifest["cols"] = cols;
    manifest["dtype"] = prec == Precision::Single ? "single" : "double";
    manifest["arch_hash"] = arch_hash;
    manifest["symmetric"] = symmetric;
    nlohmann::json tiles = nlohmann::json::array();
    for (const auto& t : worklist)
      tiles.push_back({{"row_begin", t.row_begin},
                       {"row_end", t.row_end},
                       {"col_begin", t.col_begin},
                       {"col_end", t.col_end},
                       {"stem", tile_stem(t)}});
    manifest["tiles"] = tiles;
    std::ofstream out(cache_dir + "/manifest.json.tmp");
    out << manifest.dump(2) << "\n";
    out.close();
    std::filesystem::rename(cache_dir + "/manifest.json.tmp", cache_dir + "/manifest.json");
  }
  return res;
}

void save_kernel_pair(const std::string& dir, const std::string& stem, const KernelPair& pair) {
  std::filesystem::create_directories(dir);
  write_kernel_file(dir + "/" + stem + "_nngp.nkwb", pair.nngp, pair.precision, pair.arch.hash());
  write_kernel_file(dir + "/" + stem + "_ntk.nkwb", pair.ntk, pair.precision, pair.arch.hash());
}

KernelPair load_kernel_pair(const std::string& dir, const std::string& stem) {
  KernelPair pair;
  KernelFileHeader h;
  pair.nngp = read_kernel_file(dir + "/" + stem + "_nngp.nkwb", &h);
  pair.precision = h.dtype == 4 ? Precision::Single : Precision::Double;
  pair.ntk = read_kernel_file(dir + "/" + stem + "_ntk.nkwb");
  pair.symmetric = pair.nngp.rows() == pair.nngp.cols();
  return pair;
}

}  // namespace nnk
