#include "nnk/datasets.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "nnk/arch.hpp"

namespace nnk {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open dataset file: " + path);
  in.seekg(0, std::ios::end);
  const std::streamoff len = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(static_cast<std::size_t>(len));
  in.read(reinterpret_cast<char*>(buf.data()), len);
  if (!in) throw IngestError("short read on dataset file: " + path);
  return buf;
}

// One CIFAR batch file: per record `label_bytes` label bytes (the last one is
// the fine label) followed by 3072 pixel bytes in R/G/B planes.
void read_cifar_batch(const std::string& path, int label_bytes, Matrix& images,
                      Eigen::VectorXi& labels, Eigen::Index at) {
  const std::size_t rec = static_cast<std::size_t>(label_bytes) + 3072;
  const auto buf = read_file(path);
  if (buf.size() % rec != 0)
    throw IngestError("corrupt CIFAR batch (size not a record multiple): " + path);
  const Eigen::Index n = static_cast<Eigen::Index>(buf.size() / rec);
  for (Eigen::Index i = 0; i < n; ++i) {
    const unsigned char* r = buf.data() + static_cast<std::size_t>(i) * rec;
    labels[at + i] = r[label_bytes - 1];
    for (int j = 0; j < 3072; ++j)
      images(at + i, j) = static_cast<double>(r[label_bytes + j]) / 255.0;
  }
}

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void read_idx_images(const std::string& path, Matrix& images, int& h, int& w) {
  const auto buf = read_file(path);
  if (buf.size() < 16 || read_be32(buf.data()) != 0x00000803u)
    throw IngestError("bad IDX image magic in " + path);
  const Eigen::Index n = read_be32(buf.data() + 4);
  h = static_cast<int>(read_be32(buf.data() + 8));
  w = static_cast<int>(read_be32(buf.data() + 12));
  const std::size_t need = 16 + static_cast<std::size_t>(n) * h * w;
  if (buf.size() < need) throw IngestError("truncated IDX image file: " + path);
  images.resize(n, static_cast<Eigen::Index>(h) * w);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < h * w; ++j)
      images(i, j) = static_cast<double>(buf[16 + static_cast<std::size_t>(i) * h * w + j]) / 255.0;
}

void read_idx_labels(const std::string& path, Eigen::VectorXi& labels) {
  const auto buf = read_file(path);
  if (buf.size() < 8 || read_be32(buf.data()) != 0x00000801u)
    throw IngestError("bad IDX label magic in " + path);
  const Eigen::Index n = read_be32(buf.data() + 4);
  if (buf.size() < 8 + static_cast<std::size_t>(n))
    throw IngestError("truncated IDX label file: " + path);
  labels.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) labels[i] = buf[8 + i];
}

Dataset slice(const Dataset& ds, Eigen::Index begin, Eigen::Index end, Split split) {
  Dataset out;
  out.images = ds.images.middleRows(begin, end - begin);
  out.labels = ds.labels.segment(begin, end - begin);
  out.split = split;
  out.num_classes = ds.num_classes;
  out.h = ds.h;
  out.w = ds.w;
  out.c = ds.c;
  return out;
}

DatasetTriple load_cifar(const std::string& root, bool cifar100) {
  Dataset all;
  all.h = 32;
  all.w = 32;
  all.c = 3;
  all.num_classes = cifar100 ? 100 : 10;
  all.images.resize(50000, 3072);
  all.labels.resize(50000);
  const int label_bytes = cifar100 ? 2 : 1;
  if (cifar100) {
    read_cifar_batch(root + "/train.bin", label_bytes, all.images, all.labels, 0);
  } else {
    for (int b = 1; b <= 5; ++b)
      read_cifar_batch(root + "/data_batch_" + std::to_string(b) + ".bin", label_bytes, all.images,
                       all.labels, (b - 1) * 10000);
  }
  Dataset test;
  test.h = 32;
  test.w = 32;
  test.c = 3;
  test.num_classes = all.num_classes;
  test.split = Split::Test;
  test.images.resize(10000, 3072);
  test.labels.resize(10000);
  read_cifar_batch(root + (cifar100 ? "/test.bin" : "/test_batch.bin"), label_bytes, test.images,
                   test.labels, 0);

  DatasetTriple t;
  t.train = slice(all, 0, 45000, Split::Train);
  t.valid = slice(all, 45000, 50000, Split::Valid);
  t.test = std::move(test);
  return t;
}

DatasetTriple load_fashion_mnist(const std::string& root) {
  Dataset all;
  all.c = 1;
  all.num_classes = 10;
  read_idx_images(root + "/train-images-idx3-ubyte", all.images, all.h, all.w);
  read_idx_labels(root + "/train-labels-idx1-ubyte", all.labels);
  if (all.images.rows() != all.labels.size())
    throw IngestError("image/label count mismatch in " + root);

  Dataset test;
  test.c = 1;
  test.num_classes = 10;
  test.split = Split::Test;
  read_idx_images(root + "/t10k-images-idx3-ubyte", test.images, test.h, test.w);
  read_idx_labels(root + "/t10k-labels-idx1-ubyte", test.labels);

  DatasetTriple t;
  t.train = slice(all, 0, 50000, Split::Train);
  t.valid = slice(all, 50000, 60000, Split::Valid);
  t.test = std::move(test);
  return t;
}

void check_labels(const Dataset& ds, const std::string& name) {
  for (Eigen::Index i = 0; i < ds.labels.size(); ++i)
    if (ds.labels[i] < 0 || ds.labels[i] >= ds.num_classes)
      throw IngestError("label out of range in " + name);
}

}  // namespace

DatasetTriple load_dataset(const std::string& name, const std::string& root) {
  DatasetTriple t;
  if (name == "cifar10")
    t = load_cifar(root, false);
  else if (name == "cifar100")
    t = load_cifar(root, true);
  else if (name == "fashion_mnist")
    t = load_fashion_mnist(root);
  else
    throw ConfigError("unknown dataset id: " + name);
  check_labels(t.train, name);
  check_labels(t.valid, name);
  check_labels(t.test, name);
  return t;
}

StandardizationStats standardize(Dataset& train, std::vector<Dataset*> others) {
  if (train.count() == 0) throw DimensionError("standardize: empty training split");
  const int c = train.c;
  const Eigen::Index plane = static_cast<Eigen::Index>(train.h) * train.w;
  StandardizationStats stats;
  stats.mean.resize(c);
  stats.stddev.resize(c);
  for (int ch = 0; ch < c; ++ch) {
    const auto block = train.images.middleCols(ch * plane, plane);
    const double mean = block.mean();
    const double var = (block.array() - mean).square().sum() /
                       static_cast<double>(block.size());
    if (var <= 1e-20 * std::max(1.0, mean * mean))
      throw DimensionError("standardize: channel " + std::to_string(ch) + " has zero variance");
    stats.mean[ch] = mean;
    stats.stddev[ch] = std::sqrt(var);
  }
  auto apply = [&](Dataset& ds) {
    for (int ch = 0; ch < c; ++ch) {
      auto block = ds.images.middleCols(ch * plane, plane);
      block = (block.array() - stats.mean[ch]) / stats.stddev[ch];
    }
  };
  apply(train);
  for (Dataset* d : others)
    if (d) apply(*d);
  return stats;
}

Matrix encode_targets(const Eigen::VectorXi& labels, int num_classes) {
  if (num_classes < 2) throw ConfigError("encode_targets: need at least two classes");
  Matrix y(labels.size(), num_classes);
  y.setConstant(-1.0 / num_classes);
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw DimensionError("encode_targets: label out of range");
    y(i, labels[i]) += 1.0;
  }
  return y;
}

namespace {

// Copy one image with a (dx, dy) shift. dx > 0 moves content right.
void shift_one(const double* src, double* dst, int h, int w, int c, int dx, int dy,
               bool circular) {
  const int plane = h * w;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int sy = y - dy, sx = x - dx;
        double v = 0.0;
        if (circular) {
          sy = ((sy % h) + h) % h;
          sx = ((sx % w) + w) % w;
          v = src[ch * plane + sy * w + sx];
        } else if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
          v = src[ch * plane + sy * w + sx];
        }
        dst[ch * plane + y * w + x] = v;
      }
}

void flip_one(double* img, int h, int w, int c) {
  const int plane = h * w;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w / 2; ++x)
        std::swap(img[ch * plane + y * w + x], img[ch * plane + y * w + (w - 1 - x)]);
}

}  // namespace

Dataset augment_batch(const Dataset& ds, std::uint64_t seed, double p) {
  if (p < 0.0 || p > 1.0) throw ConfigError("augment_batch: p must be in [0,1]");
  if (ds.h <= 4 || ds.w <= 4) throw DimensionError("augment_batch: image too small to crop by 4");
  Dataset out = ds;
  if (p == 0.0) return out;
  const Eigen::Index d = ds.dim();
  std::vector<double> buf(static_cast<std::size_t>(d));
  for (Eigen::Index i = 0; i < ds.count(); ++i) {
    const std::uint64_t key = rng_mix(seed, static_cast<std::uint64_t>(i));
    if (uniform01(key, 0) >= p) continue;
    const bool flip = uniform01(key, 1) < 0.5;
    const int dx = static_cast<int>(uniform_below(key, 2, 9)) - 4;
    const int dy = static_cast<int>(uniform_below(key, 3, 9)) - 4;
    Eigen::VectorXd src = out.images.row(i);
    if (flip) flip_one(src.data(), ds.h, ds.w, ds.c);
    shift_one(src.data(), buf.data(), ds.h, ds.w, ds.c, dx, dy, false);
    for (Eigen::Index j = 0; j < d; ++j) out.images(i, j) = buf[static_cast<std::size_t>(j)];
  }
  return out;
}

Matrix shift_images(const Matrix& images, int h, int w, int c, int dx, int dy, bool circular) {
  Matrix out(images.rows(), images.cols());
  std::vector<double> src(static_cast<std::size_t>(images.cols()));
  std::vector<double> dst(static_cast<std::size_t>(images.cols()));
  for (Eigen::Index i = 0; i < images.rows(); ++i) {
    Eigen::VectorXd row = images.row(i);
    shift_one(row.data(), dst.data(), h, w, c, dx, dy, circular);
    for (Eigen::Index j = 0; j < images.cols(); ++j) out(i, j) = dst[static_cast<std::size_t>(j)];
  }
  return out;
}

Dataset downsample_mean(const Dataset& ds, int factor) {
  if (factor <= 0 || ds.h % factor != 0 || ds.w % factor != 0)
    throw ConfigError("downsample_mean: factor must divide both spatial dims");
  const int nh = ds.h / factor, nw = ds.w / factor;
  Dataset out;
  out.labels = ds.labels;
  out.split = ds.split;
  out.num_classes = ds.num_classes;
  out.h = nh;
  out.w = nw;
  out.c = ds.c;
  out.images.resize(ds.count(), static_cast<Eigen::Index>(nh) * nw * ds.c);
  const int plane = ds.h * ds.w, nplane = nh * nw;
  const double inv = 1.0 / (factor * factor);
  for (Eigen::Index i = 0; i < ds.count(); ++i)
    for (int ch = 0; ch < ds.c; ++ch)
      for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x) {
          double acc = 0.0;
          for (int yy = 0; yy < factor; ++yy)
            for (int xx = 0; xx < factor; ++xx)
              acc += ds.images(i, ch * plane + (y * factor + yy) * ds.w + (x * factor + xx));
          out.images(i, ch * nplane + y * nw + x) = acc * inv;
        }
  return out;
}

Dataset take_subset(const Dataset& ds, Eigen::Index n, std::uint64_t seed) {
  if (n > ds.count()) throw ConfigError("take_subset: subset larger than dataset");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(ds.count()));
  std::iota(idx.begin(), idx.end(), 0);
  // Fisher-Yates with counter-based draws for reproducibility.
  for (std::size_t i = idx.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_below(seed, i, i + 1));
    std::swap(idx[i], idx[j]);
  }
  Dataset out;
  out.split = ds.split;
  out.num_classes = ds.num_classes;
  out.h = ds.h;
  out.w = ds.w;
  out.c = ds.c;
  out.images.resize(n, ds.dim());
  out.labels.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.images.row(i) = ds.images.row(idx[static_cast<std::size_t>(i)]);
    out.labels[i] = ds.labels[idx[static_cast<std::size_t>(i)]];
  }
  return out;
}

namespace {

// 3x3 binomial blur with clamped boundary, applied in place `passes` times.
void blur(std::vector<double>& img, int h, int w, int passes) {
  std::vector<double> tmp(img.size());
  static const double k[3] = {0.25, 0.5, 0.25};
  for (int pass = 0; pass < passes; ++pass) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int t = -1; t <= 1; ++t) {
          const int sx = std::clamp(x + t, 0, w - 1);
          acc += k[t + 1] * img[static_cast<std::size_t>(y) * w + sx];
        }
        tmp[static_cast<std::size_t>(y) * w + x] = acc;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int t = -1; t <= 1; ++t) {
          const int sy = std::clamp(y + t, 0, h - 1);
          acc += k[t + 1] * tmp[static_cast<std::size_t>(sy) * w + x];
        }
        img[static_cast<std::size_t>(y) * w + x] = acc;
      }
  }
}

void smooth_field(std::uint64_t key, int h, int w, std::vector<double>& out) {
  out.resize(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h * w; ++i) out[static_cast<std::size_t>(i)] = normal_from_key(key, i);
  blur(out, h, w, 3);
}

}  // namespace

Dataset make_synthetic(std::uint64_t seed, Eigen::Index n, int num_classes, int h, int w, int c,
                       Split split) {
  Dataset ds;
  ds.split = split;
  ds.num_classes = num_classes;
  ds.h = h;
  ds.w = w;
  ds.c = c;
  ds.images.resize(n, static_cast<Eigen::Index>(h) * w * c);
  ds.labels.resize(n);
  const int plane = h * w;

  // Fixed class templates shared across splits generated from the same seed.
  std::vector<std::vector<double>> templates(
      static_cast<std::size_t>(num_classes) * c);
  for (int k = 0; k < num_classes; ++k)
    for (int ch = 0; ch < c; ++ch)
      smooth_field(rng_mix(seed, 0xC1A55ull, static_cast<std::uint64_t>(k * c + ch)), h, w,
                   templates[static_cast<std::size_t>(k * c + ch)]);

  std::vector<double> field;
  const std::uint64_t split_key = rng_mix(seed, static_cast<std::uint64_t>(split) + 101);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % num_classes);
    ds.labels[i] = label;
    const std::uint64_t ex_key = rng_mix(split_key, static_cast<std::uint64_t>(i));
    for (int ch = 0; ch < c; ++ch) {
      smooth_field(rng_mix(ex_key, static_cast<std::uint64_t>(ch)), h, w, field);
      const auto& tpl = templates[static_cast<std::size_t>(label * c + ch)];
      const std::uint64_t px_key = rng_mix(ex_key, static_cast<std::uint64_t>(ch) + 7777);
      for (int j = 0; j < plane; ++j) {
        const double noise = 0.25 * normal_from_key(px_key, j);
        // roughly [0,1] after an affine squash, like scaled pixel data
        const double v = 0.5 + 0.35 * tpl[static_cast<std::size_t>(j)] +
                         0.35 * field[static_cast<std::size_t>(j)] + 0.1 * noise;
        ds.images(i, ch * plane + j) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return ds;
}

DatasetTriple make_synthetic_triple(std::uint64_t seed, Eigen::Index n_train, Eigen::Index n_valid,
                                    Eigen::Index n_test, int num_classes, int h, int w, int c) {
  DatasetTriple t;
  t.train = make_synthetic(seed, n_train, num_classes, h, w, c, Split::Train);
  t.valid = make_synthetic(seed, n_valid, num_classes, h, w, c, Split::Valid);
  t.test = make_synthetic(seed, n_test, num_classes, h, w, c, Split::Test);
  return t;
}

DatasetTriple load_or_synthesize(const std::string& name, const std::string& root,
                                 std::uint64_t seed, Eigen::Index fallback_train,
                                 Eigen::Index fallback_valid, Eigen::Index fallback_test) {
  if (name == "synthetic")
    return make_synthetic_triple(seed, fallback_train, fallback_valid, fallback_test, 10, 32, 32, 3);
  namespace fs = std::filesystem;
  const bool have = !root.empty() && fs::exists(root) &&
                    (fs::exists(root + "/data_batch_1.bin") || fs::exists(root + "/train.bin") ||
                     fs::exists(root + "/train-images-idx3-ubyte"));
  if (have) return load_dataset(name, root);
  return make_synthetic_triple(seed, fallback_train, fallback_valid, fallback_test, 10, 32, 32, 3);
}

Family family_from_name(const std::string& s) {
  if (s == "fcn") return Family::FCN;
  if (s == "cnn-vec") return Family::CNN_VEC;
  if (s == "cnn-gap") return Family::CNN_GAP;
  throw ConfigError("unknown architecture family: " + s);
}

}  // namespace nnk
