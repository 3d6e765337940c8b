#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ebnet/data/dataset.hpp"

#ifdef EBNET_HAVE_OPENCV
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#endif

namespace fs = std::filesystem;

namespace ebnet::data {

namespace {

constexpr Index kCifarRecord = 1 + 3 * 32 * 32;
constexpr Index kCifarPerFile = 10000;

std::vector<std::uint8_t> read_all(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const fs::path& file) {
  if (off + 4 > b.size()) throw FormatError(file.string() + ": truncated header at byte offset " + std::to_string(off));
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

void append(Dataset& into, Dataset&& part) {
  if (into.labels.empty()) {
    into = std::move(part);
    return;
  }
  into.pixels.insert(into.pixels.end(), part.pixels.begin(), part.pixels.end());
  into.labels.insert(into.labels.end(), part.labels.begin(), part.labels.end());
}

fs::path cifar_dir(const fs::path& root) {
  if (fs::exists(root / "data_batch_1.bin") || fs::exists(root / "test_batch.bin")) return root;
  if (fs::exists(root / "cifar-10-batches-bin")) return root / "cifar-10-batches-bin";
  return root;
}

}  // namespace

DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "cifar10") return DatasetKind::cifar10;
  if (s == "mnist") return DatasetKind::mnist;
  if (s == "imagefolder" || s == "imagenet") return DatasetKind::imagefolder;
  throw ConfigError("unknown dataset '" + std::string(s) + "'");
}

std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::mnist: return "mnist";
    case DatasetKind::imagefolder: return "imagefolder";
  }
  return "cifar10";
}

Tensor<float> Dataset::image(Index i) const {
  if (i < 0 || i >= size()) throw RangeError("sample index out of range");
  if (kind != DatasetKind::imagefolder) {
    Tensor<float> out({1, channels, height, width});
    const std::uint8_t* src = pixels.data() + i * channels * height * width;
    for (Index k = 0; k < out.size(); ++k) out[k] = float(src[k]) / 255.0f;
    return out;
  }
#ifdef EBNET_HAVE_OPENCV
  const std::string& path = files[static_cast<std::size_t>(i)];
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw FormatError("cannot decode image " + path);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Tensor<float> out({1, 3, rgb.rows, rgb.cols});
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<cv::Vec3b>(y);
    for (int x = 0; x < rgb.cols; ++x)
      for (int c = 0; c < 3; ++c) out.at(0, c, y, x) = float(row[x][c]) / 255.0f;
  }
  return out;
#else
  throw ConfigError("imagefolder datasets need a build with OpenCV");
#endif
}

Dataset read_cifar10_file(const fs::path& file) {
  const std::vector<std::uint8_t> bytes = read_all(file);
  const auto size = static_cast<Index>(bytes.size());
  if (size % kCifarRecord != 0) {
    const Index offset = (size / kCifarRecord) * kCifarRecord;
    throw FormatError(file.string() + ": truncated record at byte offset " + std::to_string(offset) +
                      " (file ends at " + std::to_string(size) + ")");
  }
  Dataset ds;
  ds.kind = DatasetKind::cifar10;
  ds.channels = 3;
  ds.height = ds.width = 32;
  ds.classes = 10;
  const Index n = size / kCifarRecord;
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.pixels.resize(static_cast<std::size_t>(n * (kCifarRecord - 1)));
  for (Index r = 0; r < n; ++r) {
    const std::uint8_t label = bytes[static_cast<std::size_t>(r * kCifarRecord)];
    if (label > 9)
      throw FormatError(file.string() + ": label " + std::to_string(label) + " out of range at byte offset " +
                        std::to_string(r * kCifarRecord));
    ds.labels[static_cast<std::size_t>(r)] = label;
    std::copy_n(bytes.begin() + r * kCifarRecord + 1, kCifarRecord - 1, ds.pixels.begin() + r * (kCifarRecord - 1));
  }
  return ds;
}

Dataset load_cifar10(const fs::path& root, Split split) {
  const fs::path dir = cifar_dir(root);
  std::vector<std::string> names;
  if (split == Split::train)
    for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
  else
    names.push_back("test_batch.bin");
  Dataset ds;
  for (const auto& name : names) {
    Dataset part = read_cifar10_file(dir / name);
    if (part.size() != kCifarPerFile)
      throw FormatError((dir / name).string() + ": expected " + std::to_string(kCifarPerFile) + " records, found " +
                        std::to_string(part.size()));
    append(ds, std::move(part));
  }
  return ds;
}

Dataset load_mnist(const fs::path& root, Split split) {
  const std::string prefix = split == Split::train ? "train" : "t10k";
  const fs::path img_file = root / (prefix + "-images-idx3-ubyte");
  const fs::path lbl_file = root / (prefix + "-labels-idx1-ubyte");
  const auto img = read_all(img_file);
  const auto lbl = read_all(lbl_file);
  if (be32(img, 0, img_file) != 0x00000803) throw FormatError(img_file.string() + ": bad magic at byte offset 0");
  if (be32(lbl, 0, lbl_file) != 0x00000801) throw FormatError(lbl_file.string() + ": bad magic at byte offset 0");
  const Index n = be32(img, 4, img_file);
  const Index rows = be32(img, 8, img_file);
  const Index cols = be32(img, 12, img_file);
  if (be32(lbl, 4, lbl_file) != static_cast<std::uint32_t>(n))
    throw FormatError(lbl_file.string() + ": label count differs from image count");
  const Index need = 16 + n * rows * cols;
  if (static_cast<Index>(img.size()) < need)
    throw FormatError(img_file.string() + ": truncated at byte offset " + std::to_string(img.size()));
  if (static_cast<Index>(lbl.size()) < 8 + n)
    throw FormatError(lbl_file.string() + ": truncated at byte offset " + std::to_string(lbl.size()));
  Dataset ds;
  ds.kind = DatasetKind::mnist;
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.classes = 10;
  ds.pixels.assign(img.begin() + 16, img.begin() + need);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int l = lbl[static_cast<std::size_t>(8 + i)];
    if (l > 9) throw FormatError(lbl_file.string() + ": label out of range at byte offset " + std::to_string(8 + i));
    ds.labels[static_cast<std::size_t>(i)] = l;
  }
  return ds;
}

Dataset load_imagefolder(const fs::path& root, Split split) {
  fs::path dir = root / (split == Split::train ? "train" : "val");
  if (split == Split::test && !fs::exists(dir)) dir = root / "test";
  if (!fs::is_directory(dir)) throw FormatError("missing image directory " + dir.string());
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw FormatError(dir.string() + ": no class directories");
  Dataset ds;
  ds.kind = DatasetKind::imagefolder;
  ds.channels = 3;
  ds.classes = static_cast<int>(classes.size());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(classes[c])) {
      std::string ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (e.is_regular_file() && (ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp"))
        files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    for (auto& f : files) {
      ds.files.push_back(std::move(f));
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

Dataset load_dataset(DatasetKind kind, const fs::path& root, Split split) {
  switch (kind) {
    case DatasetKind::cifar10: return load_cifar10(root, split);
    case DatasetKind::mnist: return load_mnist(root, split);
    case DatasetKind::imagefolder: return load_imagefolder(root, split);
  }
  throw ConfigError("unknown dataset kind");
}

Normalization compute_normalization(const Dataset& ds) {
  if (ds.size() == 0) throw ConfigError("cannot compute normalization of an empty split");
  const auto c = static_cast<std::size_t>(ds.channels);
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  double count = 0;
  if (ds.kind != DatasetKind::imagefolder) {
    const Index plane = ds.height * ds.width;
    for (Index i = 0; i < ds.size(); ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::uint8_t* p = ds.pixels.data() + (i * ds.channels + Index(ch)) * plane;
        for (Index k = 0; k < plane; ++k) {
          const double v = p[k] / 255.0;
          sum[ch] += v;
          sq[ch] += v * v;
        }
      }
    count = double(ds.size() * plane);
  } else {
    // Decoding every image is expensive; a fixed stride of at most 1000 samples suffices.
    const Index step = std::max<Index>(1, ds.size() / 1000);
    for (Index i = 0; i < ds.size(); i += step) {
      const Tensor<float> img = ds.image(i);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const auto row = img.sample_matrix(0).row(Index(ch)).array().template cast<double>();
        sum[ch] += row.sum();
        sq[ch] += row.square().sum();
      }
      count += double(img.shape().plane());
    }
  }
  Normalization n;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double mean = sum[ch] / count;
    n.mean.push_back(mean);
    n.std.push_back(std::sqrt(std::max(sq[ch] / count - mean * mean, 1e-12)));
  }
  return n;
}

std::vector<Index> epoch_order(Index n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  Rng rng(derive_seed(seed, 0x5EED0DE5ULL, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Tensor<float> make_batch(const Dataset& ds, std::span<const Index> indices, const Normalization& norm, bool train,
                         Rng* rng) {
  if (indices.empty()) throw ShapeError("empty batch");
  if (train && !rng) throw ContractError("training batches need an rng");
  Tensor<float> batch;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    Tensor<float> img = ds.image(indices[b]);
    if (ds.kind == DatasetKind::cifar10 && train) img = augment_cifar(img, *rng);
    if (ds.kind == DatasetKind::imagefolder) img = train ? augment_imagenet(img, *rng) : eval_imagenet(img);
    img = normalize(img, norm);
    if (b == 0) batch = Tensor<float>({Index(indices.size()), img.shape().c, img.shape().h, img.shape().w});
    if (img.shape().sample_size() != batch.shape().sample_size()) throw ShapeError("images in a batch differ in shape");
    std::copy(img.data(), img.data() + img.size(), batch.sample(Index(b)));
  }
  return batch;
}

std::vector<int> batch_labels(const Dataset& ds, std::span<const Index> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(ds.labels[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace ebnet::data
