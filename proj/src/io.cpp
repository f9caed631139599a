#include "mnce/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mnce/errors.hpp"

namespace mnce::io {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int k = 15; k >= 0; --k) {
    out[static_cast<std::size_t>(k)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void atomic_write(const std::filesystem::path& path, std::string_view contents) {
  std::error_code ec;
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

CsvWriter::CsvWriter(std::string config_hash) { out_ = "# config_hash=" + config_hash + "\n"; }

void CsvWriter::comment(std::string_view text) {
  out_ += "# ";
  out_ += text;
  out_ += '\n';
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  for (std::size_t k = 0; k < cells.size(); ++k) {
    if (k) out_ += ',';
    out_ += cells[k];
  }
  out_ += '\n';
}

namespace {

constexpr std::string_view kDatasetMagic = "MNCEDATA";
constexpr std::string_view kCheckpointMagic = "MNCECKPT";

class Writer {
 public:
  void bytes(std::string_view b) { out_.append(b); }
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void u64(std::uint64_t v) { pod(v); }
  void i64(std::int64_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s);
  }
  void doubles(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void ints(const std::vector<int>& v) {
    u64(v.size());
    for (int x : v) i64(x);
  }
  void mat(const Mat2& m) {
    u64(m.rows());
    u64(m.cols());
    for (double x : m.values()) f64(x);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  std::string_view bytes(std::size_t n) {
    if (data_.size() - pos_ < n) throw IoError(what_ + ": truncated file");
    const auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  template <typename T>
  T pod() {
    const auto b = bytes(sizeof(T));
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
  }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::int64_t i64() { return pod<std::int64_t>(); }
  double f64() { return pod<double>(); }
  std::size_t count(std::size_t elem_size) {
    const std::uint64_t n = u64();
    if (elem_size > 0 && n > (data_.size() - pos_) / elem_size) throw IoError(what_ + ": corrupt length field");
    return static_cast<std::size_t>(n);
  }
  std::string str() { return std::string(bytes(count(1))); }
  std::vector<double> doubles() {
    std::vector<double> v(count(sizeof(double)));
    for (double& x : v) x = f64();
    return v;
  }
  std::vector<int> ints() {
    std::vector<int> v(count(sizeof(std::int64_t)));
    for (int& x : v) x = static_cast<int>(i64());
    return v;
  }
  Mat2 mat() {
    const std::size_t r = static_cast<std::size_t>(u64());
    const std::size_t c = static_cast<std::size_t>(u64());
    if (c != 0 && r > (data_.size() - pos_) / sizeof(double) / c) throw IoError(what_ + ": corrupt matrix shape");
    std::vector<double> v(r * c);
    for (double& x : v) x = f64();
    return Mat2(r, c, std::move(v));
  }
  void expect_end() const {
    if (pos_ != data_.size()) throw IoError(what_ + ": trailing bytes");
  }
  const std::string& what() const { return what_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

void write_header(Writer& w, std::string_view magic, std::uint32_t version) {
  w.bytes(magic);
  w.pod(version);
}

void read_header(Reader& r, std::string_view magic, std::uint32_t version) {
  if (r.bytes(magic.size()) != magic) throw IoError(r.what() + ": bad magic");
  const auto v = r.pod<std::uint32_t>();
  if (v != version) throw IoError(r.what() + ": unsupported version " + std::to_string(v));
}

void write_scene(Writer& w, const SyntheticScene& s) {
  w.str(s.id);
  w.i64(s.class_id);
  w.i64(s.audio_class_id);
  w.pod<std::uint8_t>(s.is_faulty_positive ? 1 : 0);
  w.u64(s.image.channels());
  w.u64(s.image.height());
  w.u64(s.image.width());
  for (double x : s.image.values()) w.f64(x);
  w.doubles(s.audio.values());
  w.f64(s.gt_region.x0);
  w.f64(s.gt_region.y0);
  w.f64(s.gt_region.x1);
  w.f64(s.gt_region.y1);
}

SyntheticScene read_scene(Reader& r) {
  SyntheticScene s;
  s.id = r.str();
  s.class_id = static_cast<int>(r.i64());
  s.audio_class_id = static_cast<int>(r.i64());
  s.is_faulty_positive = r.pod<std::uint8_t>() != 0;
  const auto c = static_cast<std::size_t>(r.u64());
  const auto h = static_cast<std::size_t>(r.u64());
  const auto w = static_cast<std::size_t>(r.u64());
  if (c == 0 || h == 0 || w == 0 || c > (1u << 20) || h > (1u << 20) || w > (1u << 20)) {
    throw IoError(r.what() + ": corrupt image shape");
  }
  std::vector<double> img(c * h * w);
  for (double& x : img) x = r.f64();
  s.image = Grid3(c, h, w, std::move(img));
  s.audio = Vec1(r.doubles());
  s.gt_region = Box{r.f64(), r.f64(), r.f64(), r.f64()};
  return s;
}

void write_scenes(Writer& w, const std::vector<SyntheticScene>& scenes) {
  w.u64(scenes.size());
  for (const auto& s : scenes) write_scene(w, s);
}

std::vector<SyntheticScene> read_scenes(Reader& r) {
  std::vector<SyntheticScene> out(r.count(1));
  for (auto& s : out) s = read_scene(r);
  return out;
}

void write_branch(Writer& w, const Branch& b) {
  w.pod<std::uint8_t>(b.hidden ? 1 : 0);
  if (b.hidden) w.mat(*b.hidden);
  w.mat(b.proj);
}

Branch read_branch(Reader& r) {
  Branch b;
  if (r.pod<std::uint8_t>() != 0) b.hidden = r.mat();
  b.proj = r.mat();
  return b;
}

}  // namespace

std::string encode_dataset(const Split& split) {
  Writer w;
  write_header(w, kDatasetMagic, kDatasetVersion);
  w.ints(split.heard_classes);
  w.ints(split.unheard_classes);
  write_scenes(w, split.train);
  write_scenes(w, split.heard_test);
  write_scenes(w, split.unheard_test);
  return w.take();
}

Split decode_dataset(std::string_view bytes) {
  Reader r(bytes, "dataset");
  read_header(r, kDatasetMagic, kDatasetVersion);
  Split s;
  try {
    s.heard_classes = r.ints();
    s.unheard_classes = r.ints();
    s.train = read_scenes(r);
    s.heard_test = read_scenes(r);
    s.unheard_test = read_scenes(r);
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(std::string("dataset: invalid contents: ") + e.what());
  }
  r.expect_end();
  return s;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  write_header(w, kCheckpointMagic, kCheckpointVersion);
  w.str(ckpt.config_json);
  w.i64(ckpt.state.epochs_done);
  w.doubles(ckpt.state.loss_history);
  w.pod<std::uint8_t>(ckpt.state.encoder.normalize_output() ? 1 : 0);
  write_branch(w, ckpt.state.encoder.weights().visual);
  write_branch(w, ckpt.state.encoder.weights().audio);
  w.u64(ckpt.state.optimizer.step);
  w.doubles(ckpt.state.optimizer.first_moment);
  w.doubles(ckpt.state.optimizer.second_moment);
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes, "checkpoint");
  read_header(r, kCheckpointMagic, kCheckpointVersion);
  Checkpoint c;
  try {
    c.config_json = r.str();
    c.state.epochs_done = static_cast<int>(r.i64());
    c.state.loss_history = r.doubles();
    const bool normalize = r.pod<std::uint8_t>() != 0;
    EncoderWeights weights;
    weights.visual = read_branch(r);
    weights.audio = read_branch(r);
    c.state.encoder = ToyEncoder(std::move(weights), normalize);
    c.state.optimizer.step = r.u64();
    c.state.optimizer.first_moment = r.doubles();
    c.state.optimizer.second_moment = r.doubles();
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(std::string("checkpoint: invalid contents: ") + e.what());
  }
  r.expect_end();
  return c;
}

}  // namespace mnce::io
