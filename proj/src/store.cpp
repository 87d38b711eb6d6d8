#include "featscan/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "byte_io.hpp"

namespace featscan {

static_assert(std::endian::native == std::endian::little,
              "float payloads are stored little-endian and copied verbatim");

using json = nlohmann::json;
namespace fs = std::filesystem;

const char* compression_name(Compression c) noexcept {
  return c == Compression::kNone ? "none" : "deflate";
}

Compression parse_compression(const std::string& name) {
  if (name == "none") return Compression::kNone;
  if (name == "deflate") return Compression::kDeflate;
  fail(ErrorCode::kInvalidArgument, "unknown compression '" + name + "'");
}

std::string manifest_to_json(const StoreManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["dataset_name"] = m.dataset_name;
  j["model_name"] = m.model_name;
  j["layer_name"] = m.layer_name;
  j["dims"] = {m.dims.rows, m.dims.cols, m.dims.channels};
  j["image_count"] = m.image_count;
  j["images_per_chunk"] = m.images_per_chunk;
  j["compression"] = compression_name(m.compression);
  if (m.label_map) j["label_map"] = *m.label_map;
  return j.dump(2) + "\n";
}

StoreManifest manifest_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::kParse, std::string("manifest is not valid JSON: ") + e.what());
  }
  StoreManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    m.dataset_name = j.at("dataset_name").get<std::string>();
    m.model_name = j.at("model_name").get<std::string>();
    m.layer_name = j.at("layer_name").get<std::string>();
    const auto& dims = j.at("dims");
    if (!dims.is_array() || dims.size() != 3)
      fail(ErrorCode::kInvalidArgument, "manifest dims must be [rows, cols, channels]");
    m.dims = {dims[0].get<std::size_t>(), dims[1].get<std::size_t>(),
              dims[2].get<std::size_t>()};
    m.image_count = j.at("image_count").get<std::uint64_t>();
    m.images_per_chunk = j.at("images_per_chunk").get<std::uint32_t>();
    m.compression = parse_compression(j.at("compression").get<std::string>());
    if (j.contains("label_map") && !j["label_map"].is_null())
      m.label_map = j["label_map"].get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("manifest field error: ") + e.what());
  }
  if (m.format_version != kStoreFormatVersion)
    fail(ErrorCode::kInvalidArgument,
         "unsupported store format_version " + std::to_string(m.format_version));
  if (m.dims.rows == 0 || m.dims.cols == 0 || m.dims.channels == 0)
    fail(ErrorCode::kInvalidArgument, "manifest dims must be positive");
  if (m.images_per_chunk == 0 || m.images_per_chunk > 0xFFFF)
    fail(ErrorCode::kInvalidArgument, "images_per_chunk must be in [1, 65535]");
  return m;
}

std::vector<std::uint8_t> encode_index(std::span<const ChunkIndexEntry> entries) {
  ByteWriter w;
  for (const auto& e : entries) {
    if (e.image_ids.size() > 0xFFFF)
      fail(ErrorCode::kInvalidArgument, "too many ids in one chunk");
    w.u32(e.ordinal);
    w.u64(e.byte_offset);
    w.u64(e.byte_length);
    w.u32(e.checksum);
    w.u16(static_cast<std::uint16_t>(e.image_ids.size()));
    for (const auto& id : e.image_ids) {
      if (id.size() > 0xFFFF)
        fail(ErrorCode::kInvalidArgument, "image id longer than 65535 bytes");
      w.u16(static_cast<std::uint16_t>(id.size()));
      w.bytes(id);
    }
  }
  return w.take();
}

std::vector<ChunkIndexEntry> decode_index(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  std::vector<ChunkIndexEntry> out;
  try {
    while (!r.at_end()) {
      ChunkIndexEntry e;
      e.ordinal = r.u32();
      e.byte_offset = r.u64();
      e.byte_length = r.u64();
      e.checksum = r.u32();
      const std::uint16_t n = r.u16();
      e.image_ids.reserve(n);
      for (std::uint16_t i = 0; i < n; ++i) e.image_ids.push_back(r.str(r.u16()));
      out.push_back(std::move(e));
    }
  } catch (const ByteReader::Underflow&) {
    fail(ErrorCode::kCorruption,
         "index.bin truncated at byte " + std::to_string(r.offset()));
  }
  return out;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers piecewise.
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, n);
    done += n;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

std::vector<std::uint8_t> deflate_raw(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (deflateInit2(&zs, 1, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    fail(ErrorCode::kInternal, "deflateInit2 failed");
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) fail(ErrorCode::kInternal, "deflate did not finish");
  return out;
}

// Throws kCorruption unless the stream inflates to exactly `expected` bytes.
std::vector<std::uint8_t> inflate_raw(std::span<const std::uint8_t> in,
                                      std::size_t expected) {
  z_stream zs{};
  if (inflateInit2(&zs, -15) != Z_OK) fail(ErrorCode::kInternal, "inflateInit2 failed");
  std::vector<std::uint8_t> out(expected);
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const bool complete = rc == Z_STREAM_END && zs.total_out == expected && zs.avail_in == 0;
  inflateEnd(&zs);
  if (!complete) fail(ErrorCode::kCorruption, "payload does not inflate to the expected size");
  return out;
}

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorCode::kNotFound, "cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void sync_fd(int fd, const fs::path& p) {
  if (::fsync(fd) != 0) fail(ErrorCode::kIo, "fsync failed for " + p.string());
}

void sync_dir(const fs::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (fd < 0) return;
  ::fsync(fd);
  ::close(fd);
}

// Durable replace: write a sibling temp file, sync it and rename over `p`.
void write_atomic(const fs::path& p, std::span<const std::uint8_t> bytes) {
  const fs::path tmp = p.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) fail(ErrorCode::kIo, "cannot write " + tmp.string());
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n <= 0) {
      ::close(fd);
      fail(ErrorCode::kIo, "short write to " + tmp.string());
    }
    done += static_cast<std::size_t>(n);
  }
  sync_fd(fd, tmp);
  ::close(fd);
  if (::rename(tmp.c_str(), p.c_str()) != 0)
    fail(ErrorCode::kIo, "cannot rename " + tmp.string());
}

void write_atomic(const fs::path& p, const std::string& text) {
  write_atomic(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Fd() { reset(); }
  int get() const noexcept { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

// Reads up to `len` bytes at `offset`; returns how many were available.
std::size_t pread_full(int fd, std::uint8_t* buf, std::size_t len, std::uint64_t offset) {
  std::size_t done = 0;
  while (done < len) {
    const ssize_t n = ::pread(fd, buf + done, len - done, static_cast<off_t>(offset + done));
    if (n < 0) fail(ErrorCode::kIo, "read error on data.bin");
    if (n == 0) break;
    done += static_cast<std::size_t>(n);
  }
  return done;
}

std::vector<std::uint8_t> serialize_maps(std::span<const FeatureMap> maps) {
  std::size_t total = 0;
  for (const auto& m : maps) total += m.data().size_bytes();
  std::vector<std::uint8_t> raw(total);
  std::size_t at = 0;
  for (const auto& m : maps) {
    std::memcpy(raw.data() + at, m.data().data(), m.data().size_bytes());
    at += m.data().size_bytes();
  }
  return raw;
}

std::string chunk_name(const ChunkIndexEntry& e) {
  return "chunk " + std::to_string(e.ordinal) + " (offset " +
         std::to_string(e.byte_offset) + ")";
}

// Reads, checks and decompresses one chunk into its raw float payload.
std::vector<std::uint8_t> load_chunk_payload(int fd, const ChunkIndexEntry& e,
                                             const StoreManifest& m) {
  std::vector<std::uint8_t> stored(e.byte_length);
  if (pread_full(fd, stored.data(), stored.size(), e.byte_offset) != stored.size())
    fail(ErrorCode::kCorruption, chunk_name(e) + " is truncated in data.bin");
  if (crc32_of(stored) != e.checksum)
    fail(ErrorCode::kCorruption, chunk_name(e) + " fails its CRC-32 check");
  const std::size_t expected = e.image_ids.size() * m.dims.size() * sizeof(float);
  if (m.compression == Compression::kNone) {
    if (stored.size() != expected)
      fail(ErrorCode::kCorruption, chunk_name(e) + " has the wrong payload size");
    return stored;
  }
  try {
    return inflate_raw(stored, expected);
  } catch (const Error& err) {
    fail(ErrorCode::kCorruption, chunk_name(e) + ": " + err.what());
  }
}

FeatureMap map_from_payload(const std::vector<std::uint8_t>& payload, std::size_t slot,
                            const std::string& id, const Dims& dims,
                            const ChunkIndexEntry& e) {
  std::vector<float> data(dims.size());
  std::memcpy(data.data(), payload.data() + slot * dims.size() * sizeof(float),
              dims.size() * sizeof(float));
  try {
    return FeatureMap(id, dims, std::move(data));
  } catch (const Error& err) {
    fail(ErrorCode::kCorruption, chunk_name(e) + ": " + err.what());
  }
}

}  // namespace

struct FeatureStore::State {
  fs::path dir;
  Mode mode = Mode::kReadOnly;
  StoreManifest manifest;
  std::vector<ChunkIndexEntry> index;
  std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> locator;
  Fd data_fd;
  Fd lock_fd;

  void rebuild_locator() {
    locator.clear();
    for (std::size_t c = 0; c < index.size(); ++c)
      for (std::size_t s = 0; s < index[c].image_ids.size(); ++s)
        if (!locator.emplace(index[c].image_ids[s], std::make_pair(c, s)).second)
          fail(ErrorCode::kCorruption,
               "image id '" + index[c].image_ids[s] + "' appears twice in index.bin");
  }

  void acquire_writer_lock() {
    const fs::path p = dir / store_files::kLock;
    lock_fd = Fd(::open(p.c_str(), O_RDWR | O_CREAT, 0644));
    if (lock_fd.get() < 0) fail(ErrorCode::kIo, "cannot create " + p.string());
    if (::flock(lock_fd.get(), LOCK_EX | LOCK_NB) != 0)
      fail(ErrorCode::kIo, "store " + dir.string() + " is locked by another writer");
  }

  void open_data(bool writable) {
    const fs::path p = dir / store_files::kData;
    data_fd = Fd(::open(p.c_str(), writable ? (O_RDWR | O_CREAT) : O_RDONLY, 0644));
    if (data_fd.get() < 0)
      fail(writable ? ErrorCode::kIo : ErrorCode::kCorruption, "cannot open " + p.string());
  }

  void publish() {
    write_atomic(dir / store_files::kIndex, encode_index(index));
    write_atomic(dir / store_files::kManifest, manifest_to_json(manifest));
    sync_dir(dir);
  }
};

FeatureStore::FeatureStore(std::unique_ptr<State> state) : state_(std::move(state)) {}
FeatureStore::FeatureStore(FeatureStore&&) noexcept = default;
FeatureStore& FeatureStore::operator=(FeatureStore&&) noexcept = default;
FeatureStore::~FeatureStore() = default;

FeatureStore FeatureStore::create(const fs::path& dir, StoreManifest manifest) {
  // Round-trip through the parser to apply the same field validation.
  manifest.image_count = 0;
  manifest = manifest_from_json(manifest_to_json(manifest));
  if (fs::exists(dir / store_files::kManifest))
    fail(ErrorCode::kAlreadyExists, "a store already exists at " + dir.string());
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());

  auto st = std::make_unique<State>();
  st->dir = dir;
  st->mode = Mode::kReadWrite;
  st->manifest = std::move(manifest);
  st->acquire_writer_lock();
  if (fs::exists(dir / store_files::kManifest))
    fail(ErrorCode::kAlreadyExists, "a store already exists at " + dir.string());
  st->open_data(true);
  write_atomic(dir / store_files::kIndex, std::span<const std::uint8_t>{});
  st->publish();
  return FeatureStore(std::move(st));
}

FeatureStore FeatureStore::open(const fs::path& dir, Mode mode) {
  if (!fs::exists(dir / store_files::kManifest))
    fail(ErrorCode::kNotFound, "no store at " + dir.string());
  auto st = std::make_unique<State>();
  st->dir = dir;
  st->mode = mode;
  if (mode == Mode::kReadWrite) st->acquire_writer_lock();

  const auto manifest_bytes = read_file(dir / store_files::kManifest);
  try {
    st->manifest = manifest_from_json(std::string(manifest_bytes.begin(), manifest_bytes.end()));
  } catch (const Error& e) {
    fail(ErrorCode::kCorruption, std::string("manifest.json: ") + e.what());
  }
  if (!fs::exists(dir / store_files::kIndex))
    fail(ErrorCode::kCorruption, "index.bin is missing in " + dir.string());
  st->index = decode_index(read_file(dir / store_files::kIndex));
  for (std::size_t c = 0; c < st->index.size(); ++c)
    if (st->index[c].ordinal != c)
      fail(ErrorCode::kCorruption, "index.bin ordinals are out of sequence at entry " +
                                       std::to_string(c));
  st->rebuild_locator();
  st->open_data(mode == Mode::kReadWrite);
  return FeatureStore(std::move(st));
}

const fs::path& FeatureStore::path() const noexcept { return state_->dir; }
const StoreManifest& FeatureStore::manifest() const noexcept { return state_->manifest; }
std::span<const ChunkIndexEntry> FeatureStore::index() const noexcept { return state_->index; }

std::vector<std::string> FeatureStore::image_ids() const {
  std::vector<std::string> ids;
  for (const auto& e : state_->index)
    ids.insert(ids.end(), e.image_ids.begin(), e.image_ids.end());
  return ids;
}

bool FeatureStore::contains(const std::string& image_id) const {
  return state_->locator.contains(image_id);
}

std::uint64_t FeatureStore::payload_bytes() const noexcept {
  return static_cast<std::uint64_t>(state_->locator.size()) *
         state_->manifest.dims.size() * sizeof(float);
}

std::size_t FeatureStore::append(std::span<const FeatureMap> maps) {
  State& st = *state_;
  if (st.mode != Mode::kReadWrite)
    fail(ErrorCode::kInvalidArgument, "store was opened read-only");

  std::set<std::string> batch_ids;
  for (const auto& m : maps) {
    if (m.dims() != st.manifest.dims)
      fail(ErrorCode::kInvalidArgument,
           "feature map '" + m.image_id() + "' has dims " + to_string(m.dims()) +
               ", store expects " + to_string(st.manifest.dims));
    if (m.image_id().empty() || m.image_id().size() > 0xFFFF)
      fail(ErrorCode::kInvalidArgument, "image ids must be 1..65535 bytes long");
    if (st.locator.contains(m.image_id()) || !batch_ids.insert(m.image_id()).second)
      fail(ErrorCode::kInvalidArgument, "duplicate image id '" + m.image_id() + "'");
  }
  if (maps.empty()) return 0;

  struct stat sb {};
  if (::fstat(st.data_fd.get(), &sb) != 0) fail(ErrorCode::kIo, "cannot stat data.bin");
  std::uint64_t offset = static_cast<std::uint64_t>(sb.st_size);

  std::vector<ChunkIndexEntry> added;
  const std::size_t per_chunk = st.manifest.images_per_chunk;
  for (std::size_t first = 0; first < maps.size(); first += per_chunk) {
    const auto group = maps.subspan(first, std::min(per_chunk, maps.size() - first));
    auto payload = serialize_maps(group);
    if (st.manifest.compression == Compression::kDeflate) payload = deflate_raw(payload);

    std::size_t done = 0;
    while (done < payload.size()) {
      const ssize_t n = ::pwrite(st.data_fd.get(), payload.data() + done, payload.size() - done,
                                 static_cast<off_t>(offset + done));
      if (n <= 0) fail(ErrorCode::kIo, "write to data.bin failed");
      done += static_cast<std::size_t>(n);
    }

    ChunkIndexEntry e;
    e.ordinal = static_cast<std::uint32_t>(st.index.size() + added.size());
    e.byte_offset = offset;
    e.byte_length = payload.size();
    e.checksum = crc32_of(payload);
    for (const auto& m : group) e.image_ids.push_back(m.image_id());
    offset += payload.size();
    added.push_back(std::move(e));
  }
  sync_fd(st.data_fd.get(), st.dir / store_files::kData);

  const auto old_index_size = st.index.size();
  const auto old_count = st.manifest.image_count;
  st.index.insert(st.index.end(), added.begin(), added.end());
  st.manifest.image_count += maps.size();
  try {
    st.publish();
  } catch (...) {
    st.index.resize(old_index_size);
    st.manifest.image_count = old_count;
    throw;
  }
  st.rebuild_locator();
  return maps.size();
}

void FeatureStore::set_labels(const std::map<std::string, std::string>& labels) {
  State& st = *state_;
  if (st.mode != Mode::kReadWrite)
    fail(ErrorCode::kInvalidArgument, "store was opened read-only");
  auto merged = st.manifest.label_map.value_or(std::map<std::string, std::string>{});
  for (const auto& [id, label] : labels) merged[id] = label;
  st.manifest.label_map = std::move(merged);
  write_atomic(st.dir / store_files::kManifest, manifest_to_json(st.manifest));
}

FeatureMap FeatureStore::get(const std::string& image_id) const {
  const auto it = state_->locator.find(image_id);
  if (it == state_->locator.end())
    fail(ErrorCode::kNotFound, "image id '" + image_id + "' is not in the store");
  const auto& entry = state_->index[it->second.first];
  const auto payload = load_chunk_payload(state_->data_fd.get(), entry, state_->manifest);
  return map_from_payload(payload, it->second.second, image_id, state_->manifest.dims, entry);
}

std::vector<FeatureMap> FeatureStore::read_chunk(std::size_t chunk) const {
  if (chunk >= state_->index.size())
    fail(ErrorCode::kNotFound, "chunk " + std::to_string(chunk) + " does not exist");
  const auto& entry = state_->index[chunk];
  const auto payload = load_chunk_payload(state_->data_fd.get(), entry, state_->manifest);
  std::vector<FeatureMap> maps;
  maps.reserve(entry.image_ids.size());
  for (std::size_t s = 0; s < entry.image_ids.size(); ++s)
    maps.push_back(map_from_payload(payload, s, entry.image_ids[s], state_->manifest.dims, entry));
  return maps;
}

std::vector<FeatureMap> FeatureStore::load_all() const {
  std::vector<FeatureMap> all;
  all.reserve(state_->locator.size());
  for (std::size_t c = 0; c < state_->index.size(); ++c) {
    auto maps = read_chunk(c);
    std::move(maps.begin(), maps.end(), std::back_inserter(all));
  }
  return all;
}

BatchStream FeatureStore::batches(std::size_t batch_size) const {
  if (batch_size < 1) fail(ErrorCode::kInvalidArgument, "batch size must be at least 1");
  return BatchStream(*this, batch_size);
}

// ---------------------------------------------------------------------------

struct BatchStream::Shared {
  static constexpr std::size_t kPrefetchDepth = 2;

  std::size_t batch_size = 1;
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::vector<FeatureMap>> decoded;
  bool producer_done = false;
  bool stop = false;
  std::exception_ptr error;
  std::thread producer;

  std::deque<FeatureMap> pending;
  bool finished = false;

  void shutdown() {
    {
      std::lock_guard lock(mu);
      stop = true;
    }
    cv.notify_all();
    if (producer.joinable()) producer.join();
  }
};

BatchStream::BatchStream(const FeatureStore& store, std::size_t batch_size)
    : shared_(std::make_shared<Shared>()) {
  shared_->batch_size = batch_size;
  Shared* sh = shared_.get();
  const std::size_t chunks = store.index().size();
  sh->producer = std::thread([sh, &store, chunks] {
    try {
      for (std::size_t c = 0; c < chunks; ++c) {
        auto maps = store.read_chunk(c);
        std::unique_lock lock(sh->mu);
        sh->cv.wait(lock, [sh] { return sh->stop || sh->decoded.size() < Shared::kPrefetchDepth; });
        if (sh->stop) return;
        sh->decoded.push_back(std::move(maps));
        sh->cv.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(sh->mu);
      sh->error = std::current_exception();
    }
    std::lock_guard lock(sh->mu);
    sh->producer_done = true;
    sh->cv.notify_all();
  });
}

BatchStream::BatchStream(BatchStream&&) noexcept = default;

BatchStream& BatchStream::operator=(BatchStream&& other) noexcept {
  if (this != &other) {
    if (shared_) shared_->shutdown();
    shared_ = std::move(other.shared_);
  }
  return *this;
}

BatchStream::~BatchStream() {
  if (shared_) shared_->shutdown();
}

std::optional<std::vector<FeatureMap>> BatchStream::next() {
  if (!shared_) return std::nullopt;
  Shared& sh = *shared_;
  if (sh.finished) return std::nullopt;
  while (sh.pending.size() < sh.batch_size) {
    std::unique_lock lock(sh.mu);
    sh.cv.wait(lock, [&] { return !sh.decoded.empty() || sh.producer_done; });
    if (!sh.decoded.empty()) {
      auto maps = std::move(sh.decoded.front());
      sh.decoded.pop_front();
      lock.unlock();
      sh.cv.notify_all();
      std::move(maps.begin(), maps.end(), std::back_inserter(sh.pending));
    } else if (sh.error) {
      sh.finished = true;
      std::rethrow_exception(sh.error);
    } else {
      break;
    }
  }
  if (sh.pending.empty()) {
    sh.finished = true;
    return std::nullopt;
  }
  const std::size_t n = std::min(sh.batch_size, sh.pending.size());
  std::vector<FeatureMap> batch;
  batch.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    batch.push_back(std::move(sh.pending.front()));
    sh.pending.pop_front();
  }
  return batch;
}

// ---------------------------------------------------------------------------

std::size_t VerifyReport::failed_chunks() const {
  return static_cast<std::size_t>(
      std::count_if(chunks.begin(), chunks.end(), [](const ChunkStatus& c) { return !c.ok; }));
}

std::string VerifyReport::to_json() const {
  json j;
  j["ok"] = ok;
  j["chunk_count"] = chunks.size();
  j["failed_chunks"] = failed_chunks();
  j["problems"] = problems;
  j["chunks"] = json::array();
  for (const auto& c : chunks) {
    json cj{{"ordinal", c.ordinal},
            {"byte_offset", c.byte_offset},
            {"byte_length", c.byte_length},
            {"images", c.image_count},
            {"status", c.ok ? "ok" : "failed"}};
    if (!c.ok) cj["detail"] = c.detail;
    j["chunks"].push_back(std::move(cj));
  }
  return j.dump(2);
}

VerifyReport verify_store(const fs::path& dir) {
  VerifyReport report;
  auto problem = [&](std::string msg) {
    report.ok = false;
    report.problems.push_back(std::move(msg));
  };

  std::optional<StoreManifest> manifest;
  if (!fs::exists(dir / store_files::kManifest)) {
    problem("manifest.json is missing");
  } else {
    try {
      const auto bytes = read_file(dir / store_files::kManifest);
      manifest = manifest_from_json(std::string(bytes.begin(), bytes.end()));
    } catch (const Error& e) {
      problem(std::string("manifest.json is unreadable: ") + e.what());
    }
  }

  std::vector<ChunkIndexEntry> index;
  if (!fs::exists(dir / store_files::kIndex)) {
    problem("index.bin is missing");
    return report;
  }
  try {
    index = decode_index(read_file(dir / store_files::kIndex));
  } catch (const Error& e) {
    problem(e.what());
    return report;
  }

  const fs::path data_path = dir / store_files::kData;
  Fd data(::open(data_path.c_str(), O_RDONLY));
  std::uint64_t data_size = 0;
  if (data.get() < 0) {
    problem("data.bin is missing");
  } else {
    struct stat sb {};
    if (::fstat(data.get(), &sb) == 0) data_size = static_cast<std::uint64_t>(sb.st_size);
  }

  std::set<std::string> seen;
  std::uint64_t total = 0;
  std::uint64_t prev_end = 0;
  for (std::size_t c = 0; c < index.size(); ++c) {
    const auto& e = index[c];
    ChunkStatus status{e.ordinal, e.byte_offset, e.byte_length, e.image_ids.size(), true, {}};
    auto bad = [&](std::string why) {
      if (status.ok) status.detail = std::move(why);
      status.ok = false;
    };
    total += e.image_ids.size();
    for (const auto& id : e.image_ids)
      if (!seen.insert(id).second) problem("image id '" + id + "' is indexed twice");
    if (e.ordinal != c) bad("ordinal " + std::to_string(e.ordinal) + " out of sequence");
    if (e.byte_offset < prev_end) bad("overlaps the previous chunk");
    prev_end = std::max(prev_end, e.byte_offset + e.byte_length);

    if (data.get() < 0) {
      bad("data.bin is missing");
    } else if (e.byte_offset + e.byte_length > data_size) {
      bad("bytes [" + std::to_string(e.byte_offset) + ", " +
          std::to_string(e.byte_offset + e.byte_length) + ") lie past the end of data.bin (" +
          std::to_string(data_size) + " bytes)");
    } else if (status.ok) {
      try {
        if (manifest) {
          load_chunk_payload(data.get(), e, *manifest);
        } else {
          std::vector<std::uint8_t> stored(e.byte_length);
          pread_full(data.get(), stored.data(), stored.size(), e.byte_offset);
          if (crc32_of(stored) != e.checksum) bad("fails its CRC-32 check");
        }
      } catch (const Error& err) {
        bad(err.what());
      }
    }
    if (!status.ok) report.ok = false;
    report.chunks.push_back(std::move(status));
  }
  if (manifest && manifest->image_count != total)
    problem("manifest image_count " + std::to_string(manifest->image_count) +
            " does not match the " + std::to_string(total) + " indexed images");
  return report;
}

}  // namespace featscan
