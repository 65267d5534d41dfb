#include "stflow/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include <zlib.h>

namespace stflow {

using nlohmann::json;

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model: " + msg); };
  if (closeness < 2) fail("closeness must be >= 2, got " + std::to_string(closeness));
  if (grid_height == 0 || grid_width == 0) fail("grid dims must be positive");
  if (levels > 16) fail("levels must be <= 16, got " + std::to_string(levels));
  const std::size_t factor = std::size_t{1} << levels;
  if (grid_height % factor != 0 || grid_width % factor != 0) {
    fail("grid " + std::to_string(grid_height) + "x" + std::to_string(grid_width) + " is not divisible by 2^" +
         std::to_string(levels) + " = " + std::to_string(factor) + " (levels=" + std::to_string(levels) + ")");
  }
  if (filters == 0) fail("filters must be positive");
  if (bottleneck == 0) fail("bottleneck must be positive");
  if (kernel == 0) fail("kernel must be positive");
  if (attention_kernel == 0) fail("attention_kernel must be positive");
  if (embedding_width == 0) fail("embedding_width must be positive");
  if (attention_ratio == 0 || bottleneck % attention_ratio != 0) {
    fail("attention_ratio " + std::to_string(attention_ratio) + " must divide bottleneck " +
         std::to_string(bottleneck));
  }
}

json ModelConfig::to_json() const {
  return json{{"closeness", closeness},
              {"levels", levels},
              {"grid_height", grid_height},
              {"grid_width", grid_width},
              {"filters", filters},
              {"bottleneck", bottleneck},
              {"kernel", kernel},
              {"attention_ratio", attention_ratio},
              {"attention_kernel", attention_kernel},
              {"embedding_width", embedding_width},
              {"long_skip", long_skip},
              {"attention", attention},
              {"external", external},
              {"seed", seed}};
}

namespace {

template <typename V>
void read_field(const json& j, const char* key, V& out) {
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model.") + key + ": " + e.what());
  }
}

void read_size(const json& j, const char* key, std::size_t& out) {
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(std::string("model.") + key + ": expected a non-negative integer, got " + v.dump());
  }
  out = v.get<std::size_t>();
}

void read_bool(const json& j, const char* key, bool& out) {
  const json& v = j.at(key);
  if (!v.is_boolean()) throw ConfigError(std::string("model.") + key + ": expected true/false, got " + v.dump());
  out = v.get<bool>();
}

}  // namespace

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model: expected an object");
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "closeness") read_size(j, "closeness", c.closeness);
    else if (key == "levels") read_size(j, "levels", c.levels);
    else if (key == "grid_height") read_size(j, "grid_height", c.grid_height);
    else if (key == "grid_width") read_size(j, "grid_width", c.grid_width);
    else if (key == "filters") read_size(j, "filters", c.filters);
    else if (key == "bottleneck") read_size(j, "bottleneck", c.bottleneck);
    else if (key == "kernel") read_size(j, "kernel", c.kernel);
    else if (key == "attention_ratio") read_size(j, "attention_ratio", c.attention_ratio);
    else if (key == "attention_kernel") read_size(j, "attention_kernel", c.attention_kernel);
    else if (key == "embedding_width") read_size(j, "embedding_width", c.embedding_width);
    else if (key == "long_skip") read_bool(j, "long_skip", c.long_skip);
    else if (key == "attention") read_bool(j, "attention", c.attention);
    else if (key == "external") read_bool(j, "external", c.external);
    else if (key == "seed") read_field(j, "seed", c.seed);
    else throw ConfigError("model: unknown key '" + key + "'");
  }
  return c;
}

std::uint32_t ModelConfig::digest() const {
  json j = to_json();
  j.erase("seed");
  const std::string s = j.dump();
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

ModelConfig ModelConfig::bike_nyc() { return ModelConfig{}; }

ModelConfig ModelConfig::taxi_bj() {
  ModelConfig c;
  c.levels = 3;
  c.grid_height = 32;
  c.grid_width = 32;
  return c;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config), store_(config.seed) {
  config_.validate();
  const auto& c = config_;
  encoder_ = Encoder<T>::make(store_, c.levels, c.filters, c.bottleneck, c.kernel);
  cascade_ = Cascade<T>::make(store_, c.closeness, c.bottleneck, c.kernel);
  if (c.external) {
    external_ = ExternalBranch<T>::make(store_, c.embedding_width, c.latent_height(), c.latent_width(), c.bottleneck);
  }
  decoder_ = Decoder<T>::make(store_, c.levels, c.filters, c.bottleneck, c.kernel, c.grid_height, c.grid_width,
                              c.long_skip, c.attention, c.attention_ratio, c.attention_kernel);
}

template <typename T>
ForwardTrace<T> Model<T>::trace(Context<T>& ctx, const Var<T>& frames, const Var<T>& external) const {
  const auto& c = config_;
  const Shape& s = frames.shape();
  if (s.size() != 5 || s[1] != c.closeness || s[2] != c.grid_height || s[3] != c.grid_width || s[4] != 2) {
    throw ShapeError("forward", "frames must be [batch, " + std::to_string(c.closeness) + ", " +
                                    std::to_string(c.grid_height) + ", " + std::to_string(c.grid_width) +
                                    ", 2], got " + shape_str(s));
  }
  ForwardTrace<T> t;
  t.encoder = encoder_(ctx, frames);
  t.cascade = cascade_(ctx, t.encoder.final);
  t.latent = t.cascade;
  if (c.external) {
    if (!external.valid() || external.shape().size() != 2 || external.dim(0) != s[0]) {
      throw ShapeError("forward", "external factors must be [" + std::to_string(s[0]) + ", 14], got " +
                                      (external.valid() ? shape_str(external.shape()) : std::string("none")));
    }
    t.external = external_(ctx, external);
    t.latent = add(t.cascade, t.external);
  }
  std::vector<Var<T>> skips;
  if (c.long_skip) {
    for (const auto& eru : t.encoder.eru) skips.push_back(select(eru, 1, c.closeness - 1));
  }
  t.prediction = decoder_(ctx, t.latent, skips);
  return t;
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& frames, const Tensor<T>& external) const {
  Tape<T> tape;
  Context<T> ctx(tape, Mode::eval);
  ctx.grad = false;
  Var<T> e = external.empty() ? Var<T>{} : tape.constant(external);
  return forward(ctx, tape.constant(frames), e).value();
}

template class Model<float>;
template class Model<double>;

// ---------------------------------------------------------------------------
// Summary

namespace {

std::string dims(std::initializer_list<std::size_t> d) {
  std::string s;
  for (auto v : d) {
    if (!s.empty()) s += 'x';
    s += std::to_string(v);
  }
  return s;
}

std::uint64_t conv_flops(std::size_t oh, std::size_t ow, std::size_t kh, std::size_t kw, std::size_t cin,
                         std::size_t cout) {
  const std::uint64_t out = static_cast<std::uint64_t>(oh) * ow * cout;
  return 2 * out * kh * kw * cin + out;
}

std::uint64_t dense_flops(std::size_t in, std::size_t out) { return 2ull * in * out + out; }

template <typename T>
ModelSummary summarize_impl(const Model<T>& model) {
  const ModelConfig& c = model.config();
  const auto& store = model.params();
  const std::size_t N = c.grid_height, M = c.grid_width, F = c.filters, C = c.bottleneck, k = c.kernel;
  const std::size_t p = c.closeness, n = c.latent_height(), m = c.latent_width();
  ModelSummary s;
  auto row = [&](const std::string& name, std::string out, std::uint64_t flops) {
    s.rows.push_back({name, std::move(out), store.trainable_count(name + "."), flops});
  };
  // BN(ReLU(conv)) block at output dims (h, w, co).
  auto crb = [&](std::size_t h, std::size_t w, std::size_t kk, std::size_t ci, std::size_t co) {
    return conv_flops(h, w, kk, kk, ci, co) + 3ull * h * w * co;
  };
  auto res = [&](std::size_t h, std::size_t w) { return 2 * crb(h, w, k, F, F) + 1ull * h * w * F; };

  row("encoder.conv0", dims({p, N, M, F}), p * crb(N, M, k, 2, F));
  for (std::size_t l = 1; l <= c.levels; ++l) {
    const std::size_t h = N >> (l - 1), w = M >> (l - 1);
    const std::string lvl = "encoder.level" + std::to_string(l);
    row(lvl + ".res", dims({p, h, w, F}), p * res(h, w));
    row(lvl + ".down", dims({p, h / 2, w / 2, F}), p * crb(h / 2, w / 2, 3, F, F));
  }
  row("encoder.closing", dims({p, n, m, C}), p * crb(n, m, k, F, C));

  const std::uint64_t e = 1ull * n * m * C;
  const std::uint64_t conv_c = conv_flops(n, m, k, k, C, C);
  const std::uint64_t mu = 4 * conv_c + 9 * e;
  const std::uint64_t cmu = 3 * mu + 2 * conv_c + 4 * e;
  for (std::size_t lv = 1; lv < p; ++lv) {
    row("cascade.level" + std::to_string(lv), dims({p - lv, n, m, C}), (p - lv) * cmu);
  }

  if (c.external) {
    std::uint64_t embed = 0;
    for (auto g : external_groups()) embed += dense_flops(g, c.embedding_width) + c.embedding_width;
    row("external.embed", dims({external_groups().size() * c.embedding_width}), embed);
    for (std::size_t i = 0; i < external_groups().size(); ++i) {
      s.rows.back().params += store.trainable_count("external.embed" + std::to_string(i) + ".");
    }
    // The projection row also carries z = X_cmu + X_ext.
    row("external.project", dims({n, m, C}),
        dense_flops(external_groups().size() * c.embedding_width, n * m * C) + e);
  }

  row("decoder.conv0", dims({n, m, F}), crb(n, m, k, C, F));
  for (std::size_t l = 1; l <= c.levels; ++l) {
    const std::size_t h = n << l, w = m << l;
    const std::string lvl = "decoder.level" + std::to_string(l);
    const std::uint64_t up = 2ull * (h / 2) * (w / 2) * 9 * F * F + 1ull * h * w * F;
    row(lvl + ".up", dims({h, w, F}), up);
    if (c.long_skip) row(lvl + ".merge_bn", dims({h, w, F}), 4ull * h * w * F);
    row(lvl + ".res", dims({h, w, F}), res(h, w));
  }
  row("decoder.closing", dims({N, M, C}), crb(N, M, k, F, C));
  if (c.attention) {
    const std::size_t r = C / c.attention_ratio;
    const std::uint64_t mlp = dense_flops(C, r) + r + dense_flops(r, C);
    row("decoder.channel_attention", dims({N, M, C}), 2ull * N * M * C + 2 * mlp + 4ull * C + 1ull * N * M * C);
    const std::size_t ka = c.attention_kernel;
    row("decoder.spatial_attention", dims({N, M, C}),
        2ull * N * M * C + 2 * conv_flops(N, M, ka, ka, 1, 1) + 4ull * N * M + 1ull * N * M * C);
  }
  row("decoder.output", dims({N, M, 2}), conv_flops(N, M, k, k, C, 2) + 2ull * N * M);

  for (const auto& r : s.rows) {
    s.total_params += r.params;
    s.total_flops += r.flops;
  }
  return s;
}

}  // namespace

ModelSummary summarize(const Model<float>& model) { return summarize_impl(model); }
ModelSummary summarize(const Model<double>& model) { return summarize_impl(model); }

std::string ModelSummary::table() const {
  std::size_t wn = 5, wo = 6;
  for (const auto& r : rows) {
    wn = std::max(wn, r.name.size());
    wo = std::max(wo, r.output.size());
  }
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(wn)) << "layer" << "  " << std::setw(static_cast<int>(wo)) << "output"
     << "  " << std::right << std::setw(10) << "params" << "  " << std::setw(14) << "flops" << '\n';
  os << std::string(wn + wo + 30, '-') << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(wn)) << r.name << "  " << std::setw(static_cast<int>(wo))
       << r.output << "  " << std::right << std::setw(10) << r.params << "  " << std::setw(14) << r.flops << '\n';
  }
  os << std::string(wn + wo + 30, '-') << '\n';
  os << std::left << std::setw(static_cast<int>(wn + wo + 2)) << "total" << "  " << std::right << std::setw(10)
     << total_params << "  " << std::setw(14) << total_flops << '\n';
  return os.str();
}

std::string ModelSummary::csv() const {
  std::ostringstream os;
  os << "layer,output,params,flops\n";
  for (const auto& r : rows) os << r.name << ',' << r.output << ',' << r.params << ',' << r.flops << '\n';
  os << "total,," << total_params << ',' << total_flops << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'T', 'F', 'L', 'O', 'W', 'C', 'K'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <typename T>
  void values(const Tensor<T>& t) {
    for (T v : t.values()) {
      if constexpr (sizeof(T) == 4) u32(std::bit_cast<std::uint32_t>(v));
      else u64(std::bit_cast<std::uint64_t>(v));
    }
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end, std::string path) : buf_(buf), end_(end), path_(std::move(path)) {}
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw IoError(path_ + ": truncated checkpoint");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string path_;
};

std::uint32_t checksum(const std::string& s, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(n)));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("cannot read " + path);
  return data;
}

struct Parsed {
  std::uint32_t digest = 0;
  json metadata;
  std::string data;
  std::size_t tensors_at = 0;
};

Parsed parse_header(const std::string& path) {
  Parsed p;
  p.data = read_file(path);
  const std::string& d = p.data;
  if (d.size() < sizeof(kMagic) + 4 || std::memcmp(d.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError(path + ": not a stflow checkpoint");
  }
  if (d.size() < sizeof(kMagic) + 16) throw IoError(path + ": truncated checkpoint");
  Reader tail(d, d.size(), path);
  std::uint32_t version = 0;
  {
    Reader r(d, d.size(), path);
    r.raw(sizeof(kMagic));
    version = r.u32();
  }
  if (version != kCheckpointVersion) {
    throw CompatibilityError(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  }
  const std::size_t body = d.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(d[body + i])) << (8 * i);
  if (stored != checksum(d, body)) throw IoError(path + ": checksum mismatch (corrupt checkpoint)");
  Reader r(d, body, path);
  r.raw(sizeof(kMagic));
  r.u32();
  p.digest = r.u32();
  try {
    p.metadata = json::parse(r.str());
  } catch (const json::exception& e) {
    throw IoError(path + ": bad metadata: " + e.what());
  }
  return p;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const json& metadata) {
  json meta = metadata;
  meta["model"] = model.config().to_json();
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kCheckpointVersion);
  w.u32(model.config().digest());
  w.str(meta.dump());
  const auto& store = model.params();
  w.u32(static_cast<std::uint32_t>(store.trainable().size() + store.buffers().size()));
  auto put = [&](const Parameter<T>& p) {
    w.str(p.name);
    w.u8(sizeof(T) == 4 ? 0 : 1);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto dim : p.value.shape()) w.u64(dim);
    w.values(p.value);
  };
  for (const auto& p : store.trainable()) put(p);
  for (const auto& p : store.buffers()) put(p);
  w.u32(checksum(w.buffer(), w.buffer().size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw IoError("cannot write " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot rename " + tmp + " to " + path);
}

CheckpointHeader read_checkpoint_header(const std::string& path) {
  Parsed p = parse_header(path);
  CheckpointHeader h;
  if (!p.metadata.contains("model")) throw IoError(path + ": metadata lacks the model config");
  try {
    h.config = ModelConfig::from_json(p.metadata.at("model"));
  } catch (const ConfigError& e) {
    throw CompatibilityError(path + ": " + e.what());
  }
  if (h.config.digest() != p.digest) throw IoError(path + ": config digest does not match its metadata");
  h.metadata = std::move(p.metadata);
  return h;
}

template <typename T>
json load_checkpoint(const std::string& path, Model<T>& model) {
  Parsed p = parse_header(path);
  if (p.digest != model.config().digest()) {
    throw CompatibilityError(path + ": checkpoint was written for a different model configuration");
  }
  Reader r(p.data, p.data.size() - 4, path);
  r.raw(sizeof(kMagic));
  r.u32();
  r.u32();
  r.str();
  const std::uint32_t count = r.u32();
  auto& store = model.params();
  const std::size_t expected = store.trainable().size() + store.buffers().size();
  if (count != expected) {
    throw CompatibilityError(path + ": " + std::to_string(count) + " tensors stored, model has " +
                             std::to_string(expected));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const std::uint8_t dtype = r.u8();
    if (dtype > 1) throw IoError(path + ": unknown dtype for " + name);
    Shape shape(r.u32());
    for (auto& dim : shape) dim = static_cast<std::size_t>(r.u64());
    Parameter<T>* dst = store.find(name);
    if (!dst) throw CompatibilityError(path + ": unexpected tensor " + name);
    if (dst->value.shape() != shape) {
      throw CompatibilityError(path + ": " + name + " has shape " + shape_str(shape) + ", model expects " +
                               shape_str(dst->value.shape()));
    }
    for (auto& v : dst->value.data()) {
      if (dtype == 0) v = static_cast<T>(std::bit_cast<float>(r.u32()));
      else v = static_cast<T>(std::bit_cast<double>(r.u64()));
    }
  }
  if (!r.done()) throw IoError(path + ": trailing bytes in checkpoint");
  return p.metadata;
}

template void save_checkpoint(const std::string&, const Model<float>&, const json&);
template void save_checkpoint(const std::string&, const Model<double>&, const json&);
template json load_checkpoint(const std::string&, Model<float>&);
template json load_checkpoint(const std::string&, Model<double>&);

}  // namespace stflow
