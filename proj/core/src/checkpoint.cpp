#include "dms/checkpoint.hpp"

#include <atomic>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dms/error.hpp"

namespace dms {

namespace {

std::atomic<uint64_t> g_loads{0};

constexpr char kMagic[8] = {'D', 'M', 'S', 'C', 'K', 'P', 'T', '1'};

struct Writer {
  std::string buf;

  void u32(uint32_t v) { raw(&v, sizeof v); }
  void u64(uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    buf.append(s);
  }
  void doubles(const std::vector<double>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }
  void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
};

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  explicit Reader(const std::string& b) : buf(b) {}

  void raw(void* p, size_t n) {
    require(pos + n <= buf.size(), "checkpoint truncated");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  uint32_t u32() {
    uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    require(pos + n <= buf.size(), "checkpoint truncated");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  std::vector<double> doubles() {
    uint64_t n = u64();
    std::vector<double> v(static_cast<size_t>(n));
    raw(v.data(), static_cast<size_t>(n) * sizeof(double));
    return v;
  }
};

// The weights payload holds only parameters (and the input selection); the
// operator state rides only in search-state checkpoints. Pipeline p-'s
// weight-freeze contract compares weights payloads byte for byte.
void write_params(Writer& w, const Network& net) {
  auto params = net.params();
  w.u32(static_cast<uint32_t>(params.size()));
  for (const Param* p : params) {
    w.str(p->name);
    w.u32(static_cast<uint32_t>(p->value.shape.size()));
    for (int d : p->value.shape) w.u32(static_cast<uint32_t>(d));
    w.doubles(p->value.values);
  }
  w.u32(static_cast<uint32_t>(net.input_selection.size()));
  for (int i : net.input_selection) w.u32(static_cast<uint32_t>(i));
}

void read_params(Reader& r, Network& net) {
  auto params = net.params();
  uint32_t count = r.u32();
  require(count == params.size(), "checkpoint holds " + std::to_string(count) +
                                      " parameters, model has " + std::to_string(params.size()));
  for (Param* p : params) {
    std::string name = r.str();
    require(name == p->name, "checkpoint parameter '" + name + "' does not match model parameter '" +
                                 p->name + "'");
    uint32_t rank = r.u32();
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(r.u32());
    require(shape == p->value.shape, "checkpoint parameter '" + name + "' has shape " +
                                         shape_str(shape) + ", model expects " +
                                         shape_str(p->value.shape));
    p->value.values = r.doubles();
    require(static_cast<int64_t>(p->value.values.size()) == numel(shape),
            "checkpoint parameter '" + name + "' has inconsistent payload");
  }
  uint32_t sel = r.u32();
  net.input_selection.resize(sel);
  for (uint32_t i = 0; i < sel; ++i) net.input_selection[i] = static_cast<int>(r.u32());
}

void write_ops(Writer& w, const Network& net) {
  w.u32(static_cast<uint32_t>(net.ops.size()));
  for (const TopkOperator& op : net.ops) {
    w.str(op.name);
    w.f64(op.a);
    w.doubles(op.importance);
  }
}

void read_ops(Reader& r, Network& net) {
  uint32_t op_count = r.u32();
  require(op_count == net.ops.size(), "checkpoint operator count mismatch");
  for (TopkOperator& op : net.ops) {
    std::string name = r.str();
    require(name == op.name, "checkpoint operator '" + name + "' does not match '" + op.name + "'");
    op.a = r.f64();
    std::vector<double> imp = r.doubles();
    require(imp.size() == op.importance.size(), "checkpoint importance length mismatch for '" + name + "'");
    op.importance = std::move(imp);
  }
}

void write_file(const std::string& path, const std::string& tag, const std::string& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot write checkpoint '" + path + "'");
  Writer head;
  head.raw(kMagic, sizeof kMagic);
  head.u32(1);
  head.str(tag);
  out.write(head.buf.data(), static_cast<std::streamsize>(head.buf.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  require(out.good(), "failed writing checkpoint '" + path + "'");
}

std::string read_file(const std::string& path, const std::string& tag) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string all = ss.str();
  Reader r(all);
  char magic[8];
  r.raw(magic, sizeof magic);
  require(std::memcmp(magic, kMagic, sizeof kMagic) == 0,
          "'" + path + "' is not a dms checkpoint");
  uint32_t version = r.u32();
  require(version == 1, "checkpoint '" + path + "' has unsupported version " + std::to_string(version));
  std::string found = r.str();
  require(found == tag, "checkpoint '" + path + "' has schema tag '" + found + "', expected '" +
                            tag + "'");
  g_loads.fetch_add(1);
  return all.substr(r.pos);
}

}  // namespace

void save_weights(const Network& net, const std::string& path) {
  Writer w;
  write_params(w, net);
  write_file(path, kWeightsTag, w.buf);
}

void load_weights(Network& net, const std::string& path) {
  std::string payload = read_file(path, kWeightsTag);
  Reader r(payload);
  read_params(r, net);
}

void save_search_state(const Network& net, const SearchState& state, const std::string& path) {
  Writer w;
  write_params(w, net);
  write_ops(w, net);
  w.u32(static_cast<uint32_t>(state.epoch));
  w.f64(state.r_t);
  w.str(state.rng);
  w.u64(static_cast<uint64_t>(state.opt.step));
  w.u32(static_cast<uint32_t>(state.opt.m.size()));
  for (const auto& m : state.opt.m) w.doubles(m);
  for (const auto& v : state.opt.v) w.doubles(v);
  write_file(path, kSearchStateTag, w.buf);
}

SearchState load_search_state(Network& net, const std::string& path) {
  std::string payload = read_file(path, kSearchStateTag);
  Reader r(payload);
  read_params(r, net);
  read_ops(r, net);
  SearchState state;
  state.epoch = static_cast<int>(r.u32());
  state.r_t = r.f64();
  state.rng = r.str();
  state.opt.step = static_cast<int64_t>(r.u64());
  uint32_t n = r.u32();
  state.opt.m.resize(n);
  state.opt.v.resize(n);
  for (uint32_t i = 0; i < n; ++i) state.opt.m[i] = r.doubles();
  for (uint32_t i = 0; i < n; ++i) state.opt.v[i] = r.doubles();
  return state;
}

std::string weights_digest(const Network& net) {
  Writer w;
  write_params(w, net);
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : w.buf) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return std::string(hex);
}

uint64_t checkpoint_load_count() { return g_loads.load(); }

}  // namespace dms
