#include "taskroute/routing.hpp"

#include <bit>
#include <charconv>
#include <cfenv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace taskroute {

BitMask::BitMask(std::size_t size, bool fill) : size_(size), words_((size + 63) / 64, 0) {
  if (fill) {
    for (std::size_t i = 0; i < size; ++i) set(i);
  }
}

void BitMask::set(std::size_t i, bool on) {
  const std::uint64_t bit = std::uint64_t{1} << (i % 64);
  if (on) {
    words_[i / 64] |= bit;
  } else {
    words_[i / 64] &= ~bit;
  }
}

std::size_t BitMask::count() const {
  std::size_t n = 0;
  for (const auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
  return n;
}

std::size_t BitMask::count_and(const BitMask& other) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < words_.size(); ++i) n += static_cast<std::size_t>(std::popcount(words_[i] & other.words_[i]));
  return n;
}

std::size_t BitMask::count_or(const BitMask& other) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < words_.size(); ++i) n += static_cast<std::size_t>(std::popcount(words_[i] | other.words_[i]));
  return n;
}

std::vector<std::uint8_t> BitMask::to_bytes() const {
  std::vector<std::uint8_t> out(size_);
  for (std::size_t i = 0; i < size_; ++i) out[i] = test(i) ? 1 : 0;
  return out;
}

std::string BitMask::to_hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out((size_ + 3) / 4, '0');
  for (std::size_t i = 0; i < size_; ++i) {
    if (!test(i)) continue;
    const int value = (out[i / 4] >= 'a') ? out[i / 4] - 'a' + 10 : out[i / 4] - '0';
    out[i / 4] = kDigits[value | (8 >> (i % 4))];
  }
  return out;
}

BitMask BitMask::from_hex(std::string_view hex, std::size_t size) {
  if (hex.size() != (size + 3) / 4) {
    throw ParseError("mask hex string has " + std::to_string(hex.size()) + " digits, expected " +
                         std::to_string((size + 3) / 4) + " for " + std::to_string(size) + " channels",
                     0);
  }
  BitMask mask(size);
  for (std::size_t d = 0; d < hex.size(); ++d) {
    const char c = hex[d];
    int value = 0;
    if (c >= '0' && c <= '9') {
      value = c - '0';
    } else if (c >= 'a' && c <= 'f') {
      value = c - 'a' + 10;
    } else {
      throw ParseError(std::string("invalid hex digit '") + c + "' in mask", d);
    }
    for (std::size_t b = 0; b < 4; ++b) {
      if (!(value & (8 >> b))) continue;
      const std::size_t channel = d * 4 + b;
      if (channel >= size) throw ParseError("mask sets padding bit beyond channel count", d);
      mask.set(channel);
    }
  }
  return mask;
}

std::string to_string(MaskMode mode) { return mode == MaskMode::partition ? "partition" : "bernoulli"; }

MaskMode parse_mask_mode(std::string_view text) {
  if (text == "partition") return MaskMode::partition;
  if (text == "bernoulli") return MaskMode::bernoulli;
  throw ConfigError("unknown routing mode '" + std::string(text) + "' (expected partition or bernoulli)");
}

std::size_t RoutingMap::layer_index(std::string_view layer_id) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].layer_id == layer_id) return i;
  }
  throw UsageError("routing map has no layer '" + std::string(layer_id) + "'");
}

const TaskMask& RoutingMap::mask(std::size_t layer, int task) const {
  if (task < 0 || task >= task_count_) {
    throw UsageError("task " + std::to_string(task) + " out of range [0," + std::to_string(task_count_) + ")");
  }
  return masks_.at(layer)[static_cast<std::size_t>(task)];
}

std::size_t RoutingMap::storage_bits() const {
  std::size_t bits = 0;
  for (const auto& layer : masks_) {
    for (const auto& m : layer) bits += m.bits.storage_bits();
  }
  return bits;
}

std::uint64_t RoutingMap::fingerprint() const {
  std::uint64_t h = tag_hash(serialize_routing_map(*this));
  return h;
}

bool operator==(const RoutingMap& a, const RoutingMap& b) {
  if (std::bit_cast<std::uint64_t>(a.sigma_) != std::bit_cast<std::uint64_t>(b.sigma_) ||
      a.task_count_ != b.task_count_ || a.seed_ != b.seed_ || a.options_.mode != b.options_.mode ||
      a.options_.strict != b.options_.strict || a.layers_ != b.layers_ || a.shared_ != b.shared_) {
    return false;
  }
  for (std::size_t l = 0; l < a.masks_.size(); ++l) {
    for (std::size_t t = 0; t < a.masks_[l].size(); ++t) {
      if (!(a.masks_[l][t].bits == b.masks_[l][t].bits)) return false;
    }
  }
  return true;
}

void RoutingMap::finalize() {
  warnings_.clear();
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    for (int t = 0; t < task_count_; ++t) {
      if (!masks_[l][static_cast<std::size_t>(t)].bits.none()) continue;
      std::string msg = "task " + std::to_string(t) + " has an empty mask at layer '" + layers_[l].layer_id +
                        "' (" + std::to_string(layers_[l].channels) + " channels, " + std::to_string(task_count_) +
                        " tasks, sigma " + std::to_string(sigma_) + ")";
      if (options_.strict) throw ConfigError("strict routing: " + msg);
      warnings_.push_back(std::move(msg));
    }
  }
}

std::size_t shared_channel_count(double sigma, std::size_t channels) {
  const int previous = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const double rounded = std::nearbyint(sigma * static_cast<double>(channels));
  std::fesetround(previous);
  return static_cast<std::size_t>(rounded);
}

RoutingMap build_routing_map(std::span<const LayerSpec> layers, int task_count, double sigma, std::uint64_t seed,
                             RoutingOptions options) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) {
    throw ConfigError("sigma must be in [0,1], got " + std::to_string(sigma));
  }
  if (task_count < 1) throw ConfigError("task_count must be >= 1, got " + std::to_string(task_count));
  RoutingMap map;
  map.sigma_ = sigma;
  map.task_count_ = task_count;
  map.seed_ = seed;
  map.options_ = options;
  const auto T = static_cast<std::size_t>(task_count);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& spec = layers[l];
    if (spec.channels < 1) throw ConfigError("layer '" + spec.layer_id + "' has no channels");
    for (const auto& seen : map.layers_) {
      if (seen.layer_id == spec.layer_id) throw ConfigError("duplicate layer id '" + spec.layer_id + "'");
    }
    const std::size_t C = spec.channels;
    Rng rng(derive_seed(seed, "routing", l));
    std::vector<BitMask> bits(T, BitMask(C));
    BitMask shared(C);
    if (options.mode == MaskMode::partition) {
      const auto perm = rng.permutation(C);
      const std::size_t S = shared_channel_count(sigma, C);
      for (std::size_t i = 0; i < S; ++i) {
        shared.set(perm[i]);
        for (auto& b : bits) b.set(perm[i]);
      }
      for (std::size_t j = 0; S + j < C; ++j) bits[j % T].set(perm[S + j]);
    } else {
      // Independent draws with the same expected per-task density as the partition.
      const double keep = sigma + (1.0 - sigma) / static_cast<double>(T);
      for (auto& b : bits) {
        for (std::size_t c = 0; c < C; ++c) b.set(c, rng.bernoulli(keep));
      }
      for (std::size_t c = 0; c < C; ++c) {
        bool all = true;
        for (const auto& b : bits) all = all && b.test(c);
        shared.set(c, all);
      }
    }
    map.layers_.push_back(spec);
    map.shared_.push_back(std::move(shared));
    std::vector<TaskMask> layer_masks;
    layer_masks.reserve(T);
    for (std::size_t t = 0; t < T; ++t) layer_masks.push_back(TaskMask{spec.layer_id, static_cast<int>(t), std::move(bits[t])});
    map.masks_.push_back(std::move(layer_masks));
  }
  map.finalize();
  return map;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string serialize_routing_map(const RoutingMap& map) {
  std::ostringstream out;
  out << "taskroute-routing-map 1\n";
  out << "sigma " << format_double(map.sigma()) << '\n';
  out << "tasks " << map.task_count() << '\n';
  out << "seed " << map.seed() << '\n';
  out << "mode " << to_string(map.options().mode) << '\n';
  out << "strict " << (map.options().strict ? 1 : 0) << '\n';
  for (const auto& layer : map.layers()) out << "layer " << layer.layer_id << ' ' << layer.channels << '\n';
  for (std::size_t l = 0; l < map.layers().size(); ++l) {
    out << "shared " << map.layers()[l].layer_id << ' ' << map.shared(l).to_hex() << '\n';
  }
  for (std::size_t l = 0; l < map.layers().size(); ++l) {
    for (int t = 0; t < map.task_count(); ++t) {
      out << "mask " << map.layers()[l].layer_id << ' ' << t << ' ' << map.mask(l, t).bits.to_hex() << '\n';
    }
  }
  return out.str();
}

RoutingMap parse_routing_map(std::string_view text) {
  RoutingMap map;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t offset = 0;
  std::size_t line_start = 0;
  std::size_t line_no = 0;
  bool header = false;
  bool have_sigma = false, have_tasks = false, have_seed = false;
  std::vector<std::vector<bool>> seen_masks;
  std::vector<bool> seen_shared;
  const auto fail = [&](const std::string& why) -> ParseError {
    return ParseError("routing map line " + std::to_string(line_no) + ": " + why, line_start);
  };
  while (std::getline(in, line)) {
    ++line_no;
    line_start = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (!header) {
      int version = 0;
      if (key != "taskroute-routing-map" || !(fields >> version) || version != 1) {
        throw fail("expected header 'taskroute-routing-map 1'");
      }
      header = true;
    } else if (key == "sigma") {
      std::string value;
      fields >> value;
      try {
        std::size_t used = 0;
        map.sigma_ = std::stod(value, &used);
        if (used != value.size()) throw fail("bad sigma");
      } catch (const std::logic_error&) {
        throw fail("bad sigma '" + value + "'");
      }
      if (!(map.sigma_ >= 0.0 && map.sigma_ <= 1.0)) throw fail("sigma outside [0,1]");
      have_sigma = true;
    } else if (key == "tasks") {
      if (!(fields >> map.task_count_) || map.task_count_ < 1) throw fail("bad task count");
      have_tasks = true;
    } else if (key == "seed") {
      if (!(fields >> map.seed_)) throw fail("bad seed");
      have_seed = true;
    } else if (key == "mode") {
      std::string mode;
      fields >> mode;
      try {
        map.options_.mode = parse_mask_mode(mode);
      } catch (const ConfigError& e) {
        throw fail(e.what());
      }
    } else if (key == "strict") {
      int strict = 0;
      if (!(fields >> strict) || (strict != 0 && strict != 1)) throw fail("bad strict flag");
      map.options_.strict = strict == 1;
    } else if (key == "layer") {
      LayerSpec spec;
      if (!(fields >> spec.layer_id >> spec.channels) || spec.channels == 0) throw fail("bad layer line");
      if (!have_tasks) throw fail("layer before task count");
      map.layers_.push_back(spec);
      map.shared_.emplace_back(spec.channels);
      map.masks_.emplace_back();
      for (int t = 0; t < map.task_count_; ++t) map.masks_.back().push_back(TaskMask{spec.layer_id, t, BitMask(spec.channels)});
      seen_masks.emplace_back(static_cast<std::size_t>(map.task_count_), false);
      seen_shared.push_back(false);
    } else if (key == "shared" || key == "mask") {
      std::string layer_id, hex;
      int task = -1;
      fields >> layer_id;
      if (key == "mask" && !(fields >> task)) throw fail("bad task id");
      fields >> hex;
      std::size_t l = 0;
      try {
        l = map.layer_index(layer_id);
      } catch (const UsageError&) {
        throw fail("unknown layer '" + layer_id + "'");
      }
      BitMask bits;
      try {
        bits = BitMask::from_hex(hex, map.layers_[l].channels);
      } catch (const ParseError& e) {
        throw fail(e.what());
      }
      if (key == "shared") {
        map.shared_[l] = std::move(bits);
        seen_shared[l] = true;
      } else {
        if (task < 0 || task >= map.task_count_) throw fail("task id out of range");
        map.masks_[l][static_cast<std::size_t>(task)].bits = std::move(bits);
        seen_masks[l][static_cast<std::size_t>(task)] = true;
      }
    } else {
      throw fail("unknown key '" + key + "'");
    }
    std::string extra;
    if (fields >> extra) throw fail("unexpected trailing field '" + extra + "'");
  }
  if (!header) throw ParseError("routing map is empty", 0);
  if (!have_sigma || !have_tasks || !have_seed) throw ParseError("routing map header incomplete", offset);
  for (std::size_t l = 0; l < map.layers_.size(); ++l) {
    if (!seen_shared[l]) throw ParseError("missing shared line for layer '" + map.layers_[l].layer_id + "'", offset);
    for (int t = 0; t < map.task_count_; ++t) {
      if (!seen_masks[l][static_cast<std::size_t>(t)]) {
        throw ParseError("missing mask for layer '" + map.layers_[l].layer_id + "' task " + std::to_string(t), offset);
      }
    }
  }
  try {
    map.finalize();
  } catch (const ConfigError& e) {
    throw LoadError(e.what());
  }
  return map;
}

void save_routing_map(const std::filesystem::path& path, const RoutingMap& map) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  out << serialize_routing_map(map);
  if (!out) throw LoadError("failed writing " + path.string());
}

RoutingMap load_routing_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open routing map " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_routing_map(buf.str());
}

template <typename T>
Tensor<T> apply_task_routing(const Tensor<T>& activations, const TaskMask& mask) {
  if (activations.rank() != 4 || activations.dim(1) != mask.bits.size()) {
    throw ConfigError("mask for layer '" + mask.layer_id + "' has " + std::to_string(mask.bits.size()) +
                      " channels but activations have shape " + shape_str(activations.shape()));
  }
  const auto bytes = mask.bits.to_bytes();
  return select_channels(activations, std::span<const std::uint8_t>(bytes));
}

template <typename T>
Var<T> apply_task_routing(Var<T> activations, const TaskMask& mask) {
  if (activations.shape().size() != 4 || activations.shape()[1] != mask.bits.size()) {
    throw ConfigError("mask for layer '" + mask.layer_id + "' has " + std::to_string(mask.bits.size()) +
                      " channels but activations have shape " + shape_str(activations.shape()));
  }
  const auto bytes = mask.bits.to_bytes();
  return ops::select_channels(activations, std::span<const std::uint8_t>(bytes));
}

template Tensor<float> apply_task_routing(const Tensor<float>&, const TaskMask&);
template Tensor<double> apply_task_routing(const Tensor<double>&, const TaskMask&);
template Var<float> apply_task_routing(Var<float>, const TaskMask&);
template Var<double> apply_task_routing(Var<double>, const TaskMask&);

std::string to_string(TaskSampling mode) {
  return mode == TaskSampling::uniform_iid ? "uniform_iid" : "round_robin";
}

TaskSampling parse_task_sampling(std::string_view text) {
  if (text == "uniform_iid") return TaskSampling::uniform_iid;
  if (text == "round_robin") return TaskSampling::round_robin;
  throw ConfigError("unknown task_sampling '" + std::string(text) + "' (expected uniform_iid or round_robin)");
}

TaskContext::TaskContext(int task_count, std::uint64_t sampler_seed, TaskSampling sampling)
    : task_count_(task_count), sampling_(sampling), sampler_(sampler_seed) {
  if (task_count < 1) throw UsageError("task context needs at least one task");
}

void TaskContext::set_active_task(int task) {
  if (task < 0 || task >= task_count_) {
    throw UsageError("active task " + std::to_string(task) + " out of range [0," + std::to_string(task_count_) + ")");
  }
  active_ = task;
}

int TaskContext::require_active_task() const {
  if (!active_) throw UsageError("no active task set on the task context");
  return *active_;
}

SharingReport sharing_statistics(const RoutingMap& map, std::span<const ConvGeometry> geometry) {
  SharingReport report;
  report.sigma = map.sigma();
  report.task_count = map.task_count();
  report.mask_storage_bits = map.storage_bits();
  const auto T = static_cast<std::size_t>(map.task_count());
  const std::size_t L = map.layers().size();
  report.jaccard.assign(T * T, 0.0);
  report.active_fraction.assign(T, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    LayerSharing ls;
    ls.layer_id = map.layers()[l].layer_id;
    ls.channels = map.layers()[l].channels;
    ls.shared = map.shared(l).count();
    for (std::size_t t = 0; t < T; ++t) {
      const auto& bits = map.mask(l, static_cast<int>(t)).bits;
      ls.active.push_back(bits.count());
      report.active_fraction[t] += static_cast<double>(bits.count()) / static_cast<double>(ls.channels);
      for (std::size_t u = t; u < T; ++u) {
        const auto& other = map.mask(l, static_cast<int>(u)).bits;
        const std::size_t uni = bits.count_or(other);
        const double j = uni == 0 ? 0.0 : static_cast<double>(bits.count_and(other)) / static_cast<double>(uni);
        report.jaccard[t * T + u] += j;
        if (u != t) report.jaccard[u * T + t] += j;
      }
    }
    report.layers.push_back(std::move(ls));
  }
  if (L > 0) {
    for (auto& j : report.jaccard) j /= static_cast<double>(L);
    for (auto& f : report.active_fraction) f /= static_cast<double>(L);
  }
  if (T > 1) {
    double acc = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t u = t + 1; u < T; ++u) acc += report.jaccard[t * T + u];
    }
    report.mean_pairwise_jaccard = acc / static_cast<double>(T * (T - 1) / 2);
  }
  if (!geometry.empty()) {
    if (geometry.size() != L) {
      throw ConfigError("geometry for " + std::to_string(geometry.size()) + " layers given for a map with " +
                        std::to_string(L));
    }
    const auto layer_params = [&](std::size_t l, std::size_t in, std::size_t out) {
      const auto& g = geometry[l];
      return out * (in * g.kernel_h * g.kernel_w + 1) + (g.batchnorm ? 2 * out : 0);
    };
    std::vector<std::size_t> active(T, 0);
    std::size_t full = 0;
    for (std::size_t t = 0; t < T; ++t) {
      std::size_t in = geometry[0].in_channels;
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t out = report.layers[l].active[t];
        active[t] += layer_params(l, in, out);
        in = out;
      }
    }
    std::size_t in = geometry[0].in_channels;
    for (std::size_t l = 0; l < L; ++l) {
      full += layer_params(l, in, report.layers[l].channels);
      in = report.layers[l].channels;
    }
    report.active_params = std::move(active);
    report.full_params = full;
  }
  return report;
}

std::string format_sharing_text(const SharingReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "sharing ratio (sigma): " << r.sigma << "\n";
  out << "tasks: " << r.task_count << "\n";
  out << "routed layers: " << r.layers.size() << "\n";
  out << "mask storage: " << r.mask_storage_bits << " bits (" << (r.mask_storage_bits + 7) / 8 << " bytes)\n";
  out << "mean pairwise Jaccard overlap: " << r.mean_pairwise_jaccard * 100.0 << "%\n\n";
  for (const auto& l : r.layers) {
    std::size_t lo = l.channels, hi = 0;
    for (const auto a : l.active) {
      lo = std::min(lo, a);
      hi = std::max(hi, a);
    }
    out << "layer " << l.layer_id << ": " << l.channels << " channels, " << l.shared << " shared ("
        << 100.0 * static_cast<double>(l.shared) / static_cast<double>(l.channels) << "%), active per task "
        << lo << ".." << hi << "\n";
  }
  out << "\n";
  for (int t = 0; t < r.task_count; ++t) {
    out << "task " << t << ": active fraction " << r.active_fraction[static_cast<std::size_t>(t)] * 100.0 << "%";
    if (r.active_params) {
      out << ", subnet conv parameters " << (*r.active_params)[static_cast<std::size_t>(t)] << " of " << *r.full_params;
    }
    out << "\n";
  }
  return out.str();
}

std::string format_sharing_layers_csv(const SharingReport& r) {
  std::ostringstream out;
  out << "layer,channels,shared,task,active\n";
  for (const auto& l : r.layers) {
    for (std::size_t t = 0; t < l.active.size(); ++t) {
      out << l.layer_id << ',' << l.channels << ',' << l.shared << ',' << t << ',' << l.active[t] << '\n';
    }
  }
  return out.str();
}

std::string format_sharing_pairs_csv(const SharingReport& r) {
  std::ostringstream out;
  out << "task_a,task_b,jaccard\n";
  char buf[32];
  for (int a = 0; a < r.task_count; ++a) {
    for (int b = a + 1; b < r.task_count; ++b) {
      const auto res = std::to_chars(buf, buf + sizeof buf, r.pair_jaccard(a, b));
      out << a << ',' << b << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)) << '\n';
    }
  }
  return out.str();
}

}  // namespace taskroute
