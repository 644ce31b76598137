#include "ctxpatch/detector.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "ctxpatch/rng.hpp"

namespace ctxpatch {
using nlohmann::json;

int ArchSpec::layer_index(const std::string& layer) const {
  for (std::size_t i = 0; i + 1 < layers.size(); ++i)
    if (layers[i].name == layer) return int(i);
  std::string known;
  for (const auto& n : feature_layers()) known += (known.empty() ? "" : ", ") + n;
  throw InvalidArgument("unknown feature layer '" + layer + "' for " + name + " (have: " + known + ")");
}

std::vector<std::string> ArchSpec::feature_layers() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) out.push_back(layers[i].name);
  return out;
}

json to_json(const ArchSpec& a) {
  json layers = json::array();
  for (const auto& l : a.layers)
    layers.push_back({{"name", l.name}, {"in", l.in}, {"out", l.out}, {"kernel", l.kernel},
                      {"stride", l.stride}, {"activation", l.activation}});
  return {{"name", a.name}, {"input_size", a.input_size}, {"anchor", a.anchor}, {"layers", layers}};
}

std::uint64_t ArchSpec::hash() const { return fnv1a64(to_json(*this).dump()); }

namespace {

ArchSpec make_arch(std::string name, std::vector<std::array<int, 4>> convs, int head_kernel) {
  ArchSpec a;
  a.name = std::move(name);
  int i = 1;
  for (const auto& [in, out, k, s] : convs) a.layers.push_back({"block" + std::to_string(i++), in, out, k, s, true});
  a.layers.push_back({"head", convs.back()[1], 5, head_kernel, 1, false});
  return a;
}

}  // namespace

DetectorRegistry::DetectorRegistry() {
  add(make_arch("toy-a", {{3, 8, 3, 2}, {8, 16, 3, 2}, {16, 32, 3, 2}, {32, 32, 3, 2}, {32, 32, 3, 1}}, 1));
  add(make_arch("toy-b", {{3, 12, 3, 2}, {12, 24, 3, 2}, {24, 24, 3, 2}, {24, 48, 3, 2}}, 3));
}

DetectorRegistry& DetectorRegistry::instance() {
  static DetectorRegistry r;
  return r;
}

void DetectorRegistry::add(ArchSpec spec) {
  if (spec.layers.empty() || spec.layers.back().out != 5) throw InvalidArgument("detector head must have 5 outputs");
  for (std::size_t i = 1; i < spec.layers.size(); ++i)
    if (spec.layers[i].in != spec.layers[i - 1].out) throw InvalidArgument("layer channel mismatch in " + spec.name);
  std::string name = spec.name;
  specs_[name] = std::move(spec);
}

const ArchSpec& DetectorRegistry::get(const std::string& name) const {
  const auto it = specs_.find(name);
  if (it == specs_.end()) throw InvalidArgument("unknown detector '" + name + "'");
  return it->second;
}

bool DetectorRegistry::contains(const std::string& name) const { return specs_.count(name) > 0; }

std::vector<std::string> DetectorRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : specs_) out.push_back(k);
  return out;
}

std::uint64_t DetectorWeights::hash() const {
  std::uint64_t h = arch.hash();
  const auto mix = [&h](const double* p, Index n) {
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p), std::size_t(n) * sizeof(double)), h);
  };
  for (const auto& p : params) {
    mix(p.weight.data(), p.weight.size());
    mix(p.bias.data(), p.bias.size());
  }
  return h;
}

std::optional<double> DetectorWeights::gate_metric() const {
  if (metrics.is_object() && metrics.contains("heldout_confidence") && metrics["heldout_confidence"].is_number())
    return metrics["heldout_confidence"].get<double>();
  return std::nullopt;
}

DetectorWeights init_weights(const ArchSpec& arch, std::uint64_t seed) {
  DetectorWeights w;
  w.arch = arch;
  Rng rng(seed);
  for (const auto& l : arch.layers) {
    const int fan_in = l.in * l.kernel * l.kernel;
    const double bound = std::sqrt(6.0 / fan_in) * (l.activation ? 1.0 : 0.3);
    nn::ConvParams<double> p{nn::Matrix<double>(l.out, fan_in), nn::Vector<double>::Zero(l.out)};
    for (Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = uniform(rng, -bound, bound);
    w.params.push_back(std::move(p));
  }
  w.params.back().bias(0) = -4.0;  // low objectness prior
  return w;
}

void save_weights(const std::filesystem::path& path, const DetectorWeights& w) {
  json layers = json::array();
  for (const auto& p : w.params) {
    layers.push_back({{"rows", p.weight.rows()},
                      {"cols", p.weight.cols()},
                      {"weight", std::vector<double>(p.weight.data(), p.weight.data() + p.weight.size())},
                      {"bias", std::vector<double>(p.bias.data(), p.bias.data() + p.bias.size())}});
  }
  const json doc = {{"format", "ctxpatch-detector"},
                    {"version", 1},
                    {"arch", to_json(w.arch)},
                    {"arch_hash", std::to_string(w.arch.hash())},
                    {"weights_hash", std::to_string(w.hash())},
                    {"metrics", w.metrics},
                    {"params", layers}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << doc.dump() << '\n';
}

DetectorWeights load_weights(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing detector checkpoint " + path.string());
  try {
    const json doc = json::parse(is);
    if (doc.at("format") != "ctxpatch-detector") throw IoError(path.string() + ": not a detector checkpoint");
    DetectorWeights w;
    w.arch = DetectorRegistry::instance().get(doc.at("arch").at("name").get<std::string>());
    if (doc.at("arch_hash").get<std::string>() != std::to_string(w.arch.hash()))
      throw IoError(path.string() + ": architecture hash mismatch for " + w.arch.name);
    for (const auto& l : doc.at("params")) {
      nn::ConvParams<double> p{nn::Matrix<double>(l.at("rows").get<Index>(), l.at("cols").get<Index>()),
                               nn::Vector<double>()};
      const auto weight = l.at("weight").get<std::vector<double>>();
      const auto bias = l.at("bias").get<std::vector<double>>();
      if (Index(weight.size()) != p.weight.size()) throw IoError(path.string() + ": weight size mismatch");
      std::memcpy(p.weight.data(), weight.data(), weight.size() * sizeof(double));
      p.bias = Eigen::Map<const nn::Vector<double>>(bias.data(), Index(bias.size()));
      w.params.push_back(std::move(p));
    }
    if (w.params.size() != w.arch.layers.size()) throw IoError(path.string() + ": layer count mismatch");
    for (std::size_t i = 0; i < w.params.size(); ++i) {
      const auto& l = w.arch.layers[i];
      if (w.params[i].weight.rows() != l.out || w.params[i].weight.cols() != l.in * l.kernel * l.kernel ||
          w.params[i].bias.size() != l.out)
        throw IoError(path.string() + ": parameter shape mismatch at " + l.name);
    }
    w.metrics = doc.value("metrics", json::object());
    return w;
  } catch (const json::exception& e) {
    throw IoError("malformed detector checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace ctxpatch
