#include "tslora/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tslora {

namespace {

constexpr const char* kModelMagic = "tslora-ckpt v1";
constexpr const char* kAdapterMagic = "tslora-adapters v1";
constexpr const char* kDatasetMagic = "tslora-dataset v1";

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_doubles(std::ofstream& out, const double* data, size_t count) {
  for (size_t i = 0; i < count; ++i) {
    uint64_t bits = std::bit_cast<uint64_t>(data[i]);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) {
      bytes[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

void read_doubles(std::ifstream& in, double* data, size_t count,
                  const std::string& what) {
  for (size_t i = 0; i < count; ++i) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
      throw DataError("truncated payload while reading " + what);
    }
    uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<uint64_t>(bytes[b]) << (8 * b);
    }
    data[i] = std::bit_cast<double>(bits);
  }
}

std::ifstream open_with_magic(const std::filesystem::path& path,
                              const char* magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open: " + path.string());
  }
  std::string line;
  if (!std::getline(in, line) || line != magic) {
    throw DataError(path.string() + ": expected header '" +
                    std::string(magic) + "', got '" + line + "'");
  }
  return in;
}

}  // namespace

void save_model(const Forecaster& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  const ModelConfig& c = model.config();
  out << kModelMagic << '\n';
  out << "config d_model " << c.d_model << '\n';
  out << "config n_heads " << c.n_heads << '\n';
  out << "config n_layers " << c.n_layers << '\n';
  out << "config d_ff " << c.d_ff << '\n';
  out << "config context_length " << c.context_length << '\n';
  out << "config horizon " << c.horizon << '\n';
  for (const Parameter& p : model.params()) {
    out << "param " << p.name << ' ' << p.value.rows << ' ' << p.value.cols
        << '\n';
  }
  out << "end\n";
  for (const Parameter& p : model.params()) {
    write_doubles(out, p.value.data.data(), p.value.size());
  }
  if (!out) {
    throw DataError("write failed: " + path.string());
  }
}

Forecaster load_model(const std::filesystem::path& path) {
  std::ifstream in = open_with_magic(path, kModelMagic);

  ModelConfig config;
  struct ParamSpec {
    std::string name;
    int rows, cols;
  };
  std::vector<ParamSpec> specs;
  std::string line;
  while (std::getline(in, line) && line != "end") {
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "config") {
      std::string key;
      long value;
      if (!(ss >> key >> value)) {
        throw DataError(path.string() + ": bad config line '" + line + "'");
      }
      if (key == "d_model") config.d_model = static_cast<int>(value);
      else if (key == "n_heads") config.n_heads = static_cast<int>(value);
      else if (key == "n_layers") config.n_layers = static_cast<int>(value);
      else if (key == "d_ff") config.d_ff = static_cast<int>(value);
      else if (key == "context_length") config.context_length = static_cast<int>(value);
      else if (key == "horizon") config.horizon = static_cast<int>(value);
      else throw DataError(path.string() + ": unknown config key '" + key + "'");
    } else if (kind == "param") {
      ParamSpec spec;
      if (!(ss >> spec.name >> spec.rows >> spec.cols)) {
        throw DataError(path.string() + ": bad param line '" + line + "'");
      }
      specs.push_back(std::move(spec));
    } else {
      throw DataError(path.string() + ": unexpected header line '" + line + "'");
    }
  }
  if (line != "end") {
    throw DataError(path.string() + ": missing 'end' marker");
  }

  // Build the skeleton from the config, then overwrite values in header
  // order so the layout is validated against the architecture.
  Forecaster model(config, 0);
  if (specs.size() != model.params().size()) {
    throw DataError(path.string() + ": expected " +
                    std::to_string(model.params().size()) + " parameters, found " +
                    std::to_string(specs.size()));
  }
  for (size_t i = 0; i < specs.size(); ++i) {
    Parameter& p = model.params()[i];
    const ParamSpec& spec = specs[i];
    if (spec.name != p.name || spec.rows != p.value.rows ||
        spec.cols != p.value.cols) {
      throw DataError(path.string() + ": parameter mismatch at '" + spec.name +
                      "' (" + std::to_string(spec.rows) + "x" +
                      std::to_string(spec.cols) + "), expected '" + p.name +
                      "' (" + p.value.shape_str() + ")");
    }
    read_doubles(in, p.value.data.data(), p.value.size(), spec.name);
    if (!p.value.all_finite()) {
      throw DataError(path.string() + ": non-finite values in '" + spec.name + "'");
    }
  }
  return model;
}

void save_adapters(const AdapterMap& adapters,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  out << kAdapterMagic << '\n';
  for (const auto& [target, a] : adapters) {
    out << "adapter " << target << ' ' << a.rank << ' '
        << format_double(a.alpha) << ' ' << a.b.value.rows << ' '
        << a.a.value.cols << '\n';
  }
  out << "end\n";
  for (const auto& [target, a] : adapters) {
    write_doubles(out, a.a.value.data.data(), a.a.value.size());
    write_doubles(out, a.b.value.data.data(), a.b.value.size());
  }
  if (!out) {
    throw DataError("write failed: " + path.string());
  }
}

AdapterMap load_adapters(const std::filesystem::path& path,
                         const Forecaster& base) {
  std::ifstream in = open_with_magic(path, kAdapterMagic);

  struct AdapterSpec {
    std::string target;
    int rank, d, k;
    double alpha;
  };
  std::vector<AdapterSpec> specs;
  std::string line;
  while (std::getline(in, line) && line != "end") {
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind != "adapter") {
      throw DataError(path.string() + ": unexpected header line '" + line + "'");
    }
    AdapterSpec spec;
    if (!(ss >> spec.target >> spec.rank >> spec.alpha >> spec.d >> spec.k)) {
      throw DataError(path.string() + ": bad adapter line '" + line + "'");
    }
    specs.push_back(std::move(spec));
  }
  if (line != "end") {
    throw DataError(path.string() + ": missing 'end' marker");
  }

  AdapterMap adapters;
  for (const AdapterSpec& spec : specs) {
    if (!base.has_param(spec.target)) {
      throw DataError(path.string() + ": adapter targets unknown parameter '" +
                      spec.target + "'");
    }
    const Matrix& w = base.param(spec.target).value;
    if (w.rows != spec.d || w.cols != spec.k) {
      throw DataError(path.string() + ": adapter for '" + spec.target +
                      "' was trained on a " + std::to_string(spec.d) + "x" +
                      std::to_string(spec.k) + " matrix, base has " +
                      w.shape_str());
    }
    LoraAdapter a;
    a.target = spec.target;
    a.rank = spec.rank;
    a.alpha = spec.alpha;
    a.a = Parameter(spec.target + ".lora_a", Matrix(spec.rank, spec.k));
    a.b = Parameter(spec.target + ".lora_b", Matrix(spec.d, spec.rank));
    read_doubles(in, a.a.value.data.data(), a.a.value.size(), spec.target);
    read_doubles(in, a.b.value.data.data(), a.b.value.size(), spec.target);
    check_adapter_shapes(w, a);
    adapters.emplace(spec.target, std::move(a));
  }
  return adapters;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot open for writing: " + path.string());
  }
  out << kDatasetMagic << '\n';
  out << "vital " << to_string(dataset.vital) << '\n';
  out << "scaling " << format_double(dataset.scaling.min) << ' '
      << format_double(dataset.scaling.max) << '\n';
  out << "geometry " << dataset.context_length << ' ' << dataset.horizon
      << '\n';
  auto write_split = [&](const char* name,
                         const std::vector<WindowedSample>& split) {
    for (const WindowedSample& w : split) {
      out << "window " << name << ' ' << w.patient_id << ' ' << w.series_id
          << '\n';
    }
  };
  write_split("train", dataset.train);
  write_split("val", dataset.val);
  write_split("test", dataset.test);
  out << "end\n";
  auto write_payload = [&](const std::vector<WindowedSample>& split) {
    for (const WindowedSample& w : split) {
      write_doubles(out, w.context.data(), w.context.size());
      write_doubles(out, w.horizon.data(), w.horizon.size());
    }
  };
  write_payload(dataset.train);
  write_payload(dataset.val);
  write_payload(dataset.test);
  if (!out) {
    throw DataError("write failed: " + path.string());
  }
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in = open_with_magic(path, kDatasetMagic);

  Dataset ds;
  struct WindowSpec {
    std::string split, patient_id, series_id;
  };
  std::vector<WindowSpec> specs;
  std::string line;
  bool have_vital = false;
  while (std::getline(in, line) && line != "end") {
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "vital") {
      std::string v;
      ss >> v;
      ds.vital = vital_from_string(v);
      have_vital = true;
    } else if (kind == "scaling") {
      if (!(ss >> ds.scaling.min >> ds.scaling.max)) {
        throw DataError(path.string() + ": bad scaling line");
      }
    } else if (kind == "geometry") {
      if (!(ss >> ds.context_length >> ds.horizon)) {
        throw DataError(path.string() + ": bad geometry line");
      }
    } else if (kind == "window") {
      WindowSpec w;
      if (!(ss >> w.split >> w.patient_id >> w.series_id)) {
        throw DataError(path.string() + ": bad window line '" + line + "'");
      }
      specs.push_back(std::move(w));
    } else {
      throw DataError(path.string() + ": unexpected header line '" + line + "'");
    }
  }
  if (line != "end" || !have_vital) {
    throw DataError(path.string() + ": incomplete dataset header");
  }

  for (const WindowSpec& spec : specs) {
    WindowedSample w;
    w.patient_id = spec.patient_id;
    w.series_id = spec.series_id;
    w.context.resize(ds.context_length);
    w.horizon.resize(ds.horizon);
    read_doubles(in, w.context.data(), w.context.size(), "window context");
    read_doubles(in, w.horizon.data(), w.horizon.size(), "window horizon");
    if (spec.split == "train") {
      ds.train.push_back(std::move(w));
    } else if (spec.split == "val") {
      ds.val.push_back(std::move(w));
    } else if (spec.split == "test") {
      ds.test.push_back(std::move(w));
    } else {
      throw DataError(path.string() + ": unknown split '" + spec.split + "'");
    }
  }
  return ds;
}

}  // namespace tslora
