#include "stcl/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "stcl/errors.hpp"

namespace stcl::phantom {

namespace {

double round6(double t) { return std::round(t * 1e6) / 1e6; }

// White noise blurred with a separable Gaussian (σ in pixels), rescaled to unit SD.
std::vector<double> smooth_field(std::size_t side, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> f(side * side);
  for (auto& v : f) v = nd(rng);
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k;
  for (int i = -radius; i <= radius; ++i) k.push_back(std::exp(-0.5 * i * i / (sigma * sigma)));
  const int n = static_cast<int>(side);
  auto blur = [&](const std::vector<double>& in, bool rows) {
    std::vector<double> out(in.size(), 0.0);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double acc = 0.0, wsum = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          const int xx = rows ? x + d : x;
          const int yy = rows ? y : y + d;
          if (xx < 0 || yy < 0 || xx >= n || yy >= n) continue;
          acc += k[d + radius] * in[yy * n + xx];
          wsum += k[d + radius];
        }
        out[y * n + x] = acc / wsum;
      }
    return out;
  };
  f = blur(blur(f, true), false);
  double mean = 0.0, var = 0.0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  for (double v : f) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(f.size()));
  for (auto& v : f) v = (v - mean) / sd;
  return f;
}

bool inside_ellipse(double x, double y, double cx, double cy, double rx, double ry, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = (x - cx) * c + (y - cy) * s;
  const double v = -(x - cx) * s + (y - cy) * c;
  return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
}

std::uint64_t next_seed(std::mt19937_64& rng) { return rng(); }

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

const char* tissue_name(Tissue t) {
  switch (t) {
    case Tissue::Background: return "background";
    case Tissue::Artery: return "artery";
    case Tissue::Parenchyma: return "parenchyma";
    case Tissue::Delayed: return "delayed";
  }
  return "unknown";
}

double enhancement_curve(const CurveParams& c, double t) {
  if (t <= c.onset) return 0.0;
  const double u = (t - c.onset) / c.time_to_peak;
  const double rise = c.amplitude * std::pow(u, c.shape) * std::exp(c.shape * (1.0 - u));
  return rise * std::exp(-c.washout * std::max(0.0, t - c.onset - c.time_to_peak));
}

double enhancement_curve(const TissueRegion& region, double t) {
  if (region.label == Tissue::Background) return 0.0;
  return enhancement_curve(region.curve, t);
}

void PhantomConfig::validate() const {
  if (side < 16 || side % 4 != 0) throw ConfigError("phantom: image side must be a multiple of 4 and at least 16");
  if (!(intensity_range > 0.0)) throw ConfigError("phantom: intensity range must be positive");
  if (!(noise_sd >= 0.0)) throw ConfigError("phantom: noise_sd must be nonnegative");
  if (dense_step == 0 || !(dense_end > 0.0)) throw ConfigError("phantom: dense grid must be nonempty");
}

Anatomy random_anatomy(const PhantomConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const std::size_t n = cfg.side;
  const double s = static_cast<double>(n) / 32.0;
  const double mid = 0.5 * static_cast<double>(n - 1);

  Anatomy a;
  a.side = n;
  a.intensity_range = cfg.intensity_range;
  a.labels.assign(n * n, static_cast<std::uint8_t>(Tissue::Background));

  const double bx = mid + u(-1.5, 1.5) * s, by = mid + u(-1.5, 1.5) * s;
  const double brx = u(11.5, 14.0) * s, bry = u(9.5, 12.5) * s, bang = u(-0.3, 0.3);
  const double dx = bx + u(-6.5, -3.0) * s, dy = by + u(-1.5, 3.0) * s;
  const double drx = u(3.5, 5.0) * s, dry = u(2.5, 3.8) * s, dang = u(-0.8, 0.8);
  const double ax = bx + u(3.0, 6.5) * s, ay = by + u(-3.0, 1.5) * s, ar = u(2.0, 3.0) * s;

  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      Tissue t = Tissue::Background;
      if (inside_ellipse(fx, fy, bx, by, brx, bry, bang)) t = Tissue::Parenchyma;
      if (t == Tissue::Parenchyma && inside_ellipse(fx, fy, dx, dy, drx, dry, dang)) t = Tissue::Delayed;
      if (t != Tissue::Background && std::hypot(fx - ax, fy - ay) <= ar) t = Tissue::Artery;
      a.labels[y * n + x] = static_cast<std::uint8_t>(t);
    }

  a.regions.resize(kTissueCount);
  for (std::size_t i = 0; i < kTissueCount; ++i) {
    a.regions[i].label = static_cast<Tissue>(i);
    a.regions[i].mask.assign(n * n, 0);
    for (std::size_t p = 0; p < n * n; ++p) a.regions[i].mask[p] = a.labels[p] == i ? 1 : 0;
  }
  a.regions[1].curve = {u(520, 680), u(3, 7), u(19, 24), u(1.8, 2.6), u(0.004, 0.008)};
  a.regions[2].curve = {u(220, 300), u(8, 12), u(35, 55), u(1.8, 2.4), u(0.001, 0.003)};
  a.regions[3].curve = {u(160, 240), u(15, 25), u(80, 120), u(1.8, 2.4), u(0.0005, 0.001)};

  const double base[kTissueCount] = {u(15, 25), u(140, 170), u(230, 270), u(190, 220)};
  const double texture_amp[kTissueCount] = {4.0, 15.0, 35.0, 25.0};
  const auto texture = smooth_field(n, 1.5 * s, rng);
  std::vector<double> b(n * n);
  for (std::size_t p = 0; p < n * n; ++p) {
    const std::size_t l = a.labels[p];
    b[p] = std::clamp(base[l] + texture_amp[l] * texture[p], 0.0, cfg.intensity_range);
  }
  a.baseline = Tensor({n, n}, std::move(b));
  return a;
}

std::vector<double> acquisition_schedule(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  // Uniform in the window conditioned on kMinSpacing between frames: sorted
  // draws from the shortened window, the i-th shifted by i spacings.
  auto block = [&](double lo, double hi) {
    std::vector<double> v(6);
    for (auto& x : v) x = u(lo, hi - 5.0 * kMinSpacing);
    std::sort(v.begin(), v.end());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = round6(v[i] + static_cast<double>(i) * kMinSpacing);
    return v;
  };
  for (;;) {
    std::vector<double> t{0.0};
    const auto arterial = block(15.0, 37.0);
    const auto portal = block(50.0, 72.0);
    t.insert(t.end(), arterial.begin(), arterial.end());
    t.insert(t.end(), portal.begin(), portal.end());
    for (double c : {90.0, 150.0, 300.0}) t.push_back(round6(c + u(-5.0, 5.0)));
    bool strict = true;
    for (std::size_t i = 1; i < t.size(); ++i) strict = strict && t[i] > t[i - 1];
    if (strict) return t;
  }
}

Tensor render(const Anatomy& anatomy, double t, double noise_sd, std::uint64_t seed) {
  if (!(noise_sd >= 0.0)) throw ContractViolation("render: noise_sd must be nonnegative");
  if (!(t >= 0.0)) throw ContractViolation("render: time must be nonnegative");
  const std::size_t n = anatomy.side;
  double enh[kTissueCount];
  for (std::size_t i = 0; i < kTissueCount; ++i) enh[i] = enhancement_curve(anatomy.regions[i], t);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> img(n * n);
  for (std::size_t p = 0; p < n * n; ++p) {
    double v = anatomy.baseline[p] + enh[anatomy.labels[p]];
    if (noise_sd > 0.0) v += noise_sd * nd(rng);
    img[p] = std::clamp(v, 0.0, anatomy.intensity_range);
  }
  return Tensor({n, n}, std::move(img));
}

Tensor tissue_mask(const Anatomy& anatomy, Tissue t) {
  const auto& m = anatomy.region(t).mask;
  return Tensor({anatomy.side, anatomy.side}, std::vector<double>(m.begin(), m.end()));
}

Tensor normalize(const Tensor& image, double range) { return shifted(scaled(image, 2.0 / range), -1.0); }

Tensor denormalize(const Tensor& image, double range) { return scaled(shifted(image, 1.0), 0.5 * range); }

LatentCodec LatentCodec::block_haar(std::size_t side) {
  if (side < 4 || side % 4 != 0) throw ContractViolation("codec: side must be a positive multiple of 4");
  const std::size_t blocks = side / 4;
  const std::size_t plane = blocks * blocks;
  std::vector<double> m(4 * plane * side * side, 0.0);
  for (std::size_t ch = 0; ch < 4; ++ch)
    for (std::size_t by = 0; by < blocks; ++by)
      for (std::size_t bx = 0; bx < blocks; ++bx) {
        const std::size_t row = ch * plane + by * blocks + bx;
        for (std::size_t dy = 0; dy < 4; ++dy)
          for (std::size_t dx = 0; dx < 4; ++dx) {
            const double h = dx < 2 ? 1.0 : -1.0;
            const double v = dy < 2 ? 1.0 : -1.0;
            const double sign = ch == 0 ? 1.0 : ch == 1 ? h : ch == 2 ? v : h * v;
            m[row * side * side + (4 * by + dy) * side + 4 * bx + dx] = 0.25 * sign;
          }
      }
  LatentCodec c;
  c.matrix_ = Tensor({4 * plane, side * side}, std::move(m));
  c.side_ = side;
  return c;
}

LatentCodec LatentCodec::from_matrix(Tensor matrix, std::size_t side) {
  if (matrix.rank() != 2 || matrix.dim(1) != side * side || matrix.dim(0) != side * side / 4) {
    throw DataError("codec: matrix shape " + shape_string(matrix.shape()) + " does not fit side " +
                    std::to_string(side));
  }
  LatentCodec c;
  c.matrix_ = std::move(matrix);
  c.side_ = side;
  return c;
}

Tensor LatentCodec::encode(const Tensor& image) const {
  if (image.size() != side_ * side_) {
    throw ContractViolation("codec: image shape " + shape_string(image.shape()) + " does not match side " +
                            std::to_string(side_));
  }
  return encode_rows(image.reshaped({1, side_ * side_})).reshaped(latent_shape());
}

Tensor LatentCodec::decode(const Tensor& latent) const {
  if (latent.size() != latent_size()) {
    throw ContractViolation("codec: latent shape " + shape_string(latent.shape()) + " does not match codec");
  }
  return decode_rows(latent.reshaped({1, latent_size()})).reshaped({side_, side_});
}

Tensor LatentCodec::encode_rows(const Tensor& images) const {
  if (images.rank() != 2 || images.dim(1) != side_ * side_) throw ContractViolation("codec: expected B×side² rows");
  return matmul(images, matrix_, false, true);
}

Tensor LatentCodec::decode_rows(const Tensor& latents) const {
  if (latents.rank() != 2 || latents.dim(1) != latent_size()) throw ContractViolation("codec: expected B×latent rows");
  return matmul(latents, matrix_);
}

std::vector<double> dense_times(const PhantomConfig& cfg) {
  std::vector<double> t;
  for (std::size_t k = 0; static_cast<double>(k * cfg.dense_step) <= cfg.dense_end; ++k)
    t.push_back(static_cast<double>(k * cfg.dense_step));
  return t;
}

Dataset make_dataset(std::size_t n_patients, std::uint64_t seed, const PhantomConfig& cfg) {
  if (n_patients < 1) throw ConfigError("phantom: need at least one patient");
  cfg.validate();
  Dataset d;
  d.config = cfg;
  d.seed = seed;
  d.dense_times = dense_times(cfg);
  d.codec = LatentCodec::block_haar(cfg.side);
  std::mt19937_64 master(seed);
  const std::size_t n = cfg.side;
  for (std::size_t p = 0; p < n_patients; ++p) {
    std::mt19937_64 rng(next_seed(master));
    PatientRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "p%03zu", p);
    rec.id = id;
    const Anatomy anatomy = random_anatomy(cfg, rng);
    rec.times = acquisition_schedule(next_seed(rng));
    std::vector<Tensor> acq, truth, lat, dense;
    for (double t : rec.times) {
      acq.push_back(render(anatomy, t, cfg.noise_sd, next_seed(rng)));
      truth.push_back(render(anatomy, t, 0.0, 0));
      lat.push_back(d.codec.encode(normalize(acq.back(), cfg.intensity_range)));
    }
    for (double t : d.dense_times) dense.push_back(render(anatomy, t, 0.0, 0));
    rec.acquired = stack(acq);
    rec.truth = stack(truth);
    rec.latents = stack(lat);
    rec.dense = stack(dense);
    rec.labels = Tensor({n, n}, std::vector<double>(anatomy.labels.begin(), anatomy.labels.end()));
    d.patients.push_back(std::move(rec));
  }
  return d;
}

void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_tensor(dir / "codec.tsr", data.codec.matrix());
  nlohmann::json patients = nlohmann::json::array();
  for (const auto& p : data.patients) {
    std::filesystem::create_directories(dir / p.id, ec);
    if (ec) throw IoError("cannot create " + (dir / p.id).string() + ": " + ec.message());
    const std::pair<const char*, const Tensor*> files[] = {
        {"acquired.tsr", &p.acquired}, {"truth.tsr", &p.truth}, {"latents.tsr", &p.latents},
        {"dense.tsr", &p.dense},       {"labels.tsr", &p.labels}};
    nlohmann::json entry;
    entry["id"] = p.id;
    entry["times"] = p.times;
    for (const auto& [name, t] : files) {
      write_tensor(dir / p.id / name, *t);
      entry["files"][std::string(name).substr(0, std::string(name).find('.'))] = p.id + "/" + name;
    }
    patients.push_back(entry);
  }
  nlohmann::json j;
  j["seed"] = data.seed;
  j["side"] = data.config.side;
  j["intensity_range"] = data.config.intensity_range;
  j["noise_sd"] = data.config.noise_sd;
  j["dense_step"] = data.config.dense_step;
  j["dense_end"] = data.config.dense_end;
  j["dense_times"] = data.dense_times;
  j["codec"] = "codec.tsr";
  j["latent_shape"] = data.codec.latent_shape();
  j["patients"] = patients;
  write_json(dir / "manifest.json", j);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  try {
    nlohmann::json j;
    in >> j;
    Dataset d;
    d.seed = j.at("seed").get<std::uint64_t>();
    d.config.side = j.at("side").get<std::size_t>();
    d.config.intensity_range = j.at("intensity_range").get<double>();
    d.config.noise_sd = j.at("noise_sd").get<double>();
    d.config.dense_step = j.at("dense_step").get<std::size_t>();
    d.config.dense_end = j.at("dense_end").get<double>();
    d.config.validate();
    d.dense_times = j.at("dense_times").get<std::vector<double>>();
    d.codec = LatentCodec::from_matrix(read_tensor(dir / j.at("codec").get<std::string>()), d.config.side);
    const std::size_t n = d.config.side;
    for (const auto& e : j.at("patients")) {
      PatientRecord p;
      p.id = e.at("id").get<std::string>();
      p.times = e.at("times").get<std::vector<double>>();
      const auto& f = e.at("files");
      p.acquired = read_tensor(dir / f.at("acquired").get<std::string>());
      p.truth = read_tensor(dir / f.at("truth").get<std::string>());
      p.latents = read_tensor(dir / f.at("latents").get<std::string>());
      p.dense = read_tensor(dir / f.at("dense").get<std::string>());
      p.labels = read_tensor(dir / f.at("labels").get<std::string>());
      const std::size_t t_count = p.times.size();
      if (t_count < 1) throw DataError("manifest: patient " + p.id + " has no acquisitions");
      for (std::size_t i = 1; i < t_count; ++i)
        if (!(p.times[i] > p.times[i - 1])) throw DataError("manifest: times of " + p.id + " not increasing");
      if (p.acquired.shape() != Shape{t_count, n, n} || p.truth.shape() != Shape{t_count, n, n} ||
          p.dense.shape() != Shape{d.dense_times.size(), n, n} || p.labels.shape() != Shape{n, n} ||
          p.latents.size() != t_count * d.codec.latent_size()) {
        throw DataError("manifest: tensor shapes of " + p.id + " do not match the manifest");
      }
      d.patients.push_back(std::move(p));
    }
    if (d.patients.empty()) throw DataError("manifest: no patients");
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest.json: ") + e.what());
  }
}

}  // namespace stcl::phantom
