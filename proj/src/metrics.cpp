#include "stcl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "stcl/errors.hpp"

namespace stcl::metrics {

namespace {

void require_image(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ContractViolation(std::string(what) + ": expected an H×W image, got " + shape_string(t.shape()));
}

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

std::ofstream open_csv(const std::filesystem::path& path, bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string());
  return out;
}

}  // namespace

std::vector<double> SsimConfig::weights() const {
  std::vector<double> w(window);
  const double c = 0.5 * static_cast<double>(window - 1);
  for (std::size_t i = 0; i < window; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-0.5 * d * d / (sigma * sigma));
  }
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= s;
  return w;
}

void SsimConfig::validate() const {
  if (window == 0 || window % 2 == 0) throw ConfigError("ssim: window size must be odd");
  if (!(sigma > 0.0)) throw ConfigError("ssim: sigma must be positive");
  if (!(range > 0.0)) throw ConfigError("ssim: intensity range must be positive");
  if (!(k1 > 0.0 && k2 > 0.0)) throw ConfigError("ssim: stability constants must be positive");
}

double psnr(const Tensor& a, const Tensor& b, double range) {
  require_same_shape(a, b, "psnr");
  if (!(range > 0.0)) throw ContractViolation("psnr: range must be positive");
  const double mse = squared_norm(sub(a, b)) / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(range * range / mse));
}

double rmse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "rmse");
  return std::sqrt(squared_norm(sub(a, b)) / static_cast<double>(a.size()));
}

double ssim(const Tensor& a, const Tensor& b, const SsimConfig& cfg) {
  cfg.validate();
  require_image(a, "ssim");
  require_same_shape(a, b, "ssim");
  const std::size_t h = a.dim(0), w = a.dim(1), k = cfg.window;
  if (h < k || w < k) throw ContractViolation("ssim: image " + shape_string(a.shape()) + " smaller than the window");
  const auto g = cfg.weights();
  const std::size_t oh = h - k + 1, ow = w - k + 1;

  // Horizontal pass for the five moment images, then vertical at each valid position.
  auto horizontal = [&](auto&& f) {
    std::vector<double> out(h * ow, 0.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (std::size_t d = 0; d < k; ++d) s += g[d] * f(y * w + x + d);
        out[y * ow + x] = s;
      }
    return out;
  };
  const auto ha = horizontal([&](std::size_t i) { return a[i]; });
  const auto hb = horizontal([&](std::size_t i) { return b[i]; });
  const auto haa = horizontal([&](std::size_t i) { return a[i] * a[i]; });
  const auto hbb = horizontal([&](std::size_t i) { return b[i] * b[i]; });
  const auto hab = horizontal([&](std::size_t i) { return a[i] * b[i]; });

  const double c1 = cfg.c1(), c2 = cfg.c2();
  double total = 0.0;
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t d = 0; d < k; ++d) {
        const std::size_t i = (y + d) * ow + x;
        ma += g[d] * ha[i];
        mb += g[d] * hb[i];
        saa += g[d] * haa[i];
        sbb += g[d] * hbb[i];
        sab += g[d] * hab[i];
      }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  return total / static_cast<double>(oh * ow);
}

double cssim(std::span<const Tensor> frames, const SsimConfig& cfg) {
  if (frames.size() < 2) throw ContractViolation("cssim: need at least two frames");
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < frames.size(); ++i) s += ssim(frames[i], frames[i + 1], cfg);
  return s / static_cast<double>(frames.size() - 1);
}

double cssim(const Tensor& frames, const SsimConfig& cfg) {
  if (frames.rank() != 3) throw ContractViolation("cssim: expected N×H×W frames, got " + shape_string(frames.shape()));
  std::vector<Tensor> list;
  for (std::size_t i = 0; i < frames.dim(0); ++i)
    list.push_back(slice_leading(frames, i, i + 1).reshaped({frames.dim(1), frames.dim(2)}));
  return cssim(list, cfg);
}

std::vector<CurveSample> extract_curve(const Tensor& frames, std::span<const double> times, const Tensor& mask) {
  if (frames.rank() != 3) throw ContractViolation("extract_curve: expected N×H×W frames");
  if (frames.dim(0) != times.size()) throw ContractViolation("extract_curve: frames and times differ in length");
  const std::size_t px = frames.dim(1) * frames.dim(2);
  if (mask.size() != px) throw ContractViolation("extract_curve: mask does not match the frame size");
  std::size_t count = 0;
  for (double m : mask) count += m != 0.0;
  if (count == 0) throw ContractViolation("extract_curve: empty ROI mask");

  std::vector<CurveSample> out(times.size());
  for (std::size_t f = 0; f < times.size(); ++f) {
    double s = 0.0;
    for (std::size_t p = 0; p < px; ++p)
      if (mask[p] != 0.0) s += frames[f * px + p];
    out[f].time = times[f];
    out[f].mean = s / static_cast<double>(count);
  }
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end(),
                                            [](const CurveSample& x, const CurveSample& y) { return x.mean < y.mean; });
  const double a = lo->mean, b = hi->mean;
  for (auto& c : out) c.normalized = b > a ? (c.mean - a) / (b - a) : 0.5;
  return out;
}

PcaResult pca_project(const Tensor& vectors, std::size_t dims) {
  if (vectors.rank() != 2) throw ContractViolation("pca: expected an N×d matrix");
  const std::size_t n = vectors.dim(0), d = vectors.dim(1);
  if (n < 2) throw ContractViolation("pca: need at least two vectors");
  if (dims < 1 || dims > d) throw ContractViolation("pca: dims must lie in [1, ambient dimension]");

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Mat> x(vectors.begin(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const Mat centered = x.rowwise() - x.colwise().mean();
  const Mat cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  if (es.info() != Eigen::Success) throw EvaluationError("pca: eigendecomposition failed");

  const double total = std::max(0.0, cov.trace());
  PcaResult r;
  std::vector<double> comp(dims * d), coords(n * dims);
  for (std::size_t c = 0; c < dims; ++c) {
    // Eigen orders ascending.
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - c);
    Eigen::VectorXd v = es.eigenvectors().col(col);
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (std::abs(v[i]) > 1e-12) {
        if (v[i] < 0) v = -v;
        break;
      }
    const double lambda = std::max(0.0, es.eigenvalues()[col]);
    r.eigenvalues.push_back(lambda);
    r.explained.push_back(total > 0.0 ? lambda / total : 0.0);
    const Eigen::VectorXd proj = centered * v;
    for (std::size_t i = 0; i < d; ++i) comp[c * d + i] = v[static_cast<Eigen::Index>(i)];
    for (std::size_t i = 0; i < n; ++i) coords[i * dims + c] = total > 0.0 ? proj[static_cast<Eigen::Index>(i)] : 0.0;
  }
  r.components = Tensor({dims, d}, std::move(comp));
  r.coords = Tensor({n, dims}, std::move(coords));
  return r;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractViolation("spearman: need two equal-length series");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

void write_metric_csv(const std::filesystem::path& path, std::span<const MetricRow> rows) {
  auto out = open_csv(path);
  out << "patient,key,metric,value,scale\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out << r.patient << ',' << r.key << ',' << r.metric << ',' << buf << ',' << r.scale << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_pca_csv(const std::filesystem::path& path, std::span<const double> times, const PcaResult& pca) {
  if (times.size() != pca.coords.dim(0)) throw ContractViolation("write_pca_csv: times and coordinates differ");
  const std::size_t dims = pca.coords.dim(1);
  auto out = open_csv(path);
  out << "time_s";
  for (std::size_t c = 0; c < dims; ++c) out << ",pc" << c + 1;
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < times.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6f", times[i]);
    out << buf;
    for (std::size_t c = 0; c < dims; ++c) {
      std::snprintf(buf, sizeof buf, ",%.17g", pca.coords.at(i, c));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_curve_csv(const std::filesystem::path& path, const std::string& label, std::span<const CurveSample> curve,
                     bool append) {
  const bool header = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  auto out = open_csv(path, append);
  if (header) out << "series,time_s,mean,normalized\n";
  char buf[96];
  for (const auto& c : curve) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.17g,%.17g\n", c.time, c.mean, c.normalized);
    out << label << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace stcl::metrics
