#include "mvar/metrics.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "mvar/error.hpp"

namespace mvar {

double psnr(const Image& a, const Image& b, double max_val) {
  if (!a.same_shape(b) || a.rgb.size() != b.rgb.size()) throw DimensionError("psnr: image shapes differ");
  if (a.rgb.empty()) throw DimensionError("psnr of empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = a.rgb[i] - b.rgb[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.rgb.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(max_val * max_val / mse));
}

namespace {

std::vector<double> gray(const Image& im) {
  std::vector<double> g(im.width * im.height);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = (im.rgb[i * 3] + im.rgb[i * 3 + 1] + im.rgb[i * 3 + 2]) / 3.0;
  }
  return g;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw DimensionError("ssim: image shapes differ");
  if (a.width < kSsimWindow || a.height < kSsimWindow) {
    throw DimensionError("ssim: image smaller than the " + std::to_string(kSsimWindow) + "x" +
                         std::to_string(kSsimWindow) + " window");
  }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto ga = gray(a), gb = gray(b);
  const std::size_t w = a.width, win = kSsimWindow;
  const double n = static_cast<double>(win * win);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y0 = 0; y0 + win <= a.height; ++y0) {
    for (std::size_t x0 = 0; x0 + win <= w; ++x0) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t y = y0; y < y0 + win; ++y) {
        for (std::size_t x = x0; x < x0 + win; ++x) {
          const double va = ga[y * w + x], vb = gb[y * w + x];
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      }
      const double ma = sa / n, mb = sb / n;
      const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double exact_match(std::span<const TokenGrid> pred, std::span<const TokenGrid> gt) {
  if (pred.size() != gt.size()) throw DimensionError("exact_match: view counts differ");
  std::size_t same = 0, total = 0;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    if (pred[v].h != gt[v].h || pred[v].w != gt[v].w || pred[v].codes.size() != gt[v].codes.size()) {
      throw DimensionError("exact_match: grid layouts differ in view " + std::to_string(v));
    }
    for (std::size_t i = 0; i < gt[v].codes.size(); ++i) same += pred[v].codes[i] == gt[v].codes[i];
    total += gt[v].codes.size();
  }
  if (total == 0) throw DimensionError("exact_match of empty grids");
  return static_cast<double>(same) / static_cast<double>(total);
}

void MetricReport::set(const std::string& key, double value) {
  if (key.empty() || key.find_first_of("= \t\r\n") != std::string::npos) {
    throw ContractError("bad metric key '" + key + "'");
  }
  for (auto& kv : values) {
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  }
  values.emplace_back(key, value);
}

std::optional<double> MetricReport::get(const std::string& key) const {
  for (const auto& kv : values) {
    if (kv.first == key) return kv.second;
  }
  return std::nullopt;
}

double MetricReport::at(const std::string& key) const {
  auto v = get(key);
  if (!v) throw ContractError("report has no metric '" + key + "'");
  return *v;
}

std::string MetricReport::serialize() const {
  std::ostringstream os;
  os << "experiment=" << experiment << '\n';
  os << "fingerprint=" << fingerprint << '\n';
  for (const auto& [k, v] : values) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    os << k << '=' << std::string(buf, res.ptr) << '\n';
  }
  return os.str();
}

MetricReport MetricReport::parse(const std::string& text) {
  MetricReport r;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("report line " + std::to_string(lineno) + " has no '='");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "experiment") {
      r.experiment = val;
    } else if (key == "fingerprint") {
      r.fingerprint = val;
    } else {
      double v = 0.0;
      auto res = std::from_chars(val.data(), val.data() + val.size(), v);
      if (res.ec != std::errc() || res.ptr != val.data() + val.size()) {
        throw DataError("report line " + std::to_string(lineno) + ": bad number '" + val + "'");
      }
      r.values.emplace_back(key, v);
    }
  }
  return r;
}

}  // namespace mvar
