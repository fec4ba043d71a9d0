#include "ses/harness.hpp"

#include "ses/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

namespace ses {

std::size_t Probe::samplings() const { return kind == Kind::mask ? masks.size(0) : offsets.size(); }

std::size_t Probe::radius() const {
  if (kind == Kind::mask) return k / 2;
  double r = 0.0;
  for (const auto& set : offsets)
    for (const auto& o : set) r = std::max({r, std::abs(o.x()), std::abs(o.y())});
  return static_cast<std::size_t>(std::ceil(r));
}

bool Probe::valid_center(long cy, long cx) const {
  const auto r = static_cast<long>(radius());
  return cy - r >= 0 && cx - r >= 0 && cy + r < static_cast<long>(height) && cx + r < static_cast<long>(width);
}

Probe mask_probe(const Tensor& masks, std::size_t stride) {
  if (masks.rank() != 4) throw ShapeError("mask probe expects [O,k*k,h,w], got " + to_string(masks.shape()));
  const auto k = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(masks.size(1)))));
  if (k * k != masks.size(1) || k % 2 == 0) throw ShapeError("mask footprint is not an odd square");
  if (stride == 0) throw ValueError("probe stride must be >= 1");
  Probe p;
  p.kind = Probe::Kind::mask;
  p.stride = stride;
  p.k = k;
  p.height = masks.size(2);
  p.width = masks.size(3);
  p.masks = masks;
  return p;
}

Probe location_probe(std::size_t stride, std::size_t height, std::size_t width,
                     std::vector<std::vector<Point2>> offsets, std::vector<std::vector<double>> weights) {
  if (stride == 0) throw ValueError("probe stride must be >= 1");
  if (offsets.empty() || offsets.size() != weights.size()) throw ShapeError("location probe needs weights per offset set");
  for (std::size_t o = 0; o < offsets.size(); ++o)
    if (offsets[o].empty() || offsets[o].size() != weights[o].size())
      throw ShapeError("location probe: offsets and weights differ in length");
  Probe p;
  p.kind = Probe::Kind::location;
  p.stride = stride;
  p.height = height;
  p.width = width;
  p.offsets = std::move(offsets);
  p.offset_weights = std::move(weights);
  return p;
}

namespace {

Point2 lift(const Probe& p, double row, double col) {
  const double d = static_cast<double>(p.stride);
  return {d * (col + 0.5), d * (row + 0.5)};
}

}  // namespace

SamplingGraph extract_graph(const Probe& p, std::size_t cy, std::size_t cx, std::size_t o) {
  if (!p.valid_center(static_cast<long>(cy), static_cast<long>(cx)))
    throw ValueError("centre (" + std::to_string(cy) + ", " + std::to_string(cx) +
                     ") is too close to the border of a " + std::to_string(p.height) + "x" +
                     std::to_string(p.width) + " map");
  if (o >= p.samplings()) throw ValueError("sampling channel " + std::to_string(o) + " out of range");
  std::vector<Point2> pts;
  std::vector<double> wts;

  if (p.kind == Probe::Kind::mask) {
    const std::size_t kk = p.k * p.k, hw = p.height * p.width;
    const auto r = static_cast<long>(p.k / 2);
    const auto m = p.masks.data();
    for (std::size_t j = 0; j < kk; ++j) {
      const double w = m[(o * kk + j) * hw + cy * p.width + cx];
      if (w == 0.0) continue;  // zero-mass cells are not part of the support
      const long dy = static_cast<long>(j / p.k) - r, dx = static_cast<long>(j % p.k) - r;
      pts.push_back(lift(p, static_cast<double>(static_cast<long>(cy) + dy), static_cast<double>(static_cast<long>(cx) + dx)));
      wts.push_back(w);
    }
  } else {
    std::map<std::pair<long, long>, double> cells;
    double total = 0.0;
    for (std::size_t l = 0; l < p.offsets[o].size(); ++l) {
      const double wl = p.offset_weights[o][l];
      if (!(wl >= 0.0)) throw ValueError("location weights must be non-negative");
      const double x = static_cast<double>(cx) + p.offsets[o][l].x();
      const double y = static_cast<double>(cy) + p.offsets[o][l].y();
      const double x0 = std::floor(x), y0 = std::floor(y);
      const double fx = x - x0, fy = y - y0;
      const double wx[2] = {1.0 - fx, fx}, wy[2] = {1.0 - fy, fy};
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          const double w = wl * wy[a] * wx[b];
          if (w == 0.0) continue;
          cells[{static_cast<long>(y0) + a, static_cast<long>(x0) + b}] += w;
          total += w;
        }
    }
    if (!(total > 0.0)) throw ValueError("location sampling carries no mass");
    for (const auto& [cell, w] : cells) {
      pts.push_back(lift(p, static_cast<double>(cell.first), static_cast<double>(cell.second)));
      wts.push_back(w / total);
    }
  }
  // Softmax output sums to 1 up to rounding; restore exact normalisation.
  double s = 0.0;
  for (double w : wts) s += w;
  for (double& w : wts) w /= s;
  return SamplingGraph(std::move(pts), std::move(wts));
}

SamplingGraph ideal_graph(const SamplingGraph& g, const Affine2D& t) {
  std::vector<Point2> pts;
  pts.reserve(g.size());
  for (const auto& q : g.points()) pts.push_back(t(q));
  return SamplingGraph(std::move(pts), g.weights());
}

std::vector<Probe> NetworkSampler::probe(const ImageGrid& img) const {
  NoGradGuard ng;
  const Shape& s = img.pixels.shape();
  Tensor x = img.pixels.reshape({1, s[0], s[1], s[2]});
  std::vector<Tensor> masks;
  net_.forward(x, Mode::eval, &masks);
  std::vector<Probe> out;
  for (std::size_t b = 0; b < masks.size(); ++b) {
    const Tensor& m = masks[b];
    out.push_back(mask_probe(m.reshape({m.size(1), m.size(2), m.size(3), m.size(4)}), net_.block_stride(b)));
  }
  return out;
}

std::vector<Probe> ConstantSampler::probe(const ImageGrid& img) const {
  if (k_ % 2 == 0 || stride_ == 0 || channels_ == 0) throw ValueError("constant sampler needs odd k and positive stride");
  const std::size_t h = (img.height() + stride_ - 1) / stride_, w = (img.width() + stride_ - 1) / stride_;
  return {mask_probe(Tensor({channels_, k_ * k_, h, w}, 1.0 / static_cast<double>(k_ * k_)), stride_)};
}

std::vector<Probe> ContentSampler::probe(const ImageGrid& img) const {
  if (k_ % 2 == 0) throw ValueError("content sampler needs odd k");
  const std::size_t h = img.height(), w = img.width(), kk = k_ * k_, hw = h * w;
  const auto r = static_cast<long>(k_ / 2);
  std::vector<double> m(kk * hw);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double total = 0.0;
      for (std::size_t j = 0; j < kk; ++j) {
        const long sy = static_cast<long>(y) + static_cast<long>(j / k_) - r;
        const long sx = static_cast<long>(x) + static_cast<long>(j % k_) - r;
        double v = floor_;
        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w))
          for (std::size_t c = 0; c < img.channels(); ++c)
            v += std::max(0.0, img.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)));
        m[j * hw + y * w + x] = v;
        total += v;
      }
      for (std::size_t j = 0; j < kk; ++j) m[j * hw + y * w + x] /= total;
    }
  return {mask_probe(Tensor({1, kk, h, w}, std::move(m)), 1)};
}

double AEMDReport::recompute() const {
  if (records.empty()) return 0.0;
  double outer = 0.0;
  for (const auto& rec : records) {
    double layers = 0.0;
    for (const auto& l : rec.layers) {
      double s = 0.0;
      for (double e : l.emd) s += e;
      layers += s / static_cast<double>(l.emd.size());
    }
    outer += layers / static_cast<double>(rec.layers.size());
  }
  return alpha * outer / static_cast<double>(records.size());
}

namespace {

nlohmann::json params_json(const TransformParams& p) {
  nlohmann::json j{{"kind", to_string(p.kind)}};
  switch (p.kind) {
    case TransformKind::rotation: j["angle_deg"] = p.angle_deg; break;
    case TransformKind::reflection: j["axis"] = p.axis == ReflectAxis::vertical ? "vertical" : "horizontal"; break;
    case TransformKind::skew:
      j["shear_axis"] = p.shear_axis == ShearAxis::x ? "x" : "y";
      j["shear"] = p.shear;
      break;
    case TransformKind::scale: j["factor"] = p.factor; break;
    case TransformKind::identity: break;
  }
  return j;
}

}  // namespace

void to_json(nlohmann::json& j, const AEMDReport& r) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& rec : r.records) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : rec.layers)
      layers.push_back({{"layer", l.layer},
                        {"center", {l.center_y, l.center_x}},
                        {"mapped_center", {l.mapped_y, l.mapped_x}},
                        {"emd", l.emd},
                        {"mean_emd", l.mean_emd}});
    records.push_back({{"image", rec.image},
                       {"transform", params_json(rec.params)},
                       {"stride", rec.stride},
                       {"attempts", rec.attempts},
                       {"layers", layers},
                       {"mean_emd", rec.mean_emd}});
  }
  j = nlohmann::json{{"transform", to_string(r.kind)}, {"alpha", r.alpha},   {"seed", r.seed},
                     {"n", r.records.size()},          {"aemd", r.aemd},      {"records", records}};
}

std::size_t env_threads() {
  const char* s = std::getenv("SES_THREADS");
  if (!s || !*s) return 1;
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("SES_THREADS must be a positive integer, got '" + std::string(s) + "'");
  return static_cast<std::size_t>(v);
}

namespace {

struct Candidate {
  std::size_t cy, cx, my, mx;
};

ImageRecord evaluate_image(const Sampler& sampler, const ImageGrid& img, const AEMDOptions& opts, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(opts.seed), static_cast<std::uint32_t>(opts.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  Rng rng(seq);
  const std::vector<Probe> base = sampler.probe(img);
  if (base.empty()) throw ValueError("sampler produced no probes");
  std::vector<std::size_t> strides;
  for (const auto& p : base) strides.push_back(p.stride);
  std::sort(strides.begin(), strides.end());
  strides.erase(std::unique(strides.begin(), strides.end()), strides.end());

  for (std::size_t attempt = 1; attempt <= opts.max_attempts; ++attempt) {
    ImageRecord rec;
    rec.attempts = attempt;
    rec.params = opts.fixed ? *opts.fixed : random_transform(opts.kind, rng);
    rec.params.kind = opts.kind;
    const Affine2D t = make_transform(rec.params, img.center());
    rec.stride = strides[std::uniform_int_distribution<std::size_t>(0, strides.size() - 1)(rng)];
    const double d = static_cast<double>(rec.stride);

    std::vector<std::vector<Candidate>> cands;
    std::vector<std::size_t> layers;
    bool ok = true;
    for (std::size_t j = 0; j < base.size() && ok; ++j) {
      if (base[j].stride != rec.stride) continue;
      std::vector<Candidate> cs;
      for (std::size_t cy = 0; cy < base[j].height; ++cy)
        for (std::size_t cx = 0; cx < base[j].width; ++cx) {
          if (!base[j].valid_center(static_cast<long>(cy), static_cast<long>(cx))) continue;
          const Point2 q = t(Point2{d * (static_cast<double>(cx) + 0.5), d * (static_cast<double>(cy) + 0.5)});
          const double my = std::floor(q.y() / d), mx = std::floor(q.x() / d);
          if (!(std::abs(my) < 1e9 && std::abs(mx) < 1e9)) continue;
          if (!base[j].valid_center(static_cast<long>(my), static_cast<long>(mx))) continue;
          cs.push_back({cy, cx, static_cast<std::size_t>(my), static_cast<std::size_t>(mx)});
        }
      ok = !cs.empty();
      layers.push_back(j);
      cands.push_back(std::move(cs));
    }
    if (!ok) continue;

    const std::vector<Probe> moved = sampler.probe(warp_image(img, t));
    if (moved.size() != base.size()) throw ValueError("sampler probe count changed under the transform");
    double layer_sum = 0.0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::size_t j = layers[l];
      const Probe& P = base[j];
      const Probe& Q = moved[j];
      if (Q.height != P.height || Q.width != P.width || Q.samplings() != P.samplings())
        throw ValueError("sampler probe extents changed under the transform");
      const auto& cs = cands[l];
      const Candidate c = cs[std::uniform_int_distribution<std::size_t>(0, cs.size() - 1)(rng)];
      const Point2 p{d * (static_cast<double>(c.cx) + 0.5), d * (static_cast<double>(c.cy) + 0.5)};
      const Point2 shift = Point2{d * (static_cast<double>(c.mx) + 0.5), d * (static_cast<double>(c.my) + 0.5)} - t(p);
      const Affine2D ideal = Affine2D::translation(shift) * t;

      LayerRecord lr;
      lr.layer = j;
      lr.center_y = c.cy;
      lr.center_x = c.cx;
      lr.mapped_y = c.my;
      lr.mapped_x = c.mx;
      double s = 0.0;
      for (std::size_t o = 0; o < P.samplings(); ++o) {
        const double e = emd(ideal_graph(extract_graph(P, c.cy, c.cx, o), ideal), extract_graph(Q, c.my, c.mx, o));
        lr.emd.push_back(e);
        s += e;
      }
      lr.mean_emd = s / static_cast<double>(lr.emd.size());
      layer_sum += lr.mean_emd;
      rec.layers.push_back(std::move(lr));
    }
    rec.mean_emd = layer_sum / static_cast<double>(rec.layers.size());
    return rec;
  }
  throw ValueError("no valid sampling centre for image " + std::to_string(index) + " after " +
                   std::to_string(opts.max_attempts) + " transform draws");
}

}  // namespace

AEMDReport aemd(const Sampler& sampler, const std::vector<ImageGrid>& images, const AEMDOptions& opts) {
  if (opts.n == 0) throw ValueError("aemd needs n >= 1");
  if (images.empty()) throw ValueError("aemd needs at least one image");
  if (opts.max_attempts == 0) throw ValueError("aemd needs max_attempts >= 1");
  AEMDReport report;
  report.kind = opts.kind;
  report.seed = opts.seed;
  report.alpha = 2.0 / static_cast<double>(std::max(images[0].height(), images[0].width()));
  report.records.resize(opts.n);

  const std::size_t threads = std::min(opts.n, opts.threads ? opts.threads : env_threads());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= opts.n) return;
      try {
        report.records[i] = evaluate_image(sampler, images[i % images.size()], opts, i);
        report.records[i].image = i % images.size();
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = opts.n;
      }
    }
  };
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  report.aemd = report.recompute();
  return report;
}

}  // namespace ses
