#include "freqdet/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace freqdet {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

namespace {

thread_local std::vector<Graph*> g_tape_stack;

std::shared_ptr<detail::Storage> make_storage(const Shape& s) {
  if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
    throw ShapeError("tensor shape components must be non-negative, got " + s.str());
  }
  auto st = std::make_shared<detail::Storage>();
  st->shape = s;
  st->data.assign(static_cast<std::size_t>(s.numel()), 0.0);
  return st;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

// Elementwise unary: f computes the value, df(x, y) the local derivative.
template <class F, class DF>
Tensor unary_op(const Tensor& x, F f, DF df) {
  Tensor out = Tensor::zeros(x.shape());
  auto xs = x.storage();
  auto os = out.storage();
  const std::size_t n = xs->data.size();
  for (std::size_t i = 0; i < n; ++i) os->data[i] = f(xs->data[i]);
  if (Graph* g = Graph::active(); g && x.requires_grad()) {
    os->requires_grad = true;
    g->record(os, [xs, os, df]() {
      auto& gx = xs->ensure_grad();
      for (std::size_t i = 0; i < xs->data.size(); ++i) {
        gx[i] += df(xs->data[i], os->data[i]) * os->grad[i];
      }
    });
  }
  return out;
}

// Elementwise binary with per-input local derivatives da(a,b,y), db(a,b,y).
template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  check_same_shape(a, b, name);
  Tensor out = Tensor::zeros(a.shape());
  auto as = a.storage();
  auto bs = b.storage();
  auto os = out.storage();
  const std::size_t n = as->data.size();
  for (std::size_t i = 0; i < n; ++i) os->data[i] = f(as->data[i], bs->data[i]);
  if (Graph* g = Graph::active(); g && (a.requires_grad() || b.requires_grad())) {
    os->requires_grad = true;
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    g->record(os, [as, bs, os, da, db, need_a, need_b]() {
      const std::size_t n = as->data.size();
      if (need_a) {
        auto& ga = as->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += da(as->data[i], bs->data[i], os->data[i]) * os->grad[i];
        }
      }
      if (need_b) {
        auto& gb = bs->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          gb[i] += db(as->data[i], bs->data[i], os->data[i]) * os->grad[i];
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor wrap_storage(std::shared_ptr<detail::Storage> s) { return Tensor(std::move(s)); }

Tensor Tensor::zeros(const Shape& s) { return wrap_storage(make_storage(s)); }

Tensor Tensor::full(const Shape& s, double value) {
  auto st = make_storage(s);
  std::fill(st->data.begin(), st->data.end(), value);
  return wrap_storage(std::move(st));
}

Tensor Tensor::from_values(const Shape& s, std::vector<double> values) {
  if (static_cast<std::int64_t>(values.size()) != s.numel()) {
    throw ShapeError("from_values: got " + std::to_string(values.size()) + " values for shape " +
                     s.str() + " (" + std::to_string(s.numel()) + " elements)");
  }
  auto st = make_storage(s);
  st->data = std::move(values);
  return wrap_storage(std::move(st));
}

double Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  const Shape& s = s_->shape;
  return s_->data[static_cast<std::size_t>(((n * s.c + c) * s.h + h) * s.w + w)];
}

double Tensor::scalar() const {
  if (numel() != 1) throw ShapeError("scalar(): tensor has shape " + shape().str());
  return s_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (s_->grad.empty() && s_->requires_grad) s_->ensure_grad();
  if (s_->grad.empty()) throw StateError("grad(): tensor has no gradient slot");
  return s_->grad;
}

// ---- Graph ------------------------------------------------------------------

Graph::Graph() {
  g_tape_stack.push_back(this);
  on_stack_ = true;
}

Graph::~Graph() { deactivate(); }

void Graph::deactivate() {
  if (on_stack_) {
    auto it = std::find(g_tape_stack.rbegin(), g_tape_stack.rend(), this);
    if (it != g_tape_stack.rend()) g_tape_stack.erase(std::next(it).base());
    on_stack_ = false;
  }
}

Graph* Graph::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Graph::record(std::shared_ptr<detail::Storage> output, std::function<void()> pull) {
  entries_.push_back(Entry{std::move(output), std::move(pull)});
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw StateError("backward(): graph already consumed");
  if (!loss.defined() || loss.numel() != 1) {
    throw StateError("backward(): loss must be a scalar of shape (1,1,1,1)");
  }
  consumed_ = true;
  deactivate();
  auto ls = loss.storage();
  ls->ensure_grad()[0] += 1.0;
  // Reverse topological order: an entry whose output never accumulated a
  // gradient is unreachable from the loss and is skipped.
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->grad.empty()) it->pull();
  }
}

NoGrad::NoGrad() { g_tape_stack.push_back(nullptr); }
NoGrad::~NoGrad() { g_tape_stack.pop_back(); }

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double s) {
  return unary_op(
      x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar_t: scalar operand has shape " + s.shape().str());
  Tensor out = Tensor::zeros(x.shape());
  auto xs = x.storage();
  auto ss = s.storage();
  auto os = out.storage();
  const double sv = ss->data[0];
  for (std::size_t i = 0; i < xs->data.size(); ++i) os->data[i] = sv * xs->data[i];
  if (Graph* g = Graph::active(); g && (x.requires_grad() || s.requires_grad())) {
    os->requires_grad = true;
    const bool need_x = x.requires_grad();
    const bool need_s = s.requires_grad();
    g->record(os, [xs, ss, os, need_x, need_s]() {
      if (need_x) {
        auto& gx = xs->ensure_grad();
        const double sv = ss->data[0];
        for (std::size_t i = 0; i < xs->data.size(); ++i) gx[i] += sv * os->grad[i];
      }
      if (need_s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < xs->data.size(); ++i) acc += xs->data[i] * os->grad[i];
        ss->ensure_grad()[0] += acc;
      }
    });
  }
  return out;
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor pow(const Tensor& x, double p) {
  return unary_op(
      x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return v == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary_op(
      x, [lo](double v) { return v < lo ? lo : v; },
      [lo](double v, double) { return v < lo ? 0.0 : 1.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  // Ties route the gradient to the first operand.
  return binary_op(
      a, b, "minimum", [](double x, double y) { return x < y ? x : y; },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "maximum", [](double x, double y) { return x > y ? x : y; },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros(Shape{1, 1, 1, 1});
  auto xs = x.storage();
  auto os = out.storage();
  double acc = 0.0;
  for (double v : xs->data) acc += v;
  os->data[0] = acc;
  if (Graph* g = Graph::active(); g && x.requires_grad()) {
    os->requires_grad = true;
    g->record(os, [xs, os]() {
      auto& gx = xs->ensure_grad();
      const double gv = os->grad[0];
      for (auto& v : gx) v += gv;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  return scale(sum(x), inv);
}

// ---- movement ---------------------------------------------------------------

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty input list");
  const Shape& first = parts[0].shape();
  std::int64_t total_c = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: incompatible shapes " + first.str() + " vs " + s.str());
    }
    total_c += s.c;
  }
  Shape os{first.n, total_c, first.h, first.w};
  Tensor out = Tensor::zeros(os);
  auto ost = out.storage();
  const std::int64_t plane = first.h * first.w;
  bool any_grad = false;
  std::int64_t c_off = 0;
  for (const Tensor& t : parts) {
    auto ts = t.storage();
    const std::int64_t tc = t.shape().c;
    for (std::int64_t n = 0; n < first.n; ++n) {
      const double* src = ts->data.data() + n * tc * plane;
      double* dst = ost->data.data() + (n * total_c + c_off) * plane;
      std::copy(src, src + tc * plane, dst);
    }
    any_grad = any_grad || t.requires_grad();
    c_off += tc;
  }
  if (Graph* g = Graph::active(); g && any_grad) {
    ost->requires_grad = true;
    std::vector<std::shared_ptr<detail::Storage>> srcs;
    for (const Tensor& t : parts) srcs.push_back(t.storage());
    g->record(ost, [srcs, ost, total_c, plane]() {
      std::int64_t c_off = 0;
      for (auto& ts : srcs) {
        const std::int64_t tc = ts->shape.c;
        if (ts->requires_grad) {
          auto& gt = ts->ensure_grad();
          for (std::int64_t n = 0; n < ts->shape.n; ++n) {
            const double* src = ost->grad.data() + (n * total_c + c_off) * plane;
            double* dst = gt.data() + n * tc * plane;
            for (std::int64_t i = 0; i < tc * plane; ++i) dst[i] += src[i];
          }
        }
        c_off += tc;
      }
    });
  }
  return out;
}

std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::int64_t> sizes) {
  const Shape& s = x.shape();
  std::int64_t total = 0;
  for (auto v : sizes) {
    if (v <= 0) throw ShapeError("split_channels: sizes must be positive");
    total += v;
  }
  if (total != s.c) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(total) + ", tensor has " +
                     std::to_string(s.c) + " channels");
  }
  auto xs = x.storage();
  const std::int64_t plane = s.h * s.w;
  std::vector<Tensor> outs;
  std::int64_t c_off = 0;
  for (auto sc : sizes) {
    Tensor part = Tensor::zeros(Shape{s.n, sc, s.h, s.w});
    auto ps = part.storage();
    for (std::int64_t n = 0; n < s.n; ++n) {
      const double* src = xs->data.data() + (n * s.c + c_off) * plane;
      std::copy(src, src + sc * plane, ps->data.data() + n * sc * plane);
    }
    if (Graph* g = Graph::active(); g && x.requires_grad()) {
      ps->requires_grad = true;
      const std::int64_t off = c_off;
      g->record(ps, [xs, ps, off, plane]() {
        auto& gx = xs->ensure_grad();
        const Shape& s = xs->shape;
        const std::int64_t sc = ps->shape.c;
        for (std::int64_t n = 0; n < s.n; ++n) {
          const double* src = ps->grad.data() + n * sc * plane;
          double* dst = gx.data() + (n * s.c + off) * plane;
          for (std::int64_t i = 0; i < sc * plane; ++i) dst[i] += src[i];
        }
      });
    }
    outs.push_back(std::move(part));
    c_off += sc;
  }
  return outs;
}

Tensor reshape(const Tensor& x, const Shape& s) {
  if (s.numel() != x.numel()) {
    throw ShapeError("reshape: cannot view " + x.shape().str() + " as " + s.str());
  }
  Tensor out = Tensor::zeros(s);
  auto xs = x.storage();
  auto os = out.storage();
  os->data = xs->data;
  if (Graph* g = Graph::active(); g && x.requires_grad()) {
    os->requires_grad = true;
    g->record(os, [xs, os]() {
      auto& gx = xs->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += os->grad[i];
    });
  }
  return out;
}

Tensor gather_h(const Tensor& x, std::span<const std::int64_t> idx) {
  const Shape& s = x.shape();
  for (auto i : idx) {
    if (i < 0 || i >= s.h) throw ShapeError("gather_h: index " + std::to_string(i) + " out of range");
  }
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  Tensor out = Tensor::zeros(Shape{s.n, s.c, k, s.w});
  auto xs = x.storage();
  auto os = out.storage();
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t j = 0; j < k; ++j) {
        const double* src = xs->data.data() + ((n * s.c + c) * s.h + idx[j]) * s.w;
        double* dst = os->data.data() + ((n * s.c + c) * k + j) * s.w;
        std::copy(src, src + s.w, dst);
      }
    }
  }
  if (Graph* g = Graph::active(); g && x.requires_grad()) {
    os->requires_grad = true;
    std::vector<std::int64_t> ids(idx.begin(), idx.end());
    g->record(os, [xs, os, ids]() {
      auto& gx = xs->ensure_grad();
      const Shape& s = xs->shape;
      const std::int64_t k = static_cast<std::int64_t>(ids.size());
      for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t c = 0; c < s.c; ++c) {
          for (std::int64_t j = 0; j < k; ++j) {
            const double* src = os->grad.data() + ((n * s.c + c) * k + j) * s.w;
            double* dst = gx.data() + ((n * s.c + c) * s.h + ids[j]) * s.w;
            for (std::int64_t w = 0; w < s.w; ++w) dst[w] += src[w];
          }
        }
      }
    });
  }
  return out;
}

Tensor slice_batch(const Tensor& x, std::int64_t i) {
  const Shape& s = x.shape();
  if (i < 0 || i >= s.n) throw ShapeError("slice_batch: index out of range");
  Tensor out = Tensor::zeros(Shape{1, s.c, s.h, s.w});
  auto xs = x.storage();
  auto os = out.storage();
  const std::int64_t sz = s.c * s.h * s.w;
  std::copy(xs->data.begin() + i * sz, xs->data.begin() + (i + 1) * sz, os->data.begin());
  if (Graph* g = Graph::active(); g && x.requires_grad()) {
    os->requires_grad = true;
    g->record(os, [xs, os, i, sz]() {
      auto& gx = xs->ensure_grad();
      for (std::int64_t j = 0; j < sz; ++j) gx[i * sz + j] += os->grad[j];
    });
  }
  return out;
}

Tensor scale_channels(const Tensor& x, const Tensor& gain) {
  const Shape& s = x.shape();
  const Shape& gs = gain.shape();
  if (gs.n != s.n || gs.c != s.c || gs.h != 1 || gs.w != 1) {
    throw ShapeError("scale_channels: gain shape " + gs.str() + " does not match " + s.str());
  }
  Tensor out = Tensor::zeros(s);
  auto xs = x.storage();
  auto gsr = gain.storage();
  auto os = out.storage();
  const std::int64_t plane = s.h * s.w;
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      const double gv = gsr->data[n * s.c + c];
      const double* src = xs->data.data() + (n * s.c + c) * plane;
      double* dst = os->data.data() + (n * s.c + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) dst[i] = gv * src[i];
    }
  }
  if (Graph* g = Graph::active(); g && (x.requires_grad() || gain.requires_grad())) {
    os->requires_grad = true;
    const bool need_x = x.requires_grad();
    const bool need_g = gain.requires_grad();
    g->record(os, [xs, gsr, os, plane, need_x, need_g]() {
      const Shape& s = xs->shape;
      for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t c = 0; c < s.c; ++c) {
          const std::int64_t base = (n * s.c + c) * plane;
          if (need_x) {
            auto& gx = xs->ensure_grad();
            const double gv = gsr->data[n * s.c + c];
            for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += gv * os->grad[base + i];
          }
          if (need_g) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) acc += xs->data[base + i] * os->grad[base + i];
            gsr->ensure_grad()[n * s.c + c] += acc;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace freqdet
