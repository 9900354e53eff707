#include <algorithm>
#include <cmath>
#include <sstream>

#include "cpd/harness.hpp"
#include "cpd/ops.hpp"

namespace cpd {

const std::vector<std::string>& zoo_names() {
  static const std::vector<std::string> names{"plain-mlp", "residual", "grouped", "depthwise", "attention"};
  return names;
}

Task zoo_task(const std::string& name) {
  if (name == "attention") return Task::Dense;
  if (std::find(zoo_names().begin(), zoo_names().end(), name) == zoo_names().end())
    throw Error("unknown zoo model '" + name + "'");
  return Task::Classification;
}

namespace {

std::string image_input(const ZooOptions& o) {
  std::ostringstream os;
  os << "x = input() {layout=nchw,channels=" << o.channels << ",h=" << o.image << ",w=" << o.image << "}\n";
  return os.str();
}

std::string class_labels() { return "y = input() {layout=index}\n"; }

std::string classifier_tail(const std::string& from, std::int64_t classes) {
  std::ostringstream os;
  os << "logits = linear(" << from << ") {channels=" << classes << "}\n"
     << "loss = cross_entropy(logits, y)\n"
     << "out = output(logits)\n";
  return os.str();
}

}  // namespace

std::string zoo_source(const std::string& name, const ZooOptions& o) {
  const auto w = o.width;
  const auto k = o.classes;
  std::ostringstream os;
  os << "# " << name << "\n";
  if (name == "plain-mlp") {
    os << "x = input() {layout=nc,channels=" << o.features << "}\n" << class_labels()
       << "fc1 = linear(x) {channels=" << 32 * w << "}\n"
       << "act1 = relu(fc1)\n"
       << "fc2 = linear(act1) {channels=" << 32 * w << "}\n"
       << "act2 = relu(fc2)\n"
       << classifier_tail("act2", k);
  } else if (name == "residual") {
    os << image_input(o) << class_labels()
       << "stem = conv(x) {channels=" << 16 * w << "}\n"
       << "stem_act = relu(stem)\n"
       << "b1_reduce = conv(stem_act) {channels=" << 8 * w << "}\n"
       << "b1_act = relu(b1_reduce)\n"
       << "b1_expand = conv(b1_act) {channels=" << 16 * w << "}\n"
       << "b1_add = add(stem_act, b1_expand)\n"
       << "b1_out = relu(b1_add)\n"
       << "b2_reduce = conv(b1_out) {channels=" << 8 * w << "}\n"
       << "b2_act = relu(b2_reduce)\n"
       << "b2_expand = conv(b2_act) {channels=" << 16 * w << "}\n"
       << "b2_add = add(b1_out, b2_expand)\n"
       << "b2_out = relu(b2_add)\n"
       << "gap = pool(b2_out) {type=global}\n"
       << classifier_tail("gap", k);
  } else if (name == "grouped") {
    os << image_input(o) << class_labels()
       << "stem = conv(x) {channels=" << 16 * w << "}\n"
       << "stem_act = relu(stem)\n"
       << "g1 = conv(stem_act) {channels=" << 16 * w << ",groups=2}\n"
       << "g1_act = relu(g1)\n"
       << "g2 = conv(g1_act) {channels=" << 16 * w << ",groups=4,kernel=1}\n"
       << "g2_act = relu(g2)\n"
       << "gap = pool(g2_act) {type=global}\n"
       << classifier_tail("gap", k);
  } else if (name == "depthwise") {
    os << image_input(o) << class_labels()
       << "stem = conv(x) {channels=" << 16 * w << "}\n"
       << "stem_act = relu(stem)\n"
       << "dw1 = conv(stem_act) {channels=" << 16 * w << ",groups=" << 16 * w << "}\n"
       << "dw1_act = relu(dw1)\n"
       << "pw1 = conv(dw1_act) {channels=" << 24 * w << ",kernel=1}\n"
       << "pw1_act = relu(pw1)\n"
       << "dw2 = conv(pw1_act) {channels=" << 24 * w << ",groups=" << 24 * w << "}\n"
       << "dw2_act = relu(dw2)\n"
       << "pw2 = conv(dw2_act) {channels=" << 16 * w << ",kernel=1}\n"
       << "pw2_act = relu(pw2)\n"
       << "gap = pool(pw2_act) {type=global}\n"
       << classifier_tail("gap", k);
  } else if (name == "attention") {
    const auto c = 16 * w;
    const auto tokens = o.image * o.image;
    const double temp = std::sqrt(static_cast<double>(c / 2));
    os << image_input(o) << "y = input() {layout=index,h=" << o.image << ",w=" << o.image << "}\n"
       << "stem = conv(x) {channels=" << c << "}\n"
       << "stem_act = relu(stem)\n"
       << "tok = tokens(stem_act)\n"
       << "pos = param() {layout=ntc,channels=" << c << ",t=" << tokens << "}\n"
       << "embed = add(tok, pos)\n"
       << "ln = norm(embed) {type=layer}\n"
       << "q = linear(ln) {channels=" << c << "}\n"
       << "k = linear(ln) {channels=" << c << "}\n"
       << "v = linear(ln) {channels=" << c << "}\n"
       << "kt = transpose(k)\n"
       << "scores = matmul(q, kt) {heads=2}\n"
       << "attn = softmax(scores) {temp=" << temp << "}\n"
       << "mix = matmul(attn, v) {heads=2}\n"
       << "proj = linear(mix) {channels=" << c << "}\n"
       << "res = add(embed, proj)\n"
       << "ffn = linear(res) {channels=" << 2 * c << "}\n"
       << "ffn_act = gelu(ffn)\n"
       << "ffn_out = linear(ffn_act) {channels=" << c << "}\n"
       << "res2 = add(res, ffn_out)\n"
       << "fmap = untokens(res2) {h=" << o.image << ",w=" << o.image << "}\n"
       << "logits = conv(fmap) {channels=" << k << ",kernel=1}\n"
       << "loss = cross_entropy(logits, y)\n"
       << "out = output(logits)\n";
  } else {
    throw Error("unknown zoo model '" + name + "'");
  }
  return os.str();
}

Graph zoo_build(const std::string& name, const ZooOptions& options) { return parse_graph(zoo_source(name, options)); }

DatasetSpec dataset_for(const std::string& model, const ZooOptions& o) {
  DatasetSpec d;
  d.classes = o.classes;
  d.features = o.features;
  d.image = o.image;
  d.channels = o.channels;
  if (model == "plain-mlp") {
    d.name = "gaussian";
    d.noise = 3.0;
  } else if (zoo_task(model) == Task::Dense) {
    d.name = "shapes";
  } else {
    d.name = "blobs";
  }
  return d;
}

DatasetSpec dataset_for_graph(const Graph& graph) {
  if (!graph.contains("x") || !graph.contains("y"))
    throw Error("graph needs inputs 'x' (data) and 'y' (labels) to be trained on a synthetic dataset");
  const auto& x = graph.node("x");
  const auto& y = graph.node("y");
  DatasetSpec d;
  d.classes = graph.node(logits_node(graph)).out_channels;
  if (x.layout == Layout::NC) {
    d.name = "gaussian";
    d.features = x.out_channels;
    d.noise = 3.0;
  } else if (x.layout == Layout::NCHW && x.out_spatial.h == x.out_spatial.w) {
    d.image = x.out_spatial.h;
    d.channels = x.out_channels;
    d.name = y.out_spatial.scalar ? "blobs" : "shapes";
  } else {
    throw Error("input 'x' must be NC or square NCHW");
  }
  return d;
}

ZooOptions zoo_options_for(const DatasetSpec& spec) {
  ZooOptions o;
  o.classes = spec.classes;
  o.features = spec.features;
  o.image = spec.image;
  o.channels = spec.channels;
  return o;
}

namespace {

// Class-conditional mixture: every class owns `modes` cluster centres, so the
// decision boundary is nonlinear and capacity matters.
void gaussian_split(const DatasetSpec& s, const std::vector<std::vector<double>>& centres, std::int64_t modes,
                    std::int64_t count, std::mt19937_64& rng, Tensor& x, std::vector<std::int64_t>& y) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(count * s.features));
  std::uniform_int_distribution<std::int64_t> cls(0, s.classes - 1), mode(0, modes - 1);
  std::normal_distribution<double> noise(0.0, s.noise);
  for (std::int64_t i = 0; i < count; ++i) {
    const auto c = cls(rng);
    const auto& m = centres[static_cast<std::size_t>(c * modes + mode(rng))];
    for (std::int64_t f = 0; f < s.features; ++f) v.push_back(m[static_cast<std::size_t>(f)] + noise(rng));
    y.push_back(c);
  }
  x = Tensor({count, s.features}, std::move(v));
}

void blob_split(const DatasetSpec& s, const std::vector<std::vector<double>>& protos, std::int64_t count,
                std::mt19937_64& rng, Tensor& x, std::vector<std::int64_t>& y) {
  const auto per = s.channels * s.image * s.image;
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(count * per));
  std::uniform_int_distribution<std::int64_t> cls(0, s.classes - 1);
  std::uniform_int_distribution<std::int64_t> shift(-1, 1);
  std::normal_distribution<double> noise(0.0, s.noise);
  for (std::int64_t i = 0; i < count; ++i) {
    const auto c = cls(rng);
    const auto dy = shift(rng), dx = shift(rng);
    const auto& p = protos[static_cast<std::size_t>(c)];
    for (std::int64_t ch = 0; ch < s.channels; ++ch)
      for (std::int64_t r = 0; r < s.image; ++r)
        for (std::int64_t q = 0; q < s.image; ++q) {
          const auto rr = std::clamp<std::int64_t>(r + dy, 0, s.image - 1);
          const auto qq = std::clamp<std::int64_t>(q + dx, 0, s.image - 1);
          v.push_back(p[static_cast<std::size_t>((ch * s.image + rr) * s.image + qq)] + noise(rng));
        }
    y.push_back(c);
  }
  x = Tensor({count, s.channels, s.image, s.image}, std::move(v));
}

// Colored shapes on textured noise; class 0 is the background.
void shape_split(const DatasetSpec& s, const std::vector<std::vector<double>>& palette, std::int64_t count,
                 std::mt19937_64& rng, Tensor& x, std::vector<std::int64_t>& y) {
  const auto n = s.image;
  std::vector<double> v(static_cast<std::size_t>(count * s.channels * n * n));
  y.assign(static_cast<std::size_t>(count * n * n), 0);
  std::normal_distribution<double> noise(0.0, s.noise);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::int64_t> cls(1, s.classes - 1);
  for (std::int64_t i = 0; i < count; ++i) {
    auto* lab = &y[static_cast<std::size_t>(i * n * n)];
    const int shapes = 1 + static_cast<int>(unit(rng) * 3.0);
    for (int sh = 0; sh < shapes; ++sh) {
      const auto c = cls(rng);
      const double cy = unit(rng) * static_cast<double>(n), cx = unit(rng) * static_cast<double>(n);
      const double rad = (0.15 + 0.2 * unit(rng)) * static_cast<double>(n);
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t q = 0; q < n; ++q) {
          const double dy = static_cast<double>(r) + 0.5 - cy, dx = static_cast<double>(q) + 0.5 - cx;
          bool inside = false;
          switch ((c - 1) % 3) {
            case 0: inside = std::abs(dy) <= rad && std::abs(dx) <= rad; break;               // square
            case 1: inside = dy * dy + dx * dx <= rad * rad; break;                            // disk
            default: inside = dy >= -rad && dy <= rad && std::abs(dx) <= (dy + rad) / 2.0; break;  // triangle
          }
          if (inside) lab[r * n + q] = c;
        }
    }
    // low-frequency texture shared by all channels plus per-pixel noise
    const double fy = 0.5 + unit(rng), fx = 0.5 + unit(rng), ph = unit(rng) * 6.283185307179586;
    for (std::int64_t ch = 0; ch < s.channels; ++ch)
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t q = 0; q < n; ++q) {
          const auto c = lab[r * n + q];
          const double tex = 0.5 * std::sin(fy * static_cast<double>(r) + fx * static_cast<double>(q) + ph);
          v[static_cast<std::size_t>(((i * s.channels + ch) * n + r) * n + q)] =
              palette[static_cast<std::size_t>(c)][static_cast<std::size_t>(ch)] + tex + noise(rng);
        }
  }
  x = Tensor({count, s.channels, n, n}, std::move(v));
}

}  // namespace

Dataset make_dataset(const DatasetSpec& spec) {
  if (spec.classes < 2) throw Error("datasets need at least two classes");
  if (spec.train <= 0 || spec.test <= 0) throw Error("dataset split sizes must be positive");
  Dataset d;
  d.spec = spec;
  std::mt19937_64 setup(spec.seed * 0x9e3779b97f4a7c15ULL + 1);
  std::mt19937_64 train_rng(spec.seed * 0x9e3779b97f4a7c15ULL + 2);
  std::mt19937_64 test_rng(spec.seed * 0x9e3779b97f4a7c15ULL + 3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  if (spec.name == "gaussian") {
    const std::int64_t modes = 3;
    std::vector<std::vector<double>> centres(static_cast<std::size_t>(spec.classes * modes));
    for (auto& c : centres)
      for (std::int64_t f = 0; f < spec.features; ++f) c.push_back(2.0 * gauss(setup));
    gaussian_split(spec, centres, modes, spec.train, train_rng, d.train_x, d.train_y);
    gaussian_split(spec, centres, modes, spec.test, test_rng, d.test_x, d.test_y);
  } else if (spec.name == "blobs") {
    const auto per = spec.channels * spec.image * spec.image;
    std::vector<std::vector<double>> protos(static_cast<std::size_t>(spec.classes));
    std::uniform_real_distribution<double> pos(0.0, static_cast<double>(spec.image));
    for (auto& p : protos) {
      p.assign(static_cast<std::size_t>(per), 0.0);
      for (int bump = 0; bump < 3; ++bump) {
        const double cy = pos(setup), cx = pos(setup);
        std::vector<double> amp;
        for (std::int64_t ch = 0; ch < spec.channels; ++ch) amp.push_back(gauss(setup));
        for (std::int64_t ch = 0; ch < spec.channels; ++ch)
          for (std::int64_t r = 0; r < spec.image; ++r)
            for (std::int64_t q = 0; q < spec.image; ++q) {
              const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(q) - cx;
              p[static_cast<std::size_t>((ch * spec.image + r) * spec.image + q)] +=
                  amp[static_cast<std::size_t>(ch)] * std::exp(-(dy * dy + dx * dx) / 4.0);
            }
      }
    }
    blob_split(spec, protos, spec.train, train_rng, d.train_x, d.train_y);
    blob_split(spec, protos, spec.test, test_rng, d.test_x, d.test_y);
  } else if (spec.name == "shapes") {
    d.task = Task::Dense;
    d.label_shape = {spec.image, spec.image};
    std::vector<std::vector<double>> palette(static_cast<std::size_t>(spec.classes));
    for (auto& c : palette)
      for (std::int64_t ch = 0; ch < spec.channels; ++ch) c.push_back(gauss(setup));
    shape_split(spec, palette, spec.train, train_rng, d.train_x, d.train_y);
    shape_split(spec, palette, spec.test, test_rng, d.test_x, d.test_y);
  } else {
    throw Error("unknown dataset '" + spec.name + "' (expected gaussian, blobs or shapes)");
  }
  return d;
}

namespace {

Tensor take_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
  const auto per = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = static_cast<std::int64_t>(rows.size());
  std::vector<double> v;
  v.reserve(rows.size() * static_cast<std::size_t>(per));
  const auto src = x.data();
  for (auto r : rows) v.insert(v.end(), src.begin() + r * per, src.begin() + (r + 1) * per);
  return Tensor(std::move(shape), std::move(v));
}

Tensor take_labels(const std::vector<std::int64_t>& y, const Shape& label_shape, const std::vector<std::int64_t>& rows) {
  const auto per = numel_of(label_shape);
  Shape shape{static_cast<std::int64_t>(rows.size())};
  shape.insert(shape.end(), label_shape.begin(), label_shape.end());
  std::vector<double> v;
  v.reserve(rows.size() * static_cast<std::size_t>(per));
  for (auto r : rows)
    for (std::int64_t k = 0; k < per; ++k) v.push_back(static_cast<double>(y[static_cast<std::size_t>(r * per + k)]));
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

BatchFn make_batches(const Dataset& data, std::int64_t batch_size) {
  if (batch_size <= 0) throw Error("batch size must be positive");
  const auto n = data.train_x.dim(0);
  return [&data, batch_size, n](std::int64_t, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
    std::vector<std::int64_t> rows(static_cast<std::size_t>(batch_size));
    for (auto& r : rows) r = pick(rng);
    return TensorMap{{"x", take_rows(data.train_x, rows)}, {"y", take_labels(data.train_y, data.label_shape, rows)}};
  };
}

namespace {

std::vector<std::int64_t> predictions(const Tensor& logits) {
  const auto n = logits.dim(0), k = logits.dim(1);
  const auto inner = logits.numel() / (n * k);
  const auto v = logits.data();
  std::vector<std::int64_t> out(static_cast<std::size_t>(n * inner));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t p = 0; p < inner; ++p) {
      std::int64_t best = 0;
      for (std::int64_t c = 1; c < k; ++c)
        if (v[static_cast<std::size_t>((i * k + c) * inner + p)] > v[static_cast<std::size_t>((i * k + best) * inner + p)]) best = c;
      out[static_cast<std::size_t>(i * inner + p)] = best;
    }
  return out;
}

}  // namespace

double accuracy(const Tensor& logits, std::span<const std::int64_t> labels) {
  const auto pred = predictions(logits);
  if (pred.size() != labels.size()) throw ShapeError("accuracy: label count does not match logits");
  std::int64_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double mean_iou(const Tensor& logits, std::span<const std::int64_t> labels) {
  const auto pred = predictions(logits);
  if (pred.size() != labels.size()) throw ShapeError("mean_iou: label count does not match logits");
  const auto k = static_cast<std::size_t>(logits.dim(1));
  std::vector<std::int64_t> inter(k, 0), uni(k, 0), present(k, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto t = static_cast<std::size_t>(labels[i]), p = static_cast<std::size_t>(pred[i]);
    if (t >= k) throw Error("mean_iou: label out of range");
    ++present[t];
    if (t == p) {
      ++inter[t];
      ++uni[t];
    } else {
      ++uni[t];
      ++uni[p];
    }
  }
  double sum = 0.0;
  int classes = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (present[c] == 0) continue;
    sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++classes;
  }
  return classes ? sum / classes : 0.0;
}

double evaluate(const Model& model, const Dataset& data) {
  const auto n = data.test_x.dim(0);
  const auto logits_id = logits_node(model.graph);
  std::vector<Tensor> parts;
  for (std::int64_t start = 0; start < n; start += 128) {
    std::vector<std::int64_t> rows;
    for (std::int64_t r = start; r < std::min(n, start + 128); ++r) rows.push_back(r);
    const TensorMap inputs{{"x", take_rows(data.test_x, rows)}, {"y", take_labels(data.test_y, data.label_shape, rows)}};
    const auto res = execute(model.graph, model.params, inputs);
    parts.push_back(res.value(model.graph, logits_id));
  }
  const auto logits = parts.size() == 1 ? parts.front() : ops::concat(parts, 0);
  return data.task == Task::Dense ? mean_iou(logits, data.test_y) : accuracy(logits, data.test_y);
}

EvalFn make_evaluator(const Dataset& data) {
  return [&data](const Model& m) { return evaluate(m, data); };
}

}  // namespace cpd
