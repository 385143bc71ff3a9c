#include "tsrm/explain.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace tsrm {
namespace fs = std::filesystem;

BackmapMode parse_backmap_mode(const std::string& s) {
  if (s == "sum") return BackmapMode::Sum;
  if (s == "mean") return BackmapMode::Mean;
  fail(ErrorKind::Config, "backmap mode must be sum|mean, got '" + s + "'");
}

std::vector<double> backmap(const std::vector<double>& map,
                            const std::vector<ResolvedBranch>& branches,
                            Index T, const BackmapOptions& options) {
  Index D = 0;
  for (const auto& b : branches) D += b.conv_len + b.pool_len;
  require(Index(map.size()) == D, ErrorKind::Config,
          "backmap: attention vector has " + std::to_string(map.size()) +
              " entries, branch layout expects " + std::to_string(D));
  std::vector<double> out(T, 0.0);
  Index offset = 0;
  for (const auto& b : branches) {
    std::vector<double> w(map.begin() + offset, map.begin() + offset + b.conv_len);
    if (options.include_pooled)
      for (Index q = 0; q < b.pool_len; ++q) {
        const double share = map[offset + b.conv_len + q] / double(b.pool_kernel);
        for (Index j = 0; j < b.pool_kernel; ++j) w[q * b.pool_stride + j] += share;
      }
    offset += b.conv_len + b.pool_len;

    std::vector<double> acc(T, 0.0), cover(T, 0.0);
    for (Index p = 0; p < b.conv_len; ++p)
      for (Index j = 0; j < b.kernel; ++j) {
        const Index t = p * b.stride + j * b.dilation;
        if (t >= T) continue;
        acc[t] += options.mode == BackmapMode::Sum ? w[p] / double(b.kernel) : w[p];
        cover[t] += 1.0;
      }
    for (Index t = 0; t < T; ++t) {
      if (options.mode == BackmapMode::Mean)
        out[t] += cover[t] > 0 ? acc[t] / cover[t] : 0.0;
      else
        out[t] += acc[t];
    }
  }
  return out;
}

std::vector<FeatureAttention> explain_sample(const TsrmModel<float>& model,
                                             const Grid& input,
                                             const BackmapOptions& options) {
  const auto& cfg = model.config();
  const Index T = cfg.window, F = cfg.features;
  require(input.rows() == T && input.cols() == F, ErrorKind::Data,
          "explain: sample must be [" + std::to_string(T) + "," +
              std::to_string(F) + "], got [" + std::to_string(input.rows()) +
              "," + std::to_string(input.cols()) + "]");
  Buffer<float> x = Eigen::Map<const Buffer<float>>(input.data(), T * F);
  const auto trace = model.forward(Tensor<float>::from({1, T, F}, x), Mode::Eval);
  const Index D = model.representation_length();
  std::vector<FeatureAttention> result(F);
  for (Index f = 0; f < F; ++f) {
    auto& fa = result[f];
    fa.sum.assign(T, 0.0);
    for (Index t = 0; t < T; ++t) {
      fa.input.push_back(input(t, f));
      fa.output.push_back(trace.output.value()(t * F + f));
    }
    for (const auto& v : trace.vectors) {
      std::vector<double> vec(v.data() + f * D, v.data() + (f + 1) * D);
      auto w = backmap(vec, model.branches(), T, options);
      for (Index t = 0; t < T; ++t) fa.sum[t] += w[t];
      fa.per_layer.push_back(std::move(w));
    }
  }
  return result;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_svg(const std::string& path, const FeatureAttention& fa) {
  const double W = 900, H = 360, pad = 40;
  const std::size_t T = fa.input.size();
  const double wmax = std::max(1e-12, *std::max_element(fa.sum.begin(), fa.sum.end()));
  double lo = 0, hi = 1;
  for (double v : fa.output) lo = std::min(lo, v), hi = std::max(hi, v);
  const auto x = [&](double t) { return pad + (W - 2 * pad) * t / double(std::max<std::size_t>(T - 1, 1)); };
  const auto y = [&](double v) { return H - pad - (H - 2 * pad) * (v - lo) / (hi - lo); };

  std::ofstream out(path);
  require(out.good(), ErrorKind::Io, "cannot write '" + path + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const double bar_w = (W - 2 * pad) / double(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double h = (H - 2 * pad) * fa.sum[t] / wmax;
    out << "<rect x=\"" << fmt(x(double(t)) - bar_w / 2) << "\" y=\"" << fmt(H - pad - h)
        << "\" width=\"" << fmt(bar_w) << "\" height=\"" << fmt(h)
        << "\" fill=\"#f4a261\" fill-opacity=\"0.5\"/>\n";
  }
  const auto polyline = [&](const std::vector<double>& v, const char* color) {
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t t = 0; t < T; ++t) {
      if (v[t] == double(kMissingToken)) continue;
      out << fmt(x(double(t))) << ',' << fmt(y(v[t])) << ' ';
    }
    out << "\"/>\n";
  };
  polyline(fa.input, "#264653");
  polyline(fa.output, "#e76f51");
  out << "</svg>\n";
}

}  // namespace

std::vector<std::string> export_attention(const TsrmModel<float>& model,
                                          const Grid& input,
                                          const std::string& out_dir, bool svg,
                                          const BackmapOptions& options) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(!ec, ErrorKind::Io,
          "cannot create output directory '" + out_dir + "': " + ec.message());
  const auto features = explain_sample(model, input, options);
  std::vector<std::string> written;
  for (std::size_t f = 0; f < features.size(); ++f) {
    const auto& fa = features[f];
    const auto path = (fs::path(out_dir) / ("attention_feature_" + std::to_string(f) + ".csv")).string();
    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot write '" + path + "'");
    out << "t,input_value,output_value,weight_sum";
    for (std::size_t n = 0; n < fa.per_layer.size(); ++n) out << ",weight_layer_" << n + 1;
    out << '\n';
    for (std::size_t t = 0; t < fa.input.size(); ++t) {
      out << t << ',' << fmt(fa.input[t]) << ',' << fmt(fa.output[t]) << ','
          << fmt(fa.sum[t]);
      for (const auto& layer : fa.per_layer) out << ',' << fmt(layer[t]);
      out << '\n';
    }
    require(out.good(), ErrorKind::Io, "write to '" + path + "' failed");
    written.push_back(path);
    if (svg) {
      const auto svg_path = (fs::path(out_dir) / ("attention_feature_" + std::to_string(f) + ".svg")).string();
      write_svg(svg_path, fa);
      written.push_back(svg_path);
    }
  }
  return written;
}

}  // namespace tsrm
